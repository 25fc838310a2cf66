from setuptools import setup, find_packages

# Read the requirements file
with open('requirements.txt') as f:
    requirements = [line.strip() for line in f.read().splitlines() if line.strip()]

# Read the README file for the long description
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name='tasoLab',
    version='0.1.0',
    license='AGPL-3.0',
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    description='Importance-guided sparse rank-1 LoRA laboratory',
    long_description=long_description,
    long_description_content_type="text/markdown",
    keywords=[
                "lora",
                "parameter-efficient-fine-tuning",
                "structured-sparsity",
                "pruning",
                "autodiff",
                "lottery-ticket",
    ],
    setup_requires=["setuptools>=75.3.0"],
    install_requires=requirements,
    extras_require={
        "test": ["pytest~=8.0"],
    },
    entry_points={
        "console_scripts": [
            "taso=tasoLab.cli:main",
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'License :: OSI Approved :: GNU Affero General Public License v3 or later (AGPLv3+)',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    python_requires='>=3.9',
)
