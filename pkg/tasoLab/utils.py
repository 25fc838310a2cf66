from typing import Optional, Sequence, Union
from loguru import logger
import math
import sys

import numpy as np

LOG_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)

# Configure logging
logger.remove()
logger.add(sys.stderr, format=LOG_FORMAT, level="INFO")


def configure_logging(level: str = "INFO") -> None:
    """Re-install the stderr sink at the given level.

    Args:
        level (str): Any loguru level name (DEBUG, INFO, WARNING, ...)
    """
    logger.remove()
    logger.add(sys.stderr, format=LOG_FORMAT, level=level.upper())


class TasoError(Exception):
    """Base class for every error raised by tasoLab."""


class ContractError(TasoError, ValueError):
    """A precondition of a public operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class SchemaError(ContractError):
    """A config document or dataset file does not match its schema.

    Attributes:
        line (int, optional): 1-based line number of the offending record
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(TasoError, ArithmeticError):
    """A computation produced a NaN or an infinity.

    Attributes:
        batch_index (int, optional): Index of the batch being processed when it happened
    """

    def __init__(self, message: str, batch_index: Optional[int] = None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"batch {batch_index}: {message}"
        super().__init__(message)


def ceil_count(fraction: float, total: int) -> int:
    """Number of items kept when retaining ``fraction`` of ``total``.

    Rounds ``fraction * total`` to 9 decimals before taking the ceiling so that
    products such as ``0.3 * 10`` count as 3, and never returns 0 for a non-empty set.
    """
    if total <= 0:
        return 0
    count = math.ceil(round(fraction * total, 9))
    return int(min(total, max(1, count)))


def check_fraction(name: str, value: float, *, allow_one: bool = True) -> None:
    """Raise ContractError unless ``value`` lies in (0, 1] (or (0, 1) when ``allow_one`` is False)."""
    upper_ok = value <= 1.0 if allow_one else value < 1.0
    if not (value > 0.0 and upper_ok) or math.isnan(value):
        interval = "(0, 1]" if allow_one else "(0, 1)"
        raise ContractError(f"{name} must lie in {interval}, got {value}")


def derive_seed(seed: int, *labels: Union[int, str]) -> int:
    """Derive a child seed from ``seed`` and a path of labels.

    The same (seed, labels) always yields the same 64-bit child seed, so every part of an
    experiment draws from its own reproducible stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            raw = label.encode("utf-8")
            entropy.append(len(raw))
            for start in range(0, len(raw), 4):
                entropy.append(int.from_bytes(raw[start:start + 4], "little"))
        else:
            entropy.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_rng(seed: int, *labels: Union[int, str]) -> np.random.Generator:
    """Seeded numpy Generator for ``derive_seed(seed, *labels)``."""
    if labels:
        seed = derive_seed(seed, *labels)
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def format_indices(indices: Sequence[int]) -> str:
    return ",".join(str(int(i)) for i in indices)
