import json

import numpy as np
import pytest

from tasoLab.autodiff import Matrix
from tasoLab.models import FrozenLinear, TinyModel
from tasoLab.schema import LossKind, OptimizerKind, TrainConfig
from tasoLab.tasks import TaskData, planted_task_from_config


def linear_mse_model(weight: np.ndarray, bias: bool = False) -> TinyModel:
    """One frozen linear layer named ``layer0`` trained with mean-squared error."""
    p = weight.shape[0]
    layer = FrozenLinear(
        weight=Matrix(weight, name="layer0.weight"),
        bias=Matrix(np.zeros((1, p)), name="layer0.bias") if bias else None,
        name="layer0",
    )
    return TinyModel(blocks=[layer], loss_kind=LossKind.MSE)


def regression_data(x: np.ndarray, y: np.ndarray, n_eval: int = 0) -> TaskData:
    """Train split (x, y); the eval split repeats the first rows when ``n_eval`` is 0."""
    n_eval = n_eval or min(8, x.shape[0])
    return TaskData(
        x_train=Matrix(x), y_train=y,
        x_eval=Matrix(x[:n_eval]), y_eval=y[:n_eval],
        loss_kind=LossKind.MSE,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small classification config that keeps every pipeline under a second."""
    return TrainConfig(
        widths=[6, 8, 3],
        n_train=64,
        n_eval=32,
        epochs=2,
        batch_size=16,
        base_lr=0.01,
        k=0.1,
        p_fraction=0.2,
        n_seeds=2,
        max_workers=2,
        imp_iterations=2,
        imp_target_sparsity=0.5,
        dense_rank=2,
        p_list=[0.2, 1.0],
        seed=7,
    )


@pytest.fixture
def planted_task(tiny_config):
    return planted_task_from_config(tiny_config)


@pytest.fixture
def linear_task(rng):
    """Linear regression whose target differs from the base on rows 1 and 4 only."""
    w0 = rng.normal(size=(6, 5)) / np.sqrt(5)
    delta = np.zeros_like(w0)
    delta[[1, 4], :] = rng.normal(size=(2, 5))
    x = rng.normal(size=(48, 5))
    y = x @ (w0 + delta).T
    return w0, delta, regression_data(x, y, n_eval=16)


@pytest.fixture
def sgd_config():
    return TrainConfig(optimizer=OptimizerKind.SGD, base_lr=0.05, epochs=1, batch_size=1000,
                       shuffle=False, seed=3)


@pytest.fixture
def config_file(tmp_path, tiny_config):
    """JSON config document for the command-line tests."""
    path = tmp_path / "cfg.json"
    data = {
        "widths": tiny_config.widths,
        "n_train": tiny_config.n_train,
        "n_eval": tiny_config.n_eval,
        "epochs": tiny_config.epochs,
        "batch_size": tiny_config.batch_size,
        "base_lr": tiny_config.base_lr,
        "k": tiny_config.k,
        "p_fraction": tiny_config.p_fraction,
        "n_seeds": tiny_config.n_seeds,
        "max_workers": tiny_config.max_workers,
        "imp_iterations": tiny_config.imp_iterations,
        "imp_target_sparsity": tiny_config.imp_target_sparsity,
        "dense_rank": tiny_config.dense_rank,
        "p_list": tiny_config.p_list,
        "seed": tiny_config.seed,
    }
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
