from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union
import re

import numpy as np
import pandas as pd
from loguru import logger

from .autodiff import DTYPES, Matrix
from .importance import CoreRegion
from .models import TinyModel, build_tiny_classifier
from .schema import Activation, LossKind, TrainConfig
from .utils import ContractError, SchemaError, derive_seed, make_rng

Batch = Tuple[Matrix, np.ndarray]


@dataclass
class TaskData:
    """Train/eval split of one task.

    Attributes:
        x_train (Matrix): n_train x input_width inputs
        y_train (np.ndarray): Integer labels (classification) or n_train x outputs targets (regression)
        x_eval (Matrix): n_eval x input_width inputs
        y_eval (np.ndarray): Labels or targets of the eval split
        loss_kind (LossKind): Kind of label stored
    """
    x_train: Matrix
    y_train: np.ndarray
    x_eval: Matrix
    y_eval: np.ndarray
    loss_kind: LossKind = LossKind.CROSS_ENTROPY

    @property
    def n_train(self) -> int:
        return self.x_train.rows

    @property
    def n_eval(self) -> int:
        return self.x_eval.rows

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
        """Training batches in order, or in a permutation drawn from ``rng``."""
        if batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {batch_size}")
        order = rng.permutation(self.n_train) if rng is not None else np.arange(self.n_train)
        x = self.x_train.data
        for start in range(0, self.n_train, batch_size):
            index = order[start:start + batch_size]
            yield Matrix(x[index], dtype=x.dtype), self.y_train[index]

    def astype(self, dtype) -> "TaskData":
        return TaskData(
            x_train=Matrix(self.x_train.data, dtype=dtype),
            y_train=self.y_train,
            x_eval=Matrix(self.x_eval.data, dtype=dtype),
            y_eval=self.y_eval,
            loss_kind=self.loss_kind,
        )


@dataclass
class PlantedTaskSpec:
    """Shape of a planted teacher-student task.

    Attributes:
        widths (List[int]): Layer widths of base and teacher
        layer (str, optional): Layer that carries the planted perturbation; None means the output layer
        rows (List[int]): Row support of the perturbation
        cols (List[int]): Column support of the perturbation
        dense_rank (int): When > 0, a dense perturbation of this rank replaces the row/column one
        scale (float): Perturbation magnitude relative to the 1/sqrt(fan_in) weight scale
        n_train (int): Training examples
        n_eval (int): Evaluation examples
        noise (float): Label flip probability (classification) or Gaussian target noise std (regression)
        loss_kind (LossKind): Classification or regression labels
        activation (Activation): Hidden nonlinearity
        attention_seq_len (int): Tokens per example for an attention front block; 0 disables it
        base_seed (int, optional): Seed of the frozen base; derived from the task seed when None
        precision (int): 64 or 32 bit floats for weights and inputs
    """
    widths: List[int] = field(default_factory=lambda: [16, 32, 8])
    layer: Optional[str] = None
    rows: List[int] = field(default_factory=list)
    cols: List[int] = field(default_factory=list)
    dense_rank: int = 0
    scale: float = 3.0
    n_train: int = 512
    n_eval: int = 256
    noise: float = 0.0
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    activation: Activation = Activation.RELU
    attention_seq_len: int = 0
    base_seed: Optional[int] = None
    precision: int = 64

    @classmethod
    def from_config(cls, config: TrainConfig, seed: Optional[int] = None) -> "PlantedTaskSpec":
        """Task spec described by the flat config; draws a random support when none is given."""
        spec = cls(
            widths=list(config.widths),
            layer=config.planted_layer,
            rows=list(config.planted_rows or []),
            cols=list(config.planted_cols or []),
            dense_rank=config.planted_dense_rank,
            scale=config.planted_scale,
            n_train=config.n_train,
            n_eval=config.n_eval,
            noise=config.noise,
            loss_kind=config.loss_kind,
            activation=config.activation,
            attention_seq_len=config.attention_seq_len,
            precision=config.precision,
        )
        seed = config.seed if seed is None else seed
        base = spec.build_base(seed)
        spec.layer = spec.layer or base.output_layer
        if config.planted_rows is None and config.planted_cols is None and config.planted_dense_rank == 0:
            p, q = base.layer(spec.layer).weight.shape
            region = random_support(p, q, config.planted_support_fraction, seed)
            spec.rows, spec.cols = list(region.row_indices), list(region.col_indices)
        return spec

    def build_base(self, seed: int) -> TinyModel:
        base_seed = self.base_seed if self.base_seed is not None else seed
        return build_tiny_classifier(
            self.widths, base_seed, activation=self.activation, loss_kind=self.loss_kind,
            attention_seq_len=self.attention_seq_len, dtype=DTYPES[self.precision],
        )


@dataclass
class PlantedTask:
    """Synthetic task whose teacher is the frozen base plus a perturbation of known support.

    Attributes:
        spec (PlantedTaskSpec): How the task was generated
        base (TinyModel): Frozen base model the student starts from
        teacher (TinyModel): Base with W0 + delta on the planted layer
        delta (np.ndarray): Planted perturbation of the planted layer
        data (TaskData): Labeled train/eval split
        seed (int): Task seed
    """
    spec: PlantedTaskSpec
    base: TinyModel
    teacher: TinyModel
    delta: np.ndarray
    data: TaskData
    seed: int

    @property
    def support_region(self) -> CoreRegion:
        return CoreRegion(row_indices=tuple(self.spec.rows), col_indices=tuple(self.spec.cols))

    def student(self) -> TinyModel:
        """Fresh copy of the frozen base."""
        return self.base.copy()


@dataclass
class LoadedTask:
    """Task read from disk: a freshly built frozen base plus a train/eval split.

    Attributes:
        base (TinyModel): Frozen base model
        data (TaskData): Labeled train/eval split
        seed (int): Seed of base and split
    """
    base: TinyModel
    data: TaskData
    seed: int

    def student(self) -> TinyModel:
        return self.base.copy()


Task = Union[PlantedTask, LoadedTask]


def random_support(p: int, q: int, fraction: float, seed: int) -> CoreRegion:
    """Uniform subset of the joint row+column list of size ceil(fraction (p + q))."""
    from .baselines import random_core_region

    return random_core_region(p, q, fraction, derive_seed(seed, "support"))


def _planted_delta(spec: PlantedTaskSpec, p: int, q: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "delta")
    magnitude = spec.scale / np.sqrt(q)
    delta = np.zeros((p, q))
    if spec.dense_rank > 0:
        u = rng.normal(size=(p, spec.dense_rank))
        v = rng.normal(size=(spec.dense_rank, q))
        return magnitude * (u @ v) / np.sqrt(spec.dense_rank)
    if spec.rows:
        delta[spec.rows, :] += np.outer(rng.normal(size=len(spec.rows)), rng.normal(size=q))
    if spec.cols:
        delta[:, spec.cols] += np.outer(rng.normal(size=p), rng.normal(size=len(spec.cols)))
    return magnitude * delta


def generate_planted_task(spec: PlantedTaskSpec, seed: int) -> PlantedTask:
    """Build base, teacher and labeled data for a planted task.

    Inputs are standard Gaussian; labels are the teacher's argmax class (with label flips
    at rate ``noise``) or the teacher's outputs (plus Gaussian noise of std ``noise``).

    Raises:
        ContractError: If the support indices do not fit the planted layer
    """
    base = spec.build_base(seed)
    if spec.layer is None:
        spec = replace(spec, layer=base.output_layer)
    layer = base.layer(spec.layer)
    p, q = layer.weight.shape
    for name, indices, bound in (("row", spec.rows, p), ("column", spec.cols, q)):
        if len(set(indices)) != len(indices) or any(not 0 <= i < bound for i in indices):
            raise ContractError(f"invalid planted {name} support {indices} for layer {spec.layer} of shape {(p, q)}")
    if spec.dense_rank < 0:
        raise ContractError(f"dense_rank must be >= 0, got {spec.dense_rank}")

    delta = _planted_delta(spec, p, q, seed)
    teacher = base.copy()
    teacher_layer = teacher.layer(spec.layer)
    teacher_layer.weight = Matrix(layer.weight.data + delta, name=layer.weight.name, dtype=layer.weight.dtype)

    dtype = DTYPES[spec.precision]
    rng = make_rng(seed, "inputs")
    x = rng.normal(size=(spec.n_train + spec.n_eval, base.input_width))
    inputs = Matrix(x, dtype=dtype)
    if spec.loss_kind == LossKind.CROSS_ENTROPY:
        y = teacher.predict(inputs)
        if spec.noise > 0:
            noise_rng = make_rng(seed, "noise")
            flip = noise_rng.random(y.shape[0]) < spec.noise
            y = np.where(flip, noise_rng.integers(0, teacher.output_width, size=y.shape[0]), y)
    else:
        y = teacher.predict(inputs)
        if spec.noise > 0:
            y = y + spec.noise * make_rng(seed, "noise").normal(size=y.shape)

    n = spec.n_train
    data = TaskData(
        x_train=Matrix(x[:n], dtype=dtype), y_train=y[:n],
        x_eval=Matrix(x[n:], dtype=dtype), y_eval=y[n:],
        loss_kind=spec.loss_kind,
    )
    logger.info(f"Planted task seed={seed}: layer {spec.layer} {p}x{q}, rows={spec.rows}, cols={spec.cols}, "
                f"dense_rank={spec.dense_rank}, train={n}, eval={spec.n_eval}")
    return PlantedTask(spec=spec, base=base, teacher=teacher, delta=delta, data=data, seed=seed)


@dataclass
class DatasetSchema:
    """Expected layout of a CSV dataset: numeric feature columns, then one label column.

    Attributes:
        n_features (int, optional): Required feature count; None accepts any consistent width
        loss_kind (LossKind): Integer class labels or real targets
        header (bool): Whether the first line is a header
    """
    n_features: Optional[int] = None
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    header: bool = False


@dataclass
class Dataset:
    x: Matrix
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.rows


def load_csv_dataset(path: Union[str, Path], schema: Optional[DatasetSchema] = None) -> Dataset:
    """Read a numeric CSV; the last column is the label.

    Raises:
        OSError: If the file cannot be read
        SchemaError: On an empty file, a width mismatch or a non-numeric cell (with its line number)
    """
    schema = schema or DatasetSchema()
    offset = 2 if schema.header else 1
    try:
        frame = pd.read_csv(path, header=0 if schema.header else None, dtype=str,
                            keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path} is empty")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise SchemaError(f"{path}: inconsistent number of fields", line=int(match.group(1)) if match else None)
    if frame.empty:
        raise SchemaError(f"{path} holds no data rows")
    width = frame.shape[1]
    if width < 2:
        raise SchemaError(f"{path}: need at least one feature column and a label column, got {width} column(s)")
    if schema.n_features is not None and width != schema.n_features + 1:
        raise SchemaError(f"{path}: expected {schema.n_features} features + label, got {width} columns",
                          line=offset)
    values = np.empty(frame.shape, dtype=np.float64)
    for row_number, row in enumerate(frame.itertuples(index=False)):
        for col_number, cell in enumerate(row):
            if cell is None or (isinstance(cell, float) and np.isnan(cell)) or str(cell).strip() == "":
                raise SchemaError(f"{path}: row has fewer than {width} fields", line=row_number + offset)
            try:
                values[row_number, col_number] = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: cannot parse {cell!r} in column {col_number + 1}",
                                  line=row_number + offset)
    labels = values[:, -1]
    if schema.loss_kind == LossKind.CROSS_ENTROPY:
        if np.any(labels != np.round(labels)) or np.any(labels < 0):
            raise SchemaError(f"{path}: class labels must be non-negative integers")
        y = labels.astype(np.int64)
    else:
        y = labels.reshape(-1, 1)
    logger.info(f"Loaded {values.shape[0]} examples with {width - 1} features from {path}")
    return Dataset(x=Matrix(values[:, :-1]), y=y)


def write_csv_dataset(path: Union[str, Path], dataset: Dataset, header: bool = False) -> Path:
    """Write features and label with 17 significant digits so 64-bit values survive a round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.x.data, columns=[f"x{i}" for i in range(dataset.x.cols)])
    frame["label"] = np.asarray(dataset.y).reshape(-1)
    frame.to_csv(path, index=False, header=header, float_format="%.17g", lineterminator="\n")
    return path


def split_dataset(dataset: Dataset, eval_fraction: float, seed: int,
                  loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> TaskData:
    """Disjoint shuffled train/eval split."""
    if not 0.0 < eval_fraction < 1.0:
        raise ContractError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    n = len(dataset)
    order = make_rng(seed, "split").permutation(n)
    n_eval = max(1, min(n - 1, int(round(eval_fraction * n))))
    train, held = order[n_eval:], order[:n_eval]
    x = dataset.x.data
    return TaskData(
        x_train=Matrix(x[train]), y_train=dataset.y[train],
        x_eval=Matrix(x[held]), y_eval=dataset.y[held],
        loss_kind=loss_kind,
    )


def task_from_csv(path: Union[str, Path], config: TrainConfig) -> LoadedTask:
    """CSV dataset split into train/eval in the n_train : n_eval ratio, on a base built from the config.

    Raises:
        SchemaError: If the file does not have ``widths[0]`` feature columns plus a label
    """
    dtype = DTYPES[config.precision]
    dataset = load_csv_dataset(path, DatasetSchema(n_features=config.widths[0], loss_kind=config.loss_kind,
                                                   header=config.header))
    data = split_dataset(dataset, config.n_eval / (config.n_train + config.n_eval), config.seed,
                         loss_kind=config.loss_kind).astype(dtype)
    base = build_tiny_classifier(config.widths, config.seed, activation=config.activation,
                                 loss_kind=config.loss_kind, attention_seq_len=config.attention_seq_len,
                                 dtype=dtype)
    return LoadedTask(base=base, data=data, seed=config.seed)


def planted_task_from_config(config: TrainConfig) -> PlantedTask:
    return generate_planted_task(PlantedTaskSpec.from_config(config), config.seed)


def adapted_config(task: Task, config: TrainConfig) -> TrainConfig:
    """Config for runs on ``task``: a planted task adapts its planted layer unless targets are set."""
    if isinstance(task, PlantedTask) and config.targets is None:
        return replace(config, targets=[task.spec.layer])
    return config
