from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .autodiff import GradTape, Matrix
from .schema import Aggregation, ImportanceKind
from .utils import ContractError, NumericError, SchemaError, ShapeError, ceil_count, check_fraction, format_indices

if TYPE_CHECKING:
    from .models import TinyModel

Batch = Tuple[Matrix, np.ndarray]


@dataclass
class ImportanceMap:
    """Per-parameter importance of one weight matrix.

    Attributes:
        scores (Matrix): Non-negative scores, same shape as the scored weight
        sample_count (int): Examples consumed while estimating
        kind (ImportanceKind): Scoring rule that produced the map
        target (str, optional): Name of the scored layer
    """
    scores: Matrix
    sample_count: int
    kind: ImportanceKind = ImportanceKind.SENSITIVITY
    target: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape


@dataclass
class BinaryMask:
    """0/1 indicator of the top-k fraction of scores.

    Attributes:
        bits (Matrix): Entries in {0, 1}
        k (float): Retained fraction
    """
    bits: Matrix
    k: float

    @property
    def ones(self) -> int:
        return int(self.bits.data.sum())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape


@dataclass(frozen=True)
class CoreRegion:
    """Rows and columns selected as the task-specific core region.

    Attributes:
        row_indices (Tuple[int, ...]): Sorted, unique core row indices
        col_indices (Tuple[int, ...]): Sorted, unique core column indices
        p_fraction (float, optional): Fraction of the joint row+column list that was selected
    """
    row_indices: Tuple[int, ...]
    col_indices: Tuple[int, ...]
    p_fraction: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "row_indices", tuple(sorted(int(i) for i in self.row_indices)))
        object.__setattr__(self, "col_indices", tuple(sorted(int(j) for j in self.col_indices)))
        if len(set(self.row_indices)) != len(self.row_indices) or \
                len(set(self.col_indices)) != len(self.col_indices):
            raise ContractError("core region indices must be unique")
        if any(i < 0 for i in self.row_indices + self.col_indices):
            raise ContractError("core region indices must be non-negative")

    @property
    def size(self) -> int:
        return len(self.row_indices) + len(self.col_indices)

    def check_bounds(self, p: int, q: int) -> None:
        """Raise ContractError unless every index lies in [0, p) x [0, q)."""
        if self.row_indices and self.row_indices[-1] >= p:
            raise ContractError(f"row index {self.row_indices[-1]} out of range for p={p}")
        if self.col_indices and self.col_indices[-1] >= q:
            raise ContractError(f"column index {self.col_indices[-1]} out of range for q={q}")

    def cross_pattern(self, p: int, q: int) -> np.ndarray:
        """Boolean p x q matrix, True on every core row and every core column."""
        self.check_bounds(p, q)
        pattern = np.zeros((p, q), dtype=bool)
        pattern[list(self.row_indices), :] = True
        pattern[:, list(self.col_indices)] = True
        return pattern

    def union(self, other: "CoreRegion") -> "CoreRegion":
        return CoreRegion(
            row_indices=tuple(sorted(set(self.row_indices) | set(other.row_indices))),
            col_indices=tuple(sorted(set(self.col_indices) | set(other.col_indices))),
        )


def _gradient_batches(model: "TinyModel", data: Iterable[Batch], target: str, max_batches: Optional[int]):
    weight = model.layer(target).weight
    for index, (x, y) in enumerate(data):
        if max_batches is not None and index >= max_batches:
            break
        try:
            with GradTape() as tape:
                tape.watch(weight)
                loss = model.loss(x, y)
        except NumericError as e:
            logger.error(f"Importance estimation for {target} hit a non-finite loss at batch {index}")
            raise NumericError(str(e), batch_index=index) from e
        grads = tape.backward(loss)
        yield x.rows, grads[weight].data


def importance_scores(
        model: "TinyModel",
        data: Iterable[Batch],
        target: str,
        kind: ImportanceKind = ImportanceKind.SENSITIVITY,
        aggregation: Aggregation = Aggregation.MEAN_GRADIENT,
        max_batches: Optional[int] = None
) -> ImportanceMap:
    """Score every entry of a target weight matrix from task-loss gradients.

    The weight is watched on the tape without becoming trainable, so the backbone stays
    frozen. With MEAN_GRADIENT the per-batch gradients are averaged first and scored once;
    with MEAN_SCORE every batch is scored and the scores averaged.

    Args:
        model: Model whose ``target`` layer is scored
        data: Iterable of (inputs, labels) batches
        target: Layer name
        kind: sensitivity |theta * g| or gradient |g|
        aggregation: How batches are combined
        max_batches: Optional cap on consumed batches

    Returns:
        ImportanceMap: Non-negative scores shaped like the weight

    Raises:
        ContractError: If data is empty or the target does not exist
        NumericError: If a loss is non-finite
    """
    weight = model.layer(target).weight.data
    total = np.zeros(weight.shape, dtype=np.float64)
    batches = samples = 0
    for rows, grad in _gradient_batches(model, data, target, max_batches):
        if aggregation == Aggregation.MEAN_SCORE:
            grad = score_from_gradient(weight, grad, kind)
        total += grad
        batches += 1
        samples += rows
    if batches == 0:
        raise ContractError(f"importance estimation for {target} received no data")
    mean = total / batches
    scores = mean if aggregation == Aggregation.MEAN_SCORE else score_from_gradient(weight, mean, kind)
    logger.debug(f"Scored {target} ({kind.value}) from {batches} batches / {samples} examples")
    return ImportanceMap(
        scores=Matrix(scores, name=f"{target}.importance", dtype=weight.dtype),
        sample_count=samples,
        kind=kind,
        target=target,
    )


def score_from_gradient(weight: np.ndarray, grad: np.ndarray, kind: ImportanceKind) -> np.ndarray:
    """|weight * grad| for sensitivity, |grad| for gradient-only scoring."""
    if kind == ImportanceKind.SENSITIVITY:
        return np.abs(weight * grad)
    return np.abs(grad)


def sensitivity_scores(model: "TinyModel", data: Iterable[Batch], target: str, **kwargs) -> ImportanceMap:
    """|W0 * mean gradient| for the target layer; see importance_scores."""
    return importance_scores(model, data, target, ImportanceKind.SENSITIVITY, **kwargs)


def gradient_scores(model: "TinyModel", data: Iterable[Batch], target: str, **kwargs) -> ImportanceMap:
    """|mean gradient| for the target layer; see importance_scores."""
    return importance_scores(model, data, target, ImportanceKind.GRADIENT, **kwargs)


def topk_mask(imp: Union[ImportanceMap, Matrix], k: float) -> BinaryMask:
    """Ones at the ceil(k N) largest scores; ties go to the smaller row-major index.

    Raises:
        ContractError: If k is outside (0, 1]
    """
    check_fraction("k", k)
    scores = imp.scores if isinstance(imp, ImportanceMap) else imp
    flat = scores.data.ravel()
    keep = ceil_count(k, flat.size)
    order = np.argsort(-flat, kind="stable")
    bits = np.zeros(flat.size, dtype=scores.dtype)
    bits[order[:keep]] = 1.0
    return BinaryMask(bits=Matrix(bits.reshape(scores.shape), name="mask", dtype=scores.dtype), k=k)


def density(mask: BinaryMask) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row and per-column mean of the mask bits (u_row of length p, u_col of length q)."""
    bits = mask.bits.data
    if not np.all((bits == 0) | (bits == 1)):
        raise ContractError("mask entries must be 0 or 1")
    return bits.mean(axis=1), bits.mean(axis=0)


def select_core_region(u_row: Sequence[float], u_col: Sequence[float], p_fraction: float) -> CoreRegion:
    """Take the top ceil(p_fraction (p + q)) entries of the joint row+column density list.

    Ties are broken rows before columns, then by ascending index.

    Raises:
        ContractError: If p_fraction is outside (0, 1]
    """
    check_fraction("p_fraction", p_fraction)
    u_row = np.asarray(u_row, dtype=np.float64).reshape(-1)
    u_col = np.asarray(u_col, dtype=np.float64).reshape(-1)
    p, q = u_row.size, u_col.size
    if p == 0 or q == 0:
        raise ShapeError(f"density vectors must be non-empty, got lengths {p} and {q}")
    scores = np.concatenate([u_row, u_col])
    kinds = np.concatenate([np.zeros(p, dtype=np.int64), np.ones(q, dtype=np.int64)])
    indices = np.concatenate([np.arange(p), np.arange(q)])
    order = np.lexsort((indices, kinds, -scores))[:ceil_count(p_fraction, p + q)]
    rows = indices[order][kinds[order] == 0]
    cols = indices[order][kinds[order] == 1]
    return CoreRegion(row_indices=tuple(rows), col_indices=tuple(cols), p_fraction=p_fraction)


def core_region_from_scores(imp: ImportanceMap, k: float, p_fraction: float) -> Tuple[BinaryMask, CoreRegion]:
    """topk_mask -> density -> select_core_region in one call."""
    mask = topk_mask(imp, k)
    u_row, u_col = density(mask)
    return mask, select_core_region(u_row, u_col, p_fraction)


def write_region(region: CoreRegion, path: Union[str, Path]) -> Path:
    """Write ``rows: i1,i2,...`` / ``cols: j1,j2,...``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"rows: {format_indices(region.row_indices)}\n")
        f.write(f"cols: {format_indices(region.col_indices)}\n")
    return path


def read_region(path: Union[str, Path]) -> CoreRegion:
    """Parse a region file written by write_region.

    Raises:
        SchemaError: If a line is malformed
    """
    parsed = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, values = line.partition(":")
            if not sep or key.strip() not in ("rows", "cols"):
                raise SchemaError(f"expected 'rows:' or 'cols:', got {line!r}", line=number)
            try:
                parsed[key.strip()] = [int(v) for v in values.split(",") if v.strip()]
            except ValueError:
                raise SchemaError(f"non-integer index in {line!r}", line=number)
    return CoreRegion(row_indices=tuple(parsed.get("rows", ())), col_indices=tuple(parsed.get("cols", ())))
