from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union
import math

import numpy as np
from loguru import logger

from .autodiff import Matrix, elementwise_mul, matmul, scale
from .importance import CoreRegion, read_region, write_region
from .schema import Stage
from .serialization import load_tensor, save_tensor
from .utils import ContractError, ShapeError, make_rng


@dataclass
class SparseLoraModule:
    """Rank-r LoRA factor pair with a structural mask.

    The effective update is ``(left * row_mask) @ right`` for the row stage,
    ``left @ (right * col_mask)`` for the column stage and ``left @ right`` when dense.

    Attributes:
        left (Matrix): p x r factor mapping rank to output rows
        right (Matrix): r x q factor mapping input columns to rank
        stage (Stage): row, column or dense
        keep (np.ndarray, optional): 0/1 vector over rows (row stage) or columns (column stage)
        rho (float): Fraction of delta entries forced to zero
        region (CoreRegion, optional): Region the mask was built from
        factor_masks (Tuple[np.ndarray, np.ndarray], optional): Per-entry 0/1 masks of (left, right),
            applied on top of the structural mask (used by iterative magnitude pruning)
    """
    left: Matrix
    right: Matrix
    stage: Stage
    keep: Optional[np.ndarray] = None
    rho: float = 0.0
    region: Optional[CoreRegion] = None
    factor_masks: Optional[Tuple[np.ndarray, np.ndarray]] = None
    _mask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def p(self) -> int:
        return self.left.rows

    @property
    def q(self) -> int:
        return self.right.cols

    @property
    def rank(self) -> int:
        return self.left.cols

    @property
    def shape(self) -> Tuple[int, int]:
        return self.p, self.q

    def structural_mask(self) -> Optional[Matrix]:
        """Constant 0/1 matrix broadcasting ``keep`` over the constrained factor."""
        if self.stage == Stage.DENSE:
            return None
        key = (self.stage, self.left.dtype.str)
        if key not in self._mask_cache:
            keep = self.keep.astype(self.left.dtype)
            if self.stage == Stage.ROW:
                bits = np.repeat(keep[:, None], self.rank, axis=1)
            else:
                bits = np.repeat(keep[None, :], self.rank, axis=0)
            self._mask_cache[key] = Matrix(bits, name="structural_mask", dtype=self.left.dtype)
        return self._mask_cache[key]

    def masked_factors(self) -> Tuple[Matrix, Matrix]:
        """(left, right) with the structural mask applied; taped when a tape is active."""
        mask = self.structural_mask()
        left, right = self.left, self.right
        if self.stage == Stage.ROW:
            left = elementwise_mul(left, mask)
        elif self.stage == Stage.COLUMN:
            right = elementwise_mul(right, mask)
        if self.factor_masks is not None:
            key = ("factor", self.left.dtype.str)
            if key not in self._mask_cache:
                self._mask_cache[key] = tuple(Matrix(m, dtype=self.left.dtype) for m in self.factor_masks)
            left_mask, right_mask = self._mask_cache[key]
            left, right = elementwise_mul(left, left_mask), elementwise_mul(right, right_mask)
        return left, right

    def delta(self) -> Matrix:
        left, right = self.masked_factors()
        return matmul(left, right)

    def trainable_count(self) -> int:
        return count_trainable(self, self.stage)

    def factors(self) -> Tuple[Matrix, Matrix]:
        return self.left, self.right

    def with_factors(self, left: Matrix, right: Matrix) -> "SparseLoraModule":
        """Replace both factors in place, keeping them trainable."""
        if left.shape != self.left.shape or right.shape != self.right.shape:
            raise ShapeError(f"factor shapes {left.shape}/{right.shape} do not match "
                             f"{self.left.shape}/{self.right.shape}")
        self.left = left if left.trainable else left.detach(trainable=True, name="left")
        self.right = right if right.trainable else right.detach(trainable=True, name="right")
        return self


def pruning_ratio(region: Optional[CoreRegion], stage: Stage, p: int, q: int) -> float:
    """Fraction of delta entries zeroed by the stage's structural mask.

    Row stage: 1 - (core rows)/p. Column stage: 1 - (core columns)/q. Dense: 0.
    """
    if stage == Stage.DENSE or region is None:
        return 0.0
    if stage == Stage.ROW:
        return 1.0 - len(region.row_indices) / p
    return 1.0 - len(region.col_indices) / q


def scaled_lr(base_lr: float, rho: float) -> float:
    """Learning rate compensating a pruning ratio: base_lr * sqrt(1 / (1 - rho)).

    Raises:
        ContractError: If rho is outside [0, 1)
    """
    if not 0.0 <= rho < 1.0:
        raise ContractError(f"pruning ratio must lie in [0, 1), got {rho}")
    return base_lr * math.sqrt(1.0 / (1.0 - rho))


def init_adapter(
        p: int,
        q: int,
        r: int,
        stage: Stage,
        region: Optional[CoreRegion] = None,
        seed: int = 0,
        dtype=np.float64
) -> SparseLoraModule:
    """Create a fresh adapter whose effective delta is exactly zero.

    The left factor starts at zero; the right factor is drawn from
    uniform(-1/sqrt(q), 1/sqrt(q)) with the given seed.

    Raises:
        ContractError: If r < 1, the region is out of range, or its side for this stage is empty
    """
    if r < 1:
        raise ContractError(f"rank must be >= 1, got {r}")
    keep = None
    if stage != Stage.DENSE:
        if region is None:
            raise ContractError(f"stage {stage.value} needs a core region")
        region.check_bounds(p, q)
        if stage == Stage.ROW:
            if not region.row_indices:
                raise ContractError("row stage needs at least one core row")
            keep = np.zeros(p, dtype=np.int8)
            keep[list(region.row_indices)] = 1
        else:
            if not region.col_indices:
                raise ContractError("column stage needs at least one core column")
            keep = np.zeros(q, dtype=np.int8)
            keep[list(region.col_indices)] = 1

    bound = 1.0 / math.sqrt(q)
    rng = make_rng(seed)
    left = Matrix(np.zeros((p, r)), trainable=True, name="left", dtype=dtype)
    right = Matrix(rng.uniform(-bound, bound, size=(r, q)), trainable=True, name="right", dtype=dtype)
    return SparseLoraModule(
        left=left,
        right=right,
        stage=stage,
        keep=keep,
        rho=pruning_ratio(region, stage, p, q),
        region=region,
    )


def effective_delta(module: SparseLoraModule) -> Matrix:
    """Materialized p x q update; exact zeros outside the stage's live rows/columns."""
    return module.delta()


def count_trainable(module: SparseLoraModule, stage: Optional[Stage] = None) -> int:
    """Live adapter parameters for a stage.

    Row: (core rows) r + r q. Column: p r + r (core columns). Dense: p r + r q.
    """
    stage = stage or module.stage
    p, q, r = module.p, module.q, module.rank
    if module.factor_masks is not None:
        return int(sum(int(m.sum()) for m in module.factor_masks))
    if stage == Stage.ROW:
        return int(module.keep.sum()) * r + r * q
    if stage == Stage.COLUMN:
        return p * r + r * int(module.keep.sum())
    return p * r + r * q


def factor_scaled_delta(module: SparseLoraModule, rho: float) -> Matrix:
    """Delta of the factors each multiplied by sqrt(1/(1 - rho)).

    Equals (1/(1 - rho)) times the unscaled delta.
    """
    s = scaled_lr(1.0, rho)
    left, right = module.masked_factors()
    return matmul(scale(left, s), scale(right, s))


def save_adapter(module: SparseLoraModule, directory: Union[str, Path], prefix: str = "adapter") -> Path:
    """Write left, right, the stage mask and any pruning masks as TSR1 files plus the region text file."""
    directory = Path(directory)
    save_tensor(directory / f"{prefix}.left.tsr", module.left)
    save_tensor(directory / f"{prefix}.right.tsr", module.right)
    if module.keep is not None:
        save_tensor(directory / f"{prefix}.mask.tsr", module.keep.astype(np.float64))
    if module.region is not None:
        write_region(module.region, directory / f"{prefix}.region.txt")
    if module.factor_masks is not None:
        save_tensor(directory / f"{prefix}.left_mask.tsr", module.factor_masks[0].astype(np.float64))
        save_tensor(directory / f"{prefix}.right_mask.tsr", module.factor_masks[1].astype(np.float64))
    with open(directory / f"{prefix}.stage.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(f"stage: {module.stage.value}\nrho: {module.rho!r}\n")
    logger.info(f"Saved {module.stage.value} adapter {module.shape} to {directory}/{prefix}.*")
    return directory


def load_adapter(directory: Union[str, Path], prefix: str = "adapter") -> SparseLoraModule:
    """Inverse of save_adapter."""
    directory = Path(directory)
    left = load_tensor(directory / f"{prefix}.left.tsr", trainable=True, name="left")
    right = load_tensor(directory / f"{prefix}.right.tsr", trainable=True, name="right")
    meta = {}
    with open(directory / f"{prefix}.stage.txt", "r", encoding="utf-8") as f:
        for line in f:
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    stage = Stage(meta["stage"])
    keep, region = None, None
    if stage != Stage.DENSE:
        keep = load_tensor(directory / f"{prefix}.mask.tsr").data.reshape(-1).astype(np.int8)
        region_path = directory / f"{prefix}.region.txt"
        if region_path.exists():
            region = read_region(region_path)
    factor_masks = None
    if (directory / f"{prefix}.left_mask.tsr").exists():
        factor_masks = tuple(
            load_tensor(directory / f"{prefix}.{role}_mask.tsr").data.astype(np.int8) for role in ("left", "right"))
        for mask, factor in zip(factor_masks, (left, right)):
            if mask.shape != factor.shape:
                raise ShapeError(f"pruning mask {mask.shape} does not match factor {factor.shape}")
    return SparseLoraModule(left=left, right=right, stage=stage, keep=keep,
                            rho=float(meta.get("rho", 0.0)), region=region, factor_masks=factor_masks)
