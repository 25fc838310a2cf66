from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json

from .utils import ContractError, SchemaError, check_fraction


class Stage(Enum):
    """Training stage of a sparse LoRA module.

    - ROW: only rows of the left factor inside the core rows are live
    - COLUMN: only columns of the right factor inside the core columns are live
    - DENSE: plain unmasked LoRA
    """
    ROW = "row"
    COLUMN = "column"
    DENSE = "dense"


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


class LossKind(Enum):
    """Task loss of a tiny model.

    - CROSS_ENTROPY: classification over the output units, metric is accuracy
    - MSE: regression on the output units, metric is mean-squared error
    """
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


class Activation(Enum):
    RELU = "relu"
    GELU = "gelu"


class ImportanceKind(Enum):
    """Per-parameter importance score.

    - SENSITIVITY: |theta * g|
    - GRADIENT: |g|
    """
    SENSITIVITY = "sensitivity"
    GRADIENT = "gradient"


class Aggregation(Enum):
    """How per-batch gradients are combined into one importance map.

    - MEAN_GRADIENT: average the gradients over all batches, then score once
    - MEAN_SCORE: score each batch and average the scores
    """
    MEAN_GRADIENT = "mean_gradient"
    MEAN_SCORE = "mean_score"


class RegionSource(Enum):
    """Where the core region of a round comes from."""
    IMPORTANCE = "importance"
    RANDOM = "random"
    ORACLE = "oracle"


class SparsitySchedule(Enum):
    """IMP sparsity schedule over iterations."""
    GEOMETRIC = "geometric"
    LINEAR = "linear"


class Arm(Enum):
    """Experiment arm recorded on every RunReport."""
    TASO = "taso"
    TASO_NO_LR = "taso_no_lr"
    TASO_RANDOM_REGION = "taso_random_region"
    DENSE_LORA = "dense_lora"
    IMP = "imp"
    DARE = "dare"


_ENUM_FIELDS = {
    "optimizer": OptimizerKind,
    "importance_kind": ImportanceKind,
    "importance_aggregation": Aggregation,
    "region_source": RegionSource,
    "imp_schedule": SparsitySchedule,
    "loss_kind": LossKind,
    "activation": Activation,
}


@dataclass
class TrainConfig:
    """Configuration for every fine-tuning run and experiment.

    One flat document; every experiment is determined by it plus the seed.

    Attributes:
        base_lr (float): Learning rate before sparsity scaling (default: 5e-5)
        epochs (int): Epochs per training stage (default: 10)
        batch_size (int): Examples per optimizer step (default: 32)
        optimizer (OptimizerKind): sgd or adam (default: adam)
        adam_beta1 (float): Adam first-moment decay (default: 0.9)
        adam_beta2 (float): Adam second-moment decay (default: 0.999)
        adam_eps (float): Adam denominator epsilon (default: 1e-8)
        rank (int): LoRA rank used by TASO stages (default: 1)
        k (float): Fraction of parameters kept by the importance mask (default: 0.05)
        p_fraction (float): Fraction of the joint row+column list taken as core region (default: 0.10)
        rounds (int): Number of TASO rounds, each followed by a merge (default: 1)
        lr_scaling_enabled (bool): Scale the stage lr by sqrt(1/(1-rho)) (default: True)
        seed (int): Master seed (default: 0)
        importance_kind (ImportanceKind): sensitivity or gradient scoring (default: sensitivity)
        importance_aggregation (Aggregation): How batches are aggregated (default: mean_gradient)
        importance_batches (int, optional): Cap on batches used for importance (default: all)
        region_source (RegionSource): importance, random or oracle regions (default: importance)
        recompute_between_stages (bool): Recompute regions before the column stage (default: False)
        freeze_regions (bool): Reuse the round-1 regions in later rounds (default: False)
        shuffle (bool): Shuffle training batches each epoch (default: True)
        precision (int): 64 or 32 bit floats (default: 64)
        targets (List[str], optional): Adapted layer names; None adapts every linear layer
        dense_rank (int): Rank of the dense LoRA baseline (default: 8)
        imp_iterations (int): IMP prune/rewind/retrain cycles (default: 5)
        imp_target_sparsity (float): Final IMP sparsity (default: 0.9)
        imp_schedule (SparsitySchedule): Sparsity schedule over IMP iterations (default: geometric)
        dare_rho (float): Pruning ratio of the DARE arm (default: 0.9)
        max_workers (int): Worker threads for sweeps and ablations (default: 4)
        widths (List[int]): Layer widths of the tiny model (default: [16, 32, 8])
        activation (Activation): Hidden nonlinearity (default: relu)
        loss_kind (LossKind): Task loss (default: cross_entropy)
        attention_seq_len (int): Tokens per example for an attention front block; 0 disables it
        planted_layer (str, optional): Layer carrying the planted perturbation; None plants on the
            output layer, which planted-task runs also adapt when ``targets`` is None
        planted_rows (List[int], optional): Planted row support
        planted_cols (List[int], optional): Planted column support
        planted_support_fraction (float): Joint row+column fraction drawn when no explicit support is given
        planted_dense_rank (int): When > 0, plant a dense low-rank perturbation instead
        planted_scale (float): Magnitude of the planted perturbation (default: 3.0)
        n_train (int): Training examples (default: 512)
        n_eval (int): Evaluation examples (default: 256)
        noise (float): Label noise (flip probability or Gaussian std) (default: 0.0)
        n_seeds (int): Seeds per arm in ablations and comparisons (default: 3)
        p_list (List[float]): p_fraction values of the p-sweep
        header (bool): Write a header row in CSV outputs (default: False)
    """
    base_lr: float = 5e-5
    epochs: int = 10
    batch_size: int = 32
    optimizer: OptimizerKind = OptimizerKind.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rank: int = 1
    k: float = 0.05
    p_fraction: float = 0.10
    rounds: int = 1
    lr_scaling_enabled: bool = True
    seed: int = 0
    importance_kind: ImportanceKind = ImportanceKind.SENSITIVITY
    importance_aggregation: Aggregation = Aggregation.MEAN_GRADIENT
    importance_batches: Optional[int] = None
    region_source: RegionSource = RegionSource.IMPORTANCE
    recompute_between_stages: bool = False
    freeze_regions: bool = False
    shuffle: bool = True
    precision: int = 64
    targets: Optional[List[str]] = None
    dense_rank: int = 8
    imp_iterations: int = 5
    imp_target_sparsity: float = 0.9
    imp_schedule: SparsitySchedule = SparsitySchedule.GEOMETRIC
    dare_rho: float = 0.9
    max_workers: int = 4
    widths: List[int] = field(default_factory=lambda: [16, 32, 8])
    activation: Activation = Activation.RELU
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    attention_seq_len: int = 0
    planted_layer: Optional[str] = None
    planted_rows: Optional[List[int]] = None
    planted_cols: Optional[List[int]] = None
    planted_support_fraction: float = 0.10
    planted_dense_rank: int = 0
    planted_scale: float = 3.0
    n_train: int = 512
    n_eval: int = 256
    noise: float = 0.0
    n_seeds: int = 3
    p_list: List[float] = field(default_factory=lambda: [0.02, 0.05, 0.10, 0.20, 0.40])
    header: bool = False

    def validate(self) -> "TrainConfig":
        """Check every field against its admissible range.

        Returns:
            TrainConfig: self, for chaining

        Raises:
            ContractError: If a field is out of range
        """
        if not self.base_lr > 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        for name in ("batch_size", "rank", "rounds", "dense_rank", "imp_iterations",
                     "max_workers", "n_train", "n_eval", "n_seeds"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        check_fraction("k", self.k)
        check_fraction("p_fraction", self.p_fraction)
        check_fraction("imp_target_sparsity", self.imp_target_sparsity, allow_one=False)
        check_fraction("planted_support_fraction", self.planted_support_fraction)
        if not 0.0 <= self.dare_rho < 1.0:
            raise ContractError(f"dare_rho must lie in [0, 1), got {self.dare_rho}")
        if self.precision not in (32, 64):
            raise ContractError(f"precision must be 32 or 64, got {self.precision}")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ContractError(f"widths must list at least two positive sizes, got {self.widths}")
        if not 0.0 <= self.noise < 1.0 and self.loss_kind == LossKind.CROSS_ENTROPY:
            raise ContractError(f"classification noise is a flip probability, got {self.noise}")
        if self.noise < 0:
            raise ContractError(f"noise must be non-negative, got {self.noise}")
        for p in self.p_list:
            check_fraction("p_list entry", p)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready view with enums flattened to their values."""
        data = asdict(self)
        for name in _ENUM_FIELDS:
            data[name] = data[name].value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """Build a config from a flat mapping; unknown keys are rejected.

        Raises:
            SchemaError: On unknown keys or unparseable enum values
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SchemaError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)
        for name, enum_type in _ENUM_FIELDS.items():
            if name in values and not isinstance(values[name], enum_type):
                try:
                    values[name] = enum_type(values[name])
                except ValueError:
                    allowed = ", ".join(e.value for e in enum_type)
                    raise SchemaError(f"{name} must be one of: {allowed}; got {values[name]!r}")
        return cls(**values).validate()

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "TrainConfig":
        """Load a config document from disk.

        Raises:
            OSError: If the file cannot be read
            SchemaError: If the document is not a JSON object or has unknown keys
        """
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(f"config is not valid JSON: {e.msg}", line=e.lineno)
        if not isinstance(data, dict):
            raise SchemaError("config must be a JSON object")
        return cls.from_dict(data)
