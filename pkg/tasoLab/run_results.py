from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import math

import pandas as pd
from loguru import logger

from .utils import NumericError

WALL_CLOCK_KEYS = ("wall_clock_seconds",)


@dataclass
class StageReport:
    """Measurements of one training stage.

    Attributes:
        stage (str): row, column or dense
        loss_curve (List[float]): Mean training loss per epoch
        eval_metric (float): Eval accuracy (classification) or MSE (regression) after the stage
        rho (Dict[str, float]): Pruning ratio per adapted layer
        trainable (Dict[str, int]): Live adapter parameters per adapted layer
        lr (Dict[str, float]): Learning rate used per adapted layer
        epochs (int): Epochs run
        wall_clock_seconds (float): Elapsed time
    """
    stage: str
    loss_curve: List[float] = field(default_factory=list)
    eval_metric: float = 0.0
    rho: Dict[str, float] = field(default_factory=dict)
    trainable: Dict[str, int] = field(default_factory=dict)
    lr: Dict[str, float] = field(default_factory=dict)
    epochs: int = 0
    wall_clock_seconds: float = 0.0

    @property
    def total_trainable(self) -> int:
        return sum(self.trainable.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loss_curve": list(self.loss_curve),
            "eval_metric": self.eval_metric,
            "rho": dict(self.rho),
            "trainable": dict(self.trainable),
            "lr": dict(self.lr),
            "epochs": self.epochs,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


@dataclass
class RoundReport:
    """One TASO round (or one IMP iteration / dense run).

    Attributes:
        index (int): 1-based round number
        stages (Dict[str, StageReport]): Stage reports keyed by stage name
        regions (Dict[str, Dict[str, List[int]]]): Core region per adapted layer
        extra (Dict[str, Any]): Arm-specific measurements (e.g. IMP sparsity)
    """
    index: int
    stages: Dict[str, StageReport] = field(default_factory=dict)
    regions: Dict[str, Dict[str, List[int]]] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = {name: stage.to_dict() for name, stage in self.stages.items()}
        if self.regions:
            data["regions"] = self.regions
        if self.extra:
            data["extra"] = self.extra
        return data


@dataclass
class RunReport:
    """Result of one experiment arm.

    Attributes:
        arm (str): taso, taso_no_lr, taso_random_region, dense_lora, imp or dare
        seed (int): Seed of the run
        metric (str): accuracy or mse
        base_metric (float): Eval metric of the frozen base before training
        final_metric (float): Eval metric after the last merge
        rounds (List[RoundReport]): Per-round reports
        total_epochs (int): Epochs summed over every stage and iteration
        config (Dict[str, Any]): Echo of the config that produced the run
        extra (Dict[str, Any]): Arm-specific summary values
        wall_clock_seconds (float): Elapsed time of the whole run
    """
    arm: str
    seed: int
    metric: str
    base_metric: float = 0.0
    final_metric: float = 0.0
    rounds: List[RoundReport] = field(default_factory=list)
    total_epochs: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @property
    def trainable(self) -> int:
        """Peak number of simultaneously trainable adapter parameters."""
        counts = [stage.total_trainable for rnd in self.rounds for stage in rnd.stages.values()]
        return max(counts, default=0)

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "accuracy"

    def rho_values(self) -> Dict[str, Dict[str, float]]:
        """{round.stage: {layer: rho}}."""
        return {f"{rnd.index}.{name}": dict(stage.rho)
                for rnd in self.rounds for name, stage in rnd.stages.items()}

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dict with a stable key schema.

        Raises:
            NumericError: If any numeric field is not finite
        """
        data = {
            "arm": self.arm,
            "seed": self.seed,
            "metric": self.metric,
            "base_metric": self.base_metric,
            "final_metric": self.final_metric,
            "trainable": self.trainable,
            "total_epochs": self.total_epochs,
            "rounds": {str(rnd.index): rnd.to_dict() for rnd in self.rounds},
            "config": self.config,
            "extra": self.extra,
            "wall_clock_seconds": self.wall_clock_seconds,
        }
        _check_finite(data, "report")
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Union[str, Path]) -> Path:
        path = save_json(path, self.to_dict())
        logger.info(f"Wrote {self.arm} report to {path}")
        return path

    def to_frame(self) -> pd.DataFrame:
        """One row per (round, stage)."""
        rows = []
        for rnd in self.rounds:
            for name, stage in rnd.stages.items():
                rows.append({
                    "arm": self.arm,
                    "seed": self.seed,
                    "round": rnd.index,
                    "stage": name,
                    "eval_metric": stage.eval_metric,
                    "final_loss": stage.loss_curve[-1] if stage.loss_curve else float("nan"),
                    "trainable": stage.total_trainable,
                    "mean_rho": sum(stage.rho.values()) / len(stage.rho) if stage.rho else 0.0,
                    "epochs": stage.epochs,
                })
        return pd.DataFrame(rows, columns=["arm", "seed", "round", "stage", "eval_metric",
                                           "final_loss", "trainable", "mean_rho", "epochs"])


def _check_finite(value: Any, path: str) -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise NumericError(f"non-finite value at {path}")
    if isinstance(value, dict):
        for key, item in value.items():
            _check_finite(item, f"{path}.{key}")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_finite(item, f"{path}[{i}]")


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a report.json written by RunReport.save."""
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def strip_wall_clock(data: Any) -> Any:
    """Copy of a report dict without wall-clock fields (for determinism comparisons)."""
    if isinstance(data, dict):
        return {k: strip_wall_clock(v) for k, v in data.items() if k not in WALL_CLOCK_KEYS}
    if isinstance(data, list):
        return [strip_wall_clock(v) for v in data]
    return data


def save_json(path: Union[str, Path], data: Dict[str, Any]) -> Path:
    """Write a report dict with sorted keys and a trailing newline.

    Raises:
        NumericError: If any numeric field is not finite
    """
    _check_finite(data, "report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
