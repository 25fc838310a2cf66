from typing import Dict, List, Optional, Tuple
import time

import numpy as np
from loguru import logger

from .adapter import SparseLoraModule, init_adapter
from .autodiff import Matrix
from .finetune import train_stage
from .importance import CoreRegion
from .models import TinyModel, merge_delta
from .run_results import RoundReport, RunReport, StageReport
from .schema import Arm, SparsitySchedule, Stage, TrainConfig
from .tasks import TaskData
from .utils import ContractError, ceil_count, check_fraction, derive_seed, make_rng


def _targets(model: TinyModel, config: TrainConfig) -> List[str]:
    return list(config.targets) if config.targets else model.targets()


def _new_report(model: TinyModel, data: TaskData, config: TrainConfig, arm: Arm) -> RunReport:
    return RunReport(
        arm=arm.value,
        seed=config.seed,
        metric="accuracy" if model.higher_is_better else "mse",
        base_metric=model.evaluate(data.x_eval, data.y_eval),
        config=config.to_dict(),
    )


def train_dense_adapters(
        model: TinyModel,
        data: TaskData,
        r: int,
        config: TrainConfig,
        stream: str = "dense"
) -> Tuple[Dict[str, SparseLoraModule], StageReport]:
    """Attach and train unmasked rank-r adapters on every target; nothing is merged."""
    if r < 1:
        raise ContractError(f"rank must be >= 1, got {r}")
    adapters = {}
    for name in _targets(model, config):
        layer = model.layer(name)
        adapters[name] = init_adapter(layer.p, layer.q, r, Stage.DENSE,
                                      seed=derive_seed(config.seed, stream, name), dtype=layer.weight.dtype)
    lrs = {name: config.base_lr for name in adapters}
    return train_stage(model, data, adapters, config, lrs, stream=stream)


def dense_lora_finetune(model: TinyModel, data: TaskData, r: int, config: TrainConfig) -> RunReport:
    """Standard LoRA of rank r on every target, merged at the end."""
    config.validate()
    started = time.perf_counter()
    report = _new_report(model, data, config, Arm.DENSE_LORA)
    adapters, stage = train_dense_adapters(model, data, r, config)
    for name in adapters:
        merge_delta(model.layer(name))
    report.rounds.append(RoundReport(index=1, stages={Stage.DENSE.value: stage}))
    report.final_metric = model.evaluate(data.x_eval, data.y_eval)
    report.total_epochs = stage.epochs
    report.wall_clock_seconds = time.perf_counter() - started
    logger.info(f"dense_lora r={r}: final {report.metric} {report.final_metric:.4f}, trainable {report.trainable}")
    return report


def dare_rescale(delta: Matrix, rho: float) -> Matrix:
    """Amplify a pruned delta by 1/(1 - rho); zeros stay exactly zero.

    Raises:
        ContractError: If rho is outside [0, 1)
    """
    if not 0.0 <= rho < 1.0:
        raise ContractError(f"pruning ratio must lie in [0, 1), got {rho}")
    return Matrix(delta.data * (1.0 / (1.0 - rho)) + 0.0, name=delta.name, dtype=delta.dtype)


def dare_finetune(model: TinyModel, data: TaskData, r: int, config: TrainConfig) -> RunReport:
    """Dense LoRA whose delta is randomly dropped at rate ``config.dare_rho`` and rescaled before merging."""
    config.validate()
    started = time.perf_counter()
    report = _new_report(model, data, config, Arm.DARE)
    adapters, stage = train_dense_adapters(model, data, r, config, stream="dare")
    rho = config.dare_rho
    kept = {}
    for name, adapter in adapters.items():
        layer = model.layer(name)
        delta = adapter.delta().data
        keep = make_rng(config.seed, "dare_drop", name).random(delta.shape) >= rho
        rescaled = dare_rescale(Matrix(delta * keep, dtype=delta.dtype), rho)
        layer.detach()
        layer.weight = Matrix(layer.weight.data + rescaled.data, name=layer.weight.name, dtype=layer.weight.dtype)
        kept[name] = float(keep.mean())
    report.rounds.append(RoundReport(index=1, stages={Stage.DENSE.value: stage}, extra={"kept_fraction": kept}))
    report.final_metric = model.evaluate(data.x_eval, data.y_eval)
    report.total_epochs = stage.epochs
    report.extra = {"rho": rho, "pre_drop_metric": stage.eval_metric}
    report.wall_clock_seconds = time.perf_counter() - started
    return report


def random_core_region(p: int, q: int, p_fraction: float, seed: int) -> CoreRegion:
    """Uniformly random subset of the joint row+column list, sized like select_core_region.

    Raises:
        ContractError: If p_fraction is outside (0, 1]
    """
    check_fraction("p_fraction", p_fraction)
    rng = make_rng(seed)
    chosen = rng.choice(p + q, size=ceil_count(p_fraction, p + q), replace=False)
    return CoreRegion(
        row_indices=tuple(int(i) for i in chosen if i < p),
        col_indices=tuple(int(i) - p for i in chosen if i >= p),
        p_fraction=p_fraction,
    )


def sparsity_schedule(target_sparsity: float, n_iterations: int,
                      schedule: SparsitySchedule = SparsitySchedule.GEOMETRIC) -> List[float]:
    """Cumulative sparsity after each IMP iteration t = 1..n.

    Geometric: 1 - (1 - target)^(t/n). Linear: target * t/n.
    """
    check_fraction("target_sparsity", target_sparsity, allow_one=False)
    if n_iterations < 1:
        raise ContractError(f"n_iterations must be >= 1, got {n_iterations}")
    ts = np.arange(1, n_iterations + 1) / n_iterations
    if schedule == SparsitySchedule.LINEAR:
        return list(target_sparsity * ts)
    return list(1.0 - (1.0 - target_sparsity) ** ts)


def prune_smallest(values: np.ndarray, mask: np.ndarray, n_pruned: int) -> np.ndarray:
    """Extend ``mask`` so that exactly ``n_pruned`` entries are zero.

    Surviving entries are removed in order of increasing magnitude, ties by row-major index;
    entries already pruned stay pruned.
    """
    flat_mask = mask.ravel().astype(bool)
    already = int((~flat_mask).sum())
    extra = max(0, n_pruned - already)
    survivors = np.flatnonzero(flat_mask)
    order = survivors[np.argsort(np.abs(values.ravel()[survivors]), kind="stable")]
    new_mask = flat_mask.copy()
    new_mask[order[:extra]] = False
    return new_mask.reshape(mask.shape).astype(np.int8)


def prune_adapter(factors: Tuple[np.ndarray, np.ndarray], masks: Tuple[np.ndarray, np.ndarray],
                  sparsity: float) -> Tuple[np.ndarray, np.ndarray]:
    """Masks of both factors of one adapter pruned to ``sparsity`` as a single pool.

    Magnitudes of left and right compete for one budget of ceil(sparsity N) pruned entries,
    N being the adapter's total factor entry count.
    """
    left, right = (np.asarray(f) for f in factors)
    pooled_values = np.concatenate([left.ravel(), right.ravel()])
    pooled_mask = np.concatenate([masks[0].ravel(), masks[1].ravel()])
    pruned = prune_smallest(pooled_values, pooled_mask, ceil_count(sparsity, pooled_mask.size))
    return pruned[:left.size].reshape(left.shape), pruned[left.size:].reshape(right.shape)


def rewind_factors(initial: Tuple[np.ndarray, np.ndarray], masks: Tuple[np.ndarray, np.ndarray]) -> Tuple[Matrix, Matrix]:
    """Surviving entries back at their initial values, pruned entries at zero."""
    left0, right0 = initial
    left = Matrix(np.where(masks[0], left0, 0.0), trainable=True, name="left", dtype=left0.dtype)
    right = Matrix(np.where(masks[1], right0, 0.0), trainable=True, name="right", dtype=right0.dtype)
    return left, right


def survivor_region_overlap(survivors: np.ndarray, region: CoreRegion) -> float:
    """Fraction of surviving delta entries lying on the region's cross pattern."""
    survivors = np.asarray(survivors, dtype=bool)
    total = int(survivors.sum())
    if total == 0:
        return 0.0
    pattern = region.cross_pattern(*survivors.shape)
    return float((survivors & pattern).sum() / total)


def imp_lora(
        model: TinyModel,
        data: TaskData,
        r: int,
        target_sparsity: float,
        n_iterations: int,
        config: TrainConfig,
        reference_regions: Optional[Dict[str, CoreRegion]] = None
) -> RunReport:
    """Lottery-ticket iterative magnitude pruning of dense rank-r LoRA factors.

    Train dense LoRA, then for t = 1..n: prune the smallest-magnitude surviving entries of
    each adapter, its two factors pooled, up to the scheduled sparsity, rewind survivors to
    their initial values and retrain with the accumulated masks. The final adapters are merged.

    Args:
        model: Model to fine-tune
        data: Train/eval split
        r: LoRA rank
        target_sparsity: Final fraction of pruned factor entries, in (0, 1)
        n_iterations: Prune/rewind/retrain cycles
        config: Run configuration; ``config.epochs`` is used for every (re)training
        reference_regions: Optional core regions per layer; the report then records how many
            surviving delta entries fall on their cross pattern

    Raises:
        ContractError: If target_sparsity is outside (0, 1) or n_iterations < 1
    """
    config.validate()
    schedule = sparsity_schedule(target_sparsity, n_iterations, config.imp_schedule)
    started = time.perf_counter()
    report = _new_report(model, data, config, Arm.IMP)

    adapters, stage = train_dense_adapters(model, data, r, config, stream="imp.0")
    initial = {name: (a.left.data.copy(), a.right.data.copy()) for name, a in adapters.items()}
    masks = {name: (np.ones(a.left.shape, dtype=np.int8), np.ones(a.right.shape, dtype=np.int8))
             for name, a in adapters.items()}
    report.rounds.append(RoundReport(index=0, stages={Stage.DENSE.value: stage}, extra={"sparsity": 0.0}))

    sparsities = []
    for t, target in enumerate(schedule, 1):
        for name, adapter in adapters.items():
            masks[name] = prune_adapter((adapter.left.data, adapter.right.data), masks[name], target)
            model.layer(name).detach()
            left, right = rewind_factors(initial[name], masks[name])
            adapters[name] = SparseLoraModule(left=left, right=right, stage=Stage.DENSE, factor_masks=masks[name])
        pruned = sum(int((m == 0).sum()) for pair in masks.values() for m in pair)
        total = sum(m.size for pair in masks.values() for m in pair)
        sparsity = pruned / total
        sparsities.append(sparsity)
        _, stage = train_stage(model, data, adapters, config, stream=f"imp.{t}")
        extra = {"sparsity": sparsity, "scheduled_sparsity": float(target)}
        if reference_regions:
            extra["region_overlap"] = {
                name: survivor_region_overlap((masks[name][0].astype(int) @ masks[name][1].astype(int)) > 0,
                                              reference_regions[name])
                for name in adapters if name in reference_regions
            }
        report.rounds.append(RoundReport(index=t, stages={Stage.DENSE.value: stage}, extra=extra))
        logger.info(f"IMP iteration {t}/{n_iterations}: sparsity {sparsity:.4f}, eval {stage.eval_metric:.4f}")

    for name in adapters:
        merge_delta(model.layer(name))
    report.final_metric = model.evaluate(data.x_eval, data.y_eval)
    report.total_epochs = sum(s.epochs for rnd in report.rounds for s in rnd.stages.values())
    report.extra = {"sparsity": sparsities, "final_sparsity": sparsities[-1], "rank": r,
                    "cumulative_epochs": [config.epochs * (t + 1) for t in range(n_iterations + 1)]}
    report.wall_clock_seconds = time.perf_counter() - started
    return report
