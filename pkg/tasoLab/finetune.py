from typing import Dict, List, Optional, Tuple
import time

import numpy as np
from loguru import logger

from .adapter import SparseLoraModule, init_adapter, scaled_lr
from .autodiff import GradTape
from .importance import CoreRegion, core_region_from_scores, importance_scores
from .models import TinyModel, merge_delta
from .optimizers import make_optimizer
from .run_results import RoundReport, RunReport, StageReport
from .schema import Arm, RegionSource, Stage, TrainConfig
from .tasks import TaskData
from .utils import ContractError, NumericError, derive_seed, make_rng


def stage_learning_rates(adapters: Dict[str, SparseLoraModule], config: TrainConfig) -> Dict[str, float]:
    """Per-layer learning rate: base_lr, scaled by sqrt(1/(1 - rho)) when scaling is enabled."""
    if not config.lr_scaling_enabled:
        return {name: config.base_lr for name in adapters}
    return {name: scaled_lr(config.base_lr, adapter.rho) for name, adapter in adapters.items()}


def train_stage(
        model: TinyModel,
        data: TaskData,
        adapters: Dict[str, SparseLoraModule],
        config: TrainConfig,
        lrs: Optional[Dict[str, float]] = None,
        stream: str = "train"
) -> Tuple[Dict[str, SparseLoraModule], StageReport]:
    """Train attached adapters for ``config.epochs`` epochs; the frozen weights never change.

    Adapters not yet attached are attached to their layers. The structural mask sits in the
    forward pass, so masked factor entries get exactly zero gradient and keep their initial
    values. Batches are reshuffled each epoch from a stream derived from ``config.seed`` and
    ``stream``.

    Args:
        model: Model carrying the adapters
        data: Train/eval split
        adapters: Adapter per layer name, all of the same stage
        config: Epochs, batch size, optimizer and seed
        lrs: Learning rate per layer name; defaults to stage_learning_rates(adapters, config)
        stream: Label of the shuffling stream

    Returns:
        Tuple[Dict[str, SparseLoraModule], StageReport]: Trained adapters (still attached) and metrics

    Raises:
        NumericError: On a non-finite loss, carrying the offending batch index
    """
    lrs = lrs if lrs is not None else stage_learning_rates(adapters, config)
    stages = {adapter.stage for adapter in adapters.values()}
    stage_name = stages.pop().value if len(stages) == 1 else "mixed"
    for name, adapter in adapters.items():
        layer = model.layer(name)
        if layer.adapter is not adapter:
            layer.attach(adapter)

    optimizer = make_optimizer(config)
    report = StageReport(
        stage=stage_name,
        rho={name: adapter.rho for name, adapter in adapters.items()},
        trainable={name: adapter.trainable_count() for name, adapter in adapters.items()},
        lr=dict(lrs),
    )
    started = time.perf_counter()
    batch_index = 0
    for epoch in range(config.epochs):
        rng = make_rng(config.seed, stream, epoch) if config.shuffle else None
        losses = []
        for x, y in data.batches(config.batch_size, rng):
            try:
                with GradTape() as tape:
                    loss = model.loss(x, y)
            except NumericError as e:
                logger.error(f"Non-finite loss in {stage_name} stage, epoch {epoch}, batch {batch_index}")
                raise NumericError(str(e), batch_index=batch_index) from e
            grads = tape.backward(loss)
            params, param_grads, param_lrs = {}, {}, {}
            for name, adapter in adapters.items():
                for role, factor in (("left", adapter.left), ("right", adapter.right)):
                    key = f"{name}.{role}"
                    params[key] = factor
                    param_grads[key] = grads[factor]
                    param_lrs[key] = lrs[name]
            updated = optimizer.step(params, param_grads, param_lrs)
            for name, adapter in adapters.items():
                adapter.with_factors(updated[f"{name}.left"], updated[f"{name}.right"])
            losses.append(loss.item())
            batch_index += 1
        report.loss_curve.append(float(np.mean(losses)))
        logger.debug(f"{stage_name} stage epoch {epoch + 1}/{config.epochs}: loss {report.loss_curve[-1]:.6f}")
    report.epochs = config.epochs
    report.eval_metric = model.evaluate(data.x_eval, data.y_eval)
    report.wall_clock_seconds = time.perf_counter() - started
    return adapters, report


def round_regions(
        model: TinyModel,
        data: TaskData,
        targets: List[str],
        config: TrainConfig,
        label: str,
        oracle_regions: Optional[Dict[str, CoreRegion]] = None
) -> Dict[str, CoreRegion]:
    """Core region per target from importance, a random draw, or an oracle.

    Importance is computed independently per target matrix on the current (merged) weights.
    """
    from .baselines import random_core_region

    regions = {}
    for name in targets:
        p, q = model.layer(name).weight.shape
        if config.region_source == RegionSource.ORACLE:
            if not oracle_regions or name not in oracle_regions:
                raise ContractError(f"oracle region source needs a region for {name}")
            regions[name] = oracle_regions[name]
        elif config.region_source == RegionSource.RANDOM:
            regions[name] = random_core_region(p, q, config.p_fraction, derive_seed(config.seed, label, name))
        else:
            imp = importance_scores(
                model, data.batches(config.batch_size), name,
                kind=config.importance_kind,
                aggregation=config.importance_aggregation,
                max_batches=config.importance_batches,
            )
            _, regions[name] = core_region_from_scores(imp, config.k, config.p_fraction)
        logger.debug(f"{label} {name}: rows={list(regions[name].row_indices)} "
                     f"cols={list(regions[name].col_indices)}")
    return regions


def default_arm(config: TrainConfig) -> Arm:
    if config.region_source == RegionSource.RANDOM:
        return Arm.TASO_RANDOM_REGION
    if not config.lr_scaling_enabled:
        return Arm.TASO_NO_LR
    return Arm.TASO


def _sparse_stage(
        model: TinyModel,
        data: TaskData,
        targets: List[str],
        regions: Dict[str, CoreRegion],
        stage: Stage,
        config: TrainConfig,
        round_index: int
) -> StageReport:
    """Train and merge one stage over every target.

    A target whose region has no entry on this stage's side is fully pruned for the stage:
    it gets no adapter and is recorded with rho 1 and zero trainable parameters. The stage
    still spends ``config.epochs`` so every arm runs the same epoch schedule.
    """
    adapters, pruned = {}, []
    for name in targets:
        region = regions[name]
        side = region.row_indices if stage == Stage.ROW else region.col_indices
        if not side:
            logger.warning(f"Round {round_index}: core region of {name} has no {stage.value}s; "
                           f"{name} is fully pruned in the {stage.value} stage")
            pruned.append(name)
            continue
        layer = model.layer(name)
        adapters[name] = init_adapter(
            layer.p, layer.q, config.rank, stage, region,
            seed=derive_seed(config.seed, "init", round_index, stage.value, name),
            dtype=layer.weight.dtype,
        )
    if not adapters:
        logger.warning(f"Round {round_index}: no target has a live {stage.value}; nothing to train")
        return StageReport(
            stage=stage.value,
            eval_metric=model.evaluate(data.x_eval, data.y_eval),
            rho={name: 1.0 for name in pruned},
            trainable={name: 0 for name in pruned},
            epochs=config.epochs,
        )

    lrs = stage_learning_rates(adapters, config)
    _, report = train_stage(model, data, adapters, config, lrs, stream=f"round{round_index}.{stage.value}")
    for name in adapters:
        merge_delta(model.layer(name))
    for name in pruned:
        report.rho[name] = 1.0
        report.trainable[name] = 0
    logger.info(f"Round {round_index} {stage.value} stage: eval {report.eval_metric:.4f}, "
                f"trainable {report.total_trainable}, lr {lrs}")
    return report


def taso_finetune(
        model: TinyModel,
        data: TaskData,
        config: TrainConfig,
        oracle_regions: Optional[Dict[str, CoreRegion]] = None,
        arm: Optional[Arm] = None
) -> RunReport:
    """Importance-guided sparse rank-r LoRA fine-tuning, merged into ``model`` in place.

    Each round: score the targets on the current weights, derive core regions, then train
    and merge a row-stage adapter and a column-stage adapter per target, each with its own
    sparsity-scaled learning rate.

    Args:
        model: Model to fine-tune; its frozen weights absorb every merged delta
        data: Train/eval split
        config: Run configuration
        oracle_regions: Regions used when ``config.region_source`` is ORACLE
        arm: Label for the report; derived from the config when None

    Returns:
        RunReport: Per-round metrics, rho values, trainable counts and epoch totals
    """
    config.validate()
    if model.attached_adapters():
        raise ContractError(f"layers {list(model.attached_adapters())} already carry adapters")
    arm = arm or default_arm(config)
    targets = list(config.targets) if config.targets else model.targets()
    started = time.perf_counter()
    report = RunReport(
        arm=arm.value,
        seed=config.seed,
        metric="accuracy" if model.higher_is_better else "mse",
        base_metric=model.evaluate(data.x_eval, data.y_eval),
        config=config.to_dict(),
    )
    logger.info(f"{arm.value}: {config.rounds} round(s) over {targets}, base {report.metric} {report.base_metric:.4f}")

    first_regions = None
    for round_index in range(1, config.rounds + 1):
        if config.freeze_regions and first_regions is not None:
            regions = first_regions
        else:
            regions = round_regions(model, data, targets, config, f"round{round_index}", oracle_regions)
        first_regions = first_regions or regions
        round_report = RoundReport(index=round_index)
        round_report.regions = {name: {"rows": list(r.row_indices), "cols": list(r.col_indices)}
                                for name, r in regions.items()}
        round_report.stages[Stage.ROW.value] = _sparse_stage(
            model, data, targets, regions, Stage.ROW, config, round_index)
        if config.recompute_between_stages and config.region_source != RegionSource.ORACLE:
            regions = round_regions(model, data, targets, config, f"round{round_index}.column", oracle_regions)
            round_report.extra["column_regions"] = {
                name: {"rows": list(r.row_indices), "cols": list(r.col_indices)} for name, r in regions.items()}
        round_report.stages[Stage.COLUMN.value] = _sparse_stage(
            model, data, targets, regions, Stage.COLUMN, config, round_index)
        report.rounds.append(round_report)

    report.final_metric = model.evaluate(data.x_eval, data.y_eval)
    report.total_epochs = sum(stage.epochs for rnd in report.rounds for stage in rnd.stages.values())
    report.wall_clock_seconds = time.perf_counter() - started
    logger.info(f"{arm.value}: final {report.metric} {report.final_metric:.4f}, "
                f"trainable {report.trainable}, epochs {report.total_epochs}")
    return report
