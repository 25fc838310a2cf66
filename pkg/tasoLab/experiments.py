from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from .autodiff import Matrix
from .baselines import dare_finetune, dense_lora_finetune, imp_lora
from .finetune import taso_finetune
from .importance import (
    BinaryMask, CoreRegion, ImportanceMap, core_region_from_scores, density,
    importance_scores, write_region,
)
from .models import TinyModel
from .run_results import RunReport
from .schema import Arm, ImportanceKind, RegionSource, Stage, TrainConfig
from .serialization import save_tensor
from .tasks import PlantedTask, PlantedTaskSpec, Task, TaskData, adapted_config, generate_planted_task
from .utils import ContractError, ShapeError, ceil_count, check_fraction, derive_seed, make_rng

ABLATION_ARMS = (Arm.TASO, Arm.TASO_NO_LR, Arm.TASO_RANDOM_REGION)

HeatmapSource = Union[Matrix, np.ndarray, BinaryMask, ImportanceMap]


def run_arm(
        model: TinyModel,
        data: TaskData,
        config: TrainConfig,
        arm: Arm,
        oracle_regions: Optional[Dict[str, CoreRegion]] = None
) -> RunReport:
    """Run one experiment arm on ``model`` in place.

    The three TASO arms share the TASO pipeline and differ in a single switch: the
    learning-rate scaling (taso_no_lr) or the region source (taso_random_region).
    Dense, DARE and IMP use ``config.dense_rank``.
    """
    if arm in (Arm.TASO, Arm.TASO_NO_LR, Arm.TASO_RANDOM_REGION):
        source = config.region_source if config.region_source == RegionSource.ORACLE else RegionSource.IMPORTANCE
        arm_config = replace(config, lr_scaling_enabled=True, region_source=source)
        if arm == Arm.TASO_NO_LR:
            arm_config = replace(arm_config, lr_scaling_enabled=False)
        elif arm == Arm.TASO_RANDOM_REGION:
            arm_config = replace(arm_config, region_source=RegionSource.RANDOM)
        return taso_finetune(model, data, arm_config, oracle_regions=oracle_regions, arm=arm)
    if arm == Arm.DENSE_LORA:
        return dense_lora_finetune(model, data, config.dense_rank, config)
    if arm == Arm.DARE:
        return dare_finetune(model, data, config.dense_rank, config)
    if arm == Arm.IMP:
        return imp_lora(model, data, config.dense_rank, config.imp_target_sparsity,
                        config.imp_iterations, config, reference_regions=oracle_regions)
    raise ContractError(f"unknown arm {arm!r}")


def _better(a: float, b: float, higher_is_better: bool) -> bool:
    return a > b if higher_is_better else a < b


@dataclass
class AblationResult:
    """Reports of every (arm, seed) run plus the summary tables.

    Attributes:
        reports (List[RunReport]): Ordered by arm, then seed
        runs (pd.DataFrame): One row per run: arm, seed, metric, base_metric, final_metric, trainable, total_epochs
        deltas (pd.DataFrame): One row per arm: mean and std of the final metric, difference to taso,
            and the number of seeds in which taso strictly beats the arm
    """
    reports: List[RunReport] = field(default_factory=list)
    runs: pd.DataFrame = field(default_factory=pd.DataFrame)
    deltas: pd.DataFrame = field(default_factory=pd.DataFrame)

    def report(self, arm: Arm, seed: int) -> RunReport:
        for report in self.reports:
            if report.arm == arm.value and report.seed == seed:
                return report
        raise ContractError(f"no {arm.value} run for seed {seed}")


def ablation_seeds(config: TrainConfig) -> List[int]:
    return [config.seed + i for i in range(config.n_seeds)]


def _run_job(task: Task, config: TrainConfig, arm: Arm) -> RunReport:
    return run_arm(task.student(), task.data, config, arm)


def run_ablation(task: Task, config: TrainConfig, arms: Sequence[Arm] = ABLATION_ARMS) -> AblationResult:
    """Run every arm on identical seeds and tabulate the differences to TASO.

    Each (arm, seed) run gets its own copy of the frozen base; runs fan out over
    ``config.max_workers`` threads and are collected in a fixed order. On a planted task
    without explicit ``targets`` every arm adapts the planted layer only.

    Args:
        task: Task shared by every run
        config: Base configuration; ``config.seed + i`` for i < ``config.n_seeds`` are the seeds
        arms: Arms to compare; the first one is the reference of the delta table

    Returns:
        AblationResult: Reports and tables
    """
    config = adapted_config(task, config).validate()
    seeds = ablation_seeds(config)
    jobs = [(arm, seed) for arm in arms for seed in seeds]
    results: Dict[Tuple[Arm, int], RunReport] = {}
    logger.info(f"Ablation: {len(arms)} arm(s) x {len(seeds)} seed(s) on {config.max_workers} worker(s)")

    with ThreadPoolExecutor(max_workers=config.max_workers) as executor:
        futures = {executor.submit(_run_job, task, replace(config, seed=seed), arm): (arm, seed)
                   for arm, seed in jobs}
        for future in as_completed(futures):
            arm, seed = futures[future]
            try:
                results[(arm, seed)] = future.result()
            except Exception as e:
                logger.error(f"Ablation run {arm.value} seed {seed} failed: {e}")
                raise

    reports = [results[job] for job in jobs]
    runs = pd.DataFrame([{
        "arm": r.arm,
        "seed": r.seed,
        "metric": r.metric,
        "base_metric": r.base_metric,
        "final_metric": r.final_metric,
        "trainable": r.trainable,
        "total_epochs": r.total_epochs,
    } for r in reports], columns=["arm", "seed", "metric", "base_metric", "final_metric",
                                  "trainable", "total_epochs"])

    reference = arms[0]
    higher = reports[0].higher_is_better if reports else True
    ref_scores = {seed: results[(reference, seed)].final_metric for seed in seeds}
    rows = []
    for arm in arms:
        scores = np.array([results[(arm, seed)].final_metric for seed in seeds])
        rows.append({
            "arm": arm.value,
            "mean_metric": float(scores.mean()),
            "std_metric": float(scores.std()),
            "delta": float(scores.mean() - np.mean(list(ref_scores.values()))),
            "reference_wins": int(sum(_better(ref_scores[seed], results[(arm, seed)].final_metric, higher)
                                      for seed in seeds)) if arm != reference else 0,
            "seeds": len(seeds),
        })
    deltas = pd.DataFrame(rows, columns=["arm", "mean_metric", "std_metric", "delta", "reference_wins", "seeds"])
    for row in rows:
        logger.info(f"Ablation {row['arm']}: mean {row['mean_metric']:.4f} (delta {row['delta']:+.4f}, "
                    f"{reference.value} wins {row['reference_wins']}/{len(seeds)})")
    return AblationResult(reports=reports, runs=runs, deltas=deltas)


def _mean_rho(report: RunReport, stage: Stage) -> float:
    rhos = [rho for rnd in report.rounds[:1] for name, s in rnd.stages.items() if name == stage.value
            for rho in s.rho.values()]
    # no reported layer means nothing trained, i.e. every entry is pruned
    return float(np.mean(rhos)) if rhos else 1.0


def sweep_p(task: Task, config: TrainConfig, p_list: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """TASO final metric as a function of the core-region fraction.

    Every point uses the same seed and a fresh copy of the base.

    Returns:
        pd.DataFrame: Columns p, accuracy, trainable, rho_row, rho_col; one row per entry of p_list,
            in the given order (``accuracy`` holds the MSE on regression tasks)

    Raises:
        ContractError: If p_list is empty or holds a value outside (0, 1]
    """
    p_list = list(config.p_list if p_list is None else p_list)
    if not p_list:
        raise ContractError("p_list must not be empty")
    for p in p_list:
        check_fraction("p", p)
    config = adapted_config(task, config).validate()

    with ThreadPoolExecutor(max_workers=config.max_workers) as executor:
        futures = [executor.submit(_run_job, task, replace(config, p_fraction=p), Arm.TASO) for p in p_list]
        reports = [future.result() for future in futures]

    curve = pd.DataFrame([{
        "p": p,
        "accuracy": report.final_metric,
        "trainable": report.trainable,
        "rho_row": _mean_rho(report, Stage.ROW),
        "rho_col": _mean_rho(report, Stage.COLUMN),
    } for p, report in zip(p_list, reports)], columns=["p", "accuracy", "trainable", "rho_row", "rho_col"])
    best = curve["accuracy"].max() if reports[0].higher_is_better else curve["accuracy"].min()
    logger.info(f"p-sweep over {p_list}: best {best:.4f}")
    return curve


def frame_records(frame: pd.DataFrame) -> List[Dict[str, object]]:
    """Rows as dicts of plain Python scalars, ready for json."""
    return [{key: value.item() if isinstance(value, np.generic) else value for key, value in row.items()}
            for row in frame.to_dict(orient="records")]


def write_table(frame: pd.DataFrame, path: Union[str, Path], header: bool = False) -> Path:
    """CSV with ',' separators and '\\n' line endings; no header unless asked."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, header=header, lineterminator="\n", float_format="%.17g")
    return path


@dataclass
class TaskModule:
    """Merged weight deltas of one fine-tuned task, relative to a shared frozen base.

    Attributes:
        name (str): Task label
        base (TinyModel): Frozen base the deltas apply to
        deltas (Dict[str, np.ndarray]): Delta per adapted layer
        kind (str): dense or pruned
    """
    name: str
    base: TinyModel
    deltas: Dict[str, np.ndarray]
    kind: str = "dense"

    @classmethod
    def from_models(cls, name: str, base: TinyModel, tuned: TinyModel, kind: str = "dense") -> "TaskModule":
        """Deltas of every layer whose weight differs between ``tuned`` and ``base``."""
        deltas = {}
        tuned_layers = tuned.linear_layers()
        for layer_name, layer in base.linear_layers().items():
            diff = tuned_layers[layer_name].weight.data - layer.weight.data
            if np.any(diff != 0):
                deltas[layer_name] = diff
        return cls(name=name, base=base, deltas=deltas, kind=kind)

    @classmethod
    def zero(cls, name: str, base: TinyModel) -> "TaskModule":
        return cls(name=name, base=base, deltas={}, kind="zero")

    def trainable_support(self) -> int:
        return int(sum(np.count_nonzero(d) for d in self.deltas.values()))


def apply_modules(base: TinyModel, modules: Sequence[TaskModule]) -> TinyModel:
    """Copy of ``base`` with W0 + sum of every module's delta on each layer.

    Raises:
        ContractError: If a module was built on another base or targets an unknown layer
        ShapeError: If a delta does not match its layer's shape
    """
    digest = base.weights_digest()
    model = base.copy()
    for module in modules:
        if module.base.weights_digest() != digest:
            raise ContractError(f"module {module.name} was trained on a different base model")
        for name, delta in module.deltas.items():
            layer = model.layer(name)
            if delta.shape != layer.weight.shape:
                raise ShapeError(f"module {module.name}: delta {delta.shape} does not match {name} {layer.weight.shape}")
            layer.weight = Matrix(layer.weight.data + delta, name=layer.weight.name, dtype=layer.weight.dtype)
    return model


def compose_tasks(
        base_module: TaskModule,
        second_module: TaskModule,
        eval_pair: Tuple[TaskData, TaskData]
) -> Dict[str, float]:
    """Evaluate W0 + delta_base + delta_second on both tasks.

    Returns:
        Dict[str, float]: ``first`` and ``second`` eval metrics and their unweighted ``mean``
    """
    model = apply_modules(base_module.base, [base_module, second_module])
    first_data, second_data = eval_pair
    first = model.evaluate(first_data.x_eval, first_data.y_eval)
    second = model.evaluate(second_data.x_eval, second_data.y_eval)
    result = {"first": first, "second": second, "mean": (first + second) / 2.0}
    logger.info(f"Composition {base_module.name}+{second_module.name} ({second_module.kind}): "
                f"{first:.4f} / {second:.4f}, mean {result['mean']:.4f}")
    return result


def planted_task_pair(config: TrainConfig, seed: int) -> Tuple[PlantedTask, PlantedTask]:
    """Two planted tasks on one shared base whose supports are disjoint.

    Both perturbations sit on ``config.planted_layer``, the output layer when unset. The
    joint row+column list of that layer is permuted once; task A takes the
    first ceil(planted_support_fraction (p + q)) entries and task B the next ones.
    """
    spec_a = PlantedTaskSpec.from_config(replace(config, planted_rows=[], planted_cols=[]), seed)
    spec_a.base_seed = seed
    p, q = spec_a.build_base(seed).layer(spec_a.layer).weight.shape
    m = ceil_count(config.planted_support_fraction, p + q)
    if 2 * m > p + q:
        raise ContractError(f"cannot draw two disjoint supports of size {m} from {p + q} rows and columns")
    order = make_rng(seed, "pair").permutation(p + q)
    tasks = []
    for label, chosen in (("a", order[:m]), ("b", order[m:2 * m])):
        spec = replace(spec_a, rows=sorted(int(i) for i in chosen if i < p),
                       cols=sorted(int(i) - p for i in chosen if i >= p))
        tasks.append(generate_planted_task(spec, derive_seed(seed, "task", label)))
    return tasks[0], tasks[1]


def composition_experiment(task_a: PlantedTask, task_b: PlantedTask, config: TrainConfig) -> pd.DataFrame:
    """Fix a dense module for one task and add a dense or a TASO-pruned module of the other.

    Both orders (a, b) and (b, a) are evaluated from the same four trained modules.

    Returns:
        pd.DataFrame: Columns base_task, second_task, second_kind, base_accuracy, second_accuracy, mean_accuracy
    """
    if task_a.base.weights_digest() != task_b.base.weights_digest():
        raise ContractError("composed tasks must share the frozen base model")
    config = adapted_config(task_a, config)
    modules: Dict[Tuple[str, str], TaskModule] = {}
    for label, task in (("a", task_a), ("b", task_b)):
        dense_model = task.student()
        run_arm(dense_model, task.data, config, Arm.DENSE_LORA)
        modules[(label, "dense")] = TaskModule.from_models(label, task.base, dense_model, kind="dense")
        pruned_model = task.student()
        run_arm(pruned_model, task.data, config, Arm.TASO)
        modules[(label, "pruned")] = TaskModule.from_models(label, task.base, pruned_model, kind="pruned")

    data = {"a": task_a.data, "b": task_b.data}
    rows = []
    for first, second in (("a", "b"), ("b", "a")):
        for kind in ("dense", "pruned"):
            result = compose_tasks(modules[(first, "dense")], modules[(second, kind)], (data[first], data[second]))
            rows.append({
                "base_task": first,
                "second_task": second,
                "second_kind": kind,
                "base_accuracy": result["first"],
                "second_accuracy": result["second"],
                "mean_accuracy": result["mean"],
            })
    return pd.DataFrame(rows, columns=["base_task", "second_task", "second_kind", "base_accuracy",
                                       "second_accuracy", "mean_accuracy"])


def _heatmap_array(source: HeatmapSource) -> np.ndarray:
    if isinstance(source, BinaryMask):
        return source.bits.data
    if isinstance(source, ImportanceMap):
        return source.scores.data
    if isinstance(source, Matrix):
        return source.data
    array = np.asarray(source)
    if array.ndim != 2:
        raise ShapeError(f"heatmap needs a matrix, got shape {array.shape}")
    return array


def export_heatmap(source: HeatmapSource, path: Union[str, Path]) -> Path:
    """Write a matrix as headerless CSV, one row per line.

    Integer-valued matrices (masks) are written as integers, everything else with
    17 significant digits.

    Raises:
        OSError: If the file cannot be written
    """
    array = _heatmap_array(source)
    if np.all(array == np.round(array)):
        array = array.astype(np.int64)
    return write_table(pd.DataFrame(array), path, header=False)


def read_heatmap(path: Union[str, Path]) -> np.ndarray:
    return pd.read_csv(path, header=None, float_precision="round_trip").to_numpy()


def compare_importance_kinds(task: Task, config: TrainConfig,
                             seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """TASO with sensitivity scoring against gradient-only scoring on identical seeds.

    Returns:
        pd.DataFrame: Columns seed, importance_kind, final_metric, trainable
    """
    config = adapted_config(task, config)
    seeds = list(seeds) if seeds is not None else ablation_seeds(config)
    kinds = [ImportanceKind.SENSITIVITY, ImportanceKind.GRADIENT]
    jobs = [(kind, seed) for kind in kinds for seed in seeds]
    with ThreadPoolExecutor(max_workers=config.max_workers) as executor:
        futures = [executor.submit(_run_job, task, replace(config, seed=seed, importance_kind=kind), Arm.TASO)
                   for kind, seed in jobs]
        reports = [future.result() for future in futures]
    frame = pd.DataFrame([{
        "seed": seed,
        "importance_kind": kind.value,
        "final_metric": report.final_metric,
        "trainable": report.trainable,
    } for (kind, seed), report in zip(jobs, reports)],
        columns=["seed", "importance_kind", "final_metric", "trainable"])
    means = frame.groupby("importance_kind")["final_metric"].mean()
    logger.info(f"Importance kinds over {len(seeds)} seed(s): " +
                ", ".join(f"{kind} {value:.4f}" for kind, value in means.items()))
    return frame


def importance_report(
        model: TinyModel,
        data: TaskData,
        config: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None
) -> Dict[str, Dict[str, object]]:
    """Importance, mask, densities and core region of every target.

    With ``out_dir`` each target ``name`` also gets ``name.scores.tsr``, ``name.mask.tsr``,
    ``name.u_row.tsr``, ``name.u_col.tsr``, ``name.region.txt``, ``name.heatmap.csv`` (mask)
    and ``name.scores.csv``.

    Returns:
        Dict[str, Dict[str, object]]: Per target: rows, cols, mask_ones, sample_count, kind
    """
    config.validate()
    targets = list(config.targets) if config.targets else model.targets()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in targets:
        imp = importance_scores(
            model, data.batches(config.batch_size), name,
            kind=config.importance_kind,
            aggregation=config.importance_aggregation,
            max_batches=config.importance_batches,
        )
        mask, region = core_region_from_scores(imp, config.k, config.p_fraction)
        u_row, u_col = density(mask)
        summary[name] = {
            "rows": list(region.row_indices),
            "cols": list(region.col_indices),
            "mask_ones": mask.ones,
            "sample_count": imp.sample_count,
            "kind": imp.kind.value,
        }
        if out is not None:
            save_tensor(out / f"{name}.scores.tsr", imp.scores)
            save_tensor(out / f"{name}.mask.tsr", mask.bits)
            save_tensor(out / f"{name}.u_row.tsr", np.asarray(u_row, dtype=np.float64))
            save_tensor(out / f"{name}.u_col.tsr", np.asarray(u_col, dtype=np.float64))
            write_region(region, out / f"{name}.region.txt")
            export_heatmap(mask, out / f"{name}.heatmap.csv")
            export_heatmap(imp.scores, out / f"{name}.scores.csv")
    return summary
