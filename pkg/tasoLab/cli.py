"""Command-line entry point: ``taso <subcommand> --config cfg.json --out DIR``.

Exit codes: 0 on success, 1 on a usage or contract error, 2 on an I/O error.
"""
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple
import json
import sys

import click
from loguru import logger

from .experiments import (
    compare_importance_kinds, composition_experiment, importance_report, planted_task_pair,
    frame_records, run_ablation, run_arm, sweep_p, write_table,
)
from .importance import CoreRegion, write_region
from .models import save_checkpoint
from .run_results import RunReport, load_report, save_json, strip_wall_clock
from .schema import Arm, TrainConfig
from .tasks import PlantedTask, Task, adapted_config, planted_task_from_config, task_from_csv
from .utils import TasoError, configure_logging

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


def _parse_p_list(ctx, param, value: Optional[str]) -> Optional[List[float]]:
    if value is None:
        return None
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated floats, got {value!r}")


def _run_options(func):
    options = [
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False), help="JSON config document"),
        click.option("--out", "out_dir", default="runs/latest", show_default=True,
                     type=click.Path(file_okay=False), help="Artifact directory"),
        click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Overrides config seed"),
        click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="CSV dataset (features then label); a planted task is generated when omitted"),
        click.option("--header/--no-header", default=None, help="CSV files carry a header row"),
        click.option("--log-level", default="INFO", show_default=True,
                     type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False)),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _load_config(config_path: str, seed: Optional[int], header: Optional[bool], **overrides) -> TrainConfig:
    config = TrainConfig.from_json(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    if header is not None:
        config = replace(config, header=header)
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if overrides:
        config = replace(config, **overrides)
    return config.validate()


def _load_task(config: TrainConfig, data_path: Optional[str]) -> Tuple[Task, TrainConfig]:
    task = task_from_csv(data_path, config) if data_path is not None else planted_task_from_config(config)
    return task, adapted_config(task, config)


def _oracle_regions(task: Task) -> Optional[dict]:
    if isinstance(task, PlantedTask):
        return {task.spec.layer: task.support_region}
    return None


def _summary(report: RunReport) -> str:
    return (f"arm={report.arm} seed={report.seed} {report.metric}={report.final_metric:.4f} "
            f"base={report.base_metric:.4f} trainable={report.trainable} epochs={report.total_epochs}")


def _finish_run(report: RunReport, model, out: Path) -> None:
    report.save(out / "report.json")
    save_checkpoint(model, out / "checkpoint")
    for rnd in report.rounds:
        for name, region in rnd.regions.items():
            write_region(CoreRegion(row_indices=tuple(region["rows"]), col_indices=tuple(region["cols"])),
                         out / "regions" / f"round{rnd.index}.{name}.txt")
    click.echo(_summary(report))


@click.group()
def cli():
    """Importance-guided sparse LoRA laboratory."""


@cli.command()
@_run_options
def importance(config_path, out_dir, seed, data_path, header, log_level):
    """Score every target, write masks, densities, regions and heatmaps."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header)
    task, config = _load_task(config, data_path)
    out = Path(out_dir)
    summary = importance_report(task.student(), task.data, config, out)
    save_json(out / "report.json", {"command": "importance", "seed": config.seed, "targets": summary})
    click.echo(" ".join(f"{name}: rows={info['rows']} cols={info['cols']}" for name, info in summary.items()))


@cli.command("train-taso")
@_run_options
@click.option("--arm", type=click.Choice([Arm.TASO.value, Arm.TASO_NO_LR.value, Arm.TASO_RANDOM_REGION.value]),
              default=Arm.TASO.value, show_default=True)
def train_taso(config_path, out_dir, seed, data_path, header, log_level, arm):
    """Run TASO (or one of its ablation arms) and merge the result."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header)
    task, config = _load_task(config, data_path)
    model = task.student()
    report = run_arm(model, task.data, config, Arm(arm), oracle_regions=_oracle_regions(task))
    _finish_run(report, model, Path(out_dir))


@cli.command("train-lora")
@_run_options
@click.option("--arm", type=click.Choice([Arm.DENSE_LORA.value, Arm.DARE.value]),
              default=Arm.DENSE_LORA.value, show_default=True)
def train_lora(config_path, out_dir, seed, data_path, header, log_level, arm):
    """Run dense LoRA of rank ``dense_rank`` (optionally with DARE drop-and-rescale)."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header)
    task, config = _load_task(config, data_path)
    model = task.student()
    report = run_arm(model, task.data, config, Arm(arm))
    _finish_run(report, model, Path(out_dir))


@cli.command()
@_run_options
def imp(config_path, out_dir, seed, data_path, header, log_level):
    """Iterative magnitude pruning of dense LoRA factors."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header)
    task, config = _load_task(config, data_path)
    model = task.student()
    report = run_arm(model, task.data, config, Arm.IMP, oracle_regions=_oracle_regions(task))
    _finish_run(report, model, Path(out_dir))


@cli.command()
@_run_options
@click.option("--compare-importance", is_flag=True, help="Also compare sensitivity with gradient-only scoring")
def ablate(config_path, out_dir, seed, data_path, header, log_level, compare_importance):
    """TASO against its w/o-lr-scaling and random-region arms on identical seeds."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header)
    task, config = _load_task(config, data_path)
    out = Path(out_dir)
    result = run_ablation(task, config)
    write_table(result.runs, out / "runs.csv", header=config.header)
    write_table(result.deltas, out / "ablation.csv", header=config.header)
    data = {
        "command": "ablate",
        "seed": config.seed,
        "runs": [report.to_dict() for report in result.reports],
        "deltas": frame_records(result.deltas),
    }
    if compare_importance:
        kinds = compare_importance_kinds(task, config)
        write_table(kinds, out / "importance_kinds.csv", header=config.header)
        data["importance_kinds"] = frame_records(kinds)
    save_json(out / "report.json", data)
    click.echo(" ".join(f"{row['arm']}={row['mean_metric']:.4f}" for row in data["deltas"]))


@cli.command("sweep-p")
@_run_options
@click.option("--p-list", callback=_parse_p_list, default=None, help="Comma-separated core-region fractions")
def sweep_p_command(config_path, out_dir, seed, data_path, header, log_level, p_list):
    """TASO final metric against the core-region fraction p."""
    configure_logging(log_level)
    config = _load_config(config_path, seed, header, p_list=p_list)
    task, config = _load_task(config, data_path)
    out = Path(out_dir)
    curve = sweep_p(task, config)
    write_table(curve, out / "curve.csv", header=config.header)
    save_json(out / "report.json", {"command": "sweep-p", "seed": config.seed,
                                    "curve": frame_records(curve)})
    click.echo(" ".join(f"p={row.p:g}:{row.accuracy:.4f}" for row in curve.itertuples()))


@cli.command()
@_run_options
def compose(config_path, out_dir, seed, data_path, header, log_level):
    """Add a dense or pruned second-task module to a fixed dense first-task module."""
    configure_logging(log_level)
    if data_path is not None:
        raise click.UsageError("compose works on a generated pair of planted tasks; drop --data")
    config = _load_config(config_path, seed, header)
    task_a, task_b = planted_task_pair(config, config.seed)
    out = Path(out_dir)
    table = composition_experiment(task_a, task_b, config)
    write_table(table, out / "composition.csv", header=config.header)
    save_json(out / "report.json", {"command": "compose", "seed": config.seed,
                                    "composition": frame_records(table)})
    means = table.groupby("second_kind")["mean_accuracy"].mean()
    click.echo(" ".join(f"{kind}={value:.4f}" for kind, value in means.items()))


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--strip-wall-clock", "strip_clock", is_flag=True, help="Print the stored report without wall-clock fields")
def report(run_dir, strip_clock):
    """Print arm, final metric, trainable count and epochs of RUN_DIR/report.json."""
    data = load_report(Path(run_dir) / "report.json")
    if strip_clock:
        click.echo(json.dumps(strip_wall_clock(data), indent=2, sort_keys=True))
        return
    if "arm" in data:
        click.echo(f"arm={data['arm']} seed={data['seed']} {data['metric']}={data['final_metric']:.4f} "
                   f"trainable={data['trainable']} epochs={data['total_epochs']}")
    else:
        click.echo(f"command={data.get('command', 'unknown')} seed={data.get('seed')}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="taso", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_CONTRACT
    except click.Abort:
        click.echo("Aborted.", err=True)
        return EXIT_CONTRACT
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except TasoError as e:
        logger.error(str(e))
        return EXIT_CONTRACT
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
