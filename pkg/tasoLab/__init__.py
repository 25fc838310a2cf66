# __init__.py

from .utils import (
    TasoError, ContractError, ShapeError, SchemaError, NumericError, configure_logging,
)
from .schema import (
    Stage, OptimizerKind, LossKind, Activation, ImportanceKind, Aggregation,
    RegionSource, SparsitySchedule, Arm, TrainConfig,
)

from .autodiff import Matrix, GradTape, backward, finite_diff_grad
from .serialization import save_tensor, load_tensor

from .importance import (
    ImportanceMap, BinaryMask, CoreRegion, importance_scores, sensitivity_scores, gradient_scores,
    topk_mask, density, select_core_region, core_region_from_scores, write_region, read_region,
)
from .adapter import (
    SparseLoraModule, init_adapter, effective_delta, count_trainable, pruning_ratio, scaled_lr,
    save_adapter, load_adapter,
)
from .models import FrozenLinear, AttentionBlock, TinyModel, build_tiny_classifier, merge_delta
from .models import save_checkpoint, load_checkpoint
from .optimizers import SGD, Adam, make_optimizer
from .finetune import train_stage, taso_finetune

from .baselines import (
    dense_lora_finetune, dare_rescale, dare_finetune, random_core_region, imp_lora,
    sparsity_schedule, prune_smallest, prune_adapter, survivor_region_overlap,
)
from .run_results import StageReport, RoundReport, RunReport

from .tasks import (
    TaskData, PlantedTaskSpec, PlantedTask, LoadedTask, generate_planted_task,
    DatasetSchema, Dataset, load_csv_dataset, write_csv_dataset, split_dataset, adapted_config,
    planted_task_from_config,
)
from .experiments import (
    run_arm, run_ablation, sweep_p, TaskModule, compose_tasks, composition_experiment,
    export_heatmap, compare_importance_kinds, importance_report,
)

__all__ = [
    # Errors and configuration
    "TasoError",
    "ContractError",
    "ShapeError",
    "SchemaError",
    "NumericError",
    "configure_logging",
    "Stage",
    "OptimizerKind",
    "LossKind",
    "Activation",
    "ImportanceKind",
    "Aggregation",
    "RegionSource",
    "SparsitySchedule",
    "Arm",
    "TrainConfig",

    # Tensors
    "Matrix",
    "GradTape",
    "backward",
    "finite_diff_grad",
    "save_tensor",
    "load_tensor",

    # Importance and core regions
    "ImportanceMap",
    "BinaryMask",
    "CoreRegion",
    "importance_scores",
    "sensitivity_scores",
    "gradient_scores",
    "topk_mask",
    "density",
    "select_core_region",
    "core_region_from_scores",
    "write_region",
    "read_region",

    # Adapters, models and training
    "SparseLoraModule",
    "init_adapter",
    "effective_delta",
    "count_trainable",
    "pruning_ratio",
    "scaled_lr",
    "save_adapter",
    "load_adapter",
    "FrozenLinear",
    "AttentionBlock",
    "TinyModel",
    "build_tiny_classifier",
    "merge_delta",
    "save_checkpoint",
    "load_checkpoint",
    "SGD",
    "Adam",
    "make_optimizer",
    "train_stage",
    "taso_finetune",

    # Baselines
    "dense_lora_finetune",
    "dare_rescale",
    "dare_finetune",
    "random_core_region",
    "imp_lora",
    "sparsity_schedule",
    "prune_smallest",
    "prune_adapter",
    "survivor_region_overlap",

    # Reports, tasks and experiments
    "StageReport",
    "RoundReport",
    "RunReport",
    "TaskData",
    "PlantedTaskSpec",
    "PlantedTask",
    "LoadedTask",
    "generate_planted_task",
    "DatasetSchema",
    "Dataset",
    "load_csv_dataset",
    "write_csv_dataset",
    "split_dataset",
    "adapted_config",
    "planted_task_from_config",
    "run_arm",
    "run_ablation",
    "sweep_p",
    "TaskModule",
    "compose_tasks",
    "composition_experiment",
    "export_heatmap",
    "compare_importance_kinds",
    "importance_report",
]

# Package metadata
__version__ = "0.1.0"
__author__ = "tasoLab Team"
__description__ = "Importance-guided sparse rank-1 LoRA with baselines and a desk-scale experiment harness"
