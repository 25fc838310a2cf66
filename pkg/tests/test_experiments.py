from dataclasses import replace

import numpy as np
import pytest

from tasoLab.autodiff import Matrix
from tasoLab.baselines import dense_lora_finetune
from tasoLab.experiments import (
    ABLATION_ARMS, TaskModule, apply_modules, compare_importance_kinds, compose_tasks, composition_experiment,
    export_heatmap, frame_records, importance_report, planted_task_pair, read_heatmap, run_ablation, run_arm,
    sweep_p, write_table,
)
from tasoLab.importance import density, importance_scores, read_region, topk_mask
from tasoLab.models import build_tiny_classifier
from tasoLab.run_results import strip_wall_clock
from tasoLab.schema import Arm, ImportanceKind, LossKind, RegionSource, TrainConfig
from tasoLab.serialization import load_array
from tasoLab.tasks import PlantedTaskSpec, adapted_config, generate_planted_task, planted_task_from_config
from tasoLab.utils import ContractError, ceil_count


class TestRunArm:

    @pytest.mark.parametrize("arm", list(Arm))
    def test_every_arm_labels_its_report(self, planted_task, tiny_config, arm):
        model = planted_task.student()
        report = run_arm(model, planted_task.data, tiny_config, arm)
        assert report.arm == arm.value
        assert report.metric == "accuracy"
        assert 0.0 <= report.final_metric <= 1.0
        assert model.attached_adapters() == {}

    def test_oracle_regions_reach_taso(self, planted_task, tiny_config):
        oracle = {planted_task.spec.layer: planted_task.support_region}
        config = replace(tiny_config, region_source=RegionSource.ORACLE, targets=[planted_task.spec.layer])
        report = run_arm(planted_task.student(), planted_task.data, config, Arm.TASO, oracle_regions=oracle)
        region = report.rounds[0].regions[planted_task.spec.layer]
        assert tuple(region["rows"]) == planted_task.support_region.row_indices
        assert tuple(region["cols"]) == planted_task.support_region.col_indices


class TestAblation:

    @pytest.fixture
    def result(self, planted_task, tiny_config):
        return run_ablation(planted_task, tiny_config)

    def test_tables(self, result, tiny_config):
        assert len(result.reports) == len(ABLATION_ARMS) * tiny_config.n_seeds
        assert list(result.runs["arm"]) == ["taso", "taso", "taso_no_lr", "taso_no_lr",
                                            "taso_random_region", "taso_random_region"]
        assert list(result.runs["seed"]) == [7, 8] * 3
        assert list(result.deltas["arm"]) == [arm.value for arm in ABLATION_ARMS]
        taso = result.deltas.iloc[0]
        assert taso["delta"] == 0.0 and taso["reference_wins"] == 0
        assert all(0 <= wins <= tiny_config.n_seeds for wins in result.deltas["reference_wins"])

    def test_lr_switch_keeps_regions(self, result):
        for seed in (7, 8):
            taso = result.report(Arm.TASO, seed)
            no_lr = result.report(Arm.TASO_NO_LR, seed)
            assert taso.rounds[0].regions == no_lr.rounds[0].regions
            assert taso.trainable == no_lr.trainable

    def test_lr_switch_changes_only_learning_rates(self, result, tiny_config):
        taso = result.report(Arm.TASO, 7).rounds[0].stages["row"]
        no_lr = result.report(Arm.TASO_NO_LR, 7).rounds[0].stages["row"]
        assert all(lr == tiny_config.base_lr for lr in no_lr.lr.values())
        assert all(lr >= tiny_config.base_lr for lr in taso.lr.values())

    def test_parallel_runs_match_a_direct_run(self, result, planted_task, tiny_config):
        config = adapted_config(planted_task, replace(tiny_config, seed=8))
        direct = run_arm(planted_task.student(), planted_task.data, config, Arm.TASO)
        assert strip_wall_clock(direct.to_dict()) == strip_wall_clock(result.report(Arm.TASO, 8).to_dict())

    def test_missing_run(self, result):
        with pytest.raises(ContractError):
            result.report(Arm.IMP, 7)


class TestSweepP:

    def test_curve(self, planted_task, tiny_config):
        curve = sweep_p(planted_task, tiny_config)
        assert list(curve.columns) == ["p", "accuracy", "trainable", "rho_row", "rho_col"]
        assert list(curve["p"]) == [0.2, 1.0]
        full = curve.iloc[1]
        assert full["rho_row"] == 0.0 and full["rho_col"] == 0.0
        config = adapted_config(planted_task, replace(tiny_config, p_fraction=1.0))
        direct = run_arm(planted_task.student(), planted_task.data, config, Arm.TASO)
        assert full["accuracy"] == direct.final_metric
        assert full["trainable"] == direct.trainable

    def test_explicit_list_order(self, planted_task, tiny_config):
        curve = sweep_p(planted_task, tiny_config, p_list=[1.0, 0.5])
        assert list(curve["p"]) == [1.0, 0.5]

    @pytest.mark.parametrize("p_list", [[], [0.0], [1.5]])
    def test_invalid(self, planted_task, tiny_config, p_list):
        with pytest.raises(ContractError):
            sweep_p(planted_task, tiny_config, p_list=p_list)


class TestComposition:

    def test_zero_module_keeps_first_task(self, planted_task, tiny_config):
        tuned = planted_task.student()
        dense_lora_finetune(tuned, planted_task.data, 2, tiny_config)
        module = TaskModule.from_models("a", planted_task.base, tuned)
        assert module.trainable_support() > 0
        data = planted_task.data
        result = compose_tasks(module, TaskModule.zero("z", planted_task.base), (data, data))
        assert result["first"] == pytest.approx(tuned.evaluate(data.x_eval, data.y_eval))
        assert result["mean"] == pytest.approx((result["first"] + result["second"]) / 2)

    def test_modules_need_the_same_base(self, planted_task):
        other = build_tiny_classifier([6, 8, 3], seed=99)
        with pytest.raises(ContractError):
            apply_modules(planted_task.base, [TaskModule.zero("x", other)])

    def test_apply_adds_deltas(self, planted_task):
        delta = np.ones((8, 6))
        model = apply_modules(planted_task.base, [TaskModule("d", planted_task.base, {"layer0": delta})] * 2)
        np.testing.assert_allclose(model.layer("layer0").weight.data,
                                   planted_task.base.layer("layer0").weight.data + 2.0)

    def test_task_pair_shares_base_with_disjoint_supports(self, tiny_config):
        task_a, task_b = planted_task_pair(tiny_config, seed=11)
        assert task_a.base.weights_digest() == task_b.base.weights_digest()
        assert task_a.spec.layer == task_b.spec.layer == "layer1"
        size = ceil_count(tiny_config.planted_support_fraction, 3 + 8)
        assert task_a.support_region.size == size == task_b.support_region.size
        assert not set(task_a.spec.rows) & set(task_b.spec.rows)
        assert not set(task_a.spec.cols) & set(task_b.spec.cols)

    def test_task_pair_needs_room(self, tiny_config):
        with pytest.raises(ContractError):
            planted_task_pair(replace(tiny_config, planted_support_fraction=0.6), seed=0)

    def test_experiment_table(self, tiny_config):
        task_a, task_b = planted_task_pair(tiny_config, seed=11)
        table = composition_experiment(task_a, task_b, tiny_config)
        assert len(table) == 4
        assert list(table["second_kind"]) == ["dense", "pruned", "dense", "pruned"]
        assert list(table["base_task"]) == ["a", "a", "b", "b"]
        np.testing.assert_allclose(table["mean_accuracy"], (table["base_accuracy"] + table["second_accuracy"]) / 2)


class TestHeatmaps:

    def test_mask_written_as_integers(self, tmp_path):
        path = export_heatmap(Matrix([[1.0, 0.0], [0.0, 1.0]]), tmp_path / "mask.csv")
        assert path.read_text(encoding="utf-8") == "1,0\n0,1\n"

    def test_scores_round_trip(self, tmp_path, rng):
        scores = np.abs(rng.normal(size=(4, 3)))
        path = export_heatmap(scores, tmp_path / "scores.csv")
        assert read_heatmap(path).tobytes() == scores.tobytes()

    def test_write_table_header_switch(self, tmp_path, planted_task, tiny_config):
        curve = sweep_p(planted_task, tiny_config, p_list=[1.0])
        plain = write_table(curve, tmp_path / "plain.csv").read_text(encoding="utf-8")
        headed = write_table(curve, tmp_path / "headed.csv", header=True).read_text(encoding="utf-8")
        assert headed.splitlines()[0] == "p,accuracy,trainable,rho_row,rho_col"
        assert headed.splitlines()[1:] == plain.splitlines()

    def test_frame_records_are_plain_python(self, planted_task, tiny_config):
        records = frame_records(sweep_p(planted_task, tiny_config, p_list=[1.0]))
        assert type(records[0]["trainable"]) is int
        assert type(records[0]["accuracy"]) is float


class TestImportanceReport:

    def test_writes_artifacts(self, tmp_path, planted_task, tiny_config):
        summary = importance_report(planted_task.student(), planted_task.data, tiny_config, tmp_path)
        assert list(summary) == ["layer0", "layer1"]
        for name, info in summary.items():
            for suffix in ("scores.tsr", "mask.tsr", "u_row.tsr", "u_col.tsr", "region.txt",
                           "heatmap.csv", "scores.csv"):
                assert (tmp_path / f"{name}.{suffix}").is_file()
            region = read_region(tmp_path / f"{name}.region.txt")
            assert list(region.row_indices) == info["rows"]
            assert list(region.col_indices) == info["cols"]
            mask = load_array(tmp_path / f"{name}.mask.tsr")
            assert int(mask.sum()) == info["mask_ones"]
            assert info["sample_count"] == tiny_config.n_train
        assert summary["layer0"]["mask_ones"] == ceil_count(tiny_config.k, 8 * 6)

    def test_importance_kinds(self, planted_task, tiny_config):
        frame = compare_importance_kinds(planted_task, tiny_config)
        assert list(frame["importance_kind"]) == ["sensitivity", "sensitivity", "gradient", "gradient"]
        assert list(frame["seed"]) == [7, 8, 7, 8]


def harness_config(seed: int) -> TrainConfig:
    """Shipped task and TASO defaults with the learning rate and length the harness runs use."""
    return TrainConfig(base_lr=0.01, epochs=20, seed=seed)


def harness_task(seed: int):
    config = harness_config(seed)
    task = planted_task_from_config(config)
    return task, adapted_config(task, config)


@pytest.mark.slow
class TestDeskScaleAcceptance:

    def test_taso_beats_its_ablations_with_a_fraction_of_dense(self):
        wins = {Arm.TASO_RANDOM_REGION: 0, Arm.TASO_NO_LR: 0}
        taso_metrics, dense_metrics = [], []
        for seed in range(10):
            task, config = harness_task(seed)
            taso = run_arm(task.student(), task.data, config, Arm.TASO)
            dense = run_arm(task.student(), task.data, config, Arm.DENSE_LORA)
            assert taso.trainable <= 0.15 * dense.trainable
            for arm in wins:
                other = run_arm(task.student(), task.data, config, arm)
                wins[arm] += other.final_metric < taso.final_metric
            taso_metrics.append(taso.final_metric)
            dense_metrics.append(dense.final_metric)
        assert wins[Arm.TASO_RANDOM_REGION] >= 8
        assert wins[Arm.TASO_NO_LR] >= 7
        assert np.mean(taso_metrics) >= 0.95 * np.mean(dense_metrics)

    def test_sensitivity_ranks_planted_rows_first(self):
        config = TrainConfig(widths=[16, 8], loss_kind=LossKind.MSE)
        hits = 0
        for seed in range(20):
            spec = PlantedTaskSpec(widths=[16, 8], rows=[2, 5], loss_kind=LossKind.MSE)
            task = generate_planted_task(spec, seed)
            imp = importance_scores(task.student(), task.data.batches(config.batch_size), task.spec.layer)
            u_row, _ = density(topk_mask(imp, config.k))
            hits += set(np.argsort(-u_row, kind="stable")[:2].tolist()) == {2, 5}
        assert hits / 20 >= 0.9

    def test_p_sweep_peaks_near_ten_percent(self):
        curves = [sweep_p(*harness_task(seed)) for seed in range(10)]
        accuracy = np.mean([curve["accuracy"].to_numpy() for curve in curves], axis=0)
        p_list = list(curves[0]["p"])
        best = accuracy.max()
        assert accuracy[p_list.index(0.10)] >= best - 0.02
        assert all(acc >= best - 0.10 for p, acc in zip(p_list, accuracy) if p < 0.40)

    def test_sensitivity_matches_or_beats_gradient(self):
        frames = [compare_importance_kinds(*harness_task(seed), seeds=[seed]) for seed in range(10)]
        means = {kind: np.mean([frame.loc[frame["importance_kind"] == kind.value, "final_metric"].item()
                                for frame in frames])
                 for kind in ImportanceKind}
        assert means[ImportanceKind.SENSITIVITY] >= means[ImportanceKind.GRADIENT]

    def test_pruned_second_module_composes_better(self):
        wins = 0
        for seed in range(10):
            task_a, task_b = planted_task_pair(harness_config(seed), seed)
            table = composition_experiment(task_a, task_b, harness_config(seed))
            means = table.groupby("second_kind")["mean_accuracy"].mean()
            wins += means["pruned"] >= means["dense"]
        assert wins >= 7
