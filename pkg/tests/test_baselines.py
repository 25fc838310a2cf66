from dataclasses import replace

import numpy as np
import pytest

from tasoLab.adapter import SparseLoraModule, factor_scaled_delta
from tasoLab.autodiff import Matrix
from tasoLab.baselines import (
    dare_finetune, dare_rescale, dense_lora_finetune, imp_lora, prune_adapter, prune_smallest, random_core_region,
    rewind_factors, sparsity_schedule, survivor_region_overlap,
)
from tasoLab.importance import CoreRegion, select_core_region
from tasoLab.schema import Arm, OptimizerKind, SparsitySchedule, Stage, TrainConfig
from tasoLab.utils import ContractError, ceil_count

from conftest import linear_mse_model, regression_data


# =============================================================================
# Dense LoRA
# =============================================================================

class TestDenseLora:

    def test_trainable_count_per_matrix(self, planted_task, tiny_config):
        model = planted_task.student()
        report = dense_lora_finetune(model, planted_task.data, 2, tiny_config)
        assert report.arm == Arm.DENSE_LORA.value
        expected = sum(layer.p * 2 + 2 * layer.q for layer in model.linear_layers().values())
        assert report.trainable == expected
        assert report.total_epochs == tiny_config.epochs
        assert model.attached_adapters() == {}

    def test_zero_epochs_leaves_weights(self, planted_task, tiny_config):
        model = planted_task.student()
        digest = model.weights_digest()
        dense_lora_finetune(model, planted_task.data, 2, replace(tiny_config, epochs=0))
        assert model.weights_digest() == digest

    def test_rank_must_be_positive(self, planted_task, tiny_config):
        with pytest.raises(ContractError):
            dense_lora_finetune(planted_task.student(), planted_task.data, 0, tiny_config)

    @pytest.mark.slow
    def test_full_rank_fits_linear_task(self, rng):
        w0 = rng.normal(size=(8, 6)) / np.sqrt(6)
        x = rng.normal(size=(64, 6))
        y = linear_mse_model(w0 + 0.3 * rng.normal(size=(8, 6))).predict(Matrix(x))
        config = TrainConfig(optimizer=OptimizerKind.ADAM, base_lr=0.01, epochs=3000, batch_size=64, shuffle=False)
        model = linear_mse_model(w0)
        before = model.evaluate(Matrix(x), y)
        report = dense_lora_finetune(model, regression_data(x, y), 6, config)
        assert report.trainable == 8 * 6 + 6 * 6
        assert model.evaluate(Matrix(x), y) <= 0.01 * before


# =============================================================================
# DARE
# =============================================================================

class TestDareRescale:

    def test_half_doubles(self):
        out = dare_rescale(Matrix([[1.0, -2.0], [0.0, 3.0]]), 0.5)
        np.testing.assert_array_equal(out.data, [[2.0, -4.0], [0.0, 6.0]])

    def test_zero_is_identity(self, rng):
        delta = Matrix(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(dare_rescale(delta, 0.0).data, delta.data)

    @pytest.mark.parametrize("rho", [1.0, 2.0, -0.5])
    def test_out_of_range(self, rho):
        with pytest.raises(ContractError):
            dare_rescale(Matrix([[1.0]]), rho)

    def test_zero_set_and_norm(self, rng):
        data = rng.normal(size=(6, 5)) * (rng.random((6, 5)) > 0.6)
        rho = 0.8
        out = dare_rescale(Matrix(data), rho).data
        np.testing.assert_array_equal(out == 0, data == 0)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(data) / (1 - rho), rel=1e-12)

    def test_matches_factor_scaling(self, rng):
        for rho in (0.1, 0.5, 0.9):
            module = SparseLoraModule(left=Matrix(rng.normal(size=(4, 2)), trainable=True),
                                      right=Matrix(rng.normal(size=(2, 3)), trainable=True), stage=Stage.DENSE)
            np.testing.assert_allclose(dare_rescale(module.delta(), rho).data,
                                       factor_scaled_delta(module, rho).data, rtol=1e-12, atol=1e-12)


class TestDareFinetune:

    def test_report(self, planted_task, tiny_config):
        config = replace(tiny_config, dare_rho=0.5)
        model = planted_task.student()
        report = dare_finetune(model, planted_task.data, 2, config)
        assert report.arm == Arm.DARE.value
        assert report.extra["rho"] == 0.5
        kept = report.rounds[0].extra["kept_fraction"]
        assert set(kept) == {"layer0", "layer1"}
        assert all(0.0 < value < 1.0 for value in kept.values())
        assert model.attached_adapters() == {}

    def test_dropped_entries_leave_weight_unchanged(self, planted_task, tiny_config):
        config = replace(tiny_config, dare_rho=0.9, targets=["layer0"])
        model = planted_task.student()
        before = model.layer("layer0").weight.data.copy()
        dare_finetune(model, planted_task.data, 2, config)
        unchanged = np.mean(model.layer("layer0").weight.data == before)
        assert unchanged > 0.5
        assert model.layer("layer1").weight.data.tobytes() == planted_task.base.layer("layer1").weight.data.tobytes()


# =============================================================================
# Random region
# =============================================================================

class TestRandomCoreRegion:

    def test_same_seed_same_region(self):
        assert random_core_region(12, 9, 0.3, seed=4) == random_core_region(12, 9, 0.3, seed=4)

    def test_cardinality_matches_importance_selection(self, rng):
        for p, q in [(1, 1), (6, 4), (12, 9), (64, 64)]:
            for p_fraction in (0.02, 0.1, 0.3, 1.0):
                region = random_core_region(p, q, p_fraction, seed=int(rng.integers(1 << 32)))
                assert region.size == ceil_count(p_fraction, p + q)
                assert region.size == select_core_region(rng.random(p), rng.random(q), p_fraction).size
                region.check_bounds(p, q)

    def test_row_frequencies_are_uniform(self):
        p, q, fraction = 6, 4, 0.3
        counts = np.zeros(p + q)
        trials = 2000
        for seed in range(trials):
            region = random_core_region(p, q, fraction, seed=seed)
            counts[list(region.row_indices)] += 1
            counts[[p + j for j in region.col_indices]] += 1
        expected = ceil_count(fraction, p + q) / (p + q)
        assert np.all(np.abs(counts / trials - expected) <= 0.05)

    def test_fraction_out_of_range(self):
        with pytest.raises(ContractError):
            random_core_region(4, 4, 0.0, seed=0)


# =============================================================================
# Iterative magnitude pruning
# =============================================================================

class TestSparsitySchedule:

    def test_geometric(self):
        schedule = sparsity_schedule(0.75, 2)
        assert schedule == pytest.approx([0.5, 0.75])

    def test_linear(self):
        assert sparsity_schedule(0.9, 3, SparsitySchedule.LINEAR) == pytest.approx([0.3, 0.6, 0.9])

    def test_nondecreasing_and_ends_at_target(self):
        schedule = sparsity_schedule(0.99, 7)
        assert all(a <= b for a, b in zip(schedule, schedule[1:]))
        assert schedule[-1] == pytest.approx(0.99)

    @pytest.mark.parametrize("target, n", [(0.0, 3), (1.0, 3), (0.5, 0)])
    def test_invalid(self, target, n):
        with pytest.raises(ContractError):
            sparsity_schedule(target, n)


class TestPruneSmallest:

    def test_smallest_magnitudes_go_first(self):
        values = np.array([[0.5, -0.1], [2.0, 0.1]])
        mask = prune_smallest(values, np.ones((2, 2), dtype=np.int8), 2)
        np.testing.assert_array_equal(mask, [[1, 0], [1, 0]])

    def test_survivors_only_shrink(self, rng):
        mask = np.ones((5, 4), dtype=np.int8)
        for n_pruned in (3, 8, 15, 19):
            new = prune_smallest(rng.normal(size=(5, 4)), mask, n_pruned)
            assert int((new == 0).sum()) == n_pruned
            assert np.all(new <= mask)
            mask = new

    def test_already_pruned_enough(self, rng):
        mask = np.array([[0, 0], [1, 1]], dtype=np.int8)
        np.testing.assert_array_equal(prune_smallest(rng.normal(size=(2, 2)), mask, 1), mask)


class TestPruneAdapter:

    def test_factors_share_one_budget(self):
        left = np.array([[0.3], [0.05], [2.0]])
        right = np.array([[0.01, 1.0, -0.2, 0.4, 0.02]])
        masks = (np.ones((3, 1), dtype=np.int8), np.ones((1, 5), dtype=np.int8))
        left_mask, right_mask = prune_adapter((left, right), masks, 0.5)
        np.testing.assert_array_equal(left_mask.ravel(), [1, 0, 1])
        np.testing.assert_array_equal(right_mask.ravel(), [0, 1, 0, 1, 0])
        assert int((left_mask == 0).sum() + (right_mask == 0).sum()) == ceil_count(0.5, 8)


class TestRewind:

    def test_survivors_equal_initial_values_bitwise(self, rng):
        initial = (rng.normal(size=(4, 2)), rng.normal(size=(2, 3)))
        masks = (np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=np.int8),
                 np.array([[1, 1, 0], [0, 1, 1]], dtype=np.int8))
        left, right = rewind_factors(initial, masks)
        for factor, init, mask in zip((left, right), initial, masks):
            assert factor.trainable
            assert factor.data[mask == 1].tobytes() == init[mask == 1].tobytes()
            assert not np.any(factor.data[mask == 0])


class TestSurvivorOverlap:

    def test_fraction_on_cross_pattern(self):
        survivors = np.array([[1, 0, 0], [0, 1, 1]], dtype=bool)
        assert survivor_region_overlap(survivors, CoreRegion((1,), ())) == pytest.approx(2 / 3)
        assert survivor_region_overlap(np.zeros((2, 3), dtype=bool), CoreRegion((0,), ())) == 0.0


class TestImpLora:

    def test_single_shot_half(self, planted_task, tiny_config):
        report = imp_lora(planted_task.student(), planted_task.data, 2, 0.5, 1, tiny_config)
        total = sum(layer.p * 2 + 2 * layer.q for layer in planted_task.base.linear_layers().values())
        survivors = report.rounds[-1].stages["dense"].total_trainable
        assert total - survivors == ceil_count(0.5, total)
        assert report.extra["final_sparsity"] == pytest.approx(0.5)

    def test_odd_sized_factors_prune_exactly_half_rounded_up(self, rng):
        """Left 3x1 and right 1x5 are both odd; the pooled budget is ceil(0.5 * 8) = 4."""
        x = rng.normal(size=(32, 5))
        w0 = rng.normal(size=(3, 5))
        data = regression_data(x, x @ (w0 + rng.normal(size=(3, 5))).T)
        config = TrainConfig(base_lr=0.01, epochs=2, batch_size=8, seed=3)
        report = imp_lora(linear_mse_model(w0), data, 1, 0.5, 1, config)
        assert report.rounds[-1].stages["dense"].total_trainable == 8 - 4
        assert report.extra["final_sparsity"] == 0.5

    def test_epoch_accounting_and_schedule(self, planted_task, tiny_config):
        n = 3
        report = imp_lora(planted_task.student(), planted_task.data, 2, 0.9, n, tiny_config)
        assert report.arm == Arm.IMP.value
        assert report.total_epochs == (n + 1) * tiny_config.epochs
        assert [rnd.index for rnd in report.rounds] == [0, 1, 2, 3]
        sparsity = report.extra["sparsity"]
        assert all(a <= b for a, b in zip(sparsity, sparsity[1:]))
        total = sum(layer.p * 2 + 2 * layer.q for layer in planted_task.base.linear_layers().values())
        n_adapters = len(planted_task.base.linear_layers())
        assert abs(sparsity[-1] * total - 0.9 * total) <= n_adapters
        assert report.extra["cumulative_epochs"][-1] == report.total_epochs

    def test_region_overlap_recorded(self, planted_task, tiny_config):
        reference = {planted_task.spec.layer: planted_task.support_region}
        report = imp_lora(planted_task.student(), planted_task.data, 2, 0.5, 1, tiny_config,
                          reference_regions=reference)
        overlap = report.rounds[1].extra["region_overlap"]
        assert 0.0 <= overlap[planted_task.spec.layer] <= 1.0

    def test_weights_absorb_final_adapters(self, planted_task, tiny_config):
        model = planted_task.student()
        imp_lora(model, planted_task.data, 2, 0.5, 1, tiny_config)
        assert model.attached_adapters() == {}
        assert model.weights_digest() != planted_task.base.weights_digest()

    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_target_out_of_range(self, planted_task, tiny_config, target):
        with pytest.raises(ContractError):
            imp_lora(planted_task.student(), planted_task.data, 2, target, 2, tiny_config)
