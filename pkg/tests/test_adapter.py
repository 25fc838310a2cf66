import math

import numpy as np
import pytest

from tasoLab.adapter import (
    SparseLoraModule, count_trainable, effective_delta, factor_scaled_delta, init_adapter,
    load_adapter, pruning_ratio, save_adapter, scaled_lr,
)
from tasoLab.autodiff import Matrix
from tasoLab.importance import CoreRegion
from tasoLab.schema import Stage
from tasoLab.utils import ContractError, ShapeError


def _module(stage: Stage, keep=None) -> SparseLoraModule:
    return SparseLoraModule(
        left=Matrix([[1.0], [2.0]], trainable=True),
        right=Matrix([[3.0, 4.0]], trainable=True),
        stage=stage,
        keep=None if keep is None else np.array(keep, dtype=np.int8),
    )


class TestInitAdapter:

    @pytest.mark.parametrize("stage", [Stage.ROW, Stage.COLUMN, Stage.DENSE])
    def test_fresh_delta_is_zero(self, stage):
        region = CoreRegion(row_indices=(0, 2), col_indices=(1,))
        adapter = init_adapter(4, 5, 2, stage, region, seed=11)
        delta = effective_delta(adapter).data
        assert delta.shape == (4, 5)
        assert not np.any(delta)

    def test_row_stage_masks_rows_outside_region(self):
        adapter = init_adapter(4, 3, 1, Stage.ROW, CoreRegion(row_indices=(1, 3), col_indices=()), seed=0)
        np.testing.assert_array_equal(adapter.keep, [0, 1, 0, 1])
        assert adapter.rho == 0.5
        left = Matrix(np.ones((4, 1)), trainable=True)
        adapter.with_factors(left, adapter.right)
        masked_left, _ = adapter.masked_factors()
        np.testing.assert_array_equal(masked_left.data[:, 0], [0, 1, 0, 1])

    def test_same_seed_same_right_factor(self):
        a = init_adapter(6, 7, 3, Stage.DENSE, seed=99)
        b = init_adapter(6, 7, 3, Stage.DENSE, seed=99)
        assert a.right.data.tobytes() == b.right.data.tobytes()
        c = init_adapter(6, 7, 3, Stage.DENSE, seed=100)
        assert a.right.data.tobytes() != c.right.data.tobytes()

    def test_right_factor_bound(self):
        adapter = init_adapter(3, 16, 4, Stage.DENSE, seed=5)
        assert np.all(np.abs(adapter.right.data) <= 1 / math.sqrt(16))
        assert adapter.left.trainable and adapter.right.trainable

    def test_empty_side_rejected(self):
        with pytest.raises(ContractError):
            init_adapter(4, 4, 1, Stage.ROW, CoreRegion(row_indices=(), col_indices=(0,)))
        with pytest.raises(ContractError):
            init_adapter(4, 4, 1, Stage.COLUMN, CoreRegion(row_indices=(0,), col_indices=()))

    def test_sparse_stage_needs_region(self):
        with pytest.raises(ContractError):
            init_adapter(4, 4, 1, Stage.ROW)

    def test_rank_must_be_positive(self):
        with pytest.raises(ContractError):
            init_adapter(4, 4, 0, Stage.DENSE)

    def test_float32(self):
        adapter = init_adapter(3, 3, 1, Stage.DENSE, dtype=np.float32)
        assert adapter.left.dtype == np.float32 and adapter.right.dtype == np.float32


class TestEffectiveDelta:

    def test_dense_outer_product(self):
        np.testing.assert_array_equal(effective_delta(_module(Stage.DENSE)).data, [[3, 4], [6, 8]])

    def test_row_mask(self):
        np.testing.assert_array_equal(effective_delta(_module(Stage.ROW, [1, 0])).data, [[3, 4], [0, 0]])

    def test_column_mask(self):
        np.testing.assert_array_equal(effective_delta(_module(Stage.COLUMN, [0, 1])).data, [[0, 4], [0, 8]])

    def test_masked_zeros_are_positive_zeros(self):
        delta = effective_delta(_module(Stage.ROW, [0, 1])).data
        assert not np.any(np.signbit(delta[0]))

    def test_with_factors_shape_check(self):
        module = _module(Stage.DENSE)
        with pytest.raises(ShapeError):
            module.with_factors(Matrix(np.ones((3, 1))), module.right)


class TestPruningRatio:

    def test_row(self):
        assert pruning_ratio(CoreRegion(tuple(range(10)), ()), Stage.ROW, 100, 50) == pytest.approx(0.9)

    def test_full_region(self):
        region = CoreRegion(tuple(range(4)), tuple(range(6)))
        assert pruning_ratio(region, Stage.ROW, 4, 6) == 0.0
        assert pruning_ratio(region, Stage.COLUMN, 4, 6) == 0.0

    def test_column(self):
        assert pruning_ratio(CoreRegion((), (2, 5)), Stage.COLUMN, 3, 8) == 0.75

    def test_dense(self):
        assert pruning_ratio(CoreRegion((0,), ()), Stage.DENSE, 4, 4) == 0.0


class TestScaledLr:

    def test_unchanged_without_pruning(self):
        assert scaled_lr(1e-3, 0.0) == 1e-3

    def test_quarter_kept_doubles(self):
        assert scaled_lr(1.0, 0.75) == pytest.approx(2.0, abs=1e-15)

    def test_tenth_kept(self):
        assert scaled_lr(1.0, 0.9) == pytest.approx(3.16228, abs=1e-5)

    @pytest.mark.parametrize("rho", [1.0, 1.5, -0.1])
    def test_out_of_range(self, rho):
        with pytest.raises(ContractError):
            scaled_lr(1.0, rho)

    def test_factor_scaling_identity(self, rng):
        for _ in range(50):
            rho = float(rng.uniform(0.0, 0.99))
            module = SparseLoraModule(
                left=Matrix(rng.normal(size=(5, 2)), trainable=True),
                right=Matrix(rng.normal(size=(2, 4)), trainable=True),
                stage=Stage.DENSE,
            )
            expected = module.delta().data / (1.0 - rho)
            np.testing.assert_allclose(factor_scaled_delta(module, rho).data, expected,
                                       rtol=1e-12, atol=1e-12)


class TestCountTrainable:

    def test_row_stage(self):
        adapter = init_adapter(64, 64, 1, Stage.ROW, CoreRegion(tuple(range(6)), ()))
        assert count_trainable(adapter) == 70

    def test_column_stage(self):
        adapter = init_adapter(64, 32, 2, Stage.COLUMN, CoreRegion((), (0, 1, 2)))
        assert count_trainable(adapter) == 64 * 2 + 2 * 3

    def test_dense(self):
        assert count_trainable(init_adapter(64, 64, 8, Stage.DENSE)) == 1024

    def test_full_region_equals_dense(self):
        region = CoreRegion(tuple(range(8)), tuple(range(6)))
        dense = count_trainable(init_adapter(8, 6, 1, Stage.DENSE))
        assert count_trainable(init_adapter(8, 6, 1, Stage.ROW, region)) == dense
        assert count_trainable(init_adapter(8, 6, 1, Stage.COLUMN, region)) == dense

    def test_factor_masks_count_survivors(self):
        adapter = init_adapter(4, 3, 2, Stage.DENSE)
        adapter.factor_masks = (np.array([[1, 0]] * 4, dtype=np.int8), np.zeros((2, 3), dtype=np.int8))
        assert adapter.trainable_count() == 4


class TestAdapterFiles:

    def test_round_trip(self, tmp_path, rng):
        adapter = init_adapter(5, 4, 2, Stage.COLUMN, CoreRegion((1,), (0, 3)), seed=8)
        adapter.with_factors(Matrix(rng.normal(size=(5, 2))), adapter.right)
        save_adapter(adapter, tmp_path, prefix="layer0.adapter")
        loaded = load_adapter(tmp_path, prefix="layer0.adapter")
        assert loaded.stage == Stage.COLUMN
        assert loaded.rho == adapter.rho
        assert loaded.region == CoreRegion((1,), (0, 3))
        np.testing.assert_array_equal(loaded.keep, adapter.keep)
        assert loaded.left.data.tobytes() == adapter.left.data.tobytes()
        assert loaded.right.data.tobytes() == adapter.right.data.tobytes()
        assert effective_delta(loaded).data.tobytes() == effective_delta(adapter).data.tobytes()

    def test_dense_round_trip_has_no_mask_file(self, tmp_path):
        save_adapter(init_adapter(3, 3, 1, Stage.DENSE, seed=1), tmp_path)
        assert not (tmp_path / "adapter.mask.tsr").exists()
        assert load_adapter(tmp_path).stage == Stage.DENSE

    def test_pruned_adapter_keeps_its_masks(self, tmp_path, rng):
        masks = (np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8),
                 np.array([[0, 1, 1, 0], [1, 0, 0, 0]], dtype=np.int8))
        adapter = SparseLoraModule(
            left=Matrix(rng.normal(size=(3, 2)), trainable=True),
            right=Matrix(rng.normal(size=(2, 4)), trainable=True),
            stage=Stage.DENSE,
            factor_masks=masks,
        )
        save_adapter(adapter, tmp_path)
        loaded = load_adapter(tmp_path)
        for restored, original in zip(loaded.factor_masks, masks):
            np.testing.assert_array_equal(restored, original)
        assert loaded.trainable_count() == adapter.trainable_count() == 7
        assert effective_delta(loaded).data.tobytes() == effective_delta(adapter).data.tobytes()
