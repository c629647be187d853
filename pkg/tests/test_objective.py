"""Objectives, datasets, and batch plans."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optbench.objective import (
    BatchObjective,
    Dataset,
    DivergenceError,
    evaluate,
    generate_synthetic_dataset,
    init_params,
    load_dataset_csv,
    logistic_regression_model,
    make_batch_plan,
    measure_accuracy,
    mlp_model,
    quadratic_model,
    model_from_config,
    rosenbrock_model,
    save_dataset_csv,
)


def central_difference_gradient(value_fn, params, step=1e-5):
    """Independent oracle: central finite differences of a scalar function."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = (value_fn(up) - value_fn(dn)) / (2.0 * step)
    return grad


class TestBatchPlan:
    def test_full_batch_is_single_block(self):
        plan = make_batch_plan(4, 4, seed=123)
        assert len(plan.batches) == 1
        assert sorted(plan.batches[0].tolist()) == [0, 1, 2, 3]

    def test_partition_properties_n6_k2(self):
        plan = make_batch_plan(6, 2, seed=7)
        assert len(plan.batches) == 3
        assert all(len(b) == 2 for b in plan.batches)
        joined = sorted(np.concatenate(plan.batches).tolist())
        assert joined == list(range(6))

    def test_truncated_batch_rejected(self):
        with pytest.raises(ValueError):
            make_batch_plan(10, 3, seed=0)

    def test_deterministic(self):
        a = make_batch_plan(12, 3, seed=99)
        b = make_batch_plan(12, 3, seed=99)
        for x, y in zip(a.batches, b.batches):
            assert np.array_equal(x, y)

    @given(
        k=st.integers(min_value=1, max_value=12),
        blocks=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, k, blocks, seed):
        n = k * blocks
        plan = make_batch_plan(n, k, seed)
        assert len(plan.batches) == blocks
        assert all(len(b) == k for b in plan.batches)
        assert sorted(np.concatenate(plan.batches).tolist()) == list(range(n))


class TestEvaluate:
    def test_quadratic_example(self):
        ev = evaluate(quadratic_model(2), np.array([3.0, 4.0]), None, None)
        assert ev.loss == pytest.approx(12.5)
        assert np.allclose(ev.gradient, [3.0, 4.0])

    def test_rosenbrock_minimum(self):
        ev = evaluate(rosenbrock_model(), np.array([1.0, 1.0]), None, None)
        assert ev.loss == 0.0
        assert np.allclose(ev.gradient, [0.0, 0.0])

    def test_mlp_gradient_matches_finite_differences(self):
        model = mlp_model([2, 8, 2])
        data = generate_synthetic_dataset("gaussians", 16, 2, seed=1)
        params = init_params(model, seed=3)
        ev = evaluate(model, params, data, data.train_indices)
        oracle = central_difference_gradient(
            BatchObjective(model, data, data.train_indices).value, params
        )
        rel = np.linalg.norm(ev.gradient - oracle) / np.linalg.norm(ev.gradient)
        assert rel < 1e-5

    def test_logistic_regression_gradient_matches_finite_differences(self):
        model = logistic_regression_model(2, 3)
        data = generate_synthetic_dataset("spirals", 30, 3, seed=2)
        params = init_params(model, seed=5) + 0.3
        ev = evaluate(model, params, data, data.train_indices[:12])
        oracle = central_difference_gradient(
            BatchObjective(model, data, data.train_indices[:12]).value, params
        )
        rel = np.linalg.norm(ev.gradient - oracle) / np.linalg.norm(ev.gradient)
        assert rel < 1e-5

    def test_cross_entropy_loss_nonnegative(self):
        model = mlp_model([2, 4, 2])
        data = generate_synthetic_dataset("gaussians", 20, 2, seed=4)
        for seed in range(5):
            params = init_params(model, seed=seed)
            ev = evaluate(model, params, data, data.train_indices)
            assert ev.loss >= 0.0
            assert 0.0 <= ev.accuracy <= 1.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            evaluate(quadratic_model(3), np.zeros(2), None, None)

    def test_divergence_signal_on_exploded_params(self):
        model = mlp_model([2, 4, 2])
        data = generate_synthetic_dataset("gaussians", 8, 2, seed=0)
        params = init_params(model, seed=0) * 1e8
        with pytest.raises(DivergenceError):
            evaluate(model, params, data, data.train_indices)

    def test_measure_accuracy_survives_huge_finite_params(self):
        # the epoch-end measurement only needs argmax, not a finite loss
        model = mlp_model([2, 4, 2])
        data = generate_synthetic_dataset("gaussians", 8, 2, seed=0)
        params = init_params(model, seed=0) * 1e8
        acc = measure_accuracy(model, params, data, data.test_indices if data.test_count else data.train_indices)
        assert 0.0 <= acc <= 1.0

    def test_measure_accuracy_rejects_nonfinite_params(self):
        model = quadratic_model(2)
        with pytest.raises(DivergenceError):
            measure_accuracy(model, np.array([np.inf, 0.0]), None, None)


class TestSyntheticData:
    def test_balanced_classes(self):
        data = generate_synthetic_dataset("gaussians", 4, 2, seed=1)
        counts = np.bincount(data.labels[data.train_indices])
        assert counts.tolist() == [2, 2]

    def test_standardization(self):
        data = generate_synthetic_dataset("spirals", 300, 3, seed=5)
        assert np.all(np.abs(data.features.mean(axis=0)) < 1e-9)
        assert np.allclose(data.features.std(axis=0), 1.0)

    def test_indivisible_count_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic_dataset("gaussians", 5, 2, seed=0)

    def test_deterministic(self):
        a = generate_synthetic_dataset("spirals", 60, 3, seed=11, test_count=30)
        b = generate_synthetic_dataset("spirals", 60, 3, seed=11, test_count=30)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_split_disjoint_and_sized(self):
        data = generate_synthetic_dataset("gaussians", 40, 2, seed=3, test_count=10)
        assert data.train_count == 40
        assert data.test_count == 10
        assert not set(data.train_indices) & set(data.test_indices)

    def test_csv_round_trip(self, tmp_path):
        data = generate_synthetic_dataset("spirals", 30, 3, seed=9, test_count=6)
        save_dataset_csv(data, tmp_path / "train.csv", tmp_path / "test.csv")
        back = load_dataset_csv(tmp_path / "train.csv", tmp_path / "test.csv", classes=3)
        assert np.array_equal(back.features[back.train_indices], data.features[data.train_indices])
        assert np.array_equal(back.labels[back.test_indices], data.labels[data.test_indices])
        header = (tmp_path / "train.csv").read_text().splitlines()[0]
        assert header == "f0,f1,label"


class TestInitParams:
    def test_quadratic_fixed_start(self):
        assert np.array_equal(init_params(quadratic_model(3), seed=0), np.ones(3))
        assert np.array_equal(init_params(quadratic_model(3), seed=77), np.ones(3))

    def test_rosenbrock_fixed_start(self):
        assert np.array_equal(init_params(rosenbrock_model(), seed=5), np.array([-1.2, 1.0]))

    def test_mlp_deterministic(self):
        model = mlp_model([2, 4, 2])
        assert np.array_equal(init_params(model, seed=3), init_params(model, seed=3))

    def test_mlp_biases_zero(self):
        model = mlp_model([2, 4, 2])
        params = init_params(model, seed=3)
        # packing is W1 (8), b1 (4), W2 (8), b2 (2)
        assert np.array_equal(params[8:12], np.zeros(4))
        assert np.array_equal(params[20:22], np.zeros(2))

    def test_model_dim_consistency(self):
        assert mlp_model([2, 8, 2]).dim == 2 * 8 + 8 + 8 * 2 + 2
        assert logistic_regression_model(2, 3).dim == 2 * 3 + 3
        with pytest.raises(ValueError):
            model_from_config("mlp", layers=[2])
