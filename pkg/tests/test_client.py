import numpy as np
import pytest

from fairdpfl.client import (
    ClientState,
    FairnessSettings,
    client_rng,
    compute_statistics,
    local_train,
    poisson_batches,
    share_statistics,
    share_totals,
)
from fairdpfl.fairness import ProbabilityTable, dpl_soft
from fairdpfl.linmodel import Dataset, LinearModel
from fairdpfl.privacy import NoisePlan, plan_noise


def _data(seed=0, n=80, dim=3):
    rng = np.random.default_rng(seed)
    z = rng.integers(2, size=n)
    y = (rng.random(n) < np.where(z == 1, 0.7, 0.3)).astype(int)
    x = rng.normal(size=(n, dim)) + np.c_[2 * y - 1, 2 * z - 1, np.zeros(n)][:, :dim]
    return Dataset(x, y, z)


def test_poisson_batches_shapes():
    rng = np.random.default_rng(0)
    full = poisson_batches(7, 1.0, 3, rng)
    assert len(full) == 3 and all(np.array_equal(b, np.arange(7)) for b in full)
    assert len(poisson_batches(100, 0.3, 2, rng)) == 2 * 4


def test_poisson_batch_size_concentrates():
    sizes = [len(b) for b in poisson_batches(1000, 0.1, 50, np.random.default_rng(1))]
    assert abs(np.mean(sizes) - 100) < 5


def test_poisson_batches_are_seeded():
    a = poisson_batches(50, 0.2, 2, client_rng(3, 1, 4, 0))
    b = poisson_batches(50, 0.2, 2, client_rng(3, 1, 4, 0))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        poisson_batches(10, 0.0, 1, np.random.default_rng(0))


def test_compute_statistics_example():
    x = np.array([[1.0], [1.0], [1.0], [-1.0]])
    model = LinearModel(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    counts = compute_statistics(model, Dataset(x, np.zeros(4, dtype=int), np.array([1, 1, 0, 0])))
    np.testing.assert_array_equal(counts.counts, [[1, 1], [0, 2]])
    np.testing.assert_array_equal(counts.group_totals, [2, 2])


def test_compute_statistics_constant_class_and_empty_group():
    w = np.zeros((3, 2))
    w[2, -1] = 4.0
    ds = Dataset(np.zeros((5, 1)), np.zeros(5, dtype=int), np.array([0, 0, 2, 2, 2]), 3, 3)
    counts = compute_statistics(LinearModel(w), ds)
    np.testing.assert_array_equal(counts.counts[:, 2], counts.group_totals)
    np.testing.assert_array_equal(counts.counts[:, :2], 0)
    np.testing.assert_array_equal(counts.counts[1], 0)
    assert counts.counts.sum() == len(ds)


def test_share_statistics_hides_class_zero():
    counts = compute_statistics(LinearModel.init(2, 3, 0), _data())
    shared = share_statistics(counts, 0.0, np.random.default_rng(0))
    assert np.all(np.isnan(shared.counts[:, 0]))
    np.testing.assert_array_equal(shared.counts[:, 1:], counts.counts[:, 1:])
    noisy = share_statistics(counts, 5.0, np.random.default_rng(0))
    assert not np.array_equal(noisy.counts[:, 1:], counts.counts[:, 1:])


def test_share_totals_accounts_once():
    plan = plan_noise(5.0, 1e-3, 0.1, 3, 1, 1.0)
    state = ClientState(0, _data())
    totals = share_totals(state, plan, seed=0)
    assert state.accountant.steps("stats") == 1
    assert totals.shape == (2,)
    exact = share_totals(ClientState(0, _data()), NoisePlan(), seed=0)
    np.testing.assert_array_equal(exact, np.bincount(_data().z, minlength=2))


def test_local_train_accounts_each_batch():
    plan = plan_noise(5.0, 1e-3, 0.25, 2, 1, 1.0)
    state = ClientState(1, _data(n=12))
    upd = local_train(state, LinearModel.init(2, 3, 0), None, plan, 0, 0.1, 1, FairnessSettings("tunable", target=0.1), seed=5)
    assert upd.metrics["batches"] == 4
    assert state.accountant.steps("train") == 4
    assert state.accountant.steps("lambda") == 4
    assert state.accountant.steps("stats") == 1
    assert 0 <= upd.metrics["lambda"] <= 1


def test_fixed_lambda_uses_no_lambda_stream():
    plan = plan_noise(5.0, 1e-3, 0.25, 2, 1, 1.0, use_lambda_stream=False)
    state = ClientState(1, _data())
    local_train(state, LinearModel.init(2, 3, 0), None, plan, 0, 0.1, 1, FairnessSettings("fixed", lam=0.5), seed=5)
    assert state.accountant.steps("lambda") == 0


def test_round_zero_starts_lambda_at_zero():
    settings = FairnessSettings("tunable", target=0.0, rho=1e-9)
    state = ClientState(0, _data())
    upd = local_train(state, LinearModel.init(2, 3, 0), None, NoisePlan(sampling_rate=1.0), 0, 0.1, 1, settings)
    assert upd.metrics["lambda"] < 1e-6
    biased = LinearModel(np.array([[0, -3, 0, 0], [0, 3, 0, 0]], dtype=float))
    later = local_train(ClientState(0, _data()), biased, None, NoisePlan(sampling_rate=1.0), 2, 0.1, 1, settings)
    assert later.metrics["lambda"] > 0.99


def test_lambda_one_is_pure_dpl_descent():
    data = _data(n=40)
    w0 = np.random.default_rng(3).normal(size=(2, 4))
    lr = 0.2
    upd = local_train(ClientState(0, data), LinearModel(w0), None, NoisePlan(sampling_rate=1.0), 0, lr, 1, FairnessSettings("fixed", lam=1.0))
    soft = dpl_soft(LinearModel(w0), data)
    np.testing.assert_allclose(upd.model.weights, w0 - lr * soft.grads.sum(axis=0), atol=1e-12)


def test_dp_updates_are_clipped_and_noised():
    data = _data(n=60)
    w0 = LinearModel.init(2, 3, 0)
    plan = NoisePlan(1.0, 0.0, 0.0, clip_bound=0.5, sampling_rate=1.0)
    a = local_train(ClientState(0, data), w0, None, plan, 0, 0.3, 1, FairnessSettings(), seed=1)
    b = local_train(ClientState(0, data), w0, None, plan, 0, 0.3, 1, FairnessSettings(), seed=2)
    quiet = NoisePlan(0.0, 0.0, 0.0, clip_bound=0.5, sampling_rate=1.0)
    c = local_train(ClientState(0, data), w0, None, quiet, 0, 0.3, 1, FairnessSettings(), seed=1)
    assert not np.array_equal(a.model.weights, b.model.weights)
    # with no noise the step is the mean clipped gradient, so it is at most lr * B long
    assert np.linalg.norm(c.model.weights - w0.weights) <= 0.3 * 0.5 + 1e-12


def test_missing_group_at_round_zero_skips_regularizer():
    data = _data()
    only0 = data.subset(np.flatnonzero(data.z == 0))
    w0 = LinearModel.init(2, 3, 0)
    upd = local_train(ClientState(0, only0), w0, None, NoisePlan(sampling_rate=1.0), 0, 0.1, 1, FairnessSettings("fixed", lam=0.4))
    plain = local_train(ClientState(0, only0), w0, None, NoisePlan(sampling_rate=1.0), 0, 0.1 * 0.6, 1, FairnessSettings())
    np.testing.assert_allclose(upd.model.weights, plain.model.weights, atol=1e-14)
    assert upd.metrics["dpl"] is None
    table = ProbabilityTable(np.array([[0.6, 0.4], [0.3, 0.7]]))
    with_table = local_train(ClientState(0, only0), w0, table, NoisePlan(sampling_rate=1.0), 1, 0.1, 1, FairnessSettings("fixed", lam=0.4))
    assert with_table.metrics["dpl"] is not None


def test_local_train_is_deterministic():
    plan = plan_noise(5.0, 1e-3, 0.1, 3, 1, 1.0)
    args = (LinearModel.init(2, 3, 0), None, plan, 1, 0.1, 1, FairnessSettings("tunable", target=0.1))
    a = local_train(ClientState(2, _data()), *args, seed=9)
    b = local_train(ClientState(2, _data()), *args, seed=9)
    assert a.model.weights.tobytes() == b.model.weights.tobytes()
    np.testing.assert_array_equal(a.noisy_stats.counts, b.noisy_stats.counts)
    assert a.metrics == b.metrics


def test_local_train_rejects_bad_inputs():
    with pytest.raises(ValueError):
        local_train(ClientState(0, _data().subset([])), LinearModel.init(2, 3, 0), None, NoisePlan(), 0, 0.1, 1, FairnessSettings())
    with pytest.raises(ValueError):
        local_train(ClientState(0, _data()), LinearModel.init(2, 5, 0), None, NoisePlan(), 0, 0.1, 1, FairnessSettings())
    with pytest.raises(ValueError):
        FairnessSettings("sometimes")
