import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fairdpfl.fairness import (
    FairnessController,
    GroupCounts,
    MissingGroupError,
    ProbabilityTable,
    dpl_from_counts,
    dpl_hard,
    dpl_soft,
    gamma_hard,
    group_counts,
    lambda_init,
    lambda_update,
    soft_gamma,
)
from fairdpfl.linmodel import Dataset, LinearModel


def _four_sample_counts():
    # Z = [1, 1, 0, 0], predictions [1, 1, 1, 0]
    return group_counts([1, 1, 1, 0], [1, 1, 0, 0], 2, 2)


def _constant_model(cls, n_classes=2, dim=1):
    w = np.zeros((n_classes, dim + 1))
    w[cls, -1] = 5.0
    return LinearModel(w)


def test_gamma_worked_example():
    g = gamma_hard(_four_sample_counts())
    assert g[1, 1] == 0.5
    assert g[0, 0] == 0.5
    assert g[0, 1] == -0.5
    value, arg = dpl_from_counts(_four_sample_counts())
    assert value == 0.5 and arg == (0, 0)


def test_identical_rates_give_zero():
    counts = GroupCounts(np.array([[3.0, 1.0], [6.0, 2.0]]), np.array([4.0, 8.0]))
    np.testing.assert_array_equal(gamma_hard(counts), 0.0)
    assert dpl_from_counts(counts)[0] == 0.0


def test_fallback_supplies_missing_group():
    counts = group_counts([1, 0], [0, 0], 2, 2)  # only z=0, P(yhat=1|z=0) = 0.5
    table = ProbabilityTable(np.array([[0.5, 0.5], [0.2, 0.8]]))
    g = gamma_hard(counts, table)
    assert g[0, 1] == pytest.approx(-0.3)
    assert g[1, 1] == pytest.approx(0.3)


def test_missing_group_without_fallback_raises():
    counts = group_counts([1, 0], [0, 0], 2, 2)
    with pytest.raises(MissingGroupError):
        gamma_hard(counts)
    table = ProbabilityTable(np.array([[0.5, 0.5], [np.nan, np.nan]]))
    with pytest.raises(MissingGroupError):
        gamma_hard(counts, table)


def test_dpl_hard_on_model():
    x = np.array([[1.0], [1.0], [1.0], [-1.0]])
    model = LinearModel(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    batch = Dataset(x, np.zeros(4, dtype=int), np.array([1, 1, 0, 0]))
    assert dpl_hard(model, batch) == (0.5, (0, 0))
    with pytest.raises(ValueError):
        dpl_hard(model, batch.subset([]))


def test_constant_prediction_has_zero_dpl():
    batch = Dataset(np.random.default_rng(0).normal(size=(10, 1)), np.zeros(10, dtype=int), np.arange(10) % 2)
    assert dpl_hard(_constant_model(1), batch)[0] == 0.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2)), min_size=2, max_size=40))
def test_binary_antisymmetry_and_nonnegativity(pairs):
    z = [p[0] for p in pairs]
    yhat = [p[1] for p in pairs]
    if len(set(z)) < 2:
        return
    g = gamma_hard(group_counts(yhat, z, 2, 3))
    np.testing.assert_allclose(g[0], -g[1], atol=1e-12)
    assert dpl_from_counts(group_counts(yhat, z, 2, 3))[0] >= 0


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=3, max_size=30))
def test_counts_route_matches_brute_force(pairs):
    z = [p[0] for p in pairs]
    yhat = [p[1] for p in pairs]
    expected = oracles.brute_force_dpl(yhat, z, 3, 3)
    if expected is None:
        with pytest.raises(MissingGroupError):
            dpl_from_counts(group_counts(yhat, z, 3, 3))
        return
    assert dpl_from_counts(group_counts(yhat, z, 3, 3)) == (float(expected[0]), expected[1])


def test_noisy_counts_are_clamped():
    counts = GroupCounts(np.array([[-2.0, 4.0], [3.0, 1.0]]), np.array([2.0, 4.0]))
    g = gamma_hard(counts)
    assert g[0, 1] == pytest.approx(1.0 - 0.25)
    assert np.all(np.abs(g) <= 1)


def test_soft_uniform_model_is_zero():
    # both groups hold the same feature rows, so the mirrored contributions cancel
    x = np.random.default_rng(1).normal(size=(4, 2))
    batch = Dataset(np.vstack([x, x]), np.zeros(8, dtype=int), np.repeat([0, 1], 4))
    soft = dpl_soft(LinearModel.zeros(2, 2), batch)
    assert soft.value == 0.0
    np.testing.assert_allclose(soft.grads.sum(axis=0), 0.0, atol=1e-15)


def test_soft_gradient_one_sample_per_group():
    w = np.array([[0.3, -0.2], [-0.1, 0.4]])
    batch = Dataset(np.array([[0.7], [-1.2]]), np.array([0, 1]), np.array([0, 1]))
    soft = dpl_soft(LinearModel(w), batch)
    y, z = soft.argmax
    numeric = oracles.central_difference(lambda v: oracles.soft_gamma_entry(v, batch.x, batch.z, y, z), w)
    np.testing.assert_allclose(soft.grads.sum(axis=0), numeric, rtol=1e-5, atol=1e-10)


def test_soft_argmax_uses_soft_values():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 3))
    batch = Dataset(rng.normal(size=(12, 2)), rng.integers(3, size=12), np.arange(12) % 3, 3, 3)
    soft = dpl_soft(LinearModel(w), batch)
    g = soft_gamma(LinearModel(w), batch)
    y, z = soft.argmax
    assert soft.value == g[z, y] == g.max()


def test_soft_approaches_hard_at_low_temperature():
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.normal(size=(2, 3))
        x = rng.normal(size=(30, 2))
        # keep samples away from the decision boundary so scaling hardens every prediction
        margin = np.abs((x @ (w[1, :2] - w[0, :2])) + (w[1, 2] - w[0, 2]))
        x = x[margin > 0.2]
        z = np.arange(len(x)) % 2
        batch = Dataset(x, np.zeros(len(x), dtype=int), z)
        hard = dpl_hard(LinearModel(w), batch)[0]
        soft = dpl_soft(LinearModel(100 * w), batch).value
        assert abs(soft - hard) < 1e-3


def test_soft_fallback_groups_have_no_gradient():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 2))
    batch = Dataset(rng.normal(size=(5, 1)), np.zeros(5, dtype=int), np.zeros(5, dtype=int))
    table = ProbabilityTable(np.array([[0.5, 0.5], [0.1, 0.9]]))
    soft = dpl_soft(LinearModel(w), batch, table)
    y, z = soft.argmax
    coef_sign = 1 if z == 0 else -1
    # the only gradient comes from the present group; it matches the numeric derivative of its mean
    def own_mean(v):
        s = batch.x @ v[:, :-1].T + v[:, -1]
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        return p[:, y].mean()

    numeric = oracles.central_difference(own_mean, w)
    np.testing.assert_allclose(soft.grads.sum(axis=0), coef_sign * numeric, rtol=1e-5, atol=1e-10)


def test_probability_table_json_marks_absent_rows():
    table = ProbabilityTable(np.array([[0.25, 0.75], [np.nan, np.nan]]))
    assert table.to_json() == [[0.25, 0.75], [None, None]]
    assert table.available(0) and not table.available(1)


def test_controller_validation():
    with pytest.raises(ValueError):
        FairnessController(lam=1.5)
    with pytest.raises(ValueError):
        FairnessController(rho=0.0)
    with pytest.raises(ValueError):
        FairnessController(momentum=-1.0)


def test_lambda_init_cases():
    c = FairnessController(target=0.1)
    x = np.array([[1.0], [1.0], [-1.0], [-1.0], [1.0], [-1.0]])
    z = np.array([1, 1, 1, 0, 0, 0])
    batch = Dataset(x, np.zeros(6, dtype=int), z)
    steep = LinearModel(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    measured = dpl_hard(steep, batch)[0]
    assert measured == pytest.approx(1 / 3)
    assert lambda_init(c, steep, batch, round_idx=0) == 0.0
    assert lambda_init(c, steep, batch, round_idx=3) == 1.0
    assert lambda_init(FairnessController(target=0.4), steep, batch, round_idx=3) == 0.0
    assert lambda_init(c, _constant_model(0), batch, round_idx=3) == 0.0


def test_lambda_update_worked_example():
    c = FairnessController(lam=0.5, velocity=0.2, momentum=0.5, rho=0.1, target=0.1)
    out = lambda_update(c, 0.3, 0.0)
    assert out.velocity == pytest.approx(-0.1)
    assert out.lam == pytest.approx(0.51)
    same = lambda_update(FairnessController(lam=0.4, target=0.2), 0.2, 0.0)
    assert same.lam == 0.4


def test_lambda_saturates():
    c = FairnessController(lam=0.0, rho=0.2, target=0.1)
    for _ in range(200):
        c = lambda_update(c, 0.5)
    assert c.lam == 1.0


@given(
    st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), max_size=50),
    st.floats(0, 1),
    st.floats(0, 0.99),
    st.floats(1e-3, 5),
)
def test_lambda_stays_in_unit_interval(seq, lam0, momentum, rho):
    c = FairnessController(lam=lam0, momentum=momentum, rho=rho, target=0.1)
    for dpl, noise in seq:
        c = lambda_update(c, dpl, noise)
        assert 0.0 <= c.lam <= 1.0
