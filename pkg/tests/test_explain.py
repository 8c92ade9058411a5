import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phenoflow import explain as ex
from phenoflow.errors import InvalidCoalitionSize, LengthMismatch
from phenoflow.neural import N_FEATURES


def _random_net(M, rng, hidden=8):
    W1 = rng.normal(size=(M, hidden))
    b1 = rng.normal(size=hidden)
    w2 = rng.normal(size=hidden)

    def f(X):
        X = np.atleast_2d(X)
        return np.tanh(X @ W1 + b1) @ w2 + 0.3 * X[:, 0] * X[:, -1]

    return f


# ------------------------------------------------------------------ kernel weight


def test_kernel_weight_examples():
    assert ex.shapley_kernel_weight(3, 1) == pytest.approx(1 / 3)
    assert ex.shapley_kernel_weight(3, 2) == pytest.approx(1 / 3)
    assert ex.shapley_kernel_weight(4, 2) == pytest.approx(0.125)


@given(st.integers(2, 40), st.data())
def test_kernel_weight_symmetry(M, data):
    s = data.draw(st.integers(1, M - 1))
    assert ex.shapley_kernel_weight(M, s) == pytest.approx(ex.shapley_kernel_weight(M, M - s))


def test_kernel_weight_rejects_full_and_empty():
    with pytest.raises(InvalidCoalitionSize):
        ex.shapley_kernel_weight(5, 0)
    with pytest.raises(InvalidCoalitionSize):
        ex.shapley_kernel_weight(5, 5)


# ------------------------------------------------------------------ kernel SHAP


def test_dummy_feature_zero(rng):
    f0 = _random_net(5, rng)

    def f(X):
        X = np.atleast_2d(X)
        return f0(X[:, [0, 1, 2, 3, 4]]) + 0.0 * X[:, 5]

    x = rng.normal(size=6)
    bg = rng.normal(size=(10, 6))
    e = ex.kernel_shap(f, x, bg, mode="exact")
    assert abs(e.phi[5]) < 1e-8


def test_linear_model_analytic(rng):
    w = rng.normal(size=8)
    x = rng.normal(size=8)
    b = rng.normal(size=8)
    e = ex.kernel_shap(lambda X: np.atleast_2d(X) @ w, x, b[None, :], mode="exact")
    np.testing.assert_allclose(e.phi, w * (x - b), atol=1e-10, rtol=0)


def test_linear_model_sampling_is_exact(rng):
    # a linear model is fit exactly by any full-rank design
    w = rng.normal(size=N_FEATURES)
    x = rng.normal(size=N_FEATURES)
    bg = rng.normal(size=(20, N_FEATURES))
    e = ex.kernel_shap(lambda X: np.atleast_2d(X) @ w, x, bg, 512, seed=1)
    assert not e.exact
    np.testing.assert_allclose(e.phi, w * (x - bg.mean(axis=0)), atol=1e-9)


def test_exact_matches_permutation_definition_m10(rng):
    f = _random_net(10, rng)
    x = rng.normal(size=10)
    bg = rng.normal(size=(6, 10))
    e = ex.kernel_shap(f, x, bg, mode="exact")
    np.testing.assert_allclose(e.phi, ex.exact_shapley_permutations(f, x, bg), atol=1e-6)


def test_subset_oracle_equals_literal_permutation_average(rng):
    M = 5
    f = _random_net(M, rng)
    x = rng.normal(size=M)
    bg = rng.normal(size=(4, M))

    def v(mask):
        X = np.where(np.array(mask, dtype=bool), x, bg)
        return float(np.mean(f(X)))

    phi = np.zeros(M)
    perms = list(itertools.permutations(range(M)))
    for order in perms:
        mask = [False] * M
        for i in order:
            before = v(mask)
            mask[i] = True
            phi[i] += v(mask) - before
    phi /= len(perms)
    np.testing.assert_allclose(ex.exact_shapley_permutations(f, x, bg), phi, atol=1e-12)


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_exact_equivalence_property(M, seed):
    rng = np.random.default_rng(seed)
    f = _random_net(M, rng, hidden=4)
    x = rng.normal(size=M)
    bg = rng.normal(size=(3, M))
    e = ex.kernel_shap(f, x, bg, mode="exact")
    np.testing.assert_allclose(e.phi, ex.exact_shapley_permutations(f, x, bg), atol=1e-6)


@given(st.integers(2, 9), st.integers(0, 10_000))
def test_efficiency(M, seed):
    rng = np.random.default_rng(seed)
    f = _random_net(M, rng, hidden=4)
    x = rng.normal(size=M)
    bg = rng.normal(size=(4, M))
    e = ex.kernel_shap(f, x, bg, n_coalitions=64, seed=seed)
    assert abs(e.reconstructed - e.prediction) <= 1e-8


def test_efficiency_sampling_79(rng):
    f = _random_net(N_FEATURES, rng, hidden=6)
    bg = rng.normal(size=(30, N_FEATURES))
    for k in range(3):
        e = ex.kernel_shap(f, rng.normal(size=N_FEATURES), bg, 600, seed=k)
        assert abs(e.reconstructed - e.prediction) <= 1e-8


def test_symmetry(rng):
    # features 1 and 2 enter symmetrically and share their x / background columns
    def f(X):
        X = np.atleast_2d(X)
        return np.sin(X[:, 1] + X[:, 2]) * X[:, 0] + X[:, 1] * X[:, 2]

    x = np.array([0.7, 1.3, 1.3, -0.2])
    bg = rng.normal(size=(5, 4))
    bg[:, 2] = bg[:, 1]
    e = ex.kernel_shap(f, x, bg, mode="exact")
    assert e.phi[1] == pytest.approx(e.phi[2], abs=1e-8)


def test_sampling_error_shrinks_with_budget():
    rms = {100: [], 400: []}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        f = _random_net(12, rng)
        x = rng.normal(size=12)
        bg = rng.normal(size=(5, 12))
        exact = ex.kernel_shap(f, x, bg, mode="exact").phi
        for n in rms:
            phi = ex.kernel_shap(f, x, bg, n, seed=seed, mode="sampling").phi
            rms[n].append(math.sqrt(np.mean((phi - exact) ** 2)))
    assert np.mean(rms[400]) <= np.mean(rms[100])


def test_sampling_deterministic(rng):
    f = _random_net(20, rng)
    x = rng.normal(size=20)
    bg = rng.normal(size=(5, 20))
    a = ex.kernel_shap(f, x, bg, 200, seed=4)
    b = ex.kernel_shap(f, x, bg, 200, seed=4)
    assert np.array_equal(a.phi, b.phi)


def test_sampling_budget_too_small(rng):
    with pytest.raises(ValueError):
        ex.kernel_shap(lambda X: np.atleast_2d(X).sum(axis=1), np.zeros(20), np.ones((2, 20)), 30, mode="sampling")


def test_background_shape_mismatch():
    with pytest.raises(LengthMismatch):
        ex.kernel_shap(lambda X: np.atleast_2d(X).sum(axis=1), np.zeros(4), np.ones((2, 5)))


def test_select_background_cap(rng):
    X = rng.normal(size=(250, 4))
    bg = ex.select_background(X, cap=100, seed=3)
    assert bg.shape == (100, 4)
    assert np.array_equal(bg, ex.select_background(X, cap=100, seed=3))
    assert ex.select_background(X[:50], cap=100).shape == (50, 4)


# ------------------------------------------------------------------ aggregation


def test_zero_phi_aggregates():
    agg = ex.aggregate_weekly(np.zeros(N_FEATURES))
    assert agg.as_tuple() == (0.0, 0.0, 0.0, 0.0)


def test_sign_cancellation():
    phi = np.zeros(N_FEATURES)
    phi[:13] = 1.0
    phi[13:26] = -1.0
    agg = ex.aggregate_weekly(phi)
    assert agg.air_temp == 0.0
    assert ex.a_shap([agg])["air_temp"] == 0.0


@given(st.integers(0, 10_000))
def test_aggregate_matches_slicing_oracle(seed):
    phi = np.random.default_rng(seed).normal(size=N_FEATURES)
    agg = ex.aggregate_weekly(phi)
    assert agg.air_temp == pytest.approx(sum(phi[i] for i in range(0, 26)), abs=1e-12)
    assert agg.precipitation == pytest.approx(sum(phi[i] for i in range(26, 52)), abs=1e-12)
    assert agg.irradiance == pytest.approx(sum(phi[i] for i in range(52, 78)), abs=1e-12)
    assert agg.soil == phi[78]


def test_aggregate_wrong_length():
    with pytest.raises(LengthMismatch):
        ex.aggregate_weekly(np.zeros(10))


def _agg(v, var="soil", plot="P1", year=2014):
    vals = {k: 0.0 for k in ex.VARIABLES}
    vals[var] = v
    return ex.AggregatedShap(plot, year, **vals)


def test_a_shap_examples():
    assert ex.a_shap([_agg(2.0), _agg(-2.0)])["soil"] == 4.0
    assert ex.a_shap([_agg(-3.0)])["soil"] == 3.0


@given(st.lists(st.tuples(*[st.floats(-10, 10)] * 4), min_size=1, max_size=20))
def test_a_shap_loop_oracle(rows):
    aggs = [ex.AggregatedShap(None, None, *r) for r in rows]
    got = ex.a_shap(aggs)
    for k, name in enumerate(ex.VARIABLES):
        total = 0.0
        for r in rows:
            total += abs(r[k])
        assert got[name] == pytest.approx(total, abs=1e-9)


def test_soil_correlation_perfect():
    soil = np.linspace(2, 12, 20)
    assert ex.shap_soil_correlation(soil, -0.4 * soil + 3) == pytest.approx(-1.0)


def test_grouped_aggregates_reconcile():
    rng = np.random.default_rng(0)
    rows = [
        ex.AggregatedShap(f"P{i % 4}", 2014 + i % 3, *rng.normal(size=4)) for i in range(24)
    ]
    cats = {"P0": "A", "P1": "B", "P2": "A", "P3": "C"}
    out = ex.grouped_aggregates("sos", rows, cats)
    table = {(r[1], r[2], r[3]): r for r in out}
    for name in ex.VARIABLES:
        assert table[("all", "all", name)][5] == pytest.approx(sum(getattr(r, name) for r in rows))
        sub = [r for r in rows if r.year == 2015 and cats[r.plot_id] == "A"]
        assert table[(2015, "A", name)][4] == len(sub)
        assert table[(2015, "A", name)][6] == pytest.approx(sum(abs(getattr(r, name)) for r in sub))


def test_shap_and_aggregate_files_roundtrip(tmp_path, rng):
    f = _random_net(N_FEATURES, rng, hidden=4)
    bg = rng.normal(size=(10, N_FEATURES))
    expls = [ex.kernel_shap(f, rng.normal(size=N_FEATURES), bg, 300, seed=i, plot_id=f"P{i}", year=2014)
             for i in range(3)]
    ex.write_shap(tmp_path / "shap.csv", "sos", expls)
    back = ex.read_shap(tmp_path / "shap.csv")
    for e, r in zip(expls, back):
        assert np.array_equal(e.phi, r["phi"])
        assert r["base"] == e.base_value and r["prediction"] == e.prediction
    rows = ex.grouped_aggregates("sos", [ex.aggregate_weekly(e) for e in expls], {})
    ex.write_aggregates(tmp_path / "agg.csv", rows)
    agg = ex.read_aggregates(tmp_path / "agg.csv")
    assert len(agg) == len(rows)
    assert [a["shap_sum"] for a in agg] == [float(r[5]) for r in rows]
