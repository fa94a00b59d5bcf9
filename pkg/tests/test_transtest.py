import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triadnet.errors import ConfigError, SizeError
from triadnet.genmodels import DgpConfig
from triadnet.netcore import build_proximity, common_support_matrix, distance_matrix, expected_triads_uniform
from triadnet.transtest import (
    BinScheme,
    NullOptions,
    RankCodes,
    block_fit,
    cg_fit,
    clamp_probabilities,
    fit_saturated_lpm,
    monte_carlo_validation,
    null_distribution,
    residual_cross,
    residualize_minnorm,
    run_test,
    t_check_statistic,
    t_statistic,
)


def dense_design(sb, bb):
    """Explicit dummy design: seller x buyer-bin and buyer x seller-bin columns."""
    ns, nb = sb.size, bb.size
    qs, qb = sb.max() + 1, bb.max() + 1
    X = np.zeros((ns * nb, ns * qb + nb * qs))
    for i in range(ns):
        for j in range(nb):
            X[i * nb + j, i * qb + bb[j]] = 1
            X[i * nb + j, ns * qb + j * qs + sb[i]] = 1
    return X


def lstsq_fit(y, sb, bb):
    X = dense_design(sb, bb)
    coef, *_ = np.linalg.lstsq(X, y.ravel(), rcond=None)
    return (X @ coef).reshape(y.shape), X


def _random_case(seed, ns=8, nb=11, qs=3, qb=2):
    rng = np.random.default_rng(seed)
    sb = np.concatenate([np.arange(qs), rng.integers(0, qs, ns - qs)])
    bb = np.concatenate([np.arange(qb), rng.integers(0, qb, nb - qb)])
    return rng, sb, bb


# -- saturated fit -----------------------------------------------------------

def test_constant_outcome():
    sb, bb = np.array([0, 0, 1, 1]), np.array([0, 1, 1])
    fit = fit_saturated_lpm(np.full((4, 3), 0.3), seller_bins=sb, buyer_bins=bb)
    assert np.allclose(fit.fitted, 0.3) and np.allclose(fit.resid, 0)


def test_outcome_in_span_has_zero_residuals():
    rng, sb, bb = _random_case(1)
    a_o = rng.normal(size=(8, 2))
    y = a_o[:, bb]  # pure seller-identity x buyer-bin function
    fit = fit_saturated_lpm(y, seller_bins=sb, buyer_bins=bb)
    assert np.abs(fit.resid).max() < 1e-8


def test_one_bin_is_two_way_anova():
    rng = np.random.default_rng(2)
    y = rng.random((6, 9))
    fit = fit_saturated_lpm(y, seller_bins=np.zeros(6, int), buyer_bins=np.zeros(9, int))
    anova = y.mean(1, keepdims=True) + y.mean(0, keepdims=True) - y.mean()
    assert np.allclose(fit.fitted, anova, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_closed_form_matches_dense_least_squares(seed):
    rng, sb, bb = _random_case(seed)
    y = (rng.random((8, 11)) < 0.3).astype(float)
    fit = fit_saturated_lpm(y, seller_bins=sb, buyer_bins=bb)
    ref, X = lstsq_fit(y, sb, bb)
    assert np.allclose(fit.fitted, ref, atol=1e-10)
    # residuals orthogonal to every design column
    assert np.abs(X.T @ fit.resid.ravel()).max() < 1e-6


def test_cg_matches_closed_form():
    rng, sb, bb = _random_case(3, ns=30, nb=40, qs=4, qb=5)
    y = (rng.random((30, 40)) < 0.2).astype(float)
    fitted, _, it = cg_fit(y, sb, bb)
    ref, _, _ = block_fit(y, sb, bb)
    assert np.allclose(fitted, ref, atol=1e-7)
    assert it > 0


def test_fit_argument_errors():
    with pytest.raises(SizeError):
        fit_saturated_lpm(np.zeros(3), seller_bins=[0], buyer_bins=[0])
    with pytest.raises(ConfigError):
        fit_saturated_lpm(np.zeros((2, 2)))
    with pytest.raises(SizeError):
        fit_saturated_lpm(np.zeros((2, 2)), seller_bins=[0, 0, 0], buyer_bins=[0, 0])


def test_bin_scheme_deciles_cover_everything():
    rng = np.random.default_rng(0)
    xs, xb = rng.lognormal(0, 1, 57), rng.lognormal(0, 1, 91)
    bins = BinScheme.from_sizes(xs, xb, 10)
    sb, bb = bins.seller_bins(xs), bins.buyer_bins(xb)
    assert set(sb) == set(range(10)) and set(bb) == set(range(10))
    # ties collapse bins but never leave a gap
    tied = BinScheme.from_sizes(np.ones(20), np.ones(5), 10)
    assert set(tied.seller_bins(np.ones(20))) == {0}


# -- residualization and statistics ------------------------------------------

def test_minnorm_examples():
    assert np.allclose(residualize_minnorm([-0.2, 0.0, 0.3]), [0, 0.2, 0.5])
    assert np.all(residualize_minnorm(np.full(4, 2.5)) == 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_minnorm_properties(v):
    out = residualize_minnorm(v)
    assert out.min() == 0
    v = np.asarray(v)
    # pairwise order kept (rounding can only merge, never swap)
    lt = v[:, None] < v[None, :]
    assert np.all((out[:, None] <= out[None, :])[lt])


def test_t_statistic_examples():
    assert t_statistic(np.zeros((3, 3)), np.ones((3, 3))) == 0
    assert t_statistic(np.ones((2, 2)), np.ones((2, 2))) == 4
    rng = np.random.default_rng(4)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    assert t_statistic(a, b) == pytest.approx(sum(a[i, j] * b[i, j] for i in range(5) for j in range(5)))
    with pytest.raises(SizeError):
        t_statistic(np.ones((2, 2)), np.ones((3, 2)))


def brute_check(y, r):
    ns, nb = y.shape
    return sum(y[i, j] * r[k, i] * y[k, j] for i in range(ns) for j in range(nb) for k in range(ns) if k != i)


def test_t_check_examples():
    assert t_check_statistic(np.zeros((2, 1)), np.ones((2, 2))) == 0
    y, r = np.ones((2, 1)), np.ones((2, 2))
    assert t_check_statistic(y, r) == brute_check(y, r) == 2
    rng = np.random.default_rng(5)
    y, r = rng.random((6, 4)), rng.random((6, 6))
    v = t_check_statistic(y, r)
    assert v == pytest.approx(brute_check(y, r), abs=1e-9)
    swapped = float(np.einsum("kj,ki,ij->", y, r - np.diag(np.diag(r)), y))
    assert v == pytest.approx(swapped, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 10), st.integers(2, 8), st.integers(0, 10_000))
def test_t_equals_defining_triple_sum(ns, nb, seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((ns, 2))
    prox = build_proximity(np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1)))
    y = (rng.random((ns, nb)) < 0.5).astype(float)
    y_nr = residualize_minnorm(y - y.mean())
    r = prox.proximity
    # S built by its defining sum rather than the matrix product
    S = np.array([[sum(r[k, i] * y[k, j] for k in range(ns) if k != i) / (ns - 1) for j in range(nb)]
                  for i in range(ns)])
    S_nr = residualize_minnorm(S - S.mean())
    brute = sum(y_nr[i, j] * S_nr[i, j] for i, j in itertools.product(range(ns), range(nb)))
    assert t_statistic(y_nr, S_nr) == pytest.approx(brute, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_cross_matches_explicit_residuals(seed):
    rng, sb, bb = _random_case(seed)
    y = (rng.random((8, 11)) < 0.3).astype(float)
    S = rng.random((8, 11))
    ry = y - block_fit(y, sb, bb)[0]
    rs = S - block_fit(S, sb, bb)[0]
    assert residual_cross(y, S, sb, bb) == pytest.approx(float((ry * rs).sum()), abs=1e-9)


# -- null machinery ----------------------------------------------------------

def test_rank_codes_match_build_proximity():
    rng = np.random.default_rng(6)
    lat, lon = 4.7 + rng.random(15) * 0.3, -74 + rng.random(15) * 0.3
    d = distance_matrix(lat, lon)
    for mode, q in (("continuous_rank", None), ("quantile", 25.0)):
        prox = build_proximity(d, mode, q)
        codes = RankCodes(prox)
        idx = np.array([3, 3, 0, 7, 12, 9, 9, 9, 1])
        sub = d[np.ix_(idx, idx)]
        got = codes.proximity(idx)
        ref = build_proximity(sub + 0.0, mode, q).proximity
        off = ~np.eye(idx.size, dtype=bool)
        dup = idx[:, None] == idx[None, :]
        # co-located copies (distance 0) rank as the closest pairs
        assert np.allclose(got[off & ~dup], ref[off & ~dup])
        assert np.all(np.diag(got) == 0)


def test_clamp_preserves_block_means():
    sb, bb = np.array([0, 0, 1]), np.array([0, 1])
    f = np.array([[-0.1, 0.5], [0.3, 1.2], [0.2, 0.4]])
    p = clamp_probabilities(f, sb, bb)
    assert p.min() >= 0 and p.max() <= 1
    assert p[:2, 0].mean() == pytest.approx(f[:2, 0].mean())
    assert np.array_equal(clamp_probabilities(f, sb, bb, "plain"), np.clip(f, 0, 1))
    with pytest.raises(ConfigError):
        clamp_probabilities(f, sb, bb, "none")


def _small_network(seed=0, gamma=20.0, ns=40, nb=60):
    cfg = DgpConfig(n_sellers=ns, n_buyers=nb, seed=seed, dynamics="equilibrium",
                    params={"alpha": 2.0, "eta": 0.3, "beta": 0.3, "gamma": gamma})
    from triadnet.genmodels import simulate_dgp_panel

    panel, _ = simulate_dgp_panel(cfg)
    xs, xb = panel.covariates.at(None)
    return panel.y[0], xs, xb, panel.proximity


def test_null_is_seed_deterministic_and_worker_invariant():
    y, xs, xb, prox = _small_network()
    fit = fit_saturated_lpm(y, xs, xb, BinScheme.from_sizes(xs, xb, 4))
    a = null_distribution(fit, prox, B=100, seed=5)
    b = null_distribution(fit, prox, B=100, seed=5)
    c = null_distribution(fit, prox, B=100, seed=5, workers=3)
    assert a.size == 100
    assert np.array_equal(a, b) and np.array_equal(a, c)
    assert not np.array_equal(a, null_distribution(fit, prox, B=100, seed=6))


@pytest.mark.parametrize("opts", [NullOptions(normalization="own"), NullOptions(draw="deterministic"),
                                  NullOptions(proximity="submatrix", clamp="plain")])
def test_null_option_variants_run(opts):
    y, xs, xb, prox = _small_network()
    rep = run_test(y, xs, xb, prox, B=20, seed=1, options=opts, q=3)
    assert rep.null_draws.size == 20 and np.all(np.isfinite(rep.null_draws))


def test_run_test_report_invariants():
    y, xs, xb, prox = _small_network()
    rep = run_test(y, xs, xb, prox, B=100, seed=2, q=4)
    assert 0 <= rep.p_value <= 1
    assert rep.null_draws.size == rep.B == 100
    assert rep.null_p50 <= rep.null_p95
    d = rep.to_dict()
    assert "null_draws" not in d and d["variant"] == "T"
    chk = run_test(y, xs, xb, prox, B=20, seed=2, q=4, variant="T_check")
    assert np.isfinite(chk.T_data)
    with pytest.raises(ConfigError):
        run_test(y, xs, xb, prox, B=5, variant="U")


def test_statistic_invariant_to_buyer_relabeling():
    y, xs, xb, prox = _small_network()
    perm = np.random.default_rng(0).permutation(y.shape[1])
    a = run_test(y, xs, xb, prox, B=1, seed=0, q=4).T_data
    b = run_test(y[:, perm], xs, xb[perm], prox, B=1, seed=0, q=4).T_data
    assert a == pytest.approx(b, rel=1e-12)


def test_registry_mismatch():
    y, xs, xb, prox = _small_network()
    with pytest.raises(SizeError):
        run_test(y[:-1], xs, xb, prox, B=1)


def test_transitive_network_rejects():
    # quick power check on a small strongly transitive network
    y, xs, xb, prox = _small_network(seed=3, gamma=40.0, ns=60, nb=100)
    rep = run_test(y, xs, xb, prox, B=200, seed=0, q=5)
    assert rep.T_data > rep.null_p95


def test_uniform_graph_matches_closed_form_decision():
    # homogeneous nodes: with no transitivity neither the bootstrap test nor
    # the closed-form triad comparison should flag excess closure
    cfg = DgpConfig(n_sellers=30, n_buyers=40, seed=1, size_sigma=0.0, transitivity=False,
                    params={"alpha": 3.0, "eta": 0.5, "beta": 0.5, "gamma": 0.0})
    df = monte_carlo_validation(cfg, R=4, B=100, q=1)
    assert df["reject"].sum() <= 1
    assert expected_triads_uniform(30, 100) > 0


def test_monte_carlo_smoke():
    cfg = DgpConfig(n_sellers=20, n_buyers=30)
    df = monte_carlo_validation(cfg, R=1, B=100, q=3)
    assert len(df) == 1
    assert {"dist50", "dist95", "reject"} <= set(df.columns)
    with pytest.raises(ConfigError):
        monte_carlo_validation(cfg, R=0)
