import numpy as np
import pytest

from triadnet.counterfact import (
    EquilibriumDraw,
    Ensemble,
    ScenarioConfig,
    amplification,
    build_ensemble,
    compare,
    mean_change,
    paired_difference,
    run_counterfactual,
    solve_equilibrium_draw,
)
from triadnet.errors import ConfigError, DomainError, SizeError
from triadnet.genmodels import PoissonParams, TABLE5_POISSON, prob_function
from triadnet.netcore import build_proximity, common_support_matrix, distance_matrix
from triadnet.rng import dyad_uniforms

PARAMS = PoissonParams(2.0, 0.3, 0.3, 20.0)


@pytest.fixture(scope="module")
def covs():
    rng = np.random.default_rng(0)
    n, m = 40, 60
    prox = build_proximity(distance_matrix(4.7 + rng.random(n) * 0.3, -74.1 + rng.random(n) * 0.3))
    return rng.lognormal(0, 1.5, n), rng.lognormal(0, 1.5, m), prox


@pytest.fixture(scope="module")
def base(covs):
    xs, xb, prox = covs
    return build_ensemble(PARAMS, xs, xb, prox, n_draws=30, master_seed=1, keep_support=True)


# -- solver ------------------------------------------------------------------

def test_gamma_zero_single_iteration(covs):
    xs, xb, prox = covs
    d = solve_equilibrium_draw(PoissonParams(2.0, 0.3, 0.3, 0.0), xs, xb, prox, seed=4)
    assert d.iterations == 1 and d.converged


def test_draw_is_deterministic(covs):
    xs, xb, prox = covs
    a = solve_equilibrium_draw(PARAMS, xs, xb, prox, seed=9)
    b = solve_equilibrium_draw(PARAMS, xs, xb, prox, seed=9)
    assert np.array_equal(a.y, b.y) and a.digest() == b.digest() and a.iterations == b.iterations


def test_fixed_point_property(base, covs):
    xs, xb, prox = covs
    pf = prob_function(PARAMS, xs, xb)
    for d in base.draws:
        assert d.converged
        u = dyad_uniforms(d.seed, d.y.shape)
        # one more iteration with the draw's seed leaves the links unchanged
        assert np.array_equal(u < pf(common_support_matrix(d.y, prox)), d.y)
        assert np.allclose(d.S, common_support_matrix(d.y, prox))


def test_solver_argument_checks(covs):
    xs, xb, prox = covs
    with pytest.raises(ConfigError):
        solve_equilibrium_draw(PARAMS, xs, xb, prox, seed=0, tol=0.0)
    with pytest.raises(SizeError):
        solve_equilibrium_draw(PARAMS, xs[:-1], xb, prox, seed=0)


def test_non_convergence_is_flagged(covs):
    xs, xb, prox = covs
    ens = build_ensemble(PARAMS, xs, xb, prox, n_draws=3, master_seed=0, max_iter=1)
    assert ens.n_failed >= 1
    assert ens.summary()["n_failed"] == ens.n_failed


# -- ensembles ---------------------------------------------------------------

def test_single_draw_ensemble_matches_solver(covs):
    xs, xb, prox = covs
    ens = build_ensemble(PARAMS, xs, xb, prox, n_draws=1, master_seed=5)
    d = solve_equilibrium_draw(PARAMS, xs, xb, prox, ens.draws[0].seed)
    assert np.array_equal(ens.draws[0].y, d.y)
    with pytest.raises(ConfigError):
        build_ensemble(PARAMS, xs, xb, prox, n_draws=0)


def test_worker_count_invariance(covs):
    xs, xb, prox = covs
    a = build_ensemble(PARAMS, xs, xb, prox, n_draws=8, master_seed=2, workers=1)
    b = build_ensemble(PARAMS, xs, xb, prox, n_draws=8, master_seed=2, workers=3)
    assert [d.digest() for d in a.draws] == [d.digest() for d in b.draws]


def test_disjoint_seeds_agree_on_density(base, covs):
    xs, xb, prox = covs
    other = build_ensemble(PARAMS, xs, xb, prox, n_draws=30, master_seed=77)
    sa, sb = base.summary(), other.summary()
    assert abs(sa["density_mean"] - sb["density_mean"]) < 3 * np.hypot(sa["density_se"], sb["density_se"])


def test_light_draws_rebuild_support(base):
    d = base.draws[0]
    assert np.array_equal(d.light().support(base.proximity), d.S)


# -- scenarios ---------------------------------------------------------------

def test_scenario_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(xi=0.0)
    with pytest.raises(ConfigError):
        ScenarioConfig(mode="C3")
    with pytest.raises(ConfigError):
        ScenarioConfig(freeze="never")


def test_c2_identity_at_xi_one(base):
    c2 = run_counterfactual(base, ScenarioConfig(xi=1.0, mode="C2_frozen"))
    assert all(np.array_equal(a.y, b.y) for a, b in zip(base.draws, c2.draws))
    rep = compare(base, c2)
    assert np.all(rep.table["change"] == 0)


def test_channels_coincide_without_transitivity(covs):
    xs, xb, prox = covs
    p0 = PoissonParams(2.0, 0.3, 0.3, 0.0)
    b = build_ensemble(p0, xs, xb, prox, n_draws=20, master_seed=3)
    c1 = run_counterfactual(b, ScenarioConfig(mode="C1_full"))
    c2 = run_counterfactual(b, ScenarioConfig(mode="C2_frozen"))
    m1, s1 = mean_change(b, c1)
    m2, s2 = mean_change(b, c2)
    assert abs(m1 - m2) <= 2 * np.hypot(s1, s2)
    assert paired_difference(c1, c2) == (0.0, 0.0)


def test_transitivity_amplifies_shock(base):
    c1 = run_counterfactual(base, ScenarioConfig(mode="C1_full"))
    c2 = run_counterfactual(base, ScenarioConfig(mode="C2_frozen"))
    m1, _ = mean_change(base, c1)
    m2, _ = mean_change(base, c2)
    d, se = paired_difference(c1, c2)
    assert m1 > 0 and m2 > 0
    assert d > 3 * se
    # the knock-on channel raises mean support
    assert c1.mean_support() > base.mean_support()
    amp = amplification(compare(base, c1), compare(base, c2))
    assert list(amp.columns) == ["decile", "c1_change", "c2_change", "ratio"]
    # ensemble-mean freezing is a valid alternative
    alt = run_counterfactual(base, ScenarioConfig(mode="C2_frozen", freeze="ensemble_mean"))
    assert len(alt) == len(base)


# -- reports -----------------------------------------------------------------

def _mini(ys, seeds=(11, 12)):
    prox = build_proximity(np.array([[0, 1, 2, 3], [1, 0, 1, 2], [2, 1, 0, 1], [3, 2, 1, 0]], float))
    draws = tuple(EquilibriumDraw(s, np.asarray(y, bool), None, 1) for s, y in zip(seeds, ys))
    return Ensemble(draws, PARAMS, np.ones(4), np.ones(2), prox)


def test_compare_hand_tally():
    # sellers' baseline outdegrees: draw a (0,1,1,2), draw b (0,1,2,2); means (0,1,1.5,2)
    b = _mini([[[0, 0], [1, 0], [1, 0], [1, 1]], [[0, 0], [0, 1], [1, 1], [1, 1]]])
    c = _mini([[[1, 0], [1, 0], [1, 1], [1, 1]], [[0, 0], [1, 1], [1, 1], [1, 1]]])
    rep = compare(b, c, "sellers", n_groups=2).table
    # low group = sellers 0 and 1, high group = sellers 2 and 3
    assert list(rep["n_nodes"]) == [2, 2]
    # per-draw group mean changes: low (a: (1+0)/2, b: (0+1)/2), high (a: (1+0)/2, b: 0)
    assert rep["baseline_degree"].tolist() == pytest.approx([0.5, 1.75])
    assert rep["change"].tolist() == pytest.approx([0.5, 0.25])
    assert rep["change_se"].tolist() == pytest.approx([0.0, np.std([0.5, 0.0], ddof=1) / np.sqrt(2)])
    assert rep["rel_change"].tolist() == pytest.approx([1.0, 0.25 / 1.75])
    buyers = compare(b, c, "buyers", n_groups=2).table
    assert buyers["n_nodes"].sum() == 2


def test_compare_identical_and_mismatch():
    b = _mini([[[0, 1], [1, 0], [1, 1], [0, 0]], [[1, 1], [0, 0], [1, 0], [0, 1]]])
    assert np.all(compare(b, b).table["change"] == 0)
    with pytest.raises(DomainError):
        compare(b, _mini([d.y for d in b.draws], seeds=(1, 2)))
    with pytest.raises(SizeError):
        compare(b, _mini([b.draws[0].y], seeds=(11,)))
    with pytest.raises(ConfigError):
        b.degrees("both")


@pytest.mark.slow
def test_calibrated_deciles_pattern():
    # seller relative gains roughly flat, buyer gains concentrated at the top
    from triadnet.calib import savannah_config
    from triadnet.genmodels import simulate_dgp_panel

    panel, _ = simulate_dgp_panel(savannah_config(seed=0))
    xs, xb = panel.covariates.at(None)
    b = build_ensemble(TABLE5_POISSON, xs, xb, panel.proximity, n_draws=20, master_seed=0)
    c1 = run_counterfactual(b, ScenarioConfig(mode="C1_full"))
    c2 = run_counterfactual(b, ScenarioConfig(mode="C2_frozen"))
    sellers = amplification(compare(b, c1, "sellers"), compare(b, c2, "sellers"))
    buyers = amplification(compare(b, c1, "buyers"), compare(b, c2, "buyers"))
    assert sellers["ratio"].max() - sellers["ratio"].min() < 0.3
    assert buyers["ratio"].iloc[-1] > sellers["ratio"].iloc[-1]
