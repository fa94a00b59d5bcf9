"""Hybrid calibration of the generalized Poisson link model.

(alpha, eta, beta) maximize the Bernoulli likelihood given gamma; gamma
solves the moment condition that the model reproduces the estimated
transitivity coefficient. The two steps alternate with damping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .errors import ConfigError, DomainError, NumericError
from .genmodels import (
    DgpConfig,
    PoissonParams,
    TABLE5_POISSON,
    fixed_point_links,
    prob_function,
    seller_shares,
    simulate_dgp_panel,
)
from .netcore import ProximityMatrix, asinh, common_support_matrix
from .panel import fe_backfit, within_transform
from .rng import derive_seed, dyad_uniforms

log = logging.getLogger(__name__)

G_FLOOR = 1e-12
LOG_BOUNDS = (-50.0, 10.0)


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Observed links plus the residualized estimation artifacts.

    ``y`` and ``S`` are (sellers, buyers) or a (years, sellers, buyers)
    stack pooled over years with common sizes. ``xs`` and ``xb`` are
    already normalized; ``y_perp`` and ``a_perp`` (residualized asinh S~,
    fitted from the instrument when one is used) follow the flattened
    order of ``y``.
    """

    y: np.ndarray
    xs: np.ndarray
    xb: np.ndarray
    S: np.ndarray
    y_perp: np.ndarray
    a_perp: np.ndarray
    theta_hat: float
    proximity: ProximityMatrix | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        n = y.size
        if (y.ndim not in (2, 3) or self.S.shape != y.shape
                or self.xs.size != y.shape[-2] or self.xb.size != y.shape[-1]):
            raise DomainError("calibration inputs are not dimension-consistent")
        if self.y_perp.size != n or self.a_perp.size != n:
            raise DomainError("artifacts must cover every dyad")
        if not math.isfinite(self.theta_hat):
            raise DomainError("theta_hat must be finite")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class CalibrationResult:
    params: PoissonParams
    loglik: float
    theta_gap: float
    iterations: int
    converged: bool
    gamma_path: tuple = ()
    grad_norm: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_path"] = list(self.gamma_path)
        return d


# ---------------------------------------------------------------------------
# likelihood


def _log_sizes(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)


class _Lik:
    """Negative mean log-likelihood and gradient in log (alpha, eta, beta)."""

    def __init__(self, problem: CalibrationProblem, gamma: float):
        self.y = problem.y
        self.lxs = _log_sizes(problem.xs)[:, None]
        self.lxb = _log_sizes(problem.xb)[None, :]
        self.pos = (problem.xs > 0)[:, None] & (problem.xb > 0)[None, :]
        self.mult = 1.0 + gamma * problem.S
        self.n = problem.y.size

    def rate(self, alpha, eta, beta):
        lam = alpha * np.exp(eta * self.lxs + beta * self.lxb) * self.mult
        return np.where(self.pos, lam, 0.0)

    def __call__(self, theta):
        alpha, eta, beta = np.exp(theta)
        lam = self.rate(alpha, eta, beta)
        g = -np.expm1(-lam)
        gc = np.clip(g, G_FLOOR, 1.0 - G_FLOOR)
        ll = np.where(self.y > 0, np.log(gc), np.log1p(-gc))
        # d ll / d lambda, zero where G sits on a clamp
        free = (g > G_FLOOR) & (g < 1.0 - G_FLOOR)
        with np.errstate(divide="ignore", invalid="ignore"):
            dl = np.where(self.y > 0, np.exp(-lam) / np.where(free, g, 1.0), 0.0) - (1.0 - self.y)
        dl = np.where(free, dl, 0.0) * lam
        grad = np.array([dl.sum(), eta * (dl * self.lxs).sum(), beta * (dl * self.lxb).sum()])
        return -ll.sum() / self.n, -grad / self.n


def loglik(params: PoissonParams, problem: CalibrationProblem) -> float:
    """Bernoulli log-likelihood of all dyads with G clamped to [1e-12, 1 - 1e-12]."""
    f, _ = _Lik(problem, params.gamma)(np.log([params.alpha, params.eta, params.beta]))
    if not math.isfinite(f):
        raise NumericError("log-likelihood is not finite")
    return -f * problem.y.size


@dataclass(frozen=True)
class MleResult:
    alpha: float
    eta: float
    beta: float
    loglik: float
    grad_norm: float
    converged: bool


def mle_given_gamma(problem: CalibrationProblem, gamma: float, init=(0.5, 0.5, 0.5),
                    gtol: float = 1e-6, max_iter: int = 1000) -> MleResult:
    """Maximize the likelihood over log (alpha, eta, beta) with gamma held fixed."""
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    if min(init) <= 0:
        raise DomainError("initial guesses must be positive")
    f = _Lik(problem, gamma)
    x0 = np.log(np.asarray(init, dtype=float))
    if problem.y.sum() == 0:
        # the likelihood only rises as alpha -> 0; report that boundary
        log.warning("no links observed; alpha goes to its lower bound")
        x = np.array([LOG_BOUNDS[0], x0[1], x0[2]])
        fx, gx = f(x)
        a, e, b = np.exp(x)
        return MleResult(float(a), float(e), float(b), -fx * problem.y.size, float(np.linalg.norm(gx)), False)
    f0, _ = f(x0)
    res = minimize(f, x0, jac=True, method="L-BFGS-B", bounds=[LOG_BOUNDS] * 3,
                   options={"maxiter": max_iter, "gtol": gtol * 1e-3, "ftol": 1e-15, "maxcor": 20})
    x = res.x if res.fun <= f0 else x0
    fx, gx = f(x)
    gn = float(np.linalg.norm(gx))
    a, e, b = np.exp(x)
    return MleResult(float(a), float(e), float(b), -fx * problem.y.size, gn, bool(gn < gtol))


def theta_implied(params: PoissonParams, problem: CalibrationProblem) -> float:
    """Cov(a, y_perp - y + G(W)) / Var(a) for the residualized regressor a."""
    a = problem.a_perp
    va = float(np.var(a))
    if not va > 0:
        raise DomainError("residualized regressor has zero variance")
    lam = params.alpha * _pow(problem.xs, params.eta)[:, None] * _pow(problem.xb, params.beta)[None, :]
    G = -np.expm1(-lam * (1.0 + params.gamma * problem.S))
    v = problem.y_perp - problem.y.ravel() + G.ravel()
    return float(np.mean((a - a.mean()) * (v - v.mean())) / va)


def _pow(x, p):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, np.abs(x) ** p, 0.0)


def solve_gamma(problem: CalibrationProblem, alpha, eta, beta, gamma_hint: float = 10.0,
                gamma_max: float = 1e4, tol: float = 1e-10) -> float:
    """Root of Theta(gamma) = theta_hat by bracket expansion and bisection."""
    target = problem.theta_hat

    def h(gm):
        return theta_implied(PoissonParams(alpha, eta, beta, gm), problem) - target

    lo, hi = 0.0, max(gamma_hint, 1.0)
    f_lo = h(lo)
    if f_lo == 0:
        return 0.0
    f_hi = h(hi)
    while np.sign(f_hi) == np.sign(f_lo):
        if hi >= gamma_max:
            raise NumericError(f"no gamma bracket in [0, {gamma_max:g}]")
        lo, f_lo = hi, f_hi
        hi = min(2.0 * hi, gamma_max)
        f_hi = h(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = h(mid)
        if f_mid == 0 or (hi - lo) <= tol * max(1.0, mid):
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    return 0.5 * (lo + hi)


def hybrid_calibrate(problem: CalibrationProblem, gamma0: float = 10.0, init=(0.5, 0.5, 0.5),
                     damping: float = 0.5, tol: float = 1e-3, theta_tol: float = 1e-3,
                     max_outer: int = 200) -> CalibrationResult:
    """Alternate the likelihood step and the gamma moment step to a joint fixed point.

    After each gamma solve the iterate moves to w * gamma_solved +
    (1 - w) * gamma_old; stops when the relative change is below ``tol``.
    """
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ConfigError("tolerance must be positive")
    gamma = float(gamma0)
    start = tuple(init)
    path = [gamma]
    step = np.inf
    it = 0
    for it in range(1, max_outer + 2):
        m = mle_given_gamma(problem, gamma, start)
        start = (m.alpha, m.eta, m.beta)
        params = PoissonParams(m.alpha, m.eta, m.beta, gamma)
        gap = abs(problem.theta_hat - theta_implied(params, problem))
        # stop only once the reported parameters themselves match the moment
        if (step < tol and gap < theta_tol) or it > max_outer:
            break
        g_star = solve_gamma(problem, m.alpha, m.eta, m.beta, gamma_hint=max(gamma, 1.0))
        g_new = damping * g_star + (1.0 - damping) * gamma
        path.append(g_new)
        step = abs(g_new - gamma) / max(1.0, abs(gamma))
        gamma = g_new
    ok = bool(step < tol and gap < theta_tol)
    if not ok:
        log.warning("calibration stopped after %d rounds: last step %.2e, theta gap %.2e", it - 1, step, gap)
    return CalibrationResult(params, m.loglik, gap, it - 1, ok, tuple(path), m.grad_norm)


# ---------------------------------------------------------------------------
# problem builders


def two_way_residual(v) -> np.ndarray:
    """Seller (seller-year for a stack) and buyer effects removed; flattened."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 3:
        return within_transform(v).ravel()
    ns, nb = v.shape
    i, j = np.meshgrid(np.arange(ns), np.arange(nb), indexing="ij")
    _, r = fe_backfit(v.ravel(), [i.ravel(), j.ravel()], [ns, nb])
    return r


def cross_section_problem(y, seller_size, buyer_size, proximity: ProximityMatrix) -> CalibrationProblem:
    """Static problem whose artifacts are two-way residuals of y and asinh S~.

    theta_hat is the residual regression slope, so the moment condition
    asks the model to match Cov(y, a) exactly.
    """
    y = np.asarray(y, dtype=float)
    S = common_support_matrix(y, proximity)
    y_p = two_way_residual(y)
    a_p = two_way_residual(asinh(S))
    theta = float(np.mean((a_p - a_p.mean()) * y_p) / np.var(a_p))
    return CalibrationProblem(y, seller_shares(seller_size), seller_shares(buyer_size), S, y_p, a_p, theta, proximity)


def panel_problem(panel, report, year=None, regressor=None) -> CalibrationProblem:
    """Problem from a panel estimate: one year's links and its cross-fitted artifacts.

    S~ is rebuilt from the previous year's links unless an aligned
    ``regressor`` (asinh S~, as passed to the estimator) is supplied.
    """
    n_t, ns, nb = panel.y.shape
    idx = report.artifacts.get("index")
    if idx is None:
        raise ConfigError("estimate report carries no artifacts")
    t_all = idx // (ns * nb)
    t = int(t_all.max()) if year is None else panel.years.index(int(year))
    sel = t_all == t
    if sel.sum() != ns * nb:
        raise ConfigError("calibration year is not fully covered by the estimation sample")
    order = np.argsort(idx[sel] % (ns * nb))
    y_p = report.artifacts["y_perp"][sel][order]
    a_p = report.artifacts["d_iv_perp"][sel][order]
    if regressor is not None:
        S = np.sinh(np.asarray(regressor, float)[t])
    else:
        S = common_support_matrix(panel.y[t - 1], panel.proximity)
    xs, xb = panel.covariates.at(panel.years[t])
    return CalibrationProblem(panel.y[t], seller_shares(xs), seller_shares(xb), S, y_p, a_p,
                              report.theta_hat, panel.proximity)


def savannah_config(seed: int = 0, params: PoissonParams = TABLE5_POISSON, **kw) -> DgpConfig:
    """Synthetic Savannah-scale cross-section (435 sellers, 794 buyers).

    Sizes sit at log-normal quantiles with a spread chosen so that the
    reference Poisson parameters give a link density near 0.0146.
    """
    base = dict(model="poisson", n_sellers=435, n_buyers=794, size_sigma=2.07, size_draw="quantile",
                dynamics="equilibrium", horizon=1, seed=seed, params=asdict(params))
    base.update(kw)
    return DgpConfig(**base)


def residual_slope(y, S) -> float:
    """Slope of y on asinh S after both are stripped of two-way effects."""
    y_p, a_p = two_way_residual(y), two_way_residual(asinh(S))
    return float(np.mean((a_p - a_p.mean()) * y_p) / np.var(a_p))


def self_generated_problem(config: DgpConfig, years: int = 20):
    """Self-generated calibration data: links drawn given predetermined support.

    Year t takes S~ from an independent equilibrium draw on the simulated
    covariates and then draws fresh links given that S~. The residual slope
    of links on asinh S~ then identifies the transitivity response without
    the mechanical dependence a contemporaneous S~ has on the links, and
    without a chained panel's feedback from links into later support,
    which the pooled buyer effects would turn into a downward bias.
    """
    if years < 1:
        raise ConfigError("need at least one year")
    panel, _ = simulate_dgp_panel(config)
    xs, xb = panel.covariates.at(None)
    params = config.model_params()
    pf = prob_function(params, xs, xb)
    shape = (len(xs), len(xb))
    ys, Ss = [], []
    for t in range(years):
        u0 = dyad_uniforms(derive_seed(config.seed, 5, t), shape)
        if params.gamma > 0:
            y0, _, _ = fixed_point_links(pf, panel.proximity, u0, max_iter=config.max_iter)
        else:
            y0 = u0 < pf(0.0)
        S = common_support_matrix(y0, panel.proximity)
        u = dyad_uniforms(derive_seed(config.seed, 4, t), shape)
        ys.append((u < pf(S)).astype(float))
        Ss.append(S)
    y, S = np.stack(ys), np.stack(Ss)
    y_p = two_way_residual(y)
    a_p = two_way_residual(asinh(S))
    theta = float(np.mean((a_p - a_p.mean()) * y_p) / np.var(a_p))
    prob = CalibrationProblem(y, seller_shares(xs), seller_shares(xb), S, y_p, a_p, theta, panel.proximity)
    return prob, panel


# ---------------------------------------------------------------------------
# goodness of fit


def _moments(adj) -> dict:
    a = np.asarray(adj, dtype=bool)
    out_deg = a.sum(axis=1)
    in_deg = a.sum(axis=0)
    q = [25, 50, 75]
    return {
        "density": float(a.mean()),
        **{f"indegree_p{k}": float(v) for k, v in zip(q, np.percentile(in_deg, q))},
        **{f"outdegree_p{k}": float(v) for k, v in zip(q, np.percentile(out_deg, q))},
    }


def simulate_moments(params, seller_size, buyer_size, proximity: ProximityMatrix, n_draws: int = 50,
                     seed: int = 0, max_iter: int = 500) -> pd.DataFrame:
    """Per-draw moments of fixed-point networks (S~ updated within each draw)."""
    pf = prob_function(params, seller_size, buyer_size)
    shape = (len(seller_size), len(buyer_size))
    rows = []
    for n in range(n_draws):
        u = dyad_uniforms(derive_seed(seed, n), shape)
        if getattr(params, "gamma", 0.0) > 0:
            y, _, _ = fixed_point_links(pf, proximity, u, max_iter=max_iter)
        else:
            y = u < pf(0.0)
        rows.append(_moments(y))
    return pd.DataFrame(rows)


def fit_report(params, observed, seller_size, buyer_size, proximity: ProximityMatrix,
               n_draws: int = 50, seed: int = 0) -> pd.DataFrame:
    """Observed moments beside the mean (and MC SE) over simulated draws."""
    if n_draws < 1:
        raise ConfigError("need at least one draw")
    if n_draws < 50:
        log.warning("fit_report with %d draws; 50 or more recommended", n_draws)
    sim = simulate_moments(params, seller_size, buyer_size, proximity, n_draws, seed)
    obs = _moments(observed)
    return pd.DataFrame({
        "moment": list(obs),
        "observed": [obs[k] for k in obs],
        "simulated": [float(sim[k].mean()) for k in obs],
        "mc_se": [float(sim[k].std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else float("nan") for k in obs],
    })
