"""Link-formation models and seeded network simulation.

Logistic, balls-and-bins (optionally augmented with common support) and
the generalized Poisson model, the expected-surplus mapping behind the
Poisson model, and simulators for cross-sections and panels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, ConvergenceError, DomainError, NumericError, SizeError
from .netcore import (
    BipartiteGraph,
    NodeCovariates,
    ProximityMatrix,
    build_proximity,
    common_support_matrix,
    distance_matrix,
)
from .rng import check_seed, derive_seed, dyad_uniforms, generator


@dataclass(frozen=True)
class LogisticParams:
    alpha: float
    delta: float = 0.0
    s: float = 1.0
    x_origin: np.ndarray | None = None
    x_dest: np.ndarray | None = None

    def __post_init__(self):
        if not self.s > 0:
            raise DomainError("logistic scale must be positive")


@dataclass(frozen=True)
class BallsBinsParams:
    beta: float
    gamma: float = 0.0
    kappa: float | None = None  # homophily exponent on h_ij, unused unless set

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("beta must be positive")
        if not self.gamma >= 0:
            raise DomainError("gamma must be non-negative")


@dataclass(frozen=True)
class PoissonParams:
    alpha: float
    eta: float
    beta: float
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "eta", "beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be positive, got {v}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise DomainError("gamma must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PoissonParams":
        try:
            return cls(float(d["alpha"]), float(d["eta"]), float(d["beta"]), float(d.get("gamma", 0.0)))
        except KeyError as e:
            raise ConfigError(f"missing Poisson parameter {e}") from None

    @classmethod
    def from_json(cls, text: str) -> "PoissonParams":
        return cls.from_dict(json.loads(text))


TABLE5_POISSON = PoissonParams(alpha=0.83, eta=0.19, beta=0.35, gamma=20.0)
TABLE5_BALLSBINS = BallsBinsParams(beta=2.72, gamma=22.83)


# ---------------------------------------------------------------------------
# link probabilities


def logistic_prob(x_origin, x_dest, h, params: LogisticParams):
    """Logit link probability; the scale ``s`` is carried but not used here."""
    v = params.alpha + np.asarray(x_origin, float) + np.asarray(x_dest, float) + params.delta * np.asarray(h, float)
    p = 0.5 * (1.0 + np.tanh(0.5 * v))  # stable logistic
    return p if np.ndim(p) else float(p)


def ballsbins_prob(x_i, x_j, total_seller_size, S, params: BallsBinsParams, h=None):
    """1 - (1 - x_i / total)^(beta x_j + gamma S) with x_j mean-normalized.

    Evaluated as -expm1(n log1p(-share)) so fractional trial counts are fine.
    """
    total = float(total_seller_size)
    if not total > 0:
        raise DomainError("total seller size must be positive")
    share = np.asarray(x_i, dtype=float) / total
    if np.any(share < -1e-12) or np.any(share > 1 + 1e-12):
        raise NumericError("seller share outside [0, 1]")
    share = np.clip(share, 0.0, 1.0)
    xj = np.asarray(x_j, dtype=float)
    trials_b = params.beta * xj
    if params.kappa is not None and h is not None:
        trials_b = trials_b * np.asarray(h, float) ** params.kappa
    n = trials_b + params.gamma * np.asarray(S, dtype=float)
    if np.any(n < 0):
        raise DomainError("number of trials must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log1p(-share)
        # share == 1 gives -inf; zero trials then means no draw at all
        prod = np.where(n > 0, n * lg, 0.0)
    p = -np.expm1(prod)
    return p if np.ndim(p) else float(p)


def poisson_rate(x_i, x_j, S, params: PoissonParams):
    """Lambda = alpha x_i^eta x_j^beta (1 + gamma S)."""
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    S = np.asarray(S, dtype=float)
    if np.any(x_i < 0) or np.any(x_j < 0) or np.any(S < 0):
        raise DomainError("Poisson rate inputs must be non-negative")
    lam = params.alpha * x_i**params.eta * x_j**params.beta * (1.0 + params.gamma * S)
    return lam if np.ndim(lam) else float(lam)


def poisson_prob(lam):
    """Probability of at least one arrival, 1 - exp(-Lambda)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise DomainError("rate must be non-negative")
    p = -np.expm1(-lam)
    return p if p.ndim else float(p)


def expected_surplus(lam):
    """E[max(Lambda - eps, 0)] with eps ~ Exp(1): Lambda - 1 + exp(-Lambda)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise DomainError("rate must be non-negative")
    # expm1 form avoids cancellation for small Lambda
    out = lam + np.expm1(-lam)
    return out if out.ndim else float(out)


def apply_trade_cost(params: PoissonParams, x: float) -> PoissonParams:
    """Iceberg cost change of ``x`` percent scales alpha by 100 / (100 + x)."""
    if not x > -100:
        raise DomainError("trade cost change must exceed -100%")
    return replace(params, alpha=params.alpha * 100.0 / (100.0 + x))


# ---------------------------------------------------------------------------
# size normalization and dispatch


def seller_shares(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    tot = x.sum()
    if not tot > 0:
        raise DomainError("seller sizes must have a positive sum")
    return x / tot


def buyer_means(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.mean()
    if not m > 0:
        raise DomainError("buyer sizes must have a positive mean")
    return x / m


def normalize_sizes(params, seller_size, buyer_size):
    """Model-specific size scaling applied before any probability is taken.

    Poisson: import and export shares for both sides. Balls-and-bins: the
    seller share enters the base and buyers are scaled by their mean.
    """
    if isinstance(params, PoissonParams):
        return seller_shares(seller_size), seller_shares(buyer_size)
    if isinstance(params, BallsBinsParams):
        return seller_shares(seller_size), buyer_means(buyer_size)
    return np.asarray(seller_size, float), np.asarray(buyer_size, float)


def link_probability(params, xs, xb, S=None, h=None) -> np.ndarray:
    """Seller x buyer probability matrix from already-normalized sizes."""
    xs = np.asarray(xs, dtype=float)[:, None]
    xb = np.asarray(xb, dtype=float)[None, :]
    S = 0.0 if S is None else S
    if isinstance(params, PoissonParams):
        return poisson_prob(poisson_rate(xs, xb, S, params))
    if isinstance(params, BallsBinsParams):
        return ballsbins_prob(xs, xb, 1.0, S, params, h)
    if isinstance(params, LogisticParams):
        return logistic_prob(xs, xb, 0.0 if h is None else h, params)
    raise ConfigError(f"unknown model parameters {type(params).__name__}")


def prob_function(params, seller_size, buyer_size, h=None) -> Callable[[np.ndarray | float], np.ndarray]:
    """Closure S -> probability matrix with sizes normalized once."""
    xs, xb = normalize_sizes(params, seller_size, buyer_size)
    if isinstance(params, PoissonParams):
        base = params.alpha * xs[:, None] ** params.eta * xb[None, :] ** params.beta
        g = params.gamma
        return lambda S: -np.expm1(-base * (1.0 + g * S))
    if isinstance(params, LogisticParams):
        xo = params.x_origin if params.x_origin is not None else np.zeros(len(xs))
        xd = params.x_dest if params.x_dest is not None else np.zeros(len(xb))
        p = logistic_prob(np.asarray(xo)[:, None], np.asarray(xd)[None, :], 0.0 if h is None else h, params)
        return lambda S: p
    return lambda S: link_probability(params, xs, xb, S, h)


def draw_links(p, u) -> np.ndarray:
    p = np.asarray(p)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise NumericError("link probability outside [0, 1]")
    return u < p


def sample_network(params, seller_size, buyer_size, S=None, seed: int = 0, h=None, year: int = 0) -> BipartiteGraph:
    """One Bernoulli draw per dyad given S~; same seed, same graph."""
    pf = prob_function(params, seller_size, buyer_size, h)
    p = pf(0.0 if S is None else np.asarray(S, float))
    p = np.broadcast_to(p, (len(seller_size), len(buyer_size)))
    u = dyad_uniforms(check_seed(seed), p.shape)
    return BipartiteGraph.from_adjacency(draw_links(p, u), years=[year])


def fixed_point_links(prob, proximity, u, tol: float = 1e-10, max_iter: int = 500, S0=None):
    """Iterate y = 1[u < G(S~(y))] from S~ = S0 (default 0) to a fixed point.

    ``prob`` maps S~ to a probability matrix and ``u`` is the draw's frozen
    uniform matrix, which reproduces re-seeding at every step. Returns
    (y, S, iterations); one iteration means the first redraw matched.
    """
    r = proximity.proximity if isinstance(proximity, ProximityMatrix) else np.asarray(proximity, float)
    S = np.zeros(u.shape) if S0 is None else np.asarray(S0, float)
    y = draw_links(prob(S), u)
    for it in range(1, max_iter + 1):
        S_new = common_support_matrix(y, r)
        y_new = draw_links(prob(S_new), u)
        dS = float(np.abs(S_new - S).max(initial=0.0))
        S = S_new
        if np.array_equal(y_new, y) or dS < tol:
            return y_new, S if np.array_equal(y_new, y) else common_support_matrix(y_new, r), it
        y = y_new
    raise ConvergenceError(f"no fixed point after {max_iter} iterations", last=(y, S))


# ---------------------------------------------------------------------------
# simulation configs

GEO_CENTER = (4.75, -74.10)


@dataclass(frozen=True)
class DgpConfig:
    model: str = "poisson"  # poisson | ballsbins | logistic | lpm_iv
    n_sellers: int = 300
    n_buyers: int = 500
    size_mu: float = 0.0
    size_sigma: float = 1.5
    size_draw: str = "random"  # random | quantile
    proximity_mode: str = "continuous_rank"
    proximity_q: float | None = None
    geography: str = "square"  # square | ring
    region_km: float = 30.0
    transitivity: bool = True
    dynamics: str = "lagged"  # lagged | equilibrium
    horizon: int = 1
    lag: int = 1
    seed: int = 0
    params: dict = field(default_factory=lambda: asdict(TABLE5_POISSON))
    # lpm_iv only
    theta: float = 0.5
    phi: float = 2.0
    n_dest: int = 1
    fx_sigma: float = 0.2
    exposure_prob: float = 0.5
    support: str = "dynamic"  # dynamic | exogenous
    max_iter: int = 500

    def __post_init__(self):
        if self.model not in ("poisson", "ballsbins", "logistic", "lpm_iv"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1")
        if self.n_sellers < 3 or self.n_buyers < 1:
            raise ConfigError("need at least 3 sellers and 1 buyer")
        if not (self.size_sigma >= 0 and math.isfinite(self.size_mu)):
            raise ConfigError("invalid log-normal size distribution")
        if self.size_draw not in ("random", "quantile"):
            raise ConfigError(f"unknown size draw {self.size_draw!r}")
        if self.geography not in ("square", "ring"):
            raise ConfigError(f"unknown geography {self.geography!r}")
        if self.dynamics not in ("lagged", "equilibrium"):
            raise ConfigError(f"unknown dynamics {self.dynamics!r}")
        if self.support not in ("dynamic", "exogenous"):
            raise ConfigError(f"unknown support process {self.support!r}")
        if self.model == "lpm_iv" and self.horizon < 3:
            raise ConfigError("the IV panel needs at least three years")
        check_seed(self.seed)

    def model_params(self):
        p = dict(self.params)
        if self.model == "poisson":
            out = PoissonParams.from_dict(p)
        elif self.model == "ballsbins":
            out = BallsBinsParams(float(p["beta"]), float(p.get("gamma", 0.0)), p.get("kappa"))
        elif self.model == "logistic":
            out = LogisticParams(float(p.get("alpha", 0.0)), float(p.get("delta", 0.0)), float(p.get("s", 1.0)))
        else:
            return None
        if not self.transitivity and hasattr(out, "gamma"):
            out = replace(out, gamma=0.0)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown DGP fields {sorted(extra)}")
        return cls(**d)


def seller_locations(config: DgpConfig, rng: np.random.Generator):
    """Seller coordinates around a fixed center, in degrees."""
    n = config.n_sellers
    lat0, lon0 = GEO_CENTER
    km_lat = 111.195
    km_lon = km_lat * math.cos(math.radians(lat0))
    if config.geography == "square":
        xy = rng.uniform(-config.region_km / 2, config.region_km / 2, size=(n, 2))
    else:
        # equally spaced on a circle, so every seller sees the same distances
        ang = 2 * np.pi * np.arange(n) / n
        xy = (config.region_km / 2) * np.column_stack([np.cos(ang), np.sin(ang)])
    return lat0 + xy[:, 1] / km_lat, lon0 + xy[:, 0] / km_lon


def draw_sizes(config: DgpConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Log-normal node sizes, either sampled or at evenly spaced quantiles (shuffled)."""
    if config.size_draw == "random":
        return rng.lognormal(config.size_mu, config.size_sigma, n)
    z = ndtri((np.arange(n) + 0.5) / n)
    return np.exp(config.size_mu + config.size_sigma * rng.permutation(z))


def _labels(prefix, n):
    w = len(str(n - 1))
    return [f"{prefix}{i:0{w}d}" for i in range(n)]


def _values_from_links(adj, rng):
    # positive USD values above the ingestion floor for active links
    v = 100.0 * (1.0 + rng.lognormal(2.0, 1.0, size=adj.shape))
    return np.where(adj, np.round(v, 2), 0.0)


def simulate_dgp_panel(config: DgpConfig):
    """Simulate a panel with known parameters.

    Returns (PanelDataset, truth). In the network models the period-t
    probabilities use S~ from period t - lag links (``dynamics="lagged"``)
    or each period is its own fixed point (``"equilibrium"``). The
    ``lpm_iv`` model plants theta in a linear probability panel where
    third sellers' exports react to destination exchange rates.
    """
    from .panel import DEFAULT_DESTINATIONS, PanelDataset

    cfg = config
    base = generator(cfg.seed, 0)
    lat, lon = seller_locations(cfg, base)
    prox = build_proximity(distance_matrix(lat, lon), cfg.proximity_mode, cfg.proximity_q)
    sellers = _labels("S", cfg.n_sellers)
    buyers = _labels("B", cfg.n_buyers)
    years = list(range(cfg.horizon))
    if cfg.model == "lpm_iv":
        return _simulate_iv(cfg, base, prox, lat, lon, sellers, buyers, years, DEFAULT_DESTINATIONS)

    xs = draw_sizes(cfg, base, cfg.n_sellers)
    xb = draw_sizes(cfg, base, cfg.n_buyers)
    params = cfg.model_params()
    pf = prob_function(params, xs, xb)
    shape = (cfg.n_sellers, cfg.n_buyers)
    adj = np.zeros((cfg.horizon,) + shape, dtype=bool)
    support = np.zeros((cfg.horizon,) + shape)
    iters = []
    for t in years:
        u = dyad_uniforms(derive_seed(cfg.seed, 1, t), shape)
        if cfg.dynamics == "equilibrium" and cfg.transitivity:
            y, S, it = fixed_point_links(pf, prox, u, max_iter=cfg.max_iter)
            iters.append(it)
        else:
            S = common_support_matrix(adj[t - cfg.lag], prox) if (cfg.transitivity and t >= cfg.lag) else np.zeros(shape)
            y = draw_links(pf(S), u)
        adj[t] = y
        support[t] = S
    vals = _values_from_links(adj, generator(cfg.seed, 2))
    graph = BipartiteGraph(sellers, buyers, years, vals)
    cov = NodeCovariates(np.tile(xs, (cfg.horizon, 1)), np.tile(xb, (cfg.horizon, 1)), years)
    truth = {"model": cfg.model, "params": asdict(params) if not isinstance(params, LogisticParams) else {},
             "support": support, "fixed_point_iterations": iters}
    return PanelDataset(graph, prox, cov, (), None, None, lat, lon, truth), truth


def _simulate_iv(cfg, base, prox, lat, lon, sellers, buyers, years, dest_list):
    """Linear probability panel with a planted transitivity effect theta.

    Third-seller links follow p_kjt = m_kt (a_k + b_j), where
    m_kt = 1 - phi sum_c chi_{kc,t-1} (CEX_ct / CEX_{c,t-1} - 1), so a rise
    in the ratio pulls exposed sellers away from U.S. buyers. Log FX changes
    are i.i.d. with E[ratio] = 1.

    ``support="dynamic"``: the observed links are those third-seller links
    plus theta asinh S~_{t-1} computed from them (one network).
    ``support="exogenous"``: S~ comes from a separate latent layer of
    third-seller links; observed links follow a_i + b_j + theta asinh S~_{t-1}
    with independent noise. The lagged regressor is then strictly
    exogenous and is returned as ``truth["regressor"]``.
    """
    ns, nb, n_t, n_c = cfg.n_sellers, cfg.n_buyers, cfg.horizon, cfg.n_dest
    if n_c < 1 or n_c > len(dest_list):
        raise ConfigError(f"n_dest must be in 1..{len(dest_list)}")
    codes = tuple(dest_list[:n_c])
    a = base.uniform(0.02, 0.2, ns)
    b = base.uniform(0.02, 0.4, nb)
    exposed = base.random((ns, n_c)) < cfg.exposure_prob
    w = np.where(exposed, base.uniform(0.2, 1.0, (ns, n_c)), 0.0)
    # non-U.S. share of each exposed seller's total exports
    frac = base.uniform(0.3, 0.5, ns)
    wsum = w.sum(axis=1)
    chi_target = np.divide(w * frac[:, None], wsum[:, None], out=np.zeros_like(w), where=wsum[:, None] > 0)

    eps = base.standard_normal((n_t, n_c))
    logfx = np.cumsum(np.vstack([np.zeros(n_c), cfg.fx_sigma * eps[1:] - cfg.fx_sigma**2 / 2]), axis=0)
    fx = np.exp(logfx) * base.uniform(0.5, 100.0, n_c)

    exo = cfg.support == "exogenous"
    vrng = generator(cfg.seed, 2)
    adj = np.zeros((n_t, ns, nb), dtype=bool)
    latent = np.zeros((n_t, ns, nb), dtype=bool)
    vals = np.zeros((n_t, ns, nb))
    exports = np.zeros((n_t, ns, n_c))
    support = np.zeros((n_t, ns, nb))
    clipped = 0
    chi_prev = np.zeros((ns, n_c))
    for t in range(n_t):
        m = np.ones(ns) if t == 0 else 1.0 - cfg.phi * (chi_prev * (fx[t] / fx[t - 1] - 1.0)).sum(axis=1)
        third = m[:, None] * (a[:, None] + b[None, :])
        if t > 0:
            support[t] = common_support_matrix(latent[t - 1] if exo else adj[t - 1], prox)
        lin = cfg.theta * np.arcsinh(support[t])
        if exo:
            p_lat = third
            p = a[:, None] + b[None, :] + lin
        else:
            p = third + lin
        clipped += int(((p < 0) | (p > 1)).sum())
        u = dyad_uniforms(derive_seed(cfg.seed, 1, t), (ns, nb))
        adj[t] = u < np.clip(p, 0.0, 1.0)
        if exo:
            clipped += int(((p_lat < 0) | (p_lat > 1)).sum())
            latent[t] = dyad_uniforms(derive_seed(cfg.seed, 3, t), (ns, nb)) < np.clip(p_lat, 0.0, 1.0)
        vals[t] = _values_from_links(adj[t], vrng)
        us = vals[t].sum(axis=1)
        # export values sized so realized shares match the seller's mix
        exports[t] = np.round(chi_target * (us / (1.0 - frac))[:, None], 2)
        tot = exports[t].sum(axis=1) + us
        chi_prev = np.divide(exports[t], tot[:, None], out=np.zeros_like(exports[t]), where=tot[:, None] > 0)

    from .panel import PanelDataset

    graph = BipartiteGraph(sellers, buyers, years, vals)
    cov = NodeCovariates(np.tile(a * 1e6, (n_t, 1)), np.tile(b * 1e6, (n_t, 1)), years)
    reg = np.arcsinh(support)
    reg[0] = np.nan
    truth = {"model": "lpm_iv", "support_process": cfg.support, "theta": cfg.theta, "phi": cfg.phi,
             "a": a, "b": b, "exposed": exposed, "support": support, "regressor": reg, "clipped": clipped}
    panel = PanelDataset(graph, prox, cov, codes, exports, fx, lat, lon, truth)
    return panel, truth
