"""Panel estimation of the transitivity effect.

Builds the lagged common-support regressor and the exchange-rate
shift-share instrument, partials out seller-year and buyer fixed effects
with cross-fitting over dyads, and runs clustered two-stage least squares.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, ConvergenceError, DomainError, SizeError
from .netcore import (
    BipartiteGraph,
    NodeCovariates,
    ProximityMatrix,
    asinh,
    common_support_matrix,
    compact_bins,
    quantile_bins,
)
from .rng import generator

log = logging.getLogger(__name__)

# Euro area members minus the Netherlands, then the other tracked markets
EMU = ("AUT", "BEL", "CYP", "DEU", "ESP", "EST", "FIN", "FRA", "GRC", "HRV", "IRL",
       "ITA", "LTU", "LUX", "LVA", "MLT", "PRT", "SVK", "SVN")
DEFAULT_DESTINATIONS = ("EMU", "JPN", "GBR", "RUS", "CAN")


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Rectangular dyad x year panel plus seller export exposure.

    ``exports[t, k, c]`` holds seller k's sales to tracked destination c
    (USD); sales to U.S. buyers come from ``graph``. ``fx[t, c]`` is in local
    currency units per USD.
    """

    graph: BipartiteGraph
    proximity: ProximityMatrix
    covariates: NodeCovariates
    dest_codes: tuple[str, ...] = ()
    exports: np.ndarray | None = None
    fx: np.ndarray | None = None
    lat: np.ndarray | None = None
    lon: np.ndarray | None = None
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        g = self.graph
        if self.proximity.n != g.n_sellers:
            raise SizeError("proximity does not match the seller registry")
        if self.covariates.seller_size.shape != (len(g.years), g.n_sellers):
            raise SizeError("seller sizes do not match the panel")
        if self.covariates.buyer_size.shape != (len(g.years), g.n_buyers):
            raise SizeError("buyer sizes do not match the panel")
        c = len(self.dest_codes)
        if self.exports is not None:
            ex = np.asarray(self.exports, float)
            if ex.shape != (len(g.years), g.n_sellers, c):
                raise SizeError(f"exports shape {ex.shape} does not match panel")
            if np.any(ex < 0) or not np.all(np.isfinite(ex)):
                raise DomainError("exports must be finite and non-negative")
            object.__setattr__(self, "exports", ex)
        if self.fx is not None:
            fx = np.asarray(self.fx, float)
            if fx.shape != (len(g.years), c):
                raise SizeError(f"fx shape {fx.shape} does not match panel")
            if not np.all(np.isfinite(fx)) or np.any(fx <= 0):
                raise DomainError("exchange rates must be positive")
            object.__setattr__(self, "fx", fx)

    @property
    def years(self):
        return self.graph.years

    @property
    def y(self) -> np.ndarray:
        return self.graph.adjacency.astype(float)

    def shares(self) -> np.ndarray:
        """chi[t, k, c] = X_kct / X_kt, with X_kt including U.S. sales; 0 if X_kt = 0."""
        if self.exports is None:
            raise ConfigError("panel has no destination exports")
        us = self.graph.values.sum(axis=2)
        total = self.exports.sum(axis=2) + us
        with np.errstate(invalid="ignore", divide="ignore"):
            chi = np.where(total[..., None] > 0, self.exports / total[..., None], 0.0)
        return chi

    def mean_proximity(self) -> np.ndarray:
        """r-bar_{-i}: proximity to the other sellers averaged over k and years."""
        return self.proximity.mean_proximity()


@dataclass(frozen=True)
class InstrumentSpec:
    countries: tuple[str, ...] = ()  # empty means every destination in the panel
    lag: int = 1

    def __post_init__(self):
        if self.lag < 1:
            raise ConfigError("instrument lag must be >= 1")
        if isinstance(self.countries, str):
            object.__setattr__(self, "countries", (self.countries,))


@dataclass(frozen=True)
class DdmlConfig:
    folds: int = 5
    repetitions: int = 3
    seed: int = 0
    learner: str = "linear"
    f_floor: float = 10.0
    cluster: str = "size_size"  # or "size_distance"
    cluster_bins: int = 10
    tol: float = 1e-10

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("need at least two folds")
        if self.repetitions < 1:
            raise ConfigError("need at least one repetition")
        if self.learner != "linear":
            raise ConfigError("only linear nuisance learners are supported")
        if self.cluster not in ("size_size", "size_distance"):
            raise ConfigError(f"unknown cluster scheme {self.cluster!r}")


@dataclass
class EstimateReport:
    theta_hat: float
    se_theta: float
    first_stage_coef: list
    first_stage_se: list
    F_statistic: float
    n_obs: int
    n_clusters: int
    variant: str = "iv"
    weak_instrument: bool = False
    repetitions: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("artifacts")
        return d


# ---------------------------------------------------------------------------
# regressor and instrument


def build_regressor(panel: PanelDataset, lag: int = 1, proximity: ProximityMatrix | None = None) -> np.ndarray:
    """asinh S~_{ij,t-lag} stacked as (T, sellers, buyers); NaN where t < lag."""
    n_t = len(panel.years)
    if lag < 1 or lag >= n_t:
        raise DomainError(f"lag {lag} incompatible with horizon {n_t}")
    prox = proximity if proximity is not None else panel.proximity
    y = panel.y
    out = np.full(y.shape, np.nan)
    for t in range(lag, n_t):
        out[t] = asinh(common_support_matrix(y[t - lag], prox))
    return out


def z_index(chi_k_prev, chi_i_prev, chi_i_now, ratio):
    """Exposure-weighted exchange-rate shift for third seller k as seen by i.

    Equals (1 - chi_k) + chi_k * ratio when i sells nothing to the
    destination in either period, and 1 otherwise.
    """
    ratio = np.asarray(ratio, dtype=float)
    if np.any(ratio <= 0) or not np.all(np.isfinite(ratio)):
        raise DomainError("exchange-rate ratio must be positive")
    chi_k = np.asarray(chi_k_prev, dtype=float)
    if np.any((chi_k < 0) | (chi_k > 1)):
        raise DomainError("shares must lie in [0, 1]")
    unexposed = (np.asarray(chi_i_prev) == 0) & (np.asarray(chi_i_now) == 0)
    z = np.where(unexposed, (1.0 - chi_k) + chi_k * ratio, 1.0)
    return z if z.ndim else float(z)


def _country_index(panel: PanelDataset, spec: InstrumentSpec) -> list[int]:
    codes = spec.countries or panel.dest_codes
    idx = []
    for c in codes:
        if c not in panel.dest_codes:
            raise ConfigError(f"destination {c!r} not in panel")
        idx.append(panel.dest_codes.index(c))
    if not idx:
        raise ConfigError("no destinations to build an instrument from")
    return idx


def zbar(panel: PanelDataset, country: str) -> np.ndarray:
    """(1/K) sum_{k != i} z_{ki,t} as a (T, sellers) array; NaN at t = 0."""
    c = panel.dest_codes.index(country)
    chi = panel.shares()[:, :, c]
    fx = panel.fx[:, c]
    n_t, ns = chi.shape
    out = np.full((n_t, ns), np.nan)
    for t in range(1, n_t):
        z = z_index(chi[t - 1][:, None], chi[t - 1][None, :], chi[t][None, :], fx[t] / fx[t - 1])
        np.fill_diagonal(z, 0.0)  # drop k == i
        out[t] = z.sum(axis=0) / (ns - 1)
    return out


def build_instrument(panel: PanelDataset, spec: InstrumentSpec = InstrumentSpec()) -> np.ndarray:
    """Z_{ij,t-l} = asinh r-bar_{-i} * asinh x-bar_j * asinh zbar_{i,t-l}.

    Returns (T, sellers, buyers, n_countries); NaN where t - l < 1.
    """
    if panel.fx is None:
        raise ConfigError("panel has no exchange rates")
    n_t = len(panel.years)
    lvl = asinh(panel.mean_proximity())[:, None] * asinh(panel.covariates.mean_buyer_size())[None, :]
    cols = []
    for c in _country_index(panel, spec):
        zb = zbar(panel, panel.dest_codes[c])
        z = np.full((n_t,) + lvl.shape, np.nan)
        for t in range(spec.lag + 1, n_t):
            z[t] = lvl * asinh(zb[t - spec.lag])[:, None]
        cols.append(z)
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# fixed effects


def fe_backfit(v, groups, n_groups, tol: float = 1e-10, max_sweeps: int = 10_000):
    """Alternating projections onto several sets of group dummies.

    ``v`` is (n,) or (n, m); returns (effects, residual) where effects[g]
    has shape (n_groups[g], m). Stops when the largest effect update falls
    below ``tol``.
    """
    v = np.asarray(v, dtype=float)
    flat = v.ndim == 1
    r = v[:, None].copy() if flat else v.copy()
    m = r.shape[1]
    counts = [np.bincount(g, minlength=k).astype(float) for g, k in zip(groups, n_groups)]
    effects = [np.zeros((k, m)) for k in n_groups]
    for sweep in range(max_sweeps):
        delta = 0.0
        for g, k, cnt, eff in zip(groups, n_groups, counts, effects):
            upd = np.column_stack([np.bincount(g, r[:, c], minlength=k) for c in range(m)])
            upd = np.divide(upd, cnt[:, None], out=np.zeros_like(upd), where=cnt[:, None] > 0)
            eff += upd
            r -= upd[g]
            delta = max(delta, float(np.abs(upd).max(initial=0.0)))
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"fixed-effect sweeps did not converge in {max_sweeps}", last=r)
    if flat:
        return [e[:, 0] for e in effects], r[:, 0]
    return effects, r


def _panel_groups(shape):
    n_t, ns, nb = shape
    t, i, j = np.meshgrid(np.arange(n_t), np.arange(ns), np.arange(nb), indexing="ij")
    return (t * ns + i).ravel(), j.ravel()


def within_transform(values, mask=None, tol: float = 1e-10, max_sweeps: int = 10_000) -> np.ndarray:
    """Remove seller-year and buyer effects from a (T, sellers, buyers) array.

    Cells outside ``mask`` are ignored and come back as NaN.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 3:
        raise SizeError("within_transform expects a (T, sellers, buyers) array")
    mask = np.isfinite(v) if mask is None else (np.asarray(mask, bool) & np.isfinite(v))
    g_it, g_j = _panel_groups(v.shape)
    keep = mask.ravel()
    _, r = fe_backfit(v.ravel()[keep], [g_it[keep], g_j[keep]], [v.shape[0] * v.shape[1], v.shape[2]], tol, max_sweeps)
    out = np.full(v.size, np.nan)
    out[keep] = r
    return out.reshape(v.shape)


# ---------------------------------------------------------------------------
# inference


def clustered_se(residuals, scores, clusters, coef=None, bread=None):
    """Cluster-robust sandwich standard errors with a G/(G-1) correction.

    ``scores`` is the (n, k) matrix multiplying the residuals in the moment
    condition; ``bread`` defaults to inv(scores' scores). When ``coef`` is
    given the Wald F = coef' V^-1 coef / k is returned as well.
    """
    e = np.asarray(residuals, dtype=float)
    x = np.asarray(scores, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cl = compact_bins(np.asarray(clusters))
    n_g = int(cl.max()) + 1 if cl.size else 0
    if n_g < 2:
        raise DomainError("clustered standard errors need at least two clusters")
    s = np.column_stack([np.bincount(cl, x[:, c] * e, minlength=n_g) for c in range(x.shape[1])])
    meat = s.T @ s * (n_g / (n_g - 1.0))
    b = np.linalg.inv(x.T @ x) if bread is None else np.atleast_2d(bread)
    vcov = b @ meat @ b.T
    se = np.sqrt(np.diag(vcov))
    if coef is None:
        return se, None
    beta = np.atleast_1d(np.asarray(coef, float))
    try:
        f = float(beta @ np.linalg.solve(vcov, beta)) / beta.size
    except np.linalg.LinAlgError:
        # exact fit: no sampling variance left in the coefficient
        f = float("inf") if np.any(beta != 0) else float("nan")
    return se, f


def cluster_ids(panel: PanelDataset, scheme: str = "size_size", n_bins: int = 10) -> np.ndarray:
    """(sellers, buyers) cluster id from percentile bins of two node traits."""
    xb = panel.covariates.mean_buyer_size()
    if scheme == "size_size":
        xs = panel.covariates.mean_seller_size()
    elif scheme == "size_distance":
        d = panel.proximity.distance
        xs = d.sum(axis=1) / max(d.shape[0] - 1, 1)
    else:
        raise ConfigError(f"unknown cluster scheme {scheme!r}")
    bs = quantile_bins(xs, n_bins)
    bb = quantile_bins(xb, n_bins)
    return bs[:, None] * n_bins + bb[None, :]


def two_sls(y, d, z, clusters):
    """Just- or over-identified 2SLS of y on a single regressor d."""
    z = z[:, None] if z.ndim == 1 else z
    zz = z.T @ z
    pi = np.linalg.solve(zz, z.T @ d)
    u = d - z @ pi
    pi_se, f = clustered_se(u, z, clusters, coef=pi, bread=np.linalg.inv(zz))
    dhat = z @ pi
    den = float(dhat @ d)
    theta = float(dhat @ y) / den
    e = y - theta * d
    se, _ = clustered_se(e, dhat, clusters, bread=np.array([[1.0 / den]]))
    return theta, float(se[0]), pi, pi_se, f, dhat


def _sample_mask(y, d, z) -> np.ndarray:
    m = np.isfinite(y) & np.isfinite(d)
    if z is not None:
        m &= np.all(np.isfinite(z), axis=-1)
    return m


def ddml_iv_estimate(
    panel: PanelDataset,
    regressor: np.ndarray,
    instrument: np.ndarray | None,
    config: DdmlConfig = DdmlConfig(),
    clusters: np.ndarray | None = None,
) -> EstimateReport:
    """Cross-fitted IV (or OLS when ``instrument`` is None) estimate of theta.

    Folds are sets of dyads with all their years. Seller-year and buyer
    effects are fitted on the complement of each fold and removed from the
    held-out rows; theta and its clustered SE are averaged over repetitions.
    """
    y3 = panel.y
    n_t, ns, nb = y3.shape
    if regressor.shape != y3.shape:
        raise SizeError("regressor does not match the panel")
    z4 = None
    if instrument is not None:
        z4 = instrument if instrument.ndim == 4 else instrument[..., None]
        if z4.shape[:3] != y3.shape:
            raise SizeError("instrument does not match the panel")
    mask = _sample_mask(y3, regressor, z4)
    if clusters is None:
        clusters = cluster_ids(panel, config.cluster, config.cluster_bins)
    cl3 = np.broadcast_to(clusters, (n_t, ns, nb))

    g_it, g_j = _panel_groups(y3.shape)
    dyad = np.broadcast_to(np.arange(ns * nb).reshape(ns, nb), y3.shape).ravel()
    keep = mask.ravel()
    g_it, g_j, dyad = g_it[keep], g_j[keep], dyad[keep]
    cl = cl3.ravel()[keep]
    cols = [y3.ravel()[keep], regressor.ravel()[keep]]
    if z4 is not None:
        cols += [z4[..., c].ravel()[keep] for c in range(z4.shape[-1])]
    v = np.column_stack(cols)
    n = v.shape[0]
    dyads = np.unique(dyad)
    if dyads.size < config.folds:
        raise SizeError("fewer dyads than folds")
    n_it, n_j = n_t * ns, nb

    reps = []
    resid_sum = np.zeros_like(v)
    dhat_sum = np.zeros(n)
    for r in range(config.repetitions):
        rng = generator(config.seed, r)
        fold_of = np.empty(ns * nb, dtype=np.int64)
        fold_of[dyads] = rng.permutation(dyads.size) % config.folds
        fold = fold_of[dyad]
        res = np.empty_like(v)
        for k in range(config.folds):
            test = fold == k
            train = ~test
            eff, _ = fe_backfit(v[train], [g_it[train], g_j[train]], [n_it, n_j], tol=config.tol)
            res[test] = v[test] - eff[0][g_it[test]] - eff[1][g_j[test]]
        y_p, d_p = res[:, 0], res[:, 1]
        if z4 is None:
            theta = float(d_p @ y_p) / float(d_p @ d_p)
            se, _ = clustered_se(y_p - theta * d_p, d_p, cl)
            reps.append({"theta": theta, "se": float(se[0])})
            dhat = d_p
        else:
            z_p = res[:, 2:]
            if float((z_p**2).sum()) <= 1e-20 * max(float((v[:, 2:] ** 2).sum()), 1.0):
                log.warning("instrument has no variation after partialling out fixed effects")
                return EstimateReport(float("nan"), float("nan"), [], [], 0.0, n, int(np.unique(cl).size), "iv", True)
            theta, se, pi, pi_se, f, dhat = two_sls(y_p, d_p, z_p, cl)
            reps.append({"theta": theta, "se": se, "pi": pi.tolist(), "pi_se": pi_se.tolist(), "F": f})
        resid_sum += res
        dhat_sum += dhat

    theta = float(np.mean([x["theta"] for x in reps]))
    se = float(np.mean([x["se"] for x in reps]))
    if z4 is None:
        pi_m, pi_se_m, f_m = [], [], float("nan")
    else:
        pi_m = np.mean([x["pi"] for x in reps], axis=0).tolist()
        pi_se_m = np.mean([x["pi_se"] for x in reps], axis=0).tolist()
        f_m = float(np.mean([x["F"] for x in reps]))
    weak = z4 is not None and f_m < config.f_floor
    if weak:
        log.warning("first-stage F %.2f below floor %.1f", f_m, config.f_floor)
    idx = np.flatnonzero(keep)
    artifacts = {
        "index": idx,
        "y_perp": resid_sum[:, 0] / config.repetitions,
        "d_perp": resid_sum[:, 1] / config.repetitions,
        "d_iv_perp": dhat_sum / config.repetitions,
        "shape": y3.shape,
    }
    return EstimateReport(
        theta, se, pi_m, pi_se_m, f_m, n, int(np.unique(cl).size),
        "iv" if z4 is not None else "ols", bool(weak), reps, artifacts,
    )


def contribution_profile(theta_hat: float, regressor, y=None, grouping: str = "support",
                         seller_size=None, n_groups: int = 100) -> pd.DataFrame:
    """Mean contribution of theta * asinh S~ by seller percentile group.

    Sellers are ranked by S~ averaged first over their active links and
    then over years (``grouping="support"``), or by ``seller_size``.
    """
    reg = np.asarray(regressor, dtype=float)
    valid = np.isfinite(reg)
    contrib = theta_hat * np.where(valid, reg, 0.0)
    per_seller = contrib.sum(axis=(0, 2)) / np.maximum(valid.sum(axis=(0, 2)), 1)
    s_lvl = np.sinh(np.where(valid, reg, 0.0))
    if grouping == "support":
        links = valid if y is None else (valid & (np.asarray(y) > 0))
        per_year = np.where(links.sum(axis=2) > 0,
                            (s_lvl * links).sum(axis=2) / np.maximum(links.sum(axis=2), 1), np.nan)
        key = np.nanmean(np.where(np.isnan(per_year).all(axis=0, keepdims=True), 0.0, per_year), axis=0)
    elif grouping == "size":
        if seller_size is None:
            raise ConfigError("size grouping needs seller sizes")
        key = np.asarray(seller_size, dtype=float)
    else:
        raise ConfigError(f"unknown grouping {grouping!r}")
    n_groups = min(n_groups, key.size)
    grp = quantile_bins(key, n_groups)
    df = pd.DataFrame({"group": grp, "key": key, "contribution": per_seller})
    out = df.groupby("group").agg(n_sellers=("key", "size"), mean_key=("key", "mean"),
                                  mean_contribution=("contribution", "mean")).reset_index()
    out["percentile"] = (out["group"] + 1) * (100.0 / n_groups)
    return out[["percentile", "n_sellers", "mean_key", "mean_contribution"]]
