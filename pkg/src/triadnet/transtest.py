"""Cross-sectional transitivity test.

The saturated linear probability model (seller x buyer-size-bin and
buyer x seller-size-bin effects) is fitted to links and to common support,
the residuals are min-normalized, and their product sum T is compared
with a bootstrap null built from dyad-independent replicates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigError, ConvergenceError, DomainError, NumericError, SizeError
from .netcore import ProximityMatrix, common_support_matrix, compact_bins
from .rng import derive_seed, generator, parallel_map

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BinScheme:
    """Quantile bins for seller sizes, buyer sizes and (optionally) a pair covariate."""

    seller_edges: np.ndarray
    buyer_edges: np.ndarray
    pair_edges: np.ndarray | None = None

    @classmethod
    def from_sizes(cls, seller_size, buyer_size, q: int = 10, q_pair: int | None = None, h=None) -> "BinScheme":
        if q < 1:
            raise ConfigError("need at least one size bin")
        probs = np.linspace(0.0, 1.0, q + 1)[1:-1]
        se = np.quantile(np.asarray(seller_size, float), probs) if q > 1 else np.empty(0)
        be = np.quantile(np.asarray(buyer_size, float), probs) if q > 1 else np.empty(0)
        pe = None
        if h is not None:
            qh = q_pair or q
            pe = np.quantile(np.asarray(h, float).ravel(), np.linspace(0.0, 1.0, qh + 1)[1:-1])
        return cls(se, be, pe)

    @staticmethod
    def _apply(edges, x):
        return compact_bins(np.searchsorted(edges, np.asarray(x, float), side="right"))

    def seller_bins(self, x) -> np.ndarray:
        return self._apply(self.seller_edges, x)

    def buyer_bins(self, x) -> np.ndarray:
        return self._apply(self.buyer_edges, x)

    def pair_bins(self, h) -> np.ndarray:
        if self.pair_edges is None:
            raise ConfigError("bin scheme has no pair dimension")
        h = np.asarray(h, float)
        return compact_bins(np.searchsorted(self.pair_edges, h.ravel(), side="right")).reshape(h.shape)


@dataclass(eq=False)
class SaturatedFit:
    """Saturated LPM fit; fitted = alpha_O[i, bb[j]] + alpha_D[j, sb[i]] (+ delta[hb])."""

    fitted: np.ndarray
    resid: np.ndarray
    seller_bins: np.ndarray
    buyer_bins: np.ndarray
    alpha_origin: np.ndarray | None = None  # sellers x buyer bins
    alpha_dest: np.ndarray | None = None  # buyers x seller bins
    delta: np.ndarray | None = None
    iterations: int = 0


def _onehot(b, q=None):
    q = int(b.max()) + 1 if q is None else q
    m = np.zeros((b.size, q))
    m[np.arange(b.size), b] = 1.0
    return m


def block_fit(y, sb, bb):
    """Closed-form saturated fit.

    The design splits into independent (seller bin, buyer bin) blocks, each
    a complete two-way layout, so fitted = row mean + column mean - grand
    mean within the block.
    """
    ms = _onehot(sb)
    mb = _onehot(bb)
    cs = ms.sum(axis=0)
    cb = mb.sum(axis=0)
    rowm = (y @ mb) / cb  # seller i, buyer bin b
    colm = (ms.T @ y) / cs[:, None]  # seller bin a, buyer j
    g = (ms.T @ y @ mb) / np.outer(cs, cb)
    fitted = rowm[:, bb] + colm[sb, :] - g[np.ix_(sb, bb)]
    alpha_d = (colm - g[:, bb]).T
    return fitted, rowm, alpha_d


def residual_cross(y, S, sb, bb) -> float:
    """sum of (y - yhat)(S - Shat) under the saturated fit, without forming fits.

    Projections are symmetric and idempotent, so the sum equals
    sum(y S) - sum(yhat S), and sum(yhat S) only needs bin aggregates.
    """
    ms = _onehot(sb)
    mb = _onehot(bb)
    cs = ms.sum(axis=0)
    cb = mb.sum(axis=0)
    y_b = y @ mb
    s_b = S @ mb
    y_a = ms.T @ y
    s_a = ms.T @ S
    g_y = y_a @ mb
    g_s = s_a @ mb
    yhat_s = (y_b * s_b / cb).sum() + (y_a * s_a / cs[:, None]).sum() - (g_y * g_s / np.outer(cs, cb)).sum()
    return float(np.einsum("ij,ij->", y, S) - yhat_s)


def _design(ns, nb, sb, bb, hb=None):
    i, j = np.meshgrid(np.arange(ns), np.arange(nb), indexing="ij")
    i, j = i.ravel(), j.ravel()
    qb = int(bb.max()) + 1
    qs = int(sb.max()) + 1
    rows = np.arange(ns * nb)
    c1 = i * qb + bb[j]
    c2 = ns * qb + j * qs + sb[i]
    cols = [c1, c2]
    p = ns * qb + nb * qs
    if hb is not None:
        cols.append(p + hb.ravel())
        p += int(hb.max()) + 1
    r = np.concatenate([rows] * len(cols))
    c = np.concatenate(cols)
    x = sparse.csr_matrix((np.ones(r.size), (r, c)), shape=(ns * nb, p))
    return x


def cg_fit(y, sb, bb, hb=None, tol: float = 1e-10, max_iter: int | None = None):
    """Least squares on the sparse saturated design by Jacobi-preconditioned CG.

    Redundant columns are left in: the normal equations are consistent, so
    CG converges to a solution with the unique fitted values.
    """
    ns, nb = y.shape
    x = _design(ns, nb, sb, bb, hb)
    xtx = (x.T @ x).tocsr()
    rhs = x.T @ y.ravel()
    d = xtx.diagonal()
    d[d == 0] = 1.0
    prec = LinearOperator(xtx.shape, matvec=lambda v: v / d)
    max_iter = max_iter or 10 * x.shape[1]
    it = [0]

    def cb(_):
        it[0] += 1

    coef, info = cg(xtx, rhs, rtol=tol, atol=0.0, maxiter=max_iter, M=prec, callback=cb)
    if info > 0:
        raise ConvergenceError(f"CG did not reach tolerance in {max_iter} iterations", last=coef)
    if info < 0:
        raise NumericError("CG breakdown on the saturated design")
    fitted = (x @ coef).reshape(ns, nb)
    return fitted, coef, it[0]


def fit_saturated_lpm(outcome, seller_size=None, buyer_size=None, bins: BinScheme | None = None,
                      h=None, method: str = "auto", seller_bins=None, buyer_bins=None) -> SaturatedFit:
    """Saturated linear probability fit of a seller x buyer outcome.

    Bins come either from ``bins`` applied to the sizes or directly as
    ``seller_bins``/``buyer_bins``. Without a pair covariate the closed form
    is exact; with one (or ``method="cg"``) the sparse solver is used.
    """
    y = np.asarray(outcome, dtype=float)
    if y.ndim != 2:
        raise SizeError("outcome must be a seller x buyer matrix")
    ns, nb = y.shape
    if seller_bins is None:
        if bins is None or seller_size is None or buyer_size is None:
            raise ConfigError("need either bins with sizes or explicit bin labels")
        sb = bins.seller_bins(seller_size)
        bb = bins.buyer_bins(buyer_size)
    else:
        sb = compact_bins(seller_bins)
        bb = compact_bins(buyer_bins)
    if sb.size != ns or bb.size != nb:
        raise SizeError("bins do not match outcome dimensions")
    hb = None
    if h is not None:
        if bins is None or bins.pair_edges is None:
            raise ConfigError("pair covariate needs pair bins")
        hb = bins.pair_bins(h)
    if method not in ("auto", "closed", "cg"):
        raise ConfigError(f"unknown fit method {method!r}")
    if hb is None and method != "cg":
        fitted, a_o, a_d = block_fit(y, sb, bb)
        return SaturatedFit(fitted, y - fitted, sb, bb, a_o, a_d)
    fitted, coef, it = cg_fit(y, sb, bb, hb)
    qb, qs = int(bb.max()) + 1, int(sb.max()) + 1
    a_o = coef[: ns * qb].reshape(ns, qb)
    a_d = coef[ns * qb: ns * qb + nb * qs].reshape(nb, qs)
    delta = coef[ns * qb + nb * qs:] if hb is not None else None
    return SaturatedFit(fitted, y - fitted, sb, bb, a_o, a_d, delta, it)


def residualize_minnorm(values, fitted=None, shift=None) -> np.ndarray:
    """Residuals shifted by their minimum (or by a supplied ``shift``)."""
    r = np.asarray(values, dtype=float)
    if fitted is not None:
        r = r - np.asarray(fitted, dtype=float)
    c = r.min() if shift is None else shift
    return r - c


def t_statistic(y_nr, S_nr) -> float:
    y_nr = np.asarray(y_nr, dtype=float)
    S_nr = np.asarray(S_nr, dtype=float)
    if y_nr.shape != S_nr.shape:
        raise SizeError("statistic inputs must share a shape")
    return float(np.einsum("ij,ij->", y_nr, S_nr))


def t_check_statistic(y_nr, r_nr) -> float:
    """sum over i, j and k != i of y_ij r_ki y_kj with r in the seller-seller slot."""
    y = np.asarray(y_nr, dtype=float)
    r = np.array(r_nr, dtype=float)
    if r.shape != (y.shape[0], y.shape[0]):
        raise SizeError("seller-seller residuals do not match")
    np.fill_diagonal(r, 0.0)
    return float(np.einsum("ij,ki,kj->", y, r, y, optimize=True))


def proximity_residuals(r, sb) -> np.ndarray:
    """Seller-seller proximity net of seller-bin-pair means (off-diagonal)."""
    r = np.asarray(r, dtype=float)
    n = r.shape[0]
    ms = _onehot(sb)
    off = 1.0 - np.eye(n)
    num = ms.T @ (r * off) @ ms
    den = ms.T @ off @ ms
    means = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    out = r - means[np.ix_(sb, sb)]
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# bootstrap null


def clamp_probabilities(fitted, sb, bb, mode: str = "mean_preserving") -> np.ndarray:
    """Map LPM fitted values into [0, 1].

    ``plain`` clips. ``mean_preserving`` clips and then rescales each
    (seller bin, buyer bin) block to its unclipped mean, so replicate
    density matches the data instead of drifting up with clipped negatives.
    """
    p = np.clip(fitted, 0.0, 1.0)
    if mode == "plain":
        return p
    if mode != "mean_preserving":
        raise ConfigError(f"unknown clamp mode {mode!r}")
    ms = _onehot(sb)
    mb = _onehot(bb)
    raw = ms.T @ fitted @ mb
    clipped = ms.T @ p @ mb
    scale = np.divide(raw, clipped, out=np.ones_like(raw), where=clipped > 0)
    return np.clip(p * scale[np.ix_(sb, bb)], 0.0, 1.0)


@dataclass(frozen=True)
class NullOptions:
    draw: str = "bernoulli"  # bernoulli | deterministic
    clamp: str = "mean_preserving"  # mean_preserving | plain
    proximity: str = "rerank"  # rerank | submatrix
    normalization: str = "shared"  # shared | own

    def __post_init__(self):
        if self.draw not in ("bernoulli", "deterministic"):
            raise ConfigError(f"unknown draw mode {self.draw!r}")
        if self.clamp not in ("mean_preserving", "plain"):
            raise ConfigError(f"unknown clamp mode {self.clamp!r}")
        if self.proximity not in ("rerank", "submatrix"):
            raise ConfigError(f"unknown proximity resampling {self.proximity!r}")
        if self.normalization not in ("shared", "own"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")


class RankCodes:
    """Distance ranks kept as integer codes so resampled sets rerank in O(M)."""

    def __init__(self, prox: ProximityMatrix):
        d = prox.distance
        n = d.shape[0]
        iu = np.triu_indices(n, 1)
        _, inv = np.unique(d[iu], return_inverse=True)
        codes = np.zeros((n, n), dtype=np.int64)
        codes[iu] = inv + 1  # 0 is reserved for co-located copies
        # 32-bit codes halve the memory traffic of the per-replicate gather
        self.codes = (codes + codes.T).astype(np.int32 if inv.size < 2**31 - 2 else np.int64)
        self.n_codes = int(inv.max()) + 2 if inv.size else 1
        self.mode = prox.mode
        self.q = prox.quantile

    def proximity(self, idx) -> np.ndarray:
        n = idx.size
        c = self.codes[idx][:, idx]
        # off-diagonal pairs appear twice in the full matrix; the diagonal is code 0
        cnt = np.bincount(c.ravel(), minlength=self.n_codes)
        cnt[0] -= n
        cnt //= 2
        m = n * (n - 1) // 2
        below = np.cumsum(cnt) - cnt
        if self.mode == "continuous_rank":
            avg = below + (cnt + 1) / 2.0
            lookup = 1.0 - (avg - 1.0) / (m - 1.0) if m > 1 else np.ones(cnt.size)
        else:
            k = max(int(math.ceil(self.q / 100.0 * m)), 1)
            thresh = int(np.searchsorted(np.cumsum(cnt), k))
            lookup = (np.arange(cnt.size) <= thresh).astype(float)
        r = lookup[c]
        np.fill_diagonal(r, 0.0)
        return r


@dataclass
class _NullTask:
    P: np.ndarray
    prox: np.ndarray
    codes: RankCodes | None
    sb: np.ndarray
    bb: np.ndarray
    options: NullOptions
    seed: int
    shift_y: float
    shift_S: float
    variant: str


def replicate_statistic(task: _NullTask, b: int) -> float:
    """Statistic of replicate ``b``; the stream depends only on (seed, b)."""
    rng = generator(task.seed, b)
    ns, nb = task.P.shape
    ii = rng.integers(0, ns, ns)
    jj = rng.integers(0, nb, nb)
    pb = task.P[np.ix_(ii, jj)]
    if task.options.draw == "bernoulli":
        yb = (rng.random((ns, nb)) < pb).astype(float)
    else:
        yb = pb
    if task.options.proximity == "rerank":
        rb = task.codes.proximity(ii)
    else:
        rb = task.prox[np.ix_(ii, ii)].copy()
        np.fill_diagonal(rb, 0.0)
    sb = compact_bins(task.sb[ii])
    bb = compact_bins(task.bb[jj])
    if sb.max() < task.sb.max() or bb.max() < task.bb.max():
        log.debug("replicate %d: empty size bin merged", b)
    Sb = common_support_matrix(yb, rb)
    own = task.options.normalization == "own"
    if task.variant == "T" and not own:
        # shared shifts: residuals sum to zero, so T = sum(y_r S_r) + n c_y c_S
        return residual_cross(yb, Sb, sb, bb) + yb.size * task.shift_y * task.shift_S
    fy, _, _ = block_fit(yb, sb, bb)
    yr = yb - fy
    y_nr = residualize_minnorm(yr, shift=None if own else task.shift_y)
    if task.variant == "T_check":
        r_r = proximity_residuals(rb, sb)
        return t_check_statistic(y_nr, residualize_minnorm(r_r, shift=None if own else task.shift_S))
    fS, _, _ = block_fit(Sb, sb, bb)
    S_nr = residualize_minnorm(Sb - fS, shift=None if own else task.shift_S)
    return t_statistic(y_nr, S_nr)


def _run_chunk(args):
    task, idx = args
    return [replicate_statistic(task, int(b)) for b in idx]


def null_distribution(fit: SaturatedFit, proximity: ProximityMatrix, B: int = 1000, seed: int = 0,
                      options: NullOptions = NullOptions(), shift_y: float = 0.0, shift_S: float = 0.0,
                      variant: str = "T", workers: int | None = None) -> np.ndarray:
    """B bootstrap statistics from dyad-independent replicates of the data.

    Each replicate resamples sellers and buyers with replacement (carrying
    their bins and locations), draws links from the clamped fitted
    probabilities, recomputes S~, refits and recomputes the statistic.
    """
    if B < 1:
        raise ConfigError("B must be positive")
    if variant not in ("T", "T_check"):
        raise ConfigError(f"unknown statistic variant {variant!r}")
    P = clamp_probabilities(fit.fitted, fit.seller_bins, fit.buyer_bins, options.clamp)
    codes = RankCodes(proximity) if options.proximity == "rerank" else None
    task = _NullTask(P, proximity.proximity, codes, fit.seller_bins, fit.buyer_bins, options,
                     int(seed), float(shift_y), float(shift_S), variant)
    n_chunks = max(1, min(B, 4 * (workers or 1)))
    chunks = np.array_split(np.arange(B), n_chunks)
    out = parallel_map(_run_chunk, [(task, c) for c in chunks], workers=workers)
    return np.array([v for part in out for v in part])


@dataclass
class TestReport:
    T_data: float
    null_draws: np.ndarray = field(repr=False)
    p_value: float
    z_distance: float
    seed: int
    variant: str = "T"
    B: int = 0
    null_p50: float = float("nan")
    null_p95: float = float("nan")
    null_sd: float = float("nan")
    density: float = float("nan")
    options: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("null_draws")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def null_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"replicate": np.arange(self.null_draws.size), "T": self.null_draws})


def summarize_null(T: float, null: np.ndarray):
    p50, p95 = np.percentile(null, [50, 95])
    sd = float(null.std(ddof=1)) if null.size > 1 else float("nan")
    p = float((null >= T).mean())
    z = (T - p95) / sd if sd > 0 else float("nan")
    return p, float(z), float(p50), float(p95), sd


def run_test(adjacency, seller_size, buyer_size, proximity: ProximityMatrix, bins: BinScheme | None = None,
             B: int = 1000, seed: int = 0, variant: str = "T", options: NullOptions = NullOptions(),
             workers: int | None = None, q: int = 10) -> TestReport:
    """Data-side statistic plus bootstrap null, one-sided at the top."""
    y = np.asarray(adjacency, dtype=float)
    if y.ndim != 2:
        raise SizeError("test expects a single-year seller x buyer slice")
    if proximity.n != y.shape[0] or len(seller_size) != y.shape[0] or len(buyer_size) != y.shape[1]:
        raise SizeError("registries of adjacency, sizes and proximity differ")
    if bins is None:
        bins = BinScheme.from_sizes(seller_size, buyer_size, q)
    fit = fit_saturated_lpm(y, seller_size, buyer_size, bins)
    y_r = fit.resid
    if variant == "T":
        S = common_support_matrix(y, proximity)
        s_r = fit_saturated_lpm(S, seller_bins=fit.seller_bins, buyer_bins=fit.buyer_bins).resid
        shift_y, shift_S = float(y_r.min()), float(s_r.min())
        T = t_statistic(y_r - shift_y, s_r - shift_S)
    elif variant == "T_check":
        r_r = proximity_residuals(proximity.proximity, fit.seller_bins)
        shift_y, shift_S = float(y_r.min()), float(r_r.min())
        T = t_check_statistic(y_r - shift_y, r_r - shift_S)
    else:
        raise ConfigError(f"unknown statistic variant {variant!r}")
    null = null_distribution(fit, proximity, B, seed, options, shift_y, shift_S, variant, workers)
    p, z, p50, p95, sd = summarize_null(T, null)
    return TestReport(T, null, p, z, int(seed), variant, int(B), p50, p95, sd, float(y.mean()), asdict(options))


def _mc_run(args):
    from .genmodels import simulate_dgp_panel

    config, r, B, seed, variant, options, q = args
    cfg = config.__class__(**{**asdict(config), "seed": derive_seed(seed, r), "horizon": 1})
    panel, _ = simulate_dgp_panel(cfg)
    xs, xb = panel.covariates.at(None)
    rep = run_test(panel.y[0], xs, xb, panel.proximity, None, B, derive_seed(seed, r, 1), variant, options, 1, q)
    return {"run": r, "T": rep.T_data, "null_p50": rep.null_p50, "null_p95": rep.null_p95,
            "null_sd": rep.null_sd, "dist50": (rep.T_data - rep.null_p50) / rep.null_sd,
            "dist95": rep.z_distance, "p_value": rep.p_value, "reject": bool(rep.T_data > rep.null_p95),
            "density": rep.density}


def monte_carlo_validation(config, R: int = 500, B: int = 500, seed: int = 0, variant: str = "T",
                           options: NullOptions = NullOptions(), workers: int | None = None,
                           q: int = 10) -> pd.DataFrame:
    """Simulate R datasets from ``config`` and test each one.

    Returns one row per run with the statistic's distance to the null
    median and 95th percentile (raw columns plus standardized dist50 and
    dist95) and the rejection flag.
    """
    if R < 1:
        raise ConfigError("need at least one run")
    rows = parallel_map(_mc_run, [(config, r, B, seed, variant, options, q) for r in range(R)], workers=workers)
    return pd.DataFrame(rows)
