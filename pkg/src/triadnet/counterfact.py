"""Stochastic fixed-point equilibria and trade-cost counterfactuals.

Each draw n owns a seed s_n and hence a frozen uniform per dyad; links
and common support are iterated to a fixed point under those uniforms.
Scenario C1 re-solves the fixed point after scaling alpha, C2 redraws once
with the baseline support held fixed.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import ConfigError, ConvergenceError, DomainError, SizeError
from .genmodels import PoissonParams, draw_links, fixed_point_links, prob_function
from .netcore import ProximityMatrix, common_support_matrix, quantile_bins
from .rng import check_seed, derive_seed, dyad_uniforms, parallel_map

log = logging.getLogger(__name__)

MODES = ("C1_full", "C2_frozen")


@dataclass(frozen=True, eq=False)
class EquilibriumDraw:
    """One fixed point. ``S`` may be dropped to save memory; it is a
    deterministic function of ``y`` and is rebuilt by :meth:`support`."""

    seed: int
    y: np.ndarray
    S: np.ndarray | None
    iterations: int
    converged: bool = True

    def support(self, proximity) -> np.ndarray:
        return self.S if self.S is not None else common_support_matrix(self.y, proximity)

    def light(self) -> "EquilibriumDraw":
        return replace(self, S=None)

    def digest(self) -> str:
        return hashlib.sha256(np.packbits(self.y).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class Ensemble:
    draws: tuple
    params: PoissonParams
    seller_size: np.ndarray
    buyer_size: np.ndarray
    proximity: ProximityMatrix
    master_seed: int = 0
    label: str = "baseline"

    def __len__(self):
        return len(self.draws)

    @property
    def n_failed(self) -> int:
        return sum(not d.converged for d in self.draws)

    def degrees(self, side: str = "sellers") -> np.ndarray:
        """(draws, nodes) degree matrix: outdegree for sellers, indegree for buyers."""
        axis = {"sellers": 1, "buyers": 0}.get(side)
        if axis is None:
            raise ConfigError(f"unknown side {side!r}")
        return np.stack([d.y.sum(axis=axis) for d in self.draws]).astype(float)

    def densities(self) -> np.ndarray:
        return np.array([d.y.mean() for d in self.draws])

    def mean_support(self) -> float:
        return float(np.mean([d.support(self.proximity).mean() for d in self.draws]))

    def summary(self) -> dict:
        dens = self.densities()
        its = np.array([d.iterations for d in self.draws])
        return {
            "label": self.label,
            "n_draws": len(self),
            "n_failed": self.n_failed,
            "density_mean": float(dens.mean()),
            "density_se": float(dens.std(ddof=1) / np.sqrt(len(dens))) if len(dens) > 1 else float("nan"),
            "mean_support": self.mean_support(),
            "iterations_median": float(np.median(its)),
            "iterations_max": int(its.max()),
            "share_within_50": float(np.mean(its <= 50)),
        }


@dataclass(frozen=True)
class ScenarioConfig:
    xi: float = 1.0 / 0.9
    mode: str = "C1_full"
    freeze: str = "draw"  # C2 only: "draw" or "ensemble_mean"

    def __post_init__(self):
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.freeze not in ("draw", "ensemble_mean"):
            raise ConfigError("freeze must be 'draw' or 'ensemble_mean'")


@dataclass(frozen=True)
class DecileReport:
    side: str
    table: pd.DataFrame

    def top_decile_change(self) -> float:
        return float(self.table["change"].iloc[-1])

    def to_csv(self, path):
        self.table.to_csv(path, index=False, float_format="%.10g")


# ---------------------------------------------------------------------------
# solver


def solve_equilibrium_draw(params: PoissonParams, seller_size, buyer_size, proximity: ProximityMatrix,
                           seed: int, tol: float = 1e-10, max_iter: int = 500, S0=None) -> EquilibriumDraw:
    """Fixed point of links and common support under the draw's frozen uniforms."""
    if not tol > 0:
        raise ConfigError("tol must be positive")
    seed = check_seed(seed)
    pf = prob_function(params, seller_size, buyer_size)
    u = dyad_uniforms(seed, (len(seller_size), len(buyer_size)))
    if proximity.proximity.shape[0] != u.shape[0]:
        raise SizeError("proximity does not match the seller count")
    if params.gamma == 0:
        # S~ does not enter the rate, the first draw is the fixed point
        y = draw_links(pf(0.0), u)
        return EquilibriumDraw(seed, y, common_support_matrix(y, proximity), 1)
    y, S, it = fixed_point_links(pf, proximity, u, tol=tol, max_iter=max_iter, S0=S0)
    return EquilibriumDraw(seed, y, S, it)


def _solve_task(args):
    params, xs, xb, prox, seed, tol, max_iter, keep = args
    try:
        d = solve_equilibrium_draw(params, xs, xb, prox, seed, tol, max_iter)
    except ConvergenceError as e:
        y, S = e.last
        d = EquilibriumDraw(seed, y, S, max_iter, converged=False)
    return d if keep else d.light()


def build_ensemble(params: PoissonParams, seller_size, buyer_size, proximity: ProximityMatrix,
                   n_draws: int = 250, master_seed: int = 0, tol: float = 1e-10, max_iter: int = 500,
                   workers: int | None = None, label: str = "baseline", keep_support: bool = False) -> Ensemble:
    """Independent equilibrium draws with seeds s_n = derive(master_seed, n).

    Non-convergent draws keep their last iterate and are flagged, not
    dropped. S~ is stored per draw only with ``keep_support``.
    """
    if n_draws < 1:
        raise ConfigError("n_draws must be at least 1")
    xs = np.asarray(seller_size, float)
    xb = np.asarray(buyer_size, float)
    tasks = [(params, xs, xb, proximity, derive_seed(master_seed, n), tol, max_iter, keep_support)
             for n in range(n_draws)]
    draws = tuple(parallel_map(_solve_task, tasks, workers))
    ens = Ensemble(draws, params, xs, xb, proximity, master_seed, label)
    if ens.n_failed:
        log.warning("%d of %d draws did not converge in %d iterations", ens.n_failed, n_draws, max_iter)
    return ens


def _c2_task(args):
    params, xs, xb, prox, draw, S = args
    S = draw.support(prox) if S is None else S
    pf = prob_function(params, xs, xb)
    u = dyad_uniforms(draw.seed, (len(xs), len(xb)))
    return EquilibriumDraw(draw.seed, draw_links(pf(S), u), None, 1)


def run_counterfactual(baseline: Ensemble, scenario: ScenarioConfig, tol: float = 1e-10,
                       max_iter: int = 500, workers: int | None = None) -> Ensemble:
    """Shock alpha by ``xi`` and re-solve (C1) or redraw with frozen support (C2).

    Both scenarios reuse the baseline seeds draw by draw.
    """
    p1 = replace(baseline.params, alpha=baseline.params.alpha * scenario.xi)
    xs, xb, prox = baseline.seller_size, baseline.buyer_size, baseline.proximity
    label = f"{scenario.mode}_xi{scenario.xi:.6g}"
    if scenario.mode == "C1_full":
        tasks = [(p1, xs, xb, prox, d.seed, tol, max_iter, False) for d in baseline.draws]
        draws = tuple(parallel_map(_solve_task, tasks, workers))
    else:
        if baseline.n_failed:
            log.warning("freezing support of %d non-convergent baseline draws", baseline.n_failed)
        if scenario.freeze == "ensemble_mean":
            S_bar = np.mean([d.support(prox) for d in baseline.draws], axis=0)
            tasks = [(p1, xs, xb, prox, d, S_bar) for d in baseline.draws]
        else:
            tasks = [(p1, xs, xb, prox, d, None) for d in baseline.draws]
        draws = tuple(parallel_map(_c2_task, tasks, workers))
    return Ensemble(draws, p1, xs, xb, prox, baseline.master_seed, label)


# ---------------------------------------------------------------------------
# reporting


def compare(baseline: Ensemble, counterfactual: Ensemble, side: str = "sellers", n_groups: int = 10) -> DecileReport:
    """Per-decile expected degree changes, deciles taken on baseline expected degree.

    Draws are paired by seed, so the MC standard error of a decile's mean
    change is the across-draw spread of the paired change over sqrt(N).
    """
    if (len(baseline) != len(counterfactual)
            or baseline.seller_size.shape != counterfactual.seller_size.shape
            or baseline.buyer_size.shape != counterfactual.buyer_size.shape):
        raise SizeError("ensembles do not share draws and node registries")
    if any(a.seed != b.seed for a, b in zip(baseline.draws, counterfactual.draws)):
        raise DomainError("ensembles were not built from the same seeds")
    d0 = baseline.degrees(side)
    d1 = counterfactual.degrees(side)
    base_mean = d0.mean(axis=0)
    groups = quantile_bins(base_mean, n_groups)
    n = d0.shape[0]
    rows = []
    for g in np.unique(groups):
        m = groups == g
        b = d0[:, m].mean(axis=1)
        c = (d1[:, m] - d0[:, m]).mean(axis=1)
        b_bar, c_bar = float(b.mean()), float(c.mean())
        se = float(c.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        rel = c_bar / b_bar if b_bar > 0 else float("nan")
        rows.append({
            "side": side,
            "decile": int(g) + 1,
            "n_nodes": int(m.sum()),
            "baseline_degree": b_bar,
            "change": c_bar,
            "change_se": se,
            "rel_change": rel,
            "rel_change_se": se / b_bar if b_bar > 0 else float("nan"),
        })
    return DecileReport(side, pd.DataFrame(rows))


def amplification(c1: DecileReport, c2: DecileReport) -> pd.DataFrame:
    """C1 over C2 mean change by decile (transitivity amplification)."""
    a = c1.table.set_index("decile")
    b = c2.table.set_index("decile")
    out = pd.DataFrame({
        "c1_change": a["change"],
        "c2_change": b["change"],
        "ratio": a["change"] / b["change"].where(b["change"] != 0),
    })
    return out.reset_index()


def mean_change(baseline: Ensemble, other: Ensemble) -> tuple[float, float]:
    """Mean paired change in links per draw and its MC standard error."""
    diff = np.array([b.y.sum() - a.y.sum() for a, b in zip(baseline.draws, other.draws)], dtype=float)
    se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else float("nan")
    return float(diff.mean()), se


def paired_difference(c1: Ensemble, c2: Ensemble) -> tuple[float, float]:
    """Mean (C1 - C2) link difference per draw and its paired MC standard error."""
    diff = np.array([a.y.sum() - b.y.sum() for a, b in zip(c1.draws, c2.draws)], dtype=float)
    se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else float("nan")
    return float(diff.mean()), se
