"""Core data model for bipartite seller-buyer networks.

Holds the year-indexed adjacency panel, node covariates, seller-seller
geographic proximity, the common-support index and the triad/degree
statistics built on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import DomainError, SizeError

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class TraderId:
    role: str
    index: int

    def __post_init__(self):
        if self.role not in ("seller", "buyer"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.index < 0:
            raise ValueError("index must be non-negative")


def _registry(labels: Iterable) -> tuple[str, ...]:
    reg = tuple(str(x) for x in labels)
    if len(set(reg)) != len(reg):
        raise ValueError("node labels must be unique within a role")
    return reg


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Rectangular seller x buyer panel of transaction values.

    ``values[t, i, j]`` is the value traded between seller ``i`` and buyer
    ``j`` in ``years[t]``; a link is active iff the value is positive.
    """

    sellers: tuple[str, ...]
    buyers: tuple[str, ...]
    years: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sellers", _registry(self.sellers))
        object.__setattr__(self, "buyers", _registry(self.buyers))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[None]
        if vals.shape != (len(self.years), len(self.sellers), len(self.buyers)):
            raise SizeError(
                f"values shape {vals.shape} does not match "
                f"({len(self.years)}, {len(self.sellers)}, {len(self.buyers)})"
            )
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise DomainError("transaction values must be finite and non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_adjacency(cls, adjacency, sellers=None, buyers=None, years=None) -> "BipartiteGraph":
        adj = np.asarray(adjacency, dtype=bool)
        if adj.ndim == 2:
            adj = adj[None]
        t, ns, nb = adj.shape
        return cls(
            sellers=sellers if sellers is not None else [f"s{i}" for i in range(ns)],
            buyers=buyers if buyers is not None else [f"b{j}" for j in range(nb)],
            years=years if years is not None else list(range(t)),
            values=adj.astype(float),
        )

    @property
    def adjacency(self) -> np.ndarray:
        return self.values > 0

    @property
    def n_sellers(self) -> int:
        return len(self.sellers)

    @property
    def n_buyers(self) -> int:
        return len(self.buyers)

    def year_index(self, year: int) -> int:
        try:
            return self.years.index(int(year))
        except ValueError:
            raise KeyError(f"year {year} not in panel {self.years}") from None

    def slice(self, year: int) -> np.ndarray:
        """Boolean adjacency for one year."""
        return self.adjacency[self.year_index(year)]

    def seller_ids(self) -> list[TraderId]:
        return [TraderId("seller", i) for i in range(self.n_sellers)]

    def buyer_ids(self) -> list[TraderId]:
        return [TraderId("buyer", j) for j in range(self.n_buyers)]

    # -- serialization -------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        """Long format with one row per active (year, seller, buyer)."""
        t, i, j = np.nonzero(self.values > 0)
        return pd.DataFrame(
            {
                "year": np.asarray(self.years, dtype=int)[t],
                "seller_id": np.asarray(self.sellers, dtype=object)[i],
                "buyer_id": np.asarray(self.buyers, dtype=object)[j],
                "value_usd": self.values[t, i, j],
            }
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame, sellers=None, buyers=None, years=None) -> "BipartiteGraph":
        """Build the rectangular panel from long transactions.

        Repeated (year, seller, buyer) rows are summed. Registries default to
        the sorted unique labels present in ``df``.
        """
        sellers = _registry(sellers if sellers is not None else sorted(df["seller_id"].astype(str).unique()))
        buyers = _registry(buyers if buyers is not None else sorted(df["buyer_id"].astype(str).unique()))
        years = tuple(int(y) for y in (years if years is not None else sorted(df["year"].unique())))
        vals = np.zeros((len(years), len(sellers), len(buyers)))
        if len(df):
            si = pd.Index(sellers).get_indexer(df["seller_id"].astype(str))
            bi = pd.Index(buyers).get_indexer(df["buyer_id"].astype(str))
            ti = pd.Index(years).get_indexer(df["year"].astype(int))
            keep = (si >= 0) & (bi >= 0) & (ti >= 0)
            np.add.at(vals, (ti[keep], si[keep], bi[keep]), df["value_usd"].to_numpy(float)[keep])
        return cls(sellers, buyers, years, vals)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path) -> "BipartiteGraph":
        return cls.from_frame(pd.read_csv(path, dtype={"seller_id": str, "buyer_id": str}))

    def save_cache(self, path) -> None:
        np.savez(
            path,
            values=self.values,
            sellers=np.asarray(self.sellers),
            buyers=np.asarray(self.buyers),
            years=np.asarray(self.years),
        )

    @classmethod
    def load_cache(cls, path) -> "BipartiteGraph":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["sellers"].tolist(), z["buyers"].tolist(), z["years"].tolist(), z["values"])


@dataclass(frozen=True, eq=False)
class NodeCovariates:
    """Year-indexed seller sales and buyer purchases (USD)."""

    seller_size: np.ndarray  # (T, n_sellers)
    buyer_size: np.ndarray  # (T, n_buyers)
    years: tuple[int, ...] = ()

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.seller_size, dtype=float))
        b = np.atleast_2d(np.asarray(self.buyer_size, dtype=float))
        if s.shape[0] != b.shape[0]:
            raise SizeError("seller and buyer sizes must cover the same years")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(b))):
            raise DomainError("sizes must be finite")
        if np.any(s < 0) or np.any(b < 0):
            raise DomainError("sizes must be non-negative")
        years = tuple(self.years) if self.years else tuple(range(s.shape[0]))
        if len(years) != s.shape[0]:
            raise SizeError("years do not match the size arrays")
        object.__setattr__(self, "seller_size", s)
        object.__setattr__(self, "buyer_size", b)
        object.__setattr__(self, "years", tuple(int(y) for y in years))

    @classmethod
    def from_graph(cls, graph: BipartiteGraph) -> "NodeCovariates":
        return cls(graph.values.sum(axis=2), graph.values.sum(axis=1), graph.years)

    @classmethod
    def static(cls, seller_size, buyer_size) -> "NodeCovariates":
        return cls(np.asarray(seller_size, float)[None], np.asarray(buyer_size, float)[None])

    def mean_seller_size(self) -> np.ndarray:
        return self.seller_size.mean(axis=0)

    def mean_buyer_size(self) -> np.ndarray:
        return self.buyer_size.mean(axis=0)

    def at(self, year: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Seller and buyer sizes for ``year`` (period means if ``None``)."""
        if year is None:
            return self.mean_seller_size(), self.mean_buyer_size()
        t = self.years.index(int(year))
        return self.seller_size[t], self.buyer_size[t]


# ---------------------------------------------------------------------------
# geography


def _check_latlon(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90):
        raise DomainError("latitude must lie in [-90, 90]")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180):
        raise DomainError("longitude must lie in [-180, 180]")
    return lat, lon


def haversine_distance(p1, p2) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    (lat1, lon1), (lat2, lon2) = p1, p2
    lat, lon = _check_latlon([lat1, lat2], [lon1, lon2])
    phi = np.radians(lat)
    dphi = phi[1] - phi[0]
    dlmb = math.radians(lon[1] - lon[0])
    h = math.sin(dphi / 2) ** 2 + math.cos(phi[0]) * math.cos(phi[1]) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(lat, lon) -> np.ndarray:
    """Pairwise haversine distances (km) for arrays of coordinates."""
    lat, lon = _check_latlon(lat, lon)
    phi = np.radians(lat)
    lmb = np.radians(lon)
    dphi = phi[:, None] - phi[None, :]
    dlmb = lmb[:, None] - lmb[None, :]
    h = np.sin(dphi / 2) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlmb / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True, eq=False)
class ProximityMatrix:
    distance: np.ndarray
    proximity: np.ndarray
    mode: str = "continuous_rank"
    quantile: float | None = None

    @property
    def n(self) -> int:
        return self.distance.shape[0]

    def mean_proximity(self) -> np.ndarray:
        """Average proximity of each seller to the other sellers."""
        return self.proximity.sum(axis=1) / max(self.n - 1, 1)

    def to_frame(self, sellers: Sequence[str] | None = None) -> pd.DataFrame:
        labels = list(sellers) if sellers is not None else [f"s{i}" for i in range(self.n)]
        iu = np.triu_indices(self.n, 1)
        return pd.DataFrame(
            {
                "seller_a": np.asarray(labels, dtype=object)[iu[0]],
                "seller_b": np.asarray(labels, dtype=object)[iu[1]],
                "km": self.distance[iu],
            }
        )

    def to_csv(self, path, sellers=None) -> None:
        self.to_frame(sellers).to_csv(path, index=False)


def read_distance_csv(path, sellers: Sequence[str]) -> np.ndarray:
    """Read (seller_a, seller_b, km) rows into a symmetric matrix."""
    df = pd.read_csv(path, dtype={"seller_a": str, "seller_b": str})
    idx = pd.Index([str(s) for s in sellers])
    a = idx.get_indexer(df["seller_a"])
    b = idx.get_indexer(df["seller_b"])
    if np.any(a < 0) or np.any(b < 0):
        raise SizeError("distance file references unknown sellers")
    d = np.full((len(idx), len(idx)), np.nan)
    d[a, b] = df["km"].to_numpy(float)
    d[b, a] = df["km"].to_numpy(float)
    np.fill_diagonal(d, 0.0)
    if np.isnan(d).any():
        raise SizeError("distance file does not cover every seller pair")
    return d


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    if not 0 < q < 100:
        raise DomainError("quantile must lie in (0, 100)")
    v = np.sort(np.asarray(values, dtype=float).ravel())
    k = max(int(math.ceil(q / 100.0 * v.size)), 1)
    return float(v[k - 1])


def build_proximity(distances, mode: str = "continuous_rank", q: float | None = None) -> ProximityMatrix:
    """Turn a seller-seller distance matrix into proximities in [0, 1].

    ``continuous_rank`` maps the largest off-diagonal distance to 0 and the
    smallest to 1 through average ranks; ``quantile`` marks pairs at or
    below the nearest-rank ``q``-th percentile distance with 1.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise SizeError("distance matrix must be square")
    n = d.shape[0]
    if n < 2:
        raise SizeError("proximity needs at least two sellers")
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise DomainError("distances must be finite and non-negative")
    if not np.allclose(d, d.T):
        raise DomainError("distance matrix must be symmetric")
    iu = np.triu_indices(n, 1)
    upper = d[iu]
    r = np.zeros_like(d)
    if mode == "continuous_rank":
        m = upper.size
        if m == 1:
            vals = np.ones(1)
        else:
            vals = 1.0 - (rankdata(upper, method="average") - 1.0) / (m - 1.0)
        r[iu] = vals
    elif mode == "quantile":
        if q is None:
            raise DomainError("quantile mode needs q")
        r[iu] = (upper <= nearest_rank_quantile(upper, q)).astype(float)
    else:
        raise ValueError(f"unknown proximity mode {mode!r}")
    r = r + r.T
    d = d.copy()
    np.fill_diagonal(d, 0.0)
    for a in (d, r):
        a.setflags(write=False)
    return ProximityMatrix(d, r, mode, q)


# ---------------------------------------------------------------------------
# common support and triads


def common_support_matrix(y_slice, proximity) -> np.ndarray:
    """S~[i, j] = (1/K) sum_{k != i} r_ki y_kj with K = n_sellers - 1."""
    r = proximity.proximity if isinstance(proximity, ProximityMatrix) else np.asarray(proximity, float)
    y = np.asarray(y_slice, dtype=float)
    if y.ndim != 2 or r.shape != (y.shape[0], y.shape[0]):
        raise SizeError(f"proximity {r.shape} does not match adjacency {y.shape}")
    k = y.shape[0] - 1
    if k < 1:
        raise SizeError("common support needs at least two sellers")
    # zero diagonal removes k == i; r is symmetric so r_ki = r_ik
    rr = r - np.diag(np.diag(r)) if np.any(np.diag(r)) else r
    return (rr @ y) / k


def common_support(y_slice, proximity, i: int) -> np.ndarray:
    """Row ``i`` of the distance-proxied common-support matrix."""
    r = proximity.proximity if isinstance(proximity, ProximityMatrix) else np.asarray(proximity, float)
    y = np.asarray(y_slice, dtype=float)
    if y.ndim != 2 or r.shape != (y.shape[0], y.shape[0]):
        raise SizeError(f"proximity {r.shape} does not match adjacency {y.shape}")
    n = y.shape[0]
    if n < 2:
        raise SizeError("common support needs at least two sellers")
    w = r[:, i].copy()
    w[i] = 0.0
    return w @ y / (n - 1)


@dataclass(frozen=True, eq=False)
class CommonSupport:
    S: np.ndarray
    K: int

    @classmethod
    def from_slice(cls, y_slice, proximity) -> "CommonSupport":
        y = np.asarray(y_slice)
        return cls(common_support_matrix(y, proximity), y.shape[0] - 1)


def shared_partner_count(adjacency, i: int, j: int, normalizer: str = "pair") -> float:
    """Normalized count of third nodes linked to both ``i`` and ``j``.

    ``normalizer="pair"`` divides by #{k not in {i, j}}; ``"seller"`` uses
    #{k != i}, the convention of the distance-proxied index.
    """
    a = np.asarray(adjacency, dtype=bool)
    n = a.shape[0]
    if normalizer == "pair":
        k = n - 2
    elif normalizer == "seller":
        k = n - 1
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    if k <= 0:
        raise SizeError("no third nodes available")
    both = a[:, i] & a[:, j]
    both[[i, j]] = False
    return float(both.sum()) / k


def triad_count(adjacency) -> int:
    """Ordered triple sum of y_ij y_ki y_kj over distinct i, j, k.

    Each undirected triangle contributes 6.
    """
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SizeError("adjacency must be square")
    a = (a != 0).astype(np.int64)
    np.fill_diagonal(a, 0)
    return int((a * (a.T @ a)).sum())


def triangles(adjacency) -> int:
    return triad_count(adjacency) // 6


def expected_triads_uniform(n: int, links: int) -> float:
    """Expected undirected triangle count of a uniform graph with ``links`` edges.

    Plug-in form C(n, 3) p^3 with p = links / C(n, 2). This is exact for an
    independent-link graph with probability p; with the link count held fixed
    the exact mean is C(n, 3) L(L-1)(L-2) / (M(M-1)(M-2)), M = C(n, 2), which
    is lower when L is small relative to M.
    """
    if n < 3:
        raise DomainError("need at least three nodes")
    if not 0 <= links <= n * (n - 1) / 2:
        raise DomainError("link count out of range")
    return 4.0 * links**3 * (n - 2) / (3.0 * n**2 * (n - 1) ** 2)


def asinh(x):
    """Inverse hyperbolic sine, ln(x + sqrt(1 + x^2)), odd-symmetric."""
    # numpy's version stays accurate near zero where the log form underflows
    out = np.arcsinh(np.asarray(x, dtype=float))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# descriptive statistics


@dataclass
class DegreeStats:
    per_year: pd.DataFrame
    region: dict
    buyer_level: dict
    outdegree: dict = field(default_factory=dict)
    indegree: dict = field(default_factory=dict)

    @property
    def density(self) -> float:
        return self.region["density"]


def network_stats(graph: BipartiteGraph) -> DegreeStats:
    """Relationship counts, density and buyer-level averages.

    Region-level rows are averaged over years, with new/discontinued counts
    averaged over years after the first. Buyer-level figures are averaged
    over the years in which the buyer has at least one active seller
    (new/discontinued: years after the first where the buyer is active in
    t or t-1), then across buyers.
    """
    adj = graph.adjacency
    vals = graph.values
    n_t, ns, nb = adj.shape
    rows = []
    for t in range(n_t):
        a = adj[t]
        links = int(a.sum())
        active_sellers = int(a.any(axis=1).sum())
        total = float(vals[t].sum())
        row = {
            "year": graph.years[t],
            "active_links": links,
            "active_buyers": int(a.any(axis=0).sum()),
            "active_sellers": active_sellers,
            "new_links": np.nan,
            "discontinued_links": np.nan,
            "density": links / (ns * nb),
            "total_value": total,
            "sales_per_seller": total / active_sellers if active_sellers else np.nan,
        }
        if t > 0:
            row["new_links"] = int((a & ~adj[t - 1]).sum())
            row["discontinued_links"] = int((~a & adj[t - 1]).sum())
        rows.append(row)
    per_year = pd.DataFrame(rows)
    region = {k: float(per_year[k].mean()) for k in per_year.columns if k != "year"}

    # buyer-level: average over each buyer's active years, then across buyers
    deg_b = adj.sum(axis=1).astype(float)  # (T, nb)
    purch = vals.sum(axis=1)
    active = deg_b > 0
    buyer = {}
    with np.errstate(invalid="ignore", divide="ignore"):
        n_active = active.sum(axis=0)
        ever = n_active > 0
        buyer["sellers_per_buyer"] = _mean_over(deg_b, active, ever)
        buyer["purchases_per_buyer"] = _mean_over(purch, active, ever)
        buyer["sales_per_relationship"] = _mean_over(np.where(active, purch / np.where(active, deg_b, 1), 0), active, ever)
        if n_t > 1:
            new_b = (adj[1:] & ~adj[:-1]).sum(axis=1).astype(float)
            disc_b = (~adj[1:] & adj[:-1]).sum(axis=1).astype(float)
            live = active[1:] | active[:-1]
            ever2 = live.any(axis=0)
            buyer["new_per_buyer"] = _mean_over(new_b, live, ever2)
            buyer["discontinued_per_buyer"] = _mean_over(disc_b, live, ever2)
        else:
            buyer["new_per_buyer"] = float("nan")
            buyer["discontinued_per_buyer"] = float("nan")

    out = {graph.years[t]: adj[t].sum(axis=1) for t in range(n_t)}
    ind = {graph.years[t]: adj[t].sum(axis=0) for t in range(n_t)}
    return DegreeStats(per_year, region, buyer, out, ind)


def _mean_over(x, mask, ever) -> float:
    if not ever.any():
        return float("nan")
    per_node = np.where(mask, x, 0).sum(axis=0)[ever] / mask.sum(axis=0)[ever]
    return float(per_node.mean())


def save_matrix_cache(path: Path | str, **arrays) -> None:
    np.savez(path, **arrays)


def quantile_bins(x, q: int) -> np.ndarray:
    """Bin index in 0..q-1 by interior quantile cut points.

    Ties at a cut point fall in the upper bin, so heavily tied data can
    leave some bins empty; callers relabel with ``compact_bins``.
    """
    x = np.asarray(x, dtype=float)
    if q < 1:
        raise DomainError("need at least one bin")
    if q == 1 or x.size == 0:
        return np.zeros(x.size, dtype=np.int64)
    edges = np.quantile(x, np.linspace(0.0, 1.0, q + 1)[1:-1])
    return np.searchsorted(edges, x, side="right").astype(np.int64)


def compact_bins(b) -> np.ndarray:
    """Relabel bin ids to 0..m-1 preserving order (drops empty bins)."""
    return np.unique(np.asarray(b), return_inverse=True)[1].astype(np.int64)
