"""CSV ingestion: validation, filters, and assembly of a PanelDataset.

Schemas (UTF-8, header row, comma separated)::

    transactions.csv  year, seller_id, buyer_id, value_usd
    locations.csv     seller_id, lat, lon, region
    dest_exports.csv  year, seller_id, dest_code, value_usd
    fx.csv            year, dest_code, lcu_per_usd

Every excluded row is counted in the ingestion report so that the raw row
count reconciles with the kept rows plus each filter's exclusions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InputError
from .netcore import BipartiteGraph, NodeCovariates, build_proximity, distance_matrix
from .panel import PanelDataset

log = logging.getLogger(__name__)

SCHEMAS = {
    "transactions": {"year": "int", "seller_id": "str", "buyer_id": "str", "value_usd": "float"},
    "locations": {"seller_id": "str", "lat": "float", "lon": "float", "region": "str"},
    "dest_exports": {"year": "int", "seller_id": "str", "dest_code": "str", "value_usd": "float"},
    "fx": {"year": "int", "dest_code": "str", "lcu_per_usd": "float"},
}
MAX_MALFORMED = 0.01


class IngestError(InputError):
    """Ingestion aborted; ``report`` holds the counts gathered so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class IngestOptions:
    value_floor: float = 100.0
    min_active_years: int = 4
    regions: tuple[str, ...] = ()  # empty keeps every region
    proximity_mode: str = "continuous_rank"
    proximity_q: float | None = None


@dataclass
class IngestedData:
    panel: PanelDataset
    report: dict = field(default_factory=dict)
    diagnostics: pd.DataFrame | None = None


def read_table(path, kind: str) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Read and type one CSV; returns (valid rows, per-row diagnostics).

    Raises when the header is wrong or more than 1% of rows are malformed.
    """
    schema = SCHEMAS[kind]
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{kind}: file {path} not found")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise IngestError(f"{kind}: file is empty", {f"{kind}_rows": 0}) from None
    missing = [c for c in schema if c not in raw.columns]
    if missing:
        raise IngestError(f"{kind}: missing columns {missing}")
    out = pd.DataFrame(index=raw.index)
    bad = pd.Series("", index=raw.index)
    for col, typ in schema.items():
        s = raw[col].str.strip()
        if typ == "str":
            v = s
            err = s == ""
        else:
            v = pd.to_numeric(s, errors="coerce")
            err = v.isna() | ~np.isfinite(v.astype(float))
            if typ == "int":
                err |= (v % 1 != 0)
                v = v.where(~err)
        out[col] = v
        bad = bad.where(~err | (bad != ""), f"bad {col}")
    diag = pd.DataFrame({"file": kind, "row": raw.index + 2, "reason": bad})[bad != ""]
    n = len(raw)
    if n and len(diag) / n > MAX_MALFORMED:
        raise IngestError(f"{kind}: {len(diag)} of {n} rows malformed (limit 1%)",
                          {f"{kind}_rows": n, f"{kind}_malformed": len(diag)})
    good = out[bad == ""].copy()
    for col, typ in schema.items():
        if typ == "int":
            good[col] = good[col].astype(np.int64)
        elif typ == "float":
            good[col] = good[col].astype(float)
    return good.reset_index(drop=True), diag


def ingest(transactions, locations, dest_exports=None, fx=None, options: IngestOptions = IngestOptions()) -> IngestedData:
    """Validate, filter, and rectangularize the raw files."""
    tx, d_tx = read_table(transactions, "transactions")
    loc, d_loc = read_table(locations, "locations")
    diags = [d_tx, d_loc]
    rep = {"raw_rows": len(tx) + len(d_tx), "malformed": len(d_tx)}
    if rep["raw_rows"] == 0:
        raise IngestError("transactions: no rows", rep | {"kept": 0})
    if loc["seller_id"].duplicated().any():
        raise IngestError("locations: duplicate seller_id; resolve to one coordinate pair first", rep)

    low = tx["value_usd"] < options.value_floor
    rep["below_floor"] = int(low.sum())
    tx = tx[~low]

    known = tx["seller_id"].isin(loc["seller_id"])
    rep["no_location"] = int((~known).sum())
    for s in sorted(tx.loc[~known, "seller_id"].unique()):
        log.info("seller %s rejected: no location", s)
    tx = tx[known]

    if options.regions:
        in_reg = loc.set_index("seller_id").loc[tx["seller_id"], "region"].isin(options.regions).to_numpy()
        rep["outside_region"] = int((~in_reg).sum())
        tx = tx[in_reg]
    else:
        rep["outside_region"] = 0

    active = tx.groupby("seller_id")["year"].nunique()
    ok = active.index[active >= options.min_active_years]
    keep = tx["seller_id"].isin(ok)
    rep["inactive_seller"] = int((~keep).sum())
    tx = tx[keep]
    rep["kept"] = len(tx)
    excluded = rep["malformed"] + rep["below_floor"] + rep["no_location"] + rep["outside_region"] + rep["inactive_seller"]
    rep["reconciles"] = bool(rep["raw_rows"] == rep["kept"] + excluded)
    if rep["kept"] == 0:
        raise IngestError("no transactions survive the filters", rep)

    graph = BipartiteGraph.from_frame(tx)
    rep.update(sellers=graph.n_sellers, buyers=graph.n_buyers, years=list(graph.years))
    loc_i = loc.set_index("seller_id").loc[list(graph.sellers)]
    lat, lon = loc_i["lat"].to_numpy(float), loc_i["lon"].to_numpy(float)
    prox = build_proximity(distance_matrix(lat, lon), options.proximity_mode, options.proximity_q)
    cov = NodeCovariates.from_graph(graph)

    codes, ex, rates = (), None, None
    if dest_exports is not None and fx is not None:
        dx, d_dx = read_table(dest_exports, "dest_exports")
        fr, d_fr = read_table(fx, "fx")
        diags += [d_dx, d_fr]
        codes, ex, rates, cov_rep = _exposure(graph, tx, dx, fr)
        rep.update(cov_rep)
    panel = PanelDataset(graph, prox, cov, codes, ex, rates, lat, lon)
    diag = pd.concat(diags, ignore_index=True)
    return IngestedData(panel, rep, diag)


def _exposure(graph, tx, dx, fr):
    """Destination export array and exchange rates aligned with the panel."""
    years = list(graph.years)
    fr = fr[fr["year"].isin(years)]
    have = fr.groupby("dest_code")["year"].nunique()
    codes = tuple(sorted(c for c in have.index[have == len(years)] if c in set(dx["dest_code"])))
    dropped = sorted(set(dx["dest_code"]) - set(codes))
    if dropped:
        log.warning("destinations without a full exchange-rate series dropped: %s", dropped)
    if not codes:
        raise IngestError("no destination has exchange rates for every panel year")
    rates = fr.pivot_table(index="year", columns="dest_code", values="lcu_per_usd", aggfunc="mean")
    rates = rates.loc[years, list(codes)].to_numpy(float)
    ex = np.zeros((len(years), graph.n_sellers, len(codes)))
    sub = dx[dx["dest_code"].isin(codes) & dx["year"].isin(years) & dx["seller_id"].isin(graph.sellers)]
    ti = pd.Index(years).get_indexer(sub["year"])
    si = pd.Index(graph.sellers).get_indexer(sub["seller_id"])
    ci = pd.Index(codes).get_indexer(sub["dest_code"])
    np.add.at(ex, (ti, si, ci), sub["value_usd"].to_numpy(float))
    us_value = float(tx["value_usd"].sum())
    cov = {
        "destinations": list(codes),
        "destinations_dropped": dropped,
        # share of tracked exports in total sales of the kept sellers
        "coverage_ratio": float(ex.sum() / (ex.sum() + us_value)) if us_value + ex.sum() > 0 else 0.0,
    }
    return codes, ex, rates, cov
