"""``triadnet`` command line: ingestion, orchestration and report output.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 input error,
4 configuration error, 5 numerical failure, 6 non-convergence.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, dump_json, write_manifest
from .errors import ConfigError, InputError, TriadnetError

log = logging.getLogger("triadnet")

DATA_FILES = ("transactions.csv", "locations.csv", "dest_exports.csv", "fx.csv")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command, out, config: RunConfig, workers):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.workers = workers
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def json(self, name, obj):
        dump_json(obj, self.path(name))

    def csv(self, name, frame: pd.DataFrame):
        frame.to_csv(self.path(name), index=False, float_format="%.10g", lineterminator="\n")

    def finish(self):
        write_manifest(self.out, self.command, self.config, self.outputs, self.inputs)
        click.echo(f"{self.command}: wrote {len(self.outputs) + 1} files to {self.out}")


def common(f):
    """Options shared by every command, plus error-to-exit-code mapping."""

    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                  help="JSON run configuration (every key optional; see README).")
    @click.option("--seed", type=int, default=None, help="Master seed; overrides the config's seed (default 0).")
    @click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
    @click.option("--workers", type=int, default=None,
                  help="Worker processes (default: TRIADNET_WORKERS or 1). Results do not depend on it.")
    @functools.wraps(f)
    def wrapper(config_path, seed, out, workers, **kw):
        try:
            cfg = RunConfig.load(config_path).with_seed(seed)
            run = Run(f.__name__.rstrip("_"), out, cfg, workers)
            if config_path:
                run.inputs.append(Path(config_path))
            f(run, **kw)
            run.finish()
        except TriadnetError as e:
            report = getattr(e, "report", None)
            if report:
                Path(out).mkdir(parents=True, exist_ok=True)
                dump_json(report, Path(out) / "ingest_report.json")
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        except (ValueError, TypeError) as e:
            # dataclass validation in the library raises plain ValueErrors on bad config values
            click.echo(f"error: {e}", err=True)
            sys.exit(ConfigError.exit_code)

    return wrapper


data_option = click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
                           help="Directory with transactions.csv, locations.csv and optionally "
                                "dest_exports.csv and fx.csv.")


def load_panel(run: Run, data_dir):
    from .ingest import IngestOptions, ingest

    d = Path(data_dir)
    paths = {n: d / n for n in DATA_FILES}
    for n in DATA_FILES[:2]:
        if not paths[n].exists():
            raise InputError(f"{n} missing from {d}")
    extra = [paths[n] if paths[n].exists() else None for n in DATA_FILES[2:]]
    if (extra[0] is None) != (extra[1] is None):
        raise InputError("dest_exports.csv and fx.csv must be supplied together")
    opts = IngestOptions(**asdict(run.config.ingest))
    data = ingest(paths["transactions.csv"], paths["locations.csv"], extra[0], extra[1], opts)
    run.inputs += [p for p in paths.values() if p.exists()]
    run.json("ingest_report.json", data.report)
    if data.diagnostics is not None and len(data.diagnostics):
        run.csv("ingest_diagnostics.csv", data.diagnostics)
    if not data.report.get("reconciles", True):
        raise InputError("ingestion counts do not reconcile")
    return data.panel


def load_regressor(panel, path):
    """Align an external asinh S~ array (npz: values, sellers, buyers, years) with the panel."""
    with np.load(path, allow_pickle=False) as z:
        vals, sellers, buyers, years = z["values"], z["sellers"].tolist(), z["buyers"].tolist(), z["years"].tolist()
    g = panel.graph
    si = pd.Index([str(s) for s in sellers]).get_indexer(list(g.sellers))
    bi = pd.Index([str(b) for b in buyers]).get_indexer(list(g.buyers))
    ti = pd.Index([int(y) for y in years]).get_indexer(list(g.years))
    if (si < 0).any() or (bi < 0).any() or (ti < 0).any():
        raise InputError("regressor file does not cover the panel registry")
    return vals[np.ix_(ti, si, bi)]


@click.group()
@click.version_option(__version__, prog_name="triadnet")
@click.option("-v", "--verbose", count=True, help="Log progress (-v info, -vv debug).")
def main(verbose):
    """Transitivity in bipartite buyer-seller networks: detect, estimate, calibrate, simulate."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------------------


@main.command()
@data_option
@common
def stats(run: Run, data_dir):
    """Density, degree and buyer-level summary statistics per year."""
    from .netcore import network_stats
    from .plotting import degree_histogram

    panel = load_panel(run, data_dir)
    st = network_stats(panel.graph)
    run.csv("stats_per_year.csv", st.per_year)
    run.json("stats_summary.json", {"region": st.region, "buyer_level": st.buyer_level,
                                    "sellers": panel.graph.n_sellers, "buyers": panel.graph.n_buyers})
    last = panel.years[-1]
    deg = pd.DataFrame({"year": last, "node": list(panel.graph.sellers), "side": "seller",
                        "degree": st.outdegree[last]})
    deg = pd.concat([deg, pd.DataFrame({"year": last, "node": list(panel.graph.buyers), "side": "buyer",
                                        "degree": st.indegree[last]})], ignore_index=True)
    run.csv("degrees.csv", deg)
    degree_histogram(st.outdegree[last], st.indegree[last], run.path("degree_hist.png"))


@main.command()
@data_option
@click.option("--year", type=int, default=None, help="Panel year to test (default: config test.year or last).")
@click.option("--B", "B", type=int, default=None, help="Bootstrap replicates (default: config test.B = 1000).")
@common
def test(run: Run, data_dir, year, B):
    """Residualized-triad bootstrap test on one cross-section."""
    from .plotting import null_histogram
    from .transtest import BinScheme, NullOptions, run_test

    tb = run.config.test
    panel = load_panel(run, data_dir)
    year = year if year is not None else (tb.year if tb.year is not None else panel.years[-1])
    if year not in panel.years:
        raise ConfigError(f"year {year} not in panel {list(panel.years)}")
    xs, xb = panel.covariates.at(year)
    opts = NullOptions(tb.draw, tb.clamp, tb.proximity, tb.normalization)
    bins = BinScheme.from_sizes(xs, xb, tb.bins)
    rep = run_test(panel.graph.slice(year), xs, xb, panel.proximity, bins, B or tb.B, run.config.seed,
                   tb.variant, opts, run.workers)
    run.json("test_report.json", {**rep.to_dict(), "year": int(year)})
    run.csv("null_draws.csv", rep.null_frame())
    null_histogram(rep.null_draws, rep.T_data, run.path("null_hist.png"))


def _estimate(run: Run, panel, regressor_path):
    from .panel import DdmlConfig, InstrumentSpec, build_instrument, build_regressor, ddml_iv_estimate

    eb = run.config.estimate
    if regressor_path:
        reg = load_regressor(panel, regressor_path)
        run.inputs.append(Path(regressor_path))
    else:
        reg = build_regressor(panel, eb.lag)
    inst = None
    if not eb.ols:
        if panel.exports is None:
            raise InputError("IV estimation needs dest_exports.csv and fx.csv (or set estimate.ols)")
        inst = build_instrument(panel, InstrumentSpec(tuple(eb.countries), eb.lag))
    cfg = DdmlConfig(eb.folds, eb.repetitions, run.config.seed, "linear", eb.f_floor, eb.cluster, eb.cluster_bins)
    rep = ddml_iv_estimate(panel, reg, inst, cfg)
    return rep, reg


@main.command()
@data_option
@click.option("--regressor", "regressor_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="npz with an externally built asinh S~ panel (values, sellers, buyers, years).")
@common
def estimate(run: Run, data_dir, regressor_path):
    """Cross-fitted shift-share IV estimate of the transitivity coefficient."""
    from .panel import contribution_profile
    from .plotting import contribution_plot

    panel = load_panel(run, data_dir)
    rep, reg = _estimate(run, panel, regressor_path)
    run.json("estimate.json", rep.to_dict())
    prof = contribution_profile(rep.theta_hat, reg, panel.y, "support", n_groups=min(100, panel.graph.n_sellers))
    run.csv("contribution.csv", prof)
    contribution_plot(prof, run.path("contribution.png"), x="percentile", y="mean_contribution")


@main.command()
@data_option
@click.option("--regressor", "regressor_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="npz with an externally built asinh S~ panel, as for estimate.")
@common
def calibrate(run: Run, data_dir, regressor_path):
    """Hybrid calibration of the Poisson link model against the IV estimate."""
    from .calib import fit_report, hybrid_calibrate, panel_problem
    from .plotting import moment_bars

    cb = run.config.calibration
    panel = load_panel(run, data_dir)
    rep, reg = _estimate(run, panel, regressor_path)
    if not np.isfinite(rep.theta_hat):
        raise InputError("estimation failed; nothing to calibrate against")
    prob = panel_problem(panel, rep, cb.year, reg if regressor_path else None)
    res = hybrid_calibrate(prob, cb.gamma0, tuple(cb.init), cb.damping, cb.tol, cb.theta_tol, cb.max_outer)
    run.json("calibration.json", {**res.to_dict(), "theta_hat": rep.theta_hat, "estimate": rep.to_dict()})
    year = cb.year if cb.year is not None else panel.years[-1]
    xs, xb = panel.covariates.at(year)
    fit = fit_report(res.params, panel.graph.slice(year), xs, xb, panel.proximity, cb.fit_draws, run.config.seed)
    run.csv("fit_moments.csv", fit)
    moment_bars(fit, run.path("fit_moments.png"))


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Observed data for covariates and proximity (default: synthetic Savannah-scale covariates).")
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="calibration.json from `calibrate` (default: config scenario.params or reference values).")
@click.option("--draws", type=int, default=None, help="Ensemble size (default: config scenario.n_draws = 250).")
@common
def counterfactual(run: Run, data_dir, params_path, draws):
    """Baseline, C1 (support re-equilibrated) and C2 (support frozen) ensembles."""
    from .calib import savannah_config
    from .counterfact import (ScenarioConfig, amplification, build_ensemble, compare, mean_change,
                              paired_difference, run_counterfactual)
    from .genmodels import TABLE5_POISSON, PoissonParams, simulate_dgp_panel
    from .plotting import decile_bars

    sb = run.config.scenario
    if params_path:
        params = PoissonParams.from_dict(json.loads(Path(params_path).read_text())["params"])
        run.inputs.append(Path(params_path))
    elif sb.params:
        params = PoissonParams.from_dict(sb.params)
    else:
        params = TABLE5_POISSON
    if data_dir:
        panel = load_panel(run, data_dir)
        xs, xb = panel.covariates.at(None)
        prox = panel.proximity
    else:
        panel, _ = simulate_dgp_panel(savannah_config(run.config.seed, params, **run.config.dgp))
        xs, xb = panel.covariates.at(None)
        prox = panel.proximity
    n = draws or sb.n_draws
    base = build_ensemble(params, xs, xb, prox, n, run.config.seed, sb.tol, sb.max_iter, run.workers)
    c1 = run_counterfactual(base, ScenarioConfig(sb.xi, "C1_full"), sb.tol, sb.max_iter, run.workers)
    c2 = run_counterfactual(base, ScenarioConfig(sb.xi, "C2_frozen", sb.freeze), sb.tol, sb.max_iter, run.workers)
    summary = {"params": asdict(params), "xi": sb.xi, "n_draws": n,
               "baseline": base.summary(), "C1": c1.summary(), "C2": c2.summary()}
    for lab, ens in (("C1", c1), ("C2", c2)):
        m, se = mean_change(base, ens)
        summary[f"{lab}_mean_link_gain"], summary[f"{lab}_mean_link_gain_se"] = m, se
    summary["C1_minus_C2"], summary["C1_minus_C2_se"] = paired_difference(c1, c2)
    for side in ("sellers", "buyers"):
        r1, r2 = compare(base, c1, side), compare(base, c2, side)
        tab = pd.concat([r1.table.assign(scenario="C1"), r2.table.assign(scenario="C2")], ignore_index=True)
        run.csv(f"deciles_{side}.csv", tab)
        amp = amplification(r1, r2)
        run.csv(f"amplification_{side}.csv", amp)
        summary[f"top_decile_ratio_{side}"] = float(amp["ratio"].iloc[-1])
        decile_bars(r1.table, r2.table, run.path(f"deciles_{side}.png"), "change", f"{side}: expected link changes")
    run.json("counterfactual.json", summary)


@main.command()
@click.option("--R", "R", type=int, default=None, help="Simulated datasets (default: config montecarlo.R = 200).")
@click.option("--B", "B", type=int, default=None, help="Bootstrap replicates per dataset (default 500).")
@common
def montecarlo(run: Run, R, B):
    """Size/power study of the triad test on data simulated from config `dgp`."""
    from .genmodels import DgpConfig
    from .plotting import mc_distances
    from .transtest import monte_carlo_validation

    mb = run.config.montecarlo
    dgp = DgpConfig.from_dict({"dynamics": "equilibrium", **run.config.dgp})
    df = monte_carlo_validation(dgp, R or mb.R, B or mb.B, run.config.seed, mb.variant, workers=run.workers, q=mb.bins)
    run.csv("mc_runs.csv", df)
    run.json("mc_summary.json", {
        "R": int(len(df)), "B": int(B or mb.B), "rejection_rate": float(df["reject"].mean()),
        "mean_dist95": float(df["dist95"].mean()), "mean_dist50": float(df["dist50"].mean()),
        "mean_density": float(df["density"].mean()), "dgp": asdict(dgp),
    })
    mc_distances(df, run.path("mc_dist95.png"))


@main.command()
@common
def simulate(run: Run):
    """Simulate a dataset from config `dgp` and write it in the ingestion schemas."""
    from .genmodels import DgpConfig, simulate_dgp_panel

    dgp = DgpConfig.from_dict({**run.config.dgp, "seed": run.config.seed})
    panel, truth = simulate_dgp_panel(dgp)
    g = panel.graph
    run.csv("transactions.csv", g.to_frame())
    run.csv("locations.csv", pd.DataFrame({"seller_id": list(g.sellers), "lat": panel.lat, "lon": panel.lon,
                                           "region": "SIM"}))
    if panel.exports is not None:
        t, k, c = np.nonzero(panel.exports > 0)
        run.csv("dest_exports.csv", pd.DataFrame({
            "year": np.asarray(g.years)[t], "seller_id": np.asarray(g.sellers, dtype=object)[k],
            "dest_code": np.asarray(panel.dest_codes, dtype=object)[c], "value_usd": panel.exports[t, k, c]}))
        tt, cc = np.meshgrid(np.arange(len(g.years)), np.arange(len(panel.dest_codes)), indexing="ij")
        run.csv("fx.csv", pd.DataFrame({"year": np.asarray(g.years)[tt.ravel()],
                                        "dest_code": np.asarray(panel.dest_codes, dtype=object)[cc.ravel()],
                                        "lcu_per_usd": panel.fx.ravel()}))
    if "regressor" in truth and dgp.support == "exogenous":
        p = run.path("regressor.npz")
        with open(p, "wb") as f:
            np.savez(f, values=truth["regressor"], sellers=np.asarray(g.sellers), buyers=np.asarray(g.buyers),
                     years=np.asarray(g.years))
    scalars = {k: v for k, v in truth.items() if np.isscalar(v) or isinstance(v, (dict, list))}
    run.json("truth.json", {"dgp": asdict(dgp), **scalars})


if __name__ == "__main__":  # pragma: no cover
    main()
