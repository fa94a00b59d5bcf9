"""Run configuration (one JSON document) and output manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .rng import check_seed


@dataclass(frozen=True)
class IngestBlock:
    value_floor: float = 100.0
    min_active_years: int = 4
    regions: tuple = ()
    proximity_mode: str = "continuous_rank"
    proximity_q: float | None = None


@dataclass(frozen=True)
class TestBlock:
    year: int | None = None  # default: last panel year
    B: int = 1000
    bins: int = 10
    variant: str = "T"
    draw: str = "bernoulli"
    clamp: str = "mean_preserving"
    proximity: str = "rerank"
    normalization: str = "shared"

    __test__ = False


@dataclass(frozen=True)
class EstimateBlock:
    lag: int = 1
    countries: tuple = ()
    folds: int = 5
    repetitions: int = 3
    cluster: str = "size_size"
    cluster_bins: int = 10
    f_floor: float = 10.0
    ols: bool = False


@dataclass(frozen=True)
class CalibrationBlock:
    gamma0: float = 10.0
    init: tuple = (0.5, 0.5, 0.5)
    damping: float = 0.5
    tol: float = 1e-3
    theta_tol: float = 1e-3
    max_outer: int = 200
    year: int | None = None
    fit_draws: int = 50


@dataclass(frozen=True)
class ScenarioBlock:
    xi: float = 1.0 / 0.9
    n_draws: int = 250
    freeze: str = "draw"
    tol: float = 1e-10
    max_iter: int = 500
    params: dict | None = None  # Poisson parameters when no calibration file is given


@dataclass(frozen=True)
class MonteCarloBlock:
    R: int = 200
    B: int = 500
    bins: int = 10
    variant: str = "T"


BLOCKS = {
    "ingest": IngestBlock,
    "test": TestBlock,
    "estimate": EstimateBlock,
    "calibration": CalibrationBlock,
    "scenario": ScenarioBlock,
    "montecarlo": MonteCarloBlock,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ingest: IngestBlock = IngestBlock()
    test: TestBlock = TestBlock()
    estimate: EstimateBlock = EstimateBlock()
    calibration: CalibrationBlock = CalibrationBlock()
    scenario: ScenarioBlock = ScenarioBlock()
    montecarlo: MonteCarloBlock = MonteCarloBlock()
    dgp: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown configuration keys {sorted(extra)}")
        kw = {}
        for name, block in BLOCKS.items():
            kw[name] = _block(block, d.get(name, {}), name)
        seed = d.get("seed", 0)
        try:
            kw["seed"] = check_seed(seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid seed: {e}") from None
        dgp = d.get("dgp", {})
        if not isinstance(dgp, dict):
            raise ConfigError("dgp must be an object")
        kw["dgp"] = dgp
        return cls(**kw)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def with_seed(self, seed) -> "RunConfig":
        return self if seed is None else RunConfig(**{**self.__dict__, "seed": check_seed(seed)})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        """SHA-256 of the canonical JSON of every semantic field."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _block(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name: f for f in fields(cls)}
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown {name} keys {sorted(extra)}")
    defaults = cls()
    kw = {}
    for k, v in d.items():
        ref = getattr(defaults, k)
        if isinstance(ref, tuple) and isinstance(v, list):
            v = tuple(v)
        if isinstance(v, str) and k in ("regions", "countries"):
            v = (v,)
        if isinstance(ref, bool):
            ok = isinstance(v, bool)
        elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            if ok and isinstance(ref, int) and not isinstance(ref, float):
                ok = float(v).is_integer()
                v = int(v) if ok else v
        elif ref is None:
            ok = v is None or isinstance(v, (int, float, dict)) and not isinstance(v, bool)
        else:
            ok = isinstance(v, type(ref))
        if not ok:
            raise ConfigError(f"{name}.{k}: expected {type(ref).__name__}, got {v!r}")
        kw[k] = v
    return cls(**kw)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: RunConfig, outputs, inputs=()) -> Path:
    """manifest.json: command, config hash, seed, version and file digests.

    No timestamps or host data, so reruns are byte-identical.
    """
    out_dir = Path(out_dir)
    man = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
        "outputs": {Path(p).name: file_digest(p) for p in sorted(outputs, key=lambda p: Path(p).name)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n", encoding="utf-8")
    return path


def _default(o):
    import numpy as np

    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
