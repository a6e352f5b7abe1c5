"""Run configuration: TOML loading, validation, and digests.

One file configures a whole run.  Validation is strict: unknown keys
are rejected with their full path, and every documented range is
enforced before any computation starts.  All randomness derives from
``master_seed``; per-component seeds in the file are deliberately not
accepted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .datamodel import SyntheticConfig
from .errors import ConfigError

__all__ = [
    "WenSettings",
    "GprSettings",
    "SplitSettings",
    "FilePaths",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "with_overrides",
]


@dataclass(frozen=True)
class WenSettings:
    """Elastic-net training schedule and penalty grid shape."""

    global_rounds: int = 100
    local_epochs: int = 20
    eta0: float = 1e-4
    eta_final: float = 1e-5
    grid_size: int = 20
    grid_ratio: float = 1e-4


@dataclass(frozen=True)
class GprSettings:
    """Hyper-parameter search box, budget, and starting point."""

    sigma_lo: float = 1e-6
    sigma_hi: float = 1e3
    max_evals: int = 400
    init_sigma_p2: float = 1.0
    init_sigma_n2: float = 1.0
    sample_weighted: bool = False


@dataclass(frozen=True)
class SplitSettings:
    """Which target domains carry selection labels (t1) vs are evaluated (t2)."""

    t1: tuple = (2, 3)
    t2: tuple = (0, 1)
    sweep: bool = False
    sweep_t1_size: int = 2
    min_samples: int = 20


@dataclass(frozen=True)
class FilePaths:
    """Dataset locations for file mode, resolved against the config dir."""

    source_shards: tuple
    target: str
    similarities: str


@dataclass(frozen=True)
class RunConfig:
    mode: str = "synthetic"
    master_seed: int = 0
    n_source_clients: int = 2
    transport: str = "memory"
    engine_mode: str = "reference"
    out_dir: str = "runs/out"
    k: float = 3.0
    alpha: float = 0.8
    flake_d: int = 0
    lambda_fit: str = "log"
    age_adult: float = 20.0
    inline_payloads: bool = False
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    paths: Optional[FilePaths] = None
    wen: WenSettings = field(default_factory=WenSettings)
    gpr: GprSettings = field(default_factory=GprSettings)
    split: SplitSettings = field(default_factory=SplitSettings)

    def to_dict(self) -> dict:
        data = asdict(self)
        if self.paths is None:
            data.pop("paths")
        # derived at run time (see load_run_data); not accepted on input
        data["synthetic"].pop("seed")
        data["synthetic"].pop("n_clients")
        return data

    def digest(self) -> str:
        data = self.to_dict()
        # where outputs land never changes what gets computed
        data.pop("out_dir")
        data.pop("inline_payloads")
        blob = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(path, message)


def _take(table: dict, path: str, key: str, kinds, default):
    """Pop a typed value; bool is checked before int (bool is an int)."""
    if key not in table:
        return default
    value = table.pop(key)
    if bool in (kinds if isinstance(kinds, tuple) else (kinds,)):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}{key}", f"expected a boolean, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(f"{path}{key}", f"expected {kinds}, got {value!r}")
    return value


def _reject_unknown(table: dict, path: str) -> None:
    if table:
        key = sorted(table)[0]
        raise ConfigError(f"{path}{key}", "unknown configuration key")


def _parse_synthetic(table: dict) -> SyntheticConfig:
    path = "synthetic."
    for banned, why in (
        ("seed", "derived from master_seed"),
        ("n_clients", "set by n_source_clients"),
    ):
        if banned in table:
            raise ConfigError(f"{path}{banned}", f"not configurable here; {why}")
    raw = {}
    int_keys = (
        "n_source_total",
        "n_target",
        "n_features",
        "n_target_domains",
        "support_size",
        "latent_rank",
    )
    for key in int_keys:
        val = _take(table, path, key, int, None)
        if val is not None:
            raw[key] = val
    for key in ("noise_sd", "feature_noise_sd", "shifted_fraction"):
        val = _take(table, path, key, (int, float), None)
        if val is not None:
            raw[key] = float(val)
    if "shift_strength" in table:
        strengths = table.pop("shift_strength")
        _require(
            isinstance(strengths, (list, tuple))
            and all(isinstance(s, (int, float)) for s in strengths),
            f"{path}shift_strength",
            "expected a list of numbers",
        )
        raw["shift_strength"] = tuple(float(s) for s in strengths)
        raw.setdefault("n_target_domains", len(raw["shift_strength"]))
    _reject_unknown(table, path)
    try:
        return SyntheticConfig(**raw)
    except ValueError as exc:
        raise ConfigError("synthetic", str(exc)) from exc


def _parse_paths(table: dict, base: Path) -> FilePaths:
    path = "paths."
    shards = table.pop("source_shards", None)
    _require(
        isinstance(shards, (list, tuple))
        and bool(shards)
        and all(isinstance(s, str) for s in shards),
        f"{path}source_shards",
        "expected a nonempty list of paths",
    )
    target = _take(table, path, "target", str, None)
    _require(target is not None, f"{path}target", "required in files mode")
    sims = _take(table, path, "similarities", str, None)
    _require(sims is not None, f"{path}similarities", "required in files mode")
    _reject_unknown(table, path)
    return FilePaths(
        source_shards=tuple(str(base / s) for s in shards),
        target=str(base / target),
        similarities=str(base / sims),
    )


def _parse_wen(table: dict) -> WenSettings:
    path = "wen."
    out = WenSettings(
        global_rounds=_take(table, path, "global_rounds", int, 100),
        local_epochs=_take(table, path, "local_epochs", int, 20),
        eta0=float(_take(table, path, "eta0", (int, float), 1e-4)),
        eta_final=float(_take(table, path, "eta_final", (int, float), 1e-5)),
        grid_size=_take(table, path, "grid_size", int, 20),
        grid_ratio=float(_take(table, path, "grid_ratio", (int, float), 1e-4)),
    )
    _reject_unknown(table, path)
    _require(out.global_rounds >= 1, "wen.global_rounds", "must be >= 1")
    _require(out.local_epochs >= 1, "wen.local_epochs", "must be >= 1")
    _require(0 < out.eta_final <= out.eta0, "wen.eta_final", "need 0 < eta_final <= eta0")
    _require(out.grid_size >= 1, "wen.grid_size", "must be >= 1")
    _require(0 < out.grid_ratio < 1, "wen.grid_ratio", "must lie in (0, 1)")
    return out


def _parse_gpr(table: dict) -> GprSettings:
    path = "gpr."
    out = GprSettings(
        sigma_lo=float(_take(table, path, "sigma_lo", (int, float), 1e-6)),
        sigma_hi=float(_take(table, path, "sigma_hi", (int, float), 1e3)),
        max_evals=_take(table, path, "max_evals", int, 400),
        init_sigma_p2=float(_take(table, path, "init_sigma_p2", (int, float), 1.0)),
        init_sigma_n2=float(_take(table, path, "init_sigma_n2", (int, float), 1.0)),
        sample_weighted=_take(table, path, "sample_weighted", bool, False),
    )
    _reject_unknown(table, path)
    _require(0 < out.sigma_lo < out.sigma_hi, "gpr.sigma_lo", "need 0 < sigma_lo < sigma_hi")
    _require(out.max_evals >= 1, "gpr.max_evals", "must be >= 1")
    _require(out.init_sigma_p2 > 0, "gpr.init_sigma_p2", "must be > 0")
    _require(out.init_sigma_n2 > 0, "gpr.init_sigma_n2", "must be > 0")
    return out


def _parse_split(table: dict) -> SplitSettings:
    path = "split."

    def domain_list(key, default):
        if key not in table:
            return default
        vals = table.pop(key)
        _require(
            isinstance(vals, (list, tuple))
            and all(isinstance(v, int) and not isinstance(v, bool) for v in vals),
            f"{path}{key}",
            "expected a list of domain ids",
        )
        _require(len(set(vals)) == len(vals), f"{path}{key}", "duplicate domain id")
        return tuple(vals)

    out = SplitSettings(
        t1=domain_list("t1", (2, 3)),
        t2=domain_list("t2", (0, 1)),
        sweep=_take(table, path, "sweep", bool, False),
        sweep_t1_size=_take(table, path, "sweep_t1_size", int, 2),
        min_samples=_take(table, path, "min_samples", int, 20),
    )
    _reject_unknown(table, path)
    _require(out.sweep_t1_size >= 1, "split.sweep_t1_size", "must be >= 1")
    _require(out.min_samples >= 1, "split.min_samples", "must be >= 1")
    if not out.sweep:
        _require(not (set(out.t1) & set(out.t2)), "split.t1", "t1 and t2 overlap")
        _require(bool(out.t1), "split.t1", "must be nonempty")
        _require(bool(out.t2), "split.t2", "must be nonempty")
    return out


def config_from_dict(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a parsed config table; paths resolve against ``base_dir``."""
    table = dict(data)
    base = Path(base_dir) if base_dir is not None else Path(".")

    mode = _take(table, "", "mode", str, "synthetic")
    _require(mode in ("synthetic", "files"), "mode", "must be 'synthetic' or 'files'")
    master_seed = _take(table, "", "master_seed", int, 0)
    _require(0 <= master_seed < 2**64, "master_seed", "must fit in 64 bits")
    n_clients = _take(table, "", "n_source_clients", int, 2)
    _require(1 <= n_clients <= 64, "n_source_clients", "must lie in 1..64")
    transport = _take(table, "", "transport", str, "memory")
    _require(transport in ("memory", "socket"), "transport", "must be 'memory' or 'socket'")
    engine_mode = _take(table, "", "engine_mode", str, "reference")
    _require(
        engine_mode in ("reference", "parallel"),
        "engine_mode",
        "must be 'reference' or 'parallel'",
    )
    out_dir = _take(table, "", "out_dir", str, "runs/out")
    k = float(_take(table, "", "k", (int, float), 3.0))
    _require(k > 0, "k", "must be > 0")
    alpha = float(_take(table, "", "alpha", (int, float), 0.8))
    _require(0 < alpha <= 1, "alpha", "must lie in (0, 1]")
    flake_d = _take(table, "", "flake_d", int, 0)
    _require(flake_d >= 0, "flake_d", "must be >= 0 (0 means automatic)")
    lambda_fit = _take(table, "", "lambda_fit", str, "log")
    _require(lambda_fit in ("log", "raw"), "lambda_fit", "must be 'log' or 'raw'")
    age_adult = float(_take(table, "", "age_adult", (int, float), 20.0))
    _require(age_adult > 0, "age_adult", "must be > 0")
    inline_payloads = _take(table, "", "inline_payloads", bool, False)

    synthetic_tbl = table.pop("synthetic", {})
    _require(isinstance(synthetic_tbl, dict), "synthetic", "must be a table")
    paths_tbl = table.pop("paths", None)
    wen_tbl = table.pop("wen", {})
    _require(isinstance(wen_tbl, dict), "wen", "must be a table")
    gpr_tbl = table.pop("gpr", {})
    _require(isinstance(gpr_tbl, dict), "gpr", "must be a table")
    split_tbl = table.pop("split", {})
    _require(isinstance(split_tbl, dict), "split", "must be a table")
    _reject_unknown(table, "")

    synthetic = _parse_synthetic(dict(synthetic_tbl))
    paths = None
    if paths_tbl is not None:
        _require(isinstance(paths_tbl, dict), "paths", "must be a table")
        paths = _parse_paths(dict(paths_tbl), base)
    if mode == "files":
        _require(paths is not None, "paths", "required when mode = 'files'")

    cfg = RunConfig(
        mode=mode,
        master_seed=master_seed,
        n_source_clients=n_clients,
        transport=transport,
        engine_mode=engine_mode,
        out_dir=str(base / out_dir) if base_dir is not None else out_dir,
        k=k,
        alpha=alpha,
        flake_d=flake_d,
        lambda_fit=lambda_fit,
        age_adult=age_adult,
        inline_payloads=inline_payloads,
        synthetic=synthetic,
        paths=paths,
        wen=_parse_wen(dict(wen_tbl)),
        gpr=_parse_gpr(dict(gpr_tbl)),
        split=_parse_split(dict(split_tbl)),
    )
    if flake_d:
        _require(
            flake_d > synthetic.n_features - 1 if mode == "synthetic" else flake_d > 1,
            "flake_d",
            "lifted dimension must exceed the per-model feature count",
        )
    return cfg


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration file."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}")
    return config_from_dict(data, base_dir=path.parent)


def with_overrides(
    cfg: RunConfig,
    *,
    seed: Optional[int] = None,
    clients: Optional[int] = None,
    transport: Optional[str] = None,
    out_dir: Optional[str] = None,
) -> RunConfig:
    """Apply command-line overrides on top of a loaded config."""
    if seed is not None:
        _require(0 <= seed < 2**64, "--seed", "must fit in 64 bits")
        cfg = replace(cfg, master_seed=seed)
    if clients is not None:
        _require(1 <= clients <= 64, "--clients", "must lie in 1..64")
        cfg = replace(cfg, n_source_clients=clients)
    if transport is not None:
        _require(
            transport in ("memory", "socket"), "--transport", "must be 'memory' or 'socket'"
        )
        cfg = replace(cfg, transport=transport)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg
