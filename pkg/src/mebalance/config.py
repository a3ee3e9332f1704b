"""Run configuration: flat key=value config files merged with CLI flags.

The config file is line-oriented ``key = value`` text: ``#`` starts a
comment, values are parsed as bool/int/float when they look like one, and
comma-separated values become lists.  Flags override file entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from .balancing import SolverConfig
from .error_model import ErrorModel
from .exceptions import ConfigError

ESTIMATE_METHODS = ("eb", "cbps", "ceb", "bceb", "ceb_hl", "ceb_hw", "corrected_cbps")
_PARAMETRIC = ("ceb", "bceb", "corrected_cbps")
_REPLICATE = ("ceb_hl", "ceb_hw")

# CLI spelling -> ErrorModel family
FAMILY_ALIASES = {"normal": "normal", "uniform": "uniform_symmetric",
                  "uniform_symmetric": "uniform_symmetric"}


def _parse_scalar(text: str):
    t = text.strip().strip('"').strip("'")
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_config_file(path) -> dict:
    """Parse a flat key=value config file into a dict."""
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        value = value.strip()
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


@dataclass
class RunConfig:
    """Merged file + flag configuration for one CLI invocation."""

    input: Optional[str] = None
    method: str = "eb"
    error_family: Optional[str] = None
    sigma1: Optional[List[float]] = None
    estimate_sigma_from_replicates: bool = False
    replicate_policy: str = "first"
    bootstrap: int = 0
    seed: int = 0
    output: Optional[str] = None
    weights_out: Optional[str] = None
    weights_in: Optional[str] = None
    # solver overrides
    grad_tol: float = 1e-8
    max_iter: int = 200
    multi_start: int = 5
    restart_scale: float = 0.5
    # simulate
    design: Optional[str] = None
    n: int = 1000
    error_variance: List[float] = field(default_factory=lambda: [0.0])
    m: int = 1
    reps: int = 200
    methods: List[str] = field(default_factory=lambda: ["eb"])
    threads: int = 1
    out_prefix: str = "simulation"

    def solver(self) -> SolverConfig:
        return SolverConfig(
            grad_tol=self.grad_tol,
            max_iter=self.max_iter,
            multi_start=self.multi_start,
            restart_scale=self.restart_scale,
        )

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def merge_config(file_values: dict, flag_values: dict) -> RunConfig:
    """Build a RunConfig from config-file values overridden by flags."""
    known = {f.name for f in fields(RunConfig)}
    merged = {}
    for key, value in file_values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    for key in ("error_variance", "methods", "sigma1"):
        if key in merged and not isinstance(merged[key], list):
            merged[key] = [merged[key]]
    if "methods" in merged:
        merged["methods"] = [str(m) for m in merged["methods"]]
    try:
        cfg = RunConfig(**merged)
    except TypeError as err:
        raise ConfigError(str(err))
    _check(cfg)
    return cfg


def _check(cfg: RunConfig) -> None:
    if cfg.method not in ESTIMATE_METHODS:
        raise ConfigError(f"method must be one of {ESTIMATE_METHODS}")
    if cfg.replicate_policy not in ("first", "second", "mean"):
        raise ConfigError("replicate_policy must be first, second or mean")
    if cfg.sigma1 is not None and cfg.estimate_sigma_from_replicates:
        raise ConfigError(
            "sigma1 and estimate_sigma_from_replicates are mutually exclusive"
        )
    if cfg.method in _REPLICATE and cfg.sigma1 is not None:
        raise ConfigError(f"method {cfg.method!r} does not use sigma1")
    if cfg.method in _PARAMETRIC:
        if not cfg.estimate_sigma_from_replicates and cfg.sigma1 is None:
            raise ConfigError(
                f"method {cfg.method!r} needs an error model: give sigma1 "
                "(with error_family) or set estimate_sigma_from_replicates"
            )
        family = cfg.error_family or "normal"
        if family not in FAMILY_ALIASES:
            raise ConfigError(
                f"error_family must be one of {sorted(set(FAMILY_ALIASES))}"
            )
    if cfg.bootstrap < 0:
        raise ConfigError("bootstrap must be >= 0")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")


def resolve_sigma1(values: List[float], p1: int) -> np.ndarray:
    """Interpret a flat sigma1 spec: one value = isotropic, p1 values =
    diagonal, p1*p1 values = full matrix (row major)."""
    vals = [float(v) for v in values]
    if len(vals) == 1:
        return vals[0] * np.eye(p1)
    if len(vals) == p1:
        return np.diag(vals)
    if len(vals) == p1 * p1:
        return np.asarray(vals).reshape(p1, p1)
    raise ConfigError(
        f"sigma1 needs 1, {p1} or {p1 * p1} values for p1={p1}, got {len(vals)}"
    )


def build_error_model(cfg: RunConfig, data) -> Optional[ErrorModel]:
    """ErrorModel for the configured method, or None when not applicable."""
    if cfg.method not in _PARAMETRIC:
        return None
    family = FAMILY_ALIASES[cfg.error_family or "normal"]
    if cfg.estimate_sigma_from_replicates:
        from .error_model import estimate_sigma

        sigma1 = estimate_sigma(data)[: data.p1, : data.p1]
    else:
        sigma1 = resolve_sigma1(cfg.sigma1, data.p1)
    return ErrorModel(sigma1=sigma1, family=family)
