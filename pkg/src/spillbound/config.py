"""Flat ``section.key = value`` configuration files.

One key per line, ``#`` starts a comment, blank lines are ignored. Every
key belongs to one of the sections in :data:`SCHEMA`; the schema is also
rendered to ``docs/config_schema.md``. Parse errors name the key and the
line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ParseError, ValidationError
from .estimate import StageConfig
from .greens import GreensSpec
from .simulate import SimConfig, baseline_config

__all__ = ["ConfigKey", "SCHEMA", "parse_config", "load_config", "sim_config", "stage_config",
           "greens_spec", "mc_section", "snapshot", "schema_markdown"]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else _float(text)


def _int(text: str) -> int:
    return int(text.strip())


def _int_pair(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _float_pair(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return _float(parts[0]), _float(parts[1])


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def conv(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    conv.options = options  # type: ignore[attr-defined]
    return conv


@dataclass(frozen=True)
class ConfigKey:
    """One documented configuration key."""

    key: str
    parse: Callable[[str], Any]
    kind: str
    default: str
    doc: str


def _k(key, parse, kind, default, doc):
    return ConfigKey(key, parse, kind, default, doc)


SCHEMA: tuple[ConfigKey, ...] = (
    _k("sim.n_units", _int, "int", "200", "number of units N"),
    _k("sim.n_periods", _int, "int", "20", "number of periods T"),
    _k("sim.domain_side", _float, "float", "1000", "side of the square domain in km"),
    _k("sim.treat_share", _float, "float", "0.25", "share of units eventually treated"),
    _k("sim.adopt_window", _int_pair, "int,int", "4,14", "inclusive adoption period range"),
    _k("sim.sigma_alpha", _float, "float", "1.0", "sd of unit effects"),
    _k("sim.sigma_gamma", _float, "float", "0.5", "sd of period effects"),
    _k("sim.sigma_eps", _float, "float", "0.5", "sd of idiosyncratic noise"),
    _k("sim.seed", _int, "int", "0", "master seed (overridden by --seed)"),
    _k("sim.replication", _int, "int", "0", "replication index mixed into the random streams"),
    _k("sim.kernel", _choice("exponential", "power"), "exponential|power", "exponential", "spillover kernel"),
    _k("sim.power_alpha", _float, "float", "4.0", "exponent of the power-law kernel"),
    _k("sim.power_cap_quantile", _float, "float", "1.0",
       "percentile of pairwise distances below which the power-law kernel is flat"),
    _k("sim.max_row_sum", _opt_float, "float|none", "0.12", "largest row sum of the scaled kernel"),
    _k("sim.dgp", _choice("network", "greens"), "network|greens", "network", "data generating process"),
    _k("sim.field_decay", _float, "float", "0.01", "decay rate per km of the Green's field"),
    _k("sim.field_scale", _float, "float", "1.0", "amplitude of the Green's field"),
    _k("params.delta", _float, "float", "0.15", "temporal depreciation per period"),
    _k("params.lam", _float, "float", "0.01", "spatial decay per km of the kernel"),
    _k("params.kappa", _float, "float", "2.0", "source intensity per treated period"),
    _k("params.beta", _float, "float", "1.0", "production coefficient"),
    _k("params.allow_growth", _bool, "bool", "false", "permit delta <= 0 (growth dynamics)"),
    _k("domain.condition", _choice("unbounded", "dirichlet", "neumann"), "unbounded|dirichlet|neumann",
       "unbounded", "boundary condition of the spatial domain"),
    _k("domain.Lx", _opt_float, "float|none", "none", "domain width in km (rectangular domains)"),
    _k("domain.Ly", _opt_float, "float|none", "none", "domain height in km (rectangular domains)"),
    _k("domain.series_max_terms", _int, "int", "20000", "maximum modes summed per series"),
    _k("domain.series_tol", _float, "float", "1e-12", "relative tolerance of the mode series"),
    _k("stage.d_min", _opt_float, "float|none", "none", "spatial near-field cutoff in km; none = 10th percentile"),
    _k("stage.tau_min", _int, "int", "1", "temporal cutoff; the fit keeps tau > tau_min"),
    _k("stage.thresholds", _float_pair, "float,float", "0.1,0.5", "detection fractions eps_s, eps_t"),
    _k("stage.cutoff_selection", _choice("fixed", "cv"), "fixed|cv", "fixed", "cutoff selection rule"),
    _k("stage.cv_folds", _int, "int", "5", "cross-validation folds"),
    _k("stage.spatial_method", _choice("decay_curve", "loglinear"), "decay_curve|loglinear", "decay_curve",
       "spatial stage estimator"),
    _k("stage.temporal_method", _choice("accumulation", "loglinear"), "accumulation|loglinear", "accumulation",
       "temporal stage estimator"),
    _k("stage.residualization", _choice("untreated", "twfe"), "untreated|twfe", "untreated",
       "source of the fixed effects removed before the decay stages"),
    _k("stage.far_field_quantile", _float, "float", "75", "percentile defining far-field untreated cells"),
    _k("stage.beta", _float, "float", "1.0", "known production coefficient"),
    _k("stage.log_floor", _float, "float", "1e-12", "|Y~| floor for log regressions"),
    _k("mc.M", _int, "int", "200", "replications (overridden by --replications)"),
    _k("mc.master_seed", _int, "int", "0", "master seed (overridden by --seed)"),
    _k("mc.methods", _str_list, "list", "Unified", "comparison methods"),
    _k("mc.tests", _str_list, "list", "", "extra per-replication tests"),
    _k("mc.alpha", _float, "float", "0.05", "test size"),
    _k("mc.max_failure_share", _float, "float", "0.5", "abort above this share of failed replications"),
    _k("mc.pseudo_truth", _bool, "bool", "true", "compare spatial quantities with the noiseless twin"),
    _k("mc.label", str.strip, "str", "baseline", "label of the run"),
)

_BY_KEY = {k.key: k for k in SCHEMA}


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse configuration text into ``{dotted_key: value}``.

    Raises
    ------
    ParseError
        Malformed line, unknown or repeated key, or a value that does not
        convert; the message names the key and line.
    """
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected 'section.key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _BY_KEY:
            raise ParseError(f"{source}: unknown key {key!r}", lineno)
        if key in out:
            raise ParseError(f"{source}: key {key!r} given twice", lineno)
        try:
            out[key] = _BY_KEY[key].parse(value)
        except ValueError as exc:
            raise ParseError(f"{source}: key {key!r}: {exc}", lineno) from None
    return out


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Read and parse a config file; ``None`` gives an empty mapping."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def _section(cfg: Mapping[str, Any], name: str) -> dict[str, Any]:
    pre = name + "."
    return {k[len(pre):]: v for k, v in cfg.items() if k.startswith(pre)}


def greens_spec(cfg: Mapping[str, Any]) -> GreensSpec:
    """Domain specification from the ``domain`` section."""
    return GreensSpec(**_section(cfg, "domain"))


def sim_config(cfg: Mapping[str, Any], seed: int | None = None) -> SimConfig:
    """Simulation design: the baseline with ``sim``, ``params`` and ``domain`` applied."""
    base = baseline_config()
    params = replace(base.params, **_section(cfg, "params"))
    kw = _section(cfg, "sim")
    if seed is not None:
        kw["seed"] = seed
    dom = _section(cfg, "domain")
    if dom:
        kw["spec"] = GreensSpec(**dom)
    return replace(base, params=params, **kw)


def stage_config(cfg: Mapping[str, Any], **overrides: Any) -> StageConfig:
    """Estimation settings from the ``stage`` section; ``None`` overrides are ignored."""
    kw = _section(cfg, "stage")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return StageConfig(**kw)


def mc_section(cfg: Mapping[str, Any]) -> dict[str, Any]:
    """Raw ``mc`` section."""
    return _section(cfg, "mc")


def snapshot(obj: Any) -> Any:
    """JSON-ready view of a (nested) config dataclass."""
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: snapshot(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [snapshot(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): snapshot(v) for k, v in obj.items()}
    if isinstance(obj, Enum):
        return obj.value
    return obj


def schema_markdown() -> str:
    """Markdown table documenting every key."""
    lines = [
        "# Configuration schema",
        "",
        "Files hold one `section.key = value` per line. `#` starts a comment.",
        "Unknown keys, repeated keys and unparseable values are errors that name the key and line.",
        "",
        "| key | type | default | meaning |",
        "| --- | --- | --- | --- |",
    ]
    for k in SCHEMA:
        lines.append(f"| `{k.key}` | {k.kind} | {k.default or '(empty)'} | {k.doc} |")
    return "\n".join(lines) + "\n"
