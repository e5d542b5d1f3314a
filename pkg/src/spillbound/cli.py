"""Command-line entry point: ``spillbound {simulate,estimate,mc,greens-eval}``.

Exit codes: 0 on success, 1 on validation errors (bad flags, configs or
inputs), 2 on numerical or estimation failures. Every output is written
atomically and accompanied by ``<stem>.manifest.json``, which is written
even when the command fails.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import greens_spec, load_config, mc_section, sim_config, snapshot, stage_config
from .errors import SpillboundError, ValidationError
from .estimate import run_pipeline
from .greens import greens_value
from .inference import run_inference
from .jsonio import atomic_write_text, atomic_write_with, csv_text, dumps
from .montecarlo import PRESETS, McConfig, preset_config, run_comparison, run_mc, run_preset
from .panel import load_csv, write_csv
from .params import DiffusionParams
from .plotdata import PlotKind, plot_table, render_figure
from .simulate import simulate

__all__ = ["main", "RunManifest", "THREADS_ENV"]

THREADS_ENV = "SPILLBOUND_THREADS"
log = logging.getLogger("spillbound")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage problems are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    """Everything needed to reproduce the outputs of one command."""

    subcommand: str
    argv: list[str]
    config: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, Any] = field(default_factory=dict)
    inputs: list[dict[str, str]] = field(default_factory=list)
    outputs: list[dict[str, str]] = field(default_factory=list)
    status: str = "ok"
    exit_code: int = 0
    error: str = ""
    wall_seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "argv": self.argv,
            "status": self.status,
            "exit_code": self.exit_code,
            "error": self.error,
            "version": _version(),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_seconds": self.wall_seconds,
            "host": _host(),
        }


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        from . import __version__
        return __version__


def _host() -> dict[str, str]:
    import scipy
    return {"hostname": platform.node(), "platform": platform.platform(), "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _file_entry(path: Path) -> dict[str, str]:
    return {"path": str(path), "sha256": _sha256(path)}


def _manifest_path(out: Path) -> Path:
    return out.with_suffix(".manifest.json")


def _sidecar(out: Path, tag: str, ext: str) -> Path:
    return out.with_name(f"{out.stem}.{tag}{ext}")


def _threads(value: int | None) -> int:
    if value is not None:
        if value < 0:
            raise ValidationError("--threads must be >= 0")
        return value
    env = os.environ.get(THREADS_ENV)
    if env is None or env.strip() == "":
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 0:
        raise ValidationError(f"{THREADS_ENV} must be >= 0")
    return n


def _float_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _cv_grid(text: str) -> tuple[tuple[float, int], ...]:
    out = []
    for item in text.split(","):
        try:
            d, t = item.split(":")
            out.append((float(d), int(t)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected d_min:tau_min pairs, got {item!r}") from None
    return tuple(out)


def _write_plot_data(result_or_summary, kinds, stem: Path, figures: bool, manifest: RunManifest, dataset=None):
    for kind in kinds:
        kind = PlotKind(kind)
        header, rows = plot_table(result_or_summary, kind, dataset)
        tag = {"SpatialDecay": "spatial_decay", "TemporalDecay": "temporal_decay",
               "RatioCheck": "ratio_check", "RmseVsN": "rmse_vs_n"}[kind.value]
        p = atomic_write_text(_sidecar(stem, tag, ".csv"), csv_text(header, rows))
        manifest.outputs.append(_file_entry(p))
        if figures:
            png = render_figure(header, rows, kind, _sidecar(stem, tag, ".png"))
            manifest.outputs.append(_file_entry(png))
        log.info("wrote %s", p)


# ---------------------------------------------------------------- subcommands

def _cmd_simulate(args, manifest: RunManifest) -> None:
    cfg = load_config(args.config)
    sim_cfg = sim_config(cfg, seed=args.seed)
    manifest.config = {"file": dict(cfg), "resolved": snapshot(sim_cfg)}
    manifest.seeds = {"seed": sim_cfg.seed, "replication": sim_cfg.replication}
    if args.config:
        manifest.inputs.append(_file_entry(Path(args.config)))
    log.info("simulating N=%d T=%d seed=%d", sim_cfg.n_units, sim_cfg.n_periods, sim_cfg.seed)
    sim = simulate(sim_cfg)
    out = Path(args.out)
    atomic_write_with(out, lambda tmp: write_csv(sim.dataset, tmp, include_derived=args.include_derived))
    manifest.outputs.append(_file_entry(out))
    p = sim_cfg.params
    eps_s, eps_t = 0.1, 0.5
    truth = {
        "params": snapshot(p),
        "seed": sim_cfg.seed,
        "replication": sim_cfg.replication,
        "design": snapshot(sim_cfg),
        "implied": {
            "kappa_s": math.sqrt(p.delta) / p.lam if p.delta > 0 else math.nan,
            "d_star": math.log(1 / eps_s) * p.lam / math.sqrt(p.delta) if p.delta > 0 else math.inf,
            "tau_star": math.log(1 / eps_t) / p.delta if p.delta > 0 else math.inf,
        },
        "diagnostics": sim.diagnostics,
        "unit_effects": sim.unit_effects,
        "time_effects": sim.time_effects,
    }
    tp = atomic_write_text(_sidecar(out, "truth", ".json"), dumps(truth))
    manifest.outputs.append(_file_entry(tp))
    log.info("wrote %s", out)


def _cmd_estimate(args, manifest: RunManifest) -> None:
    cfg = load_config(args.config)
    stage = stage_config(cfg, d_min=args.d_min, tau_min=args.tau_min, thresholds=args.thresholds,
                         cutoff_selection=args.cutoff_selection, cv_grid=args.cv_grid, beta=args.beta)
    domain = greens_spec(cfg) if any(k.startswith("domain.") for k in cfg) else None
    threads = _threads(args.threads)
    seed = args.seed if args.seed is not None else 0
    manifest.config = {"file": dict(cfg), "stage": snapshot(stage),
                       "domain": snapshot(domain) if domain is not None else None,
                       "with_inference": args.with_inference, "bootstrap": args.bootstrap, "alpha": args.alpha,
                       "d0": args.d0, "boundary_selection": args.boundary_selection}
    manifest.seeds = {"bootstrap_seed": seed}
    inp = Path(args.input)
    manifest.inputs.append(_file_entry(inp) if inp.exists() else {"path": str(inp), "sha256": ""})
    if args.config:
        manifest.inputs.append(_file_entry(Path(args.config)))
    ds = load_csv(inp, domain=domain)
    log.info("loaded %s: N=%d T=%d", inp, ds.n_units, ds.n_periods)
    res = run_pipeline(ds, stage)
    log.info("estimation status %s", res.status)
    doc: dict[str, Any] = {"input": str(inp), "estimation": res.to_dict()}
    if args.with_inference:
        if not 0 < args.alpha < 1:
            raise ValidationError("--alpha must lie in (0, 1)")
        if args.bootstrap < 0:
            raise ValidationError("--bootstrap must be >= 0")
        log.info("inference: bootstrap B=%d threads=%d", args.bootstrap, threads)
        doc["inference"] = run_inference(ds, res, bootstrap_reps=args.bootstrap, seed=seed, alpha=args.alpha,
                                         threads=max(threads, 1), d0=args.d0,
                                         boundary_selection=args.boundary_selection)
    out = Path(args.out)
    atomic_write_text(out, dumps(doc))
    manifest.outputs.append(_file_entry(out))
    log.info("wrote %s", out)
    if not args.no_plot_data:
        _write_plot_data(res, ("SpatialDecay", "TemporalDecay", "RatioCheck"), out, args.figures, manifest, ds)


def _records_csv(records: list[dict[str, Any]]) -> str:
    header: list[str] = []
    for r in records:
        for k in r:
            if k not in header:
                header.append(k)
    rows = []
    for r in records:
        row = []
        for k in header:
            v = r.get(k)
            row.append(float(v) if isinstance(v, (float, np.floating)) else v)
        rows.append(row)
    return csv_text(header, rows)


def _cmd_mc(args, manifest: RunManifest) -> None:
    cfg = load_config(args.config)
    threads = _threads(args.threads)
    mcs = mc_section(cfg)
    seed = args.seed if args.seed is not None else int(mcs.get("master_seed", 0))
    base = sim_config(cfg) if any(k.startswith(("sim.", "params.", "domain.")) for k in cfg) else None
    stage = stage_config(cfg) if any(k.startswith("stage.") for k in cfg) else None
    if args.config:
        manifest.inputs.append(_file_entry(Path(args.config)))
    if args.table is not None:
        M = args.replications if args.replications is not None else mcs.get("M")
        mc_cfg = preset_config(args.table, M, seed, threads, base, stage)
        manifest.config = {"file": dict(cfg), "table": args.table, "resolved": snapshot(mc_cfg)}
        manifest.seeds = {"master_seed": seed}
        log.info("mc preset %s: M=%d threads=%d", args.table, mc_cfg.M, threads)
        out_doc = run_preset(args.table, mc_cfg.M, seed, threads, base, stage)
    else:
        kw: dict[str, Any] = {k: v for k, v in mcs.items() if k not in ("M", "master_seed")}
        kw["M"] = args.replications if args.replications is not None else mcs.get("M", 200)
        kw["master_seed"] = seed
        kw["threads"] = threads
        if base is not None:
            kw["base"] = base
        if stage is not None:
            kw["stage"] = stage
        mc_cfg = McConfig(**kw)
        manifest.config = {"file": dict(cfg), "table": None, "resolved": snapshot(mc_cfg)}
        manifest.seeds = {"master_seed": seed}
        log.info("mc: M=%d threads=%d", mc_cfg.M, threads)
        t0 = time.perf_counter()
        res = run_comparison(mc_cfg) if len(mc_cfg.methods) >= 2 else run_mc(mc_cfg)
        out_doc = {"preset": None, "description": mc_cfg.label, "M": mc_cfg.M, "master_seed": seed,
                   "summary": res.summary.to_dict(), "records": res.records,
                   "wall_seconds": time.perf_counter() - t0}
    wall = out_doc.pop("wall_seconds")
    records = out_doc.pop("records")
    out = Path(args.out)
    atomic_write_text(out, dumps(out_doc))
    manifest.outputs.append(_file_entry(out))
    rp = atomic_write_text(_sidecar(out, "records", ".csv"), _records_csv(records))
    manifest.outputs.append(_file_entry(rp))
    manifest.config["mc_wall_seconds"] = wall
    log.info("wrote %s (%d records)", out, len(records))
    if args.table == "rmse_vs_n":
        _write_plot_data(out_doc, ("RmseVsN",), out, args.figures, manifest)


def _cmd_greens_eval(args, manifest: RunManifest) -> None:
    cfg = load_config(args.config)
    spec = greens_spec(cfg)
    if args.condition is not None:
        spec = replace(spec, condition=args.condition, Lx=args.Lx if args.Lx is not None else spec.Lx,
                       Ly=args.Ly if args.Ly is not None else spec.Ly)
    pkw = {k[len("params."):]: v for k, v in cfg.items() if k.startswith("params.")}
    if args.delta is not None:
        pkw["delta"] = args.delta
    if args.lam is not None:
        pkw["lam"] = args.lam
    if args.decay is not None or "lam" not in pkw:
        # field parameterised by its decay rate, normalised to K0(decay * d) in free space
        decay = args.decay if args.decay is not None else 0.01
        if not decay > 0:
            raise ValidationError("--decay must be positive")
        delta = pkw.get("delta", 0.15)
        lam_g = math.sqrt(delta) / decay
        pkw.update(delta=delta, lam=lam_g, kappa=2.0 * math.pi * lam_g**2)
    params = DiffusionParams(**pkw)
    if args.n_points < 1:
        raise ValidationError("--n-points must be >= 1")
    if not args.d_max > 0:
        raise ValidationError("--d-max must be positive")
    x0, y0 = args.source
    if not bool(spec.contains(x0, y0)):
        raise ValidationError("source lies outside the domain")
    manifest.config = {"file": dict(cfg), "spec": snapshot(spec), "params": snapshot(params),
                       "source": [x0, y0], "angle_deg": args.angle, "d_max": args.d_max, "n_points": args.n_points}
    if args.config:
        manifest.inputs.append(_file_entry(Path(args.config)))
    theta = math.radians(args.angle)
    rows = []
    for d in np.linspace(args.d_max / args.n_points, args.d_max, args.n_points):
        x, y = x0 + d * math.cos(theta), y0 + d * math.sin(theta)
        if not bool(spec.contains(x, y)):
            break
        rows.append((float(d), float(x), float(y), float(greens_value(x, y, x0, y0, spec, params))))
    out = Path(args.out)
    atomic_write_text(out, csv_text(("d_km", "x_km", "y_km", "greens"), rows))
    manifest.outputs.append(_file_entry(out))
    log.info("wrote %s (%d points)", out, len(rows))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spillbound", description="Spatial and temporal treatment-effect boundaries.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a panel from a config file")
    s.add_argument("--config", help="structured-text config (see docs/config_schema.md)")
    s.add_argument("--out", required=True, help="panel CSV path")
    s.add_argument("--seed", type=int, help="override sim.seed")
    s.add_argument("--include-derived", action="store_true", help="add tau and dist_nearest_treated columns")

    e = sub.add_parser("estimate", help="estimate decay parameters and boundaries from a panel CSV")
    e.add_argument("--in", dest="input", required=True, help="panel CSV")
    e.add_argument("--out", required=True, help="result JSON path")
    e.add_argument("--config", help="config with stage.* and domain.* keys")
    e.add_argument("--with-inference", action="store_true", help="run the test suite")
    e.add_argument("--bootstrap", type=int, default=0, metavar="B", help="panel bootstrap replications")
    e.add_argument("--alpha", type=float, default=0.05, help="test size")
    e.add_argument("--seed", type=int, help="bootstrap seed")
    e.add_argument("--threads", type=int, help=f"bootstrap threads (default ${THREADS_ENV} or 1)")
    e.add_argument("--d-min", type=float, help="spatial near-field cutoff in km")
    e.add_argument("--tau-min", type=int, help="temporal cutoff")
    e.add_argument("--thresholds", type=_float_pair, help="eps_s,eps_t detection fractions")
    e.add_argument("--cutoff-selection", choices=("fixed", "cv"))
    e.add_argument("--cv-grid", type=_cv_grid, help="candidate cutoffs as d_min:tau_min,...")
    e.add_argument("--beta", type=float, help="known production coefficient")
    e.add_argument("--d0", type=float, help="hypothesised spatial boundary in km")
    e.add_argument("--boundary-selection", action="store_true", help="compare boundary conditions by BIC")
    e.add_argument("--no-plot-data", action="store_true", help="skip plot-data CSVs")
    e.add_argument("--figures", action="store_true", help="also render plot data as PNG (needs matplotlib)")

    m = sub.add_parser("mc", help="Monte Carlo study")
    m.add_argument("--table", choices=tuple(PRESETS), help="preset design")
    m.add_argument("--config", help="config with sim.*, params.*, stage.* and mc.* keys")
    m.add_argument("--out", required=True, help="summary JSON path")
    m.add_argument("--replications", type=int, help="override M")
    m.add_argument("--threads", type=int, help=f"worker processes (default ${THREADS_ENV} or 1; 0 = in-process)")
    m.add_argument("--seed", type=int, help="override the master seed")
    m.add_argument("--figures", action="store_true", help="render plot data as PNG (needs matplotlib)")

    g = sub.add_parser("greens-eval", help="tabulate a Green's function along a ray from a source")
    g.add_argument("--config", help="config with params.* and domain.* keys")
    g.add_argument("--out", required=True, help="CSV path")
    g.add_argument("--condition", choices=("unbounded", "dirichlet", "neumann"))
    g.add_argument("--Lx", type=float)
    g.add_argument("--Ly", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--lam", type=float, help="diffusion length; raw parameterisation")
    g.add_argument("--decay", type=float,
                   help="decay rate per km; free-space profile is K0(decay * d) (default 0.01 unless lam is set)")
    g.add_argument("--source", type=_float_pair, default=(0.0, 0.0), help="x,y of the source in km")
    g.add_argument("--angle", type=float, default=0.0, help="direction of the ray in degrees")
    g.add_argument("--d-max", type=float, default=500.0)
    g.add_argument("--n-points", type=int, default=100)
    return p


_COMMANDS = {"simulate": _cmd_simulate, "estimate": _cmd_estimate, "mc": _cmd_mc, "greens-eval": _cmd_greens_eval}


def _setup_logging(quiet: bool) -> None:
    if not log.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(h)
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args.quiet)
    manifest = RunManifest(subcommand=args.command, argv=argv)
    t0 = time.perf_counter()
    code = 0
    try:
        _COMMANDS[args.command](args, manifest)
    except (ValidationError, OSError) as exc:
        code, manifest.status, manifest.error = 1, "error", f"{type(exc).__name__}: {exc}"
    except (SpillboundError, np.linalg.LinAlgError) as exc:
        code, manifest.status, manifest.error = 2, "error", f"{type(exc).__name__}: {exc}"
    if code:
        log.error(manifest.error)
    manifest.exit_code = code
    manifest.wall_seconds = time.perf_counter() - t0
    try:
        atomic_write_text(_manifest_path(Path(args.out)), dumps(manifest))
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
        code = code or 1
    return code


if __name__ == "__main__":
    sys.exit(main())
