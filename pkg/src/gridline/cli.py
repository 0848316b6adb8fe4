"""Command-line front end.

Every subcommand reads an optional TOML config (``--config``), writes CSV
and SVG files into ``--out`` and exits with 0 on success, 1 when a
computation fails and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gridline.cases import PRESETS, CaseSpec, apply_scales, build_ieee9, build_two_bus, load_line_data, with_kind
from gridline.core import ConfigError, GridlineError
from gridline.lines import LineKind

logger = logging.getLogger("gridline")

ALL_KINDS = ("statpi", "dynpi", "mssb", "msmb")


# ----------------------------------------------------------------------------
# configuration


@dataclass
class JobConfig:
    command: str
    case: dict = field(default_factory=dict)
    kinds: tuple[str, ...] = ALL_KINDS
    load_scale: float = 1.0
    line_scale: float = 1.0
    out: Path = Path("out")
    jobs: int = 1
    seed: int = 0
    boundary: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    base_dir: Path = Path(".")


_TOP_KEYS = {"case", "line", "scales", "boundary", "sim", "fit", "sweep", "run"}


def _number(value, what, positive=True):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{what} must be a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{what} must be positive, got {value!r}")
    return float(value)


def _number_list(value, what):
    if not isinstance(value, list):
        raise ConfigError(f"{what} must be a list of numbers")
    return [_number(v, f"{what} entry") for v in value]


def parse_kinds(text) -> tuple[str, ...]:
    items = text if isinstance(text, list) else str(text).split(",")
    kinds = tuple(str(k).strip() for k in items if str(k).strip())
    if not kinds:
        raise ConfigError("no line kinds given")
    for k in kinds:
        LineKind.parse(k)
    return kinds


def load_config(command: str, path: str | None, args) -> JobConfig:
    doc: dict = {}
    base_dir = Path(".")
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base_dir = Path(path).resolve().parent
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = JobConfig(command=command, base_dir=base_dir)
    cfg.case = dict(doc.get("case", {}))
    line = doc.get("line", {})
    if "kinds" in line:
        cfg.kinds = parse_kinds(line["kinds"])
    scales = doc.get("scales", {})
    cfg.load_scale = _number(scales.get("load", 1.0), "scales.load")
    cfg.line_scale = _number(scales.get("line", 1.0), "scales.line")
    run = doc.get("run", {})
    cfg.jobs = int(run.get("jobs", 1))
    cfg.seed = int(run.get("seed", 0))
    for name in ("boundary", "sim", "fit", "sweep"):
        setattr(cfg, name, dict(doc.get(name, {})))
    if getattr(args, "kinds", None):
        cfg.kinds = parse_kinds(args.kinds)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    cfg.out = Path(args.out) if getattr(args, "out", None) else Path(run.get("out", "out"))
    validate_config(cfg)
    return cfg


def validate_config(cfg: JobConfig) -> None:
    """Schema checks that must pass before any computation starts."""
    build_case(cfg)
    if cfg.command == "boundary":
        grid = cfg.boundary.get("load_scales", [1.0])
        if not _number_list(grid, "boundary.load_scales"):
            raise ConfigError("boundary.load_scales is empty")
        _number(cfg.boundary.get("increment", 0.1), "boundary.increment")
        _number(cfg.boundary.get("max_scale", 6.0), "boundary.max_scale")
    if cfg.command == "sim":
        _sim_events(cfg)
        _number(cfg.sim.get("t_end", 1.0), "sim.t_end")
    if cfg.command == "fit":
        if "samples" not in cfg.fit:
            raise ConfigError("fit.samples (path to sample CSV) is required")
        if int(cfg.fit.get("m", 3)) < 1:
            raise ConfigError("fit.m must be >= 1")
    if cfg.command == "sweep":
        for key in ("load_scales", "line_scales"):
            if not _number_list(cfg.sweep.get(key, [1.0]), f"sweep.{key}"):
                raise ConfigError(f"sweep.{key} is empty")
        if cfg.sweep.get("task", "ss") not in ("ss", "pf", "sim"):
            raise ConfigError("sweep.task must be one of ss, pf, sim")
        if cfg.sweep.get("task", "ss") == "sim":
            _sim_events(cfg)


def build_case(cfg: JobConfig) -> CaseSpec:
    c = cfg.case
    name = c.get("name", "two_bus")
    data = load_line_data(cfg.base_dir / c["line_data"]) if "line_data" in c else None
    if "file" in c:
        case = build_ieee9(path=cfg.base_dir / c["file"], line_data=data)
    elif name == "two_bus":
        sources = tuple(c.get("sources", ("gfm", "sm")))
        case = build_two_bus(sources, int(c.get("load_bus", 1)), line_data=data)
    elif name == "ieee9":
        case = build_ieee9(line_data=data)
    elif name in PRESETS:
        case = PRESETS[name]()
    else:
        raise ConfigError(f"unknown case {name!r}; choose from {sorted(PRESETS)}")
    return apply_scales(case, cfg.load_scale, cfg.line_scale)


def _sim_events(cfg: JobConfig):
    from gridline.simulate import BranchTrip, SetpointStep

    events = []
    for k, ev in enumerate(cfg.sim.get("event", [])):
        if "t" not in ev:
            raise ConfigError(f"sim.event[{k}] is missing its time 't'")
        t = _number(ev["t"], f"sim.event[{k}].t", positive=False)
        kind = ev.get("kind", "trip")
        if kind == "trip":
            if "branch" not in ev:
                raise ConfigError(f"sim.event[{k}] trip needs 'branch'")
            events.append(BranchTrip(t, str(ev["branch"])))
        elif kind == "setpoint":
            for key in ("device", "field", "delta"):
                if key not in ev:
                    raise ConfigError(f"sim.event[{k}] setpoint needs '{key}'")
            events.append(SetpointStep(t, str(ev["device"]), str(ev["field"]),
                                       _number(ev["delta"], "delta", positive=False)))
        else:
            raise ConfigError(f"sim.event[{k}] has unknown kind {kind!r}")
    t_end = cfg.sim.get("t_end", 1.0)
    for ev in events:
        if ev.t > t_end:
            raise ConfigError(f"event at t={ev.t} is after t_end={t_end}")
    return tuple(events)


# ----------------------------------------------------------------------------
# plotting


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gridline"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def _kind_tag(kind: str) -> str:
    return kind.replace(":", "_")


def resolve_kind(case: CaseSpec, kind: str) -> CaseSpec:
    """Apply a line kind; ``mssb:auto`` picks N from the fastest StatPi device mode."""
    if not kind.strip().lower().endswith(":auto"):
        return with_kind(case, kind)
    from gridline.lines import select_segment_count
    from gridline.smallsignal import device_mode_frequencies, small_signal

    target = float(device_mode_frequencies(small_signal(with_kind(case, "statpi"))).max())
    n = select_segment_count(case, target)
    logger.info("%s resolved to %d segments (target %.1f Hz)", kind, n, target)
    return with_kind(case, LineKind(LineKind.parse(kind).name, n))


# ----------------------------------------------------------------------------
# commands


def cmd_pf(cfg: JobConfig) -> int:
    from gridline.network import branch_flows, power_flow, write_power_flow

    cfg.out.mkdir(parents=True, exist_ok=True)
    case = build_case(cfg)
    pf = power_flow(case)
    write_power_flow(cfg.out / "power_flow.csv", pf)
    flows = branch_flows(case, pf)
    with open(cfg.out / "branch_flows.csv", "w", encoding="utf-8") as fh:
        fh.write("branch,p_from,q_from,p_to,q_to\n")
        for bid, (sf, st) in flows.items():
            fh.write(f"{bid},{sf.real!r},{sf.imag!r},{st.real!r},{st.imag!r}\n")
    logger.info("power flow converged in %d iterations", pf.iterations)
    return 0


def cmd_ss(cfg: JobConfig) -> int:
    from gridline.smallsignal import small_signal, write_eigen_csv, write_participation_csv

    cfg.out.mkdir(parents=True, exist_ok=True)
    case = build_case(cfg)
    results = {}
    for kind in cfg.kinds:
        r = small_signal(resolve_kind(case, kind))
        tag = _kind_tag(kind)
        write_eigen_csv(cfg.out / f"eigen_{tag}.csv", r)
        write_participation_csv(cfg.out / f"participation_{tag}.csv", r)
        results[kind] = r
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 5))
    for kind, r in results.items():
        lam = r.eigenvalues
        ax.scatter(lam.real, lam.imag / (2 * np.pi), s=10, label=kind)
    ax.set_xlabel("real part [1/s]")
    ax.set_ylabel("frequency [Hz]")
    ax.set_xscale("symlog", linthresh=1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, cfg.out / "eigenvalues.svg")
    plt.close(fig)
    return 0


def cmd_boundary(cfg: JobConfig) -> int:
    from gridline.smallsignal import boundary_search, write_boundary_csv

    cfg.out.mkdir(parents=True, exist_ok=True)
    case = build_case(cfg)
    grid = _number_list(cfg.boundary.get("load_scales", [1.0]), "boundary.load_scales")
    inc = _number(cfg.boundary.get("increment", 0.1), "boundary.increment")
    top = _number(cfg.boundary.get("max_scale", 6.0), "boundary.max_scale")
    tasks = [(case, ls, kind, inc, top) for kind in cfg.kinds for ls in grid]
    results = _map(_boundary_task, tasks, cfg.jobs)
    write_boundary_csv(cfg.out / "boundary.csv", results)
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in cfg.kinds:
        rows = [b for b in results if b.kind == str(LineKind.parse(kind)) or b.kind.startswith(kind)]
        xs = [b.load_scale for b in rows if b.critical is not None]
        ys = [b.critical for b in rows if b.critical is not None]
        ax.plot(xs, ys, marker="o", label=kind)
        bad = [b.load_scale for b in rows if b.status == "infeasible"]
        if bad:
            ax.scatter(bad, [top] * len(bad), marker="x", color="k")
    ax.set_xlabel("load scale")
    ax.set_ylabel("critical line scale")
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, cfg.out / "boundary.svg")
    plt.close(fig)
    return 0


def _boundary_task(args):
    from gridline.smallsignal import boundary_search

    case, ls, kind, inc, top = args
    return boundary_search(case, ls, kind, inc, top)


def _run_sim(case, cfg: JobConfig):
    from gridline.simulate import Scenario, run_sim

    s = Scenario(case, _sim_events(cfg), (0.0, float(cfg.sim.get("t_end", 1.0))),
                 rtol=float(cfg.sim.get("rtol", 1e-6)), atol=float(cfg.sim.get("atol", 1e-9)),
                 dt_out=float(cfg.sim.get("dt_out", 1e-5)))
    return run_sim(s)


def _write_sim(r, out: Path, tag: str, threshold: float):
    from gridline.simulate import (detect_overcurrent, filter_current_magnitude, write_derived_csv,
                                   write_event_log, write_timeseries_csv)

    write_timeseries_csv(out / f"states_{tag}.csv", r)
    write_derived_csv(out / f"derived_{tag}.csv", r)
    oc = {name: detect_overcurrent(r.t, filter_current_magnitude(r, name), threshold)
          for name in r.inverter_ids()}
    write_event_log(out / f"events_{tag}.csv", r, oc)
    return oc


def cmd_sim(cfg: JobConfig) -> int:
    from gridline.simulate import filter_current_magnitude

    cfg.out.mkdir(parents=True, exist_ok=True)
    case = build_case(cfg)
    threshold = float(cfg.sim.get("overcurrent", 1.3))
    runs = {}
    for kind in cfg.kinds:
        r = _run_sim(resolve_kind(case, kind), cfg)
        _write_sim(r, cfg.out, _kind_tag(kind), threshold)
        runs[kind] = r
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4))
    for kind, r in runs.items():
        for name in r.inverter_ids():
            ax.plot(r.t, filter_current_magnitude(r, name), label=f"{kind} {name}", lw=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("|i_cv| [pu]")
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, cfg.out / "icv.svg")
    plt.close(fig)
    return 0


def cmd_fit(cfg: JobConfig) -> int:
    from gridline.fitting import FitError, read_samples, samples_from_branches, vector_fit_rl

    cfg.out.mkdir(parents=True, exist_ok=True)
    samples = read_samples(cfg.base_dir / cfg.fit["samples"], float(cfg.fit.get("f_base", 60.0)))
    status = 0
    try:
        report = vector_fit_rl(samples, int(cfg.fit.get("m", 3)), float(cfg.fit.get("tol", 0.02)),
                               seed=cfg.seed)
    except FitError as exc:
        logger.error("%s", exc)
        report = exc.report
        status = 1
    if report is None:
        return 1
    with open(cfg.out / "fit.csv", "w", encoding="utf-8") as fh:
        fh.write("branch,r_pu_per_km,l_pu_per_km\n")
        for k, (r, l) in enumerate(zip(report.branches.r, report.branches.l)):
            fh.write(f"{k},{r!r},{l!r}\n")
        fh.write(f"# max_rel_error={report.max_rel_error!r} converged={report.converged}\n")
    fitted = samples_from_branches(report.branches, samples.f, samples.f_base)
    plt = _figure()
    fig, (a1, a2) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
    a1.loglog(samples.f, samples.r, "o", ms=3, label="data")
    a1.loglog(samples.f, fitted.r, "-", label="fit")
    a1.set_ylabel("r [pu/km]")
    a2.semilogx(samples.f, samples.l, "o", ms=3, label="data")
    a2.semilogx(samples.f, fitted.l, "-", label="fit")
    a2.set_ylabel("l [pu/km]")
    a2.set_xlabel("frequency [Hz]")
    a1.legend()
    _save(fig, cfg.out / "fit.svg")
    plt.close(fig)
    return status


def cmd_case_list(cfg: JobConfig) -> int:
    for name in sorted(PRESETS):
        c = PRESETS[name]()
        print(f"{name}: {len(c.buses)} buses, {len(c.branches)} branches, "
              f"sources {','.join(s.id for s in c.sources)}")
    return 0


# ----------------------------------------------------------------------------
# sweep


def _cell_name(k: int, ls: float, ln: float, kind: str) -> str:
    return f"cell{k:04d}_load{ls:g}_line{ln:g}_{_kind_tag(kind)}"


def _sweep_cell(args):
    cfg, k, ls, ln, kind = args
    from gridline.network import power_flow, write_power_flow
    from gridline.smallsignal import small_signal, write_eigen_csv

    out = cfg.out / _cell_name(k, ls, ln, kind)
    out.mkdir(parents=True, exist_ok=True)
    case = resolve_kind(apply_scales(build_case(cfg), ls, ln), kind)
    task = cfg.sweep.get("task", "ss")
    files = []
    status = "ok"
    try:
        if task == "pf":
            write_power_flow(out / "power_flow.csv", power_flow(case))
            files.append("power_flow.csv")
        elif task == "ss":
            write_eigen_csv(out / "eigen.csv", small_signal(case))
            files.append("eigen.csv")
        else:
            r = _run_sim(case, cfg)
            _write_sim(r, out, "run", float(cfg.sim.get("overcurrent", 1.3)))
            files += ["states_run.csv", "derived_run.csv", "events_run.csv"]
    except GridlineError as exc:
        status = f"failed: {exc}"
    record = {"cell": out.name, "load_scale": ls, "line_scale": ln, "kind": kind,
              "files": [f"{out.name}/{f}" for f in files], "status": status}
    (out / "cell.json").write_text(json.dumps(record, indent=1, sort_keys=True), encoding="utf-8")
    return record


def cmd_sweep(cfg: JobConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    loads = _number_list(cfg.sweep.get("load_scales", [1.0]), "sweep.load_scales")
    lines = _number_list(cfg.sweep.get("line_scales", [1.0]), "sweep.line_scales")
    cells = []
    k = 0
    for kind in cfg.kinds:
        for ls in loads:
            for ln in lines:
                cells.append((cfg, k, ls, ln, kind))
                k += 1
    records: dict[str, dict] = {}
    todo = []
    for cell in cells:
        name = _cell_name(*cell[1:])
        marker = cfg.out / name / "cell.json"
        if marker.exists():
            records[name] = json.loads(marker.read_text(encoding="utf-8"))
        else:
            todo.append(cell)
    if len(todo) < len(cells):
        logger.info("resuming sweep: %d of %d cells already done", len(cells) - len(todo), len(cells))
    for rec in _map(_sweep_cell, todo, cfg.jobs):
        records[rec["cell"]] = rec
    manifest = [records[_cell_name(*c[1:])] for c in cells]
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True),
                                           encoding="utf-8")
    return 0 if all(r["status"] == "ok" for r in manifest) else 1


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ----------------------------------------------------------------------------
# entry point

COMMANDS = {"pf": cmd_pf, "ss": cmd_ss, "sim": cmd_sim, "boundary": cmd_boundary,
            "sweep": cmd_sweep, "fit": cmd_fit}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridline", description="Line-model comparison studies.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML job configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--kinds", help="comma-separated line kinds, e.g. statpi,dynpi,mssb:8,msmb")
        sp.add_argument("--jobs", type=int, help="parallel workers")
        sp.add_argument("--seed", type=int, help="random seed for fitting restarts")
    case = sub.add_parser("case")
    case.add_argument("action", choices=["list"])
    return p


def _configure_logging():
    level = os.environ.get("GRIDLINE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "case":
            return cmd_case_list(JobConfig("case"))
        cfg = load_config(args.command, args.config, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GridlineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
