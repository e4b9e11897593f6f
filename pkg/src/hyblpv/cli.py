"""Batch front end: synth, validate, simulate, report.

Exit codes: 0 success, 2 infeasible synthesis, 3 validation failure,
4 configuration or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .lpv import DomainError, dense_grid
from .textio import FormatError

log = logging.getLogger("hyblpv")

EXIT_OK, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_CONFIG = 0, 2, 3, 4
BUNDLE = "bundle.json"
GAMMA_TABLE = "gammas.csv"


class InputError(Exception):
    """Bad or inconsistent input files (exit code 4)."""


def rate_dir(rate: float) -> str:
    return f"rate-{rate:g}"


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def _synth_row(cfg: RunConfig, rate: float, single: bool) -> dict:
    """One design; writes its files and returns a manifest entry."""
    from .serialize import write_controller, write_solution
    from .synthesis import (ReconstructionError, SynthesisError, SynthesisProblem, design,
                            reconstruct_controller, validate_certificate)
    kind = "single" if single else "hybrid"
    plant = cfg.plant(single)
    sv = cfg.data["solver"]
    prob = SynthesisProblem(plant, cfg.domain(plant, rate), cfg.bases(plant), weights=cfg.weights(plant),
                            margin=sv["margin"])
    entry = {"rate": rate, "design": kind, "regions": plant.partition.size}
    t0 = time.perf_counter()
    try:
        sol = design(prob, backoff=sv["backoff"], coupling_cap=sv["coupling_cap"], opts=cfg.solve_options())
    except SynthesisError as exc:
        entry.update(status="infeasible", message=str(exc), seconds=time.perf_counter() - t0)
        return entry
    try:
        K = reconstruct_controller(sol)
    except ReconstructionError as exc:
        entry.update(status="reconstruction-failed", message=str(exc), gammas=list(sol.gammas),
                     seconds=time.perf_counter() - t0)
        return entry
    rep = validate_certificate(sol, K, tolerance=cfg.data["validation"]["tolerance"])
    d = cfg.output_dir / rate_dir(rate)
    d.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance()
    write_solution(d / f"{kind}.solution", sol, prov)
    write_controller(d / f"{kind}.controller", K, prov)
    entry.update(status="ok" if rep.passed else "validation-failed", gammas=list(sol.gammas),
                 optimal_gammas=sol.diagnostics.get("optimal_gammas"),
                 solution=f"{rate_dir(rate)}/{kind}.solution",
                 controller=f"{rate_dir(rate)}/{kind}.controller",
                 validation=rep.summary(), seconds=time.perf_counter() - t0)
    return entry


def _synth_job(args):
    cfg_raw, base_dir, rate, single = args
    from .config import from_dict
    return _synth_row(from_dict(cfg_raw, base_dir), rate, single)


def _gamma_rows(cfg: RunConfig, entries: list[dict]) -> tuple[list[str], list[list]]:
    nreg = len(cfg.intervals())
    single = cfg.data["single_pdlf"]
    header = ["rate_bound"] + (["single_pdlf"] if single else []) + [f"region_{i + 1}" for i in range(nreg)]
    header.append("status")
    rows = []
    for rate in cfg.data["rates"]:
        hyb = next(e for e in entries if e["rate"] == rate and e["design"] == "hybrid")
        row = [repr(float(rate))]
        statuses = [hyb["status"]]
        if single:
            sgl = next(e for e in entries if e["rate"] == rate and e["design"] == "single")
            row.append(repr(sgl["gammas"][0]) if "gammas" in sgl else "")
            statuses.append(sgl["status"])
        g = hyb.get("gammas")
        row += [repr(x) for x in g] if g else [""] * nreg
        bad = [s for s in statuses if s != "ok"]
        row.append(bad[0] if bad else "ok")
        rows.append(row)
    return header, rows


def write_gamma_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def cmd_synth(cfg: RunConfig, jobs: int = 1) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(rate, single) for rate in cfg.data["rates"]
             for single in ([False, True] if cfg.data["single_pdlf"] else [False])]
    started = _stamp()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            entries = list(ex.map(_synth_job, [(cfg.raw, str(cfg.base_dir), r, s) for r, s in tasks]))
    else:
        entries = []
        for rate, single in tasks:
            log.info("synthesizing %s design at rate bound %g", "single" if single else "hybrid", rate)
            entries.append(_synth_row(cfg, rate, single))
    header, rows = _gamma_rows(cfg, entries)
    write_gamma_table(out / GAMMA_TABLE, header, rows)
    timing = {f"{e['design']}@{e['rate']:g}": e.pop("seconds") for e in entries}
    bundle = {"designs": entries, "gamma_table": GAMMA_TABLE,
              "provenance": dict(cfg.provenance(), started=started, finished=_stamp(), seconds=timing)}
    _json(out / BUNDLE, bundle)
    for e in entries:
        g = e.get("gammas")
        log.info("%s rate %g: %s %s", e["design"], e["rate"], e["status"],
                 "" if g is None else "[" + ", ".join(f"{x:.4f}" for x in g) + "]")
    statuses = {e["status"] for e in entries}
    if "infeasible" in statuses:
        return EXIT_INFEASIBLE
    if statuses != {"ok"}:
        return EXIT_INVALID
    return EXIT_OK


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def _load_pair(cfg: RunConfig, solution: Path, controller: Path, single: bool | None = None):
    from .serialize import read_controller, read_solution
    K, kprov = read_controller(controller)
    if single is None:
        single = K.regions == 1 and len(cfg.intervals()) > 1
    sol, sprov = read_solution(solution, cfg.plant(single))
    for name, prov in ((solution, sprov), (controller, kprov)):
        h = prov.get("config_sha256")
        if h != cfg.hash:
            raise InputError(f"{name} was produced by a different configuration "
                             f"(hash {h or 'missing'}, expected {cfg.hash})")
    if K.regions != sol.regions:
        raise InputError(f"{controller} has {K.regions} regions, {solution} has {sol.regions}")
    return sol, K


def validate_pair(cfg: RunConfig, solution: Path, controller: Path, density: int) -> dict:
    from .synthesis import validate_certificate
    sol, K = _load_pair(cfg, solution, controller)
    tol = cfg.data["validation"]["tolerance"]
    rep = validate_certificate(sol, K, tolerance=tol)
    out = {"solution": str(solution), "controller": str(controller), "gammas": list(sol.gammas),
           "synthesis_grid": rep.summary(),
           "per_region": [{fam: (lambda w: None if w is None else w.relative)(
               min((r for r in rep.records if r.family == fam and r.region == i),
                   key=lambda r: r.relative, default=None))
               for fam in ("X", "analysis", "jump")} for i in range(sol.regions)]}
    if density > 1:
        dense = validate_certificate(sol, K, grids=dense_grid(sol.plant.partition, density),
                                     tolerance=tol, interpolate=True)
        out["dense_grid"] = dict(dense.summary(), multiplier=density)
    return out


def cmd_validate(cfg: RunConfig, solution: Path | None, controller: Path | None,
                 density: int | None, report: Path | None) -> int:
    density = cfg.data["validation"]["density"] if density is None else density
    if (solution is None) != (controller is None):
        raise InputError("give both --solution and --controller, or neither")
    if solution is not None:
        pairs = [(solution, controller)]
    else:
        bundle = _read_bundle(cfg.output_dir)
        pairs = [(cfg.output_dir / e["solution"], cfg.output_dir / e["controller"])
                 for e in bundle["designs"] if "solution" in e]
        if not pairs:
            raise InputError(f"no certificate files listed in {cfg.output_dir / BUNDLE}")
    results = [validate_pair(cfg, s, k, density) for s, k in pairs]
    passed = all(r["synthesis_grid"]["passed"] for r in results)
    doc = {"passed": passed, "results": results, "provenance": cfg.provenance()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if report is None:
        report = cfg.output_dir / "validation.json"
        report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(text)
    for r in results:
        fams = r["synthesis_grid"]["families"]
        log.info("%s: %s (worst relative margins %s)", r["solution"],
                 "pass" if r["synthesis_grid"]["passed"] else "FAIL",
                 ", ".join(f"{k}={v['worst_relative']:.2e}" for k, v in fams.items()))
    return EXIT_OK if passed else EXIT_INVALID


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, solution: Path | None, controller: Path | None) -> int:
    from .hybridsim import (SignalSource, empirical_l2_gain, integrate, lyapunov_monitor,
                            write_events_jsonl)
    sim = cfg.data["simulation"]
    rate = cfg.simulation_rate()
    d = cfg.output_dir / rate_dir(rate)
    solution = solution or d / "hybrid.solution"
    controller = controller or d / "hybrid.controller"
    for p in (solution, controller):
        if not Path(p).exists():
            raise InputError(f"missing {p}; run 'synth' first or pass --solution/--controller")
    sol, K = _load_pair(cfg, solution, controller)
    plant = sol.plant
    rho = cfg.profile()
    horizon, step = float(sim["horizon"]), float(sim["step"])
    # pre-flight: the profile must stay inside the union of the subsets
    ts = np.linspace(0.0, horizon, 20001)
    r = rho.sample(ts)
    hull = plant.partition.hull()
    inside = np.zeros(len(ts), bool)
    for box in plant.partition.boxes:
        inside |= np.all((r >= np.asarray(box.lo)) & (r <= np.asarray(box.hi)), axis=1)
    if not inside.all():
        k = int(np.argmin(inside))
        raise InputError(f"profile leaves the scheduling region at t={ts[k]:.6g} "
                         f"(rho={r[k].tolist()}, domain {list(hull.lo)}..{list(hull.hi)})")
    w = SignalSource.constant(sim["disturbance"])
    if w.dim != plant.dims["nw"]:
        raise ConfigError(f"simulation.disturbance: expected {plant.dims['nw']} values, got {w.dim}")
    sigma0 = sim.get("initial_region")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        traj = integrate(plant, K, rho, w, horizon, step, record_every=sim["record_every"],
                         sigma0=None if sigma0 is None else sigma0 - 1, rates=sol.rates)
        seconds = time.perf_counter() - t0
    mon = lyapunov_monitor(traj, sol, K)
    out = cfg.output_dir / "simulation"
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    write_events_jsonl(out / "events.jsonl", traj, mon)
    try:
        ratio = empirical_l2_gain(traj)
    except ValueError:
        ratio = None
    summary = {
        "controller": str(controller), "design_rate": rate, "horizon": horizon, "step": step,
        "events": [{"t": e.t, "from": e.src + 1, "to": e.dst + 1} for e in traj.events],
        "event_count": len(traj.events),
        "empirical_l2_ratio": ratio,
        "certified_max_gamma": max(sol.gammas),
        "max_abs_x1": float(np.max(np.abs(traj.x[:, 0]))),
        "max_abs_x2": float(np.max(np.abs(traj.x[:, 1]))),
        "lyapunov_events_ok": mon.events_ok,
        "warnings": sorted({str(c.message) for c in caught}),
        "provenance": dict(cfg.provenance(), seconds=seconds, finished=_stamp()),
    }
    _json(out / "summary.json", summary)
    log.info("%d switching events at t = %s; empirical ratio %s (certified %.4f)",
             len(traj.events), [round(e.t, 6) for e in traj.events],
             "n/a" if ratio is None else f"{ratio:.4f}", max(sol.gammas))
    return EXIT_OK


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _read_bundle(out: Path) -> dict:
    try:
        return json.loads((out / BUNDLE).read_text())
    except FileNotFoundError:
        raise InputError(f"no bundle at {out / BUNDLE}; run 'synth' first") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{out / BUNDLE}:{exc.lineno}: {exc.msg}") from None


def _columns(path: Path, names: list[str]) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        idx = [header.index(n) for n in names]
        data = np.array([[float(row[i]) for i in idx] for row in rd])
    return names, data


def cmd_report(out: Path) -> int:
    from .serialize import read_solution
    bundle = _read_bundle(out)
    missing = []
    for e in bundle["designs"]:
        for key in ("solution", "controller"):
            if key in e and not (out / e[key]).exists():
                missing.append(e[key])
    if not (out / bundle["gamma_table"]).exists():
        missing.append(bundle["gamma_table"])
    lines = [f"hyblpv {__version__} report for {out}",
             f"config sha256 {bundle['provenance']['config_sha256']}", ""]
    # gamma table, cross-checked against the certificate files
    mismatch = []
    rows = []
    if (out / bundle["gamma_table"]).exists():
        with open(out / bundle["gamma_table"], newline="") as fh:
            rows = list(csv.reader(fh))
    if rows:
        shown = [rows[0]] + [[c if k == 0 or k == len(r) - 1 or not c else f"{float(c):.4f}"
                              for k, c in enumerate(r)] for r in rows[1:]]
        widths = [max(len(r[k]) for r in shown) for k in range(len(shown[0]))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in shown]
        lines.append("")
    for e in bundle["designs"]:
        if "solution" in e and (out / e["solution"]).exists():
            sol, _ = read_solution(out / e["solution"])
            if not np.allclose(sol.gammas, e["gammas"], rtol=0, atol=0):
                mismatch.append(e["solution"])
    sim = out / "simulation"
    if (sim / "summary.json").exists():
        summ = json.loads((sim / "summary.json").read_text())
        events = [json.loads(l) for l in (sim / "events.jsonl").read_text().splitlines() if l.strip()] \
            if (sim / "events.jsonl").exists() else None
        if events is None:
            missing.append("simulation/events.jsonl")
        traj = sim / "trajectory.csv"
        if not traj.exists():
            missing.append("simulation/trajectory.csv")
        else:
            plots = out / "plots"
            plots.mkdir(exist_ok=True)
            with open(traj, newline="") as fh:
                cols = next(csv.reader(fh))
            xs = ["t"] + [c for c in ("x1", "x2") if c in cols]
            us = ["t"] + [c for c in cols if c.startswith("u")]
            _write_table(plots / "displacement.csv", xs, _columns(traj, xs)[1])
            _write_table(plots / "control.csv", us, _columns(traj, us)[1])
            _, sig = _columns(traj, ["t", "sigma"])
            steps = [(sig[0, 0], int(sig[0, 1]))]
            for ev in events or []:
                steps.append((ev["t"], ev["to"]))
            steps.append((sig[-1, 0], steps[-1][1]))
            _write_table(plots / "sigma.csv", ["t", "sigma"], np.array(steps, float), int_cols={1})
        n_ev = len(events) if events is not None else None
        lines.append(f"simulation: {summ['event_count']} switching events "
                     f"at t = {[round(e['t'], 6) for e in summ['events']]}")
        if n_ev is not None and n_ev != summ["event_count"]:
            mismatch.append("simulation/events.jsonl (event count differs from summary)")
        lines.append(f"empirical L2 ratio {summ['empirical_l2_ratio']}, certified max gamma "
                     f"{summ['certified_max_gamma']}; Lyapunov events ok: {summ['lyapunov_events_ok']}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    if missing:
        for m in missing:
            log.error("missing artifact: %s", m)
        return EXIT_CONFIG
    if mismatch:
        for m in mismatch:
            log.error("inconsistent artifact: %s", m)
        return EXIT_INVALID
    return EXIT_OK


def _write_table(path: Path, header, data, int_cols=frozenset()) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in data:
            wr.writerow([int(v) if k in int_cols else repr(float(v)) for k, v in enumerate(row)])


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyblpv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="synthesize one design per rate bound")
    p.add_argument("config", type=Path)
    p.add_argument("-j", "--jobs", type=int, default=1, help="parallel rate-bound rows")
    p = sub.add_parser("validate", help="re-check certificates a posteriori")
    p.add_argument("config", type=Path)
    p.add_argument("--solution", type=Path)
    p.add_argument("--controller", type=Path)
    p.add_argument("--density", type=int, help="dense-grid multiplier (1 disables)")
    p.add_argument("--report", type=Path, help="JSON report path")
    p = sub.add_parser("simulate", help="hybrid closed-loop simulation")
    p.add_argument("config", type=Path)
    p.add_argument("--solution", type=Path)
    p.add_argument("--controller", type=Path)
    p = sub.add_parser("report", help="summary and plot-data files for a result bundle")
    p.add_argument("config", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            return cmd_synth(cfg, args.jobs)
        if args.command == "validate":
            return cmd_validate(cfg, args.solution, args.controller, args.density, args.report)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.solution, args.controller)
        return cmd_report(cfg.output_dir)
    except (ConfigError, InputError, FormatError, DomainError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
