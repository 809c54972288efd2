"""Command-line front end.

Exit codes: 0 ok, 1 verification failed, 2 model invariant failed, 3 parse
error, 4 precondition failed (e.g. unstable model), 5 numerical
non-convergence.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import ConvergenceError, ModelStructureError, NumericalError, PreconditionError
from .io import ParseError, load_model, render_json, render_table
from .model import validate_model
from .simulator import (DEFAULT_SEED, default_levels, estimate_tails, martingale_check,
                        relaxation_time, simulate)
from .spectral import perron, spectral_batch
from .traffic import is_stable, stable_stations

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INVALID = 2
EXIT_PARSE = 3
EXIT_PRECONDITION = 4
EXIT_NUMERICAL = 5


@dataclass
class RunConfig:
    command: str
    model: str
    directions: list = field(default_factory=list)
    station: int | None = None
    resolution: int | None = None
    box: list | None = None
    thetas: list = field(default_factory=list)
    reps: int = 200
    horizon: float = 5.0e4
    burn_in: float | None = None
    levels: list | None = None
    seed: int = DEFAULT_SEED
    out: str | None = None
    format: str = "table"
    threads: int | None = None


class UsageError(Exception):
    pass


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None


def _direction(text: str) -> list:
    c = np.array(_floats(text))
    n = np.linalg.norm(c)
    if c.size == 0 or n == 0:
        raise UsageError("direction must be a nonzero vector")
    return (c / n).tolist()


def _box(text: str) -> list:
    """``lo..hi`` per axis separated by commas, e.g. ``-1..2,-0.5..3``."""
    out = []
    for part in text.split(","):
        try:
            lo, hi = part.split("..")
            out.append((float(lo), float(hi)))
        except ValueError:
            raise UsageError(f"box axis must look like lo..hi, got {part!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfn", description="Tail decay-rate bounds for Markov-modulated "
                                "fluid networks, cross-checked by exact simulation.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, metavar="PATH", help="model JSON file")
    common.add_argument("--format", choices=("json", "csv", "table"), default="table")
    common.add_argument("--out", metavar="DIR", help="directory for exported files")
    common.add_argument("--direction", action="append", metavar="X,Y,...", default=[],
                        help="direction vector (repeatable); normalized to unit length")
    common.add_argument("--station", type=int, metavar="K", help="station index (1-based)")
    common.add_argument("--resolution", type=int, metavar="N", help="grid cells per axis")
    common.add_argument("--box", metavar="LO..HI,...", help="box bounds per axis")
    common.add_argument("--theta", action="append", metavar="X,Y,...", default=[],
                        help="exponent vector (repeatable)")
    common.add_argument("--reps", type=int, default=200)
    common.add_argument("--horizon", type=float, default=5.0e4)
    common.add_argument("--burn-in", type=float, dest="burn_in")
    common.add_argument("--levels", metavar="CSV", help="tail levels, comma separated")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--threads", type=int, help="worker threads for replications")
    helps = {
        "validate": "check model invariants",
        "stability": "traffic equations and stability",
        "gamma": "evaluate gamma and its gradient at points or on a grid",
        "domain": "run the domain fixed point and export the grid",
        "bounds": "decay-rate bounds per direction",
        "simulate": "simulate one path, optionally estimate tails",
        "verify": "compare bounds with simulation",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def config_from_args(ns) -> RunConfig:
    return RunConfig(
        command=ns.command,
        model=ns.model,
        directions=[_direction(x) for x in ns.direction],
        station=ns.station,
        resolution=ns.resolution,
        box=_box(ns.box) if ns.box else None,
        thetas=[_floats(x) for x in ns.theta],
        reps=ns.reps,
        horizon=ns.horizon,
        burn_in=ns.burn_in,
        levels=_floats(ns.levels) if ns.levels else None,
        seed=ns.seed,
        out=ns.out,
        format=ns.format,
        threads=ns.threads,
    )


# ---------------------------------------------------------------------------
# helpers


def _emit(cfg: RunConfig, payload: dict, table: str, csv_text: str | None = None) -> None:
    if cfg.format == "json":
        sys.stdout.write(render_json(payload))
    elif cfg.format == "csv" and csv_text is not None:
        sys.stdout.write(csv_text)
    else:
        sys.stdout.write(table)


def _out_dir(cfg: RunConfig) -> str | None:
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write(cfg: RunConfig, name: str, text: str) -> None:
    d = _out_dir(cfg)
    if d:
        with open(os.path.join(d, name), "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_valid(cfg: RunConfig):
    model = load_model(cfg.model)
    rep = validate_model(model)
    if not rep.ok:
        sys.stdout.write(render_json(rep.to_dict()))
        raise _Exit(EXIT_INVALID)
    return model


class _Exit(Exception):
    def __init__(self, code):
        self.code = code


def _require_stable(model):
    rep = is_stable(model)
    if not rep.stable:
        raise PreconditionError("model is not stable: R^-1 v_bar = "
                                + ", ".join(f"{x:.6g}" for x in rep.drift))
    return rep


def _make_box(cfg: RunConfig, model):
    if cfg.box is not None:
        if len(cfg.box) != model.d:
            raise UsageError(f"--box needs {model.d} axes")
        lo = [a for a, _ in cfg.box]
        hi = [b for _, b in cfg.box]
        steps = cfg.resolution or geo._default_steps(model.d)
        return geo.BoundingBox.aligned(lo, hi, steps)
    return geo.auto_box(model, steps=cfg.resolution)


def _directions(cfg: RunConfig, model) -> list:
    if cfg.directions:
        for c in cfg.directions:
            if len(c) != model.d:
                raise UsageError(f"direction needs {model.d} entries")
        return [np.array(c) for c in cfg.directions]
    d = model.d
    dirs = [np.eye(d)[k] for k in range(d)]
    dirs.append(np.ones(d) / np.sqrt(d))
    return dirs


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    rep = validate_model(model)
    payload = rep.to_dict()
    rows = [(c.name, c.passed, c.detail, "" if c.witness is None else str(c.witness)) for c in rep.checks]
    _emit(cfg, payload, render_table(rows, ["check", "passed", "detail", "witness"]))
    return EXIT_OK if rep.ok else EXIT_INVALID


def cmd_stability(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    rep = is_stable(model)
    stations, verdicts = stable_stations(model)
    payload = rep.to_dict()
    payload["stable_stations"] = sorted(stations)
    payload["stations"] = [{"station": v.station, "stable": v.stable, "gap": v.gap} for v in verdicts]
    t = rep.traffic
    rows = [(k + 1, t.alpha_bar[k], t.alpha_star_bar[k], t.mu_bar[k], t.v_bar[k], rep.drift[k],
             verdicts[k].stable) for k in range(model.d)]
    table = render_table(rows, ["station", "alpha_bar", "alpha*_bar", "mu_bar", "v_bar", "drift", "stable"])
    table += render_table([(i + 1, p) for i, p in enumerate(t.pi)], ["state", "pi"])
    table += f"stable: {'yes' if rep.stable else 'no'}" + (" (marginal)" if rep.marginal else "") + "\n"
    _emit(cfg, payload, table)
    return EXIT_OK


def cmd_gamma(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    if cfg.thetas:
        pts = np.array(cfg.thetas, dtype=float)
        if pts.shape[1] != model.d:
            raise UsageError(f"theta needs {model.d} entries")
        recs = []
        for th in pts:
            sp = perron(model, th)
            recs.append({"theta": th, "gamma": sp.gamma, "grad": sp.grad, "h": sp.h, "xi": sp.xi,
                         "gap": sp.gap, "gamma_k": th @ model.R})
        rows = [(",".join(f"{x:.6g}" for x in r["theta"]), r["gamma"],
                 ",".join(f"{x:.6g}" for x in r["grad"])) for r in recs]
        csv_text = "\n".join(["theta,gamma," + ",".join(f"grad_{k + 1}" for k in range(model.d))]
                             + [",".join(f"{x:.17g}" for x in list(r["theta"]) + [r["gamma"]] + list(r["grad"]))
                                for r in recs]) + "\n"
        _emit(cfg, {"points": recs}, render_table(rows, ["theta", "gamma", "grad"]), csv_text)
        return EXIT_OK
    box = _make_box(cfg, model) if cfg.box else geo.auto_box(model, steps=cfg.resolution or 50)
    pts = box.points().reshape(-1, model.d)
    g, grad = spectral_batch(model, pts)
    header = [f"theta_{k + 1}" for k in range(model.d)] + ["gamma"] + [f"grad_{k + 1}" for k in range(model.d)]
    lines = [",".join(header)]
    for p, gv, gr in zip(pts, g, grad):
        lines.append(",".join(f"{x:.17g}" for x in list(p) + [gv] + list(gr)))
    csv_text = "\n".join(lines) + "\n"
    _write(cfg, "gamma_grid.csv", csv_text)
    payload = {"box": {"lo": box.lo, "hi": box.hi, "steps": box.steps}, "points": len(pts),
               "gamma_min": float(g.min()), "gamma_max": float(g.max())}
    table = render_table([(len(pts), g.min(), g.max())], ["points", "gamma_min", "gamma_max"])
    _emit(cfg, payload, table, csv_text)
    return EXIT_OK


def _domain(cfg: RunConfig, model):
    _require_stable(model)
    box = _make_box(cfg, model)
    return geo.fixed_point_iteration(model, box)


def _grid_summary(grid) -> dict:
    box = grid.box
    return {
        "lo": box.lo, "hi": box.hi, "steps": box.steps, "resolution": box.resolution,
        "truncated_axes": list(box.truncated), "iterations": grid.iterations,
        "trace": grid.trace, "dmax_points": int(grid.Dmax.sum()),
        "dmax_sup": [grid.sup_along(k) for k in range(grid.d)],
    }


def cmd_domain(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    grid = _domain(cfg, model)
    payload = _grid_summary(grid)
    if model.d == 2:
        ex = geo.two_d_exact(model)
        payload["two_d_exact"] = list(ex.alpha)
    d = _out_dir(cfg)
    if d:
        geo.write_grid_csv(grid, os.path.join(d, "grid.csv"))
        geo.write_boundary_csv(grid, os.path.join(d, "boundary.csv"))
    rows = [(k + 1, grid.box.lo[k], grid.box.hi[k], grid.box.resolution[k], grid.sup_along(k),
             (k + 1) in grid.box.truncated) for k in range(model.d)]
    table = render_table(rows, ["axis", "lo", "hi", "resolution", "sup Dmax", "truncated"])
    table += f"sweeps: {grid.iterations}\n"
    if "two_d_exact" in payload:
        table += "two_d_exact: " + ", ".join(f"{x:.6g}" for x in payload["two_d_exact"]) + "\n"
    _emit(cfg, payload, table)
    return EXIT_OK


def _bounds(cfg: RunConfig, model, grid):
    reports = [geo.decay_report(model, c, grid) for c in _directions(cfg, model)]
    stations = [cfg.station] if cfg.station else list(range(1, model.d + 1))
    coords = [geo.lower_decay_rate_coordinate(model, k, grid.box) for k in stations]
    return reports, stations, coords


def _report_rows(reports):
    rows = []
    for r in reports:
        emp = r.empirical
        rows.append((",".join(f"{x:.4g}" for x in r.c), r.lower_end, r.upper_end, r.upper.hyperplane,
                     r.in_corn, r.upper.box_limited,
                     None if emp is None else emp.decay_rate,
                     None if emp is None else emp.slope_stderr, r.bracket))
    return rows


REPORT_HEADERS = ["c", "lower end", "upper end", "hyperplane", "in corn", "box-limited",
                  "empirical", "stderr", "bracket"]


def cmd_bounds(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    grid = _domain(cfg, model)
    reports, stations, coords = _bounds(cfg, model, grid)
    payload = {
        "grid": _grid_summary(grid),
        "directions": [r.to_dict() for r in reports],
        "coordinate_bounds": [dict(station=k, **lb.to_dict()) for k, lb in zip(stations, coords)],
    }
    table = render_table(_report_rows(reports), REPORT_HEADERS)
    table += render_table([(k, lb.value, lb.empty) for k, lb in zip(stations, coords)],
                          ["station", "G_k bound", "empty"])
    _write(cfg, "bounds.json", render_json(payload))
    _emit(cfg, payload, table)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    payload = {}
    if cfg.levels is not None or cfg.directions:
        _require_stable(model)
        dirs = _directions(cfg, model)
        tau = relaxation_time(model)
        burn = cfg.burn_in if cfg.burn_in is not None else min(20 * tau, 0.5 * cfg.horizon)
        levels = []
        for c in dirs:
            if cfg.levels is not None:
                levels.append(np.array(cfg.levels))
            else:
                rate = geo.ray_root(model, c / np.linalg.norm(c))
                rate = rate if np.isfinite(rate) and rate > 0 else 1.0 / model.rate_scale
                levels.append(default_levels(rate, cfg.reps, cfg.horizon, burn, tau))
        ests, _, stats = estimate_tails(model, dirs, levels, cfg.reps, cfg.horizon, burn, cfg.seed,
                                        cfg.threads)
        payload["tails"] = [e.to_dict() for e in ests]
        payload["path_stats"] = stats.to_dict()
        d = _out_dir(cfg)
        if d:
            for n, e in enumerate(ests):
                e.write_csv(os.path.join(d, f"tail_{n + 1}.csv"))
        rows = [(",".join(f"{x:.4g}" for x in e.c), e.decay_rate, e.slope_stderr, int(e.used.sum()), e.usable)
                for e in ests]
        table = render_table(rows, ["c", "decay rate", "stderr", "levels used", "usable"])
    else:
        tr = simulate(model, cfg.horizon, cfg.seed)
        d = _out_dir(cfg)
        if d:
            tr.write_csv(os.path.join(d, "trajectory.csv"))
        payload = {"horizon": cfg.horizon, "seed": cfg.seed, "segments": len(tr),
                   "final": {"t": tr.final.t, "Z": tr.final.Z, "Y": tr.final.Y, "J": tr.final.J},
                   "empty_fraction": tr.time_empty_fraction(), "path_stats": tr.stats.to_dict()}
        table = render_table([(len(tr), tr.final.t, tr.stats.events, tr.stats.violations)],
                             ["segments", "final t", "events", "violations"])
        table += render_table([(k + 1, tr.final.Z[k], tr.final.Y[k], f) for k, f in
                               enumerate(tr.time_empty_fraction())], ["station", "Z(T)", "Y(T)", "empty frac"])
    _emit(cfg, payload, table)
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    model = _load_valid(cfg)
    grid = _domain(cfg, model)
    reports, _, _ = _bounds(cfg, model, grid)
    tau = relaxation_time(model)
    burn = cfg.burn_in if cfg.burn_in is not None else min(20 * tau, 0.5 * cfg.horizon)
    levels = []
    for r in reports:
        rate = r.upper_end if np.isfinite(r.upper_end) else max(r.lower_end, 1e-3 / model.rate_scale)
        levels.append(np.array(cfg.levels) if cfg.levels is not None
                      else default_levels(rate, cfg.reps, cfg.horizon, burn, tau))
    # a point well inside D^(max) for the stationary identity and the martingale
    c0 = np.array(reports[0].c)
    theta = 0.3 * reports[0].lower_end * c0
    ests, bars, stats = estimate_tails(model, [np.array(r.c) for r in reports], levels, cfg.reps,
                                       cfg.horizon, burn, cfg.seed, cfg.threads, bar_thetas=[theta])
    final = []
    for r, e in zip(reports, ests):
        final.append(geo.DecayReport(r.c, r.upper, r.lower, r.in_corn, r.corn_detail, e,
                                     geo.bracket_verdict(r, e)))
    mart = martingale_check(model, theta, 10.0, min(10 * cfg.reps, 10000), cfg.seed + 1,
                            threads=cfg.threads)
    bar = bars[0]
    payload = {
        "model": model.to_dict(),
        "seed": cfg.seed,
        "reps": cfg.reps,
        "horizon": cfg.horizon,
        "burn_in": burn,
        "grid": _grid_summary(grid),
        "directions": [r.to_dict() for r in final],
        "bar": bar.to_dict() | {"inside_dmax": grid.contains(theta), "within_3se": bar.within},
        "martingale": mart.to_dict(),
        "path_stats": stats.to_dict(),
    }
    violated = any(r.bracket == "violated" for r in final)
    payload["verdict"] = "violated" if violated else (
        "holds" if all(r.bracket == "holds" for r in final) else "inconclusive")
    _write(cfg, "verify.json", render_json(payload))
    table = render_table(_report_rows(final), REPORT_HEADERS)
    table += render_table([(",".join(f"{x:.4g}" for x in theta), bar.normalized, bar.normalized_stderr,
                            bar.within)], ["BAR theta", "normalized residual", "stderr", "within 3 se"])
    table += render_table([(mart.mean, mart.stderr, mart.rejected, mart.passed)],
                          ["martingale mean", "stderr", "rejected", "passed"])
    table += f"verdict: {payload['verdict']}\n"
    _emit(cfg, payload, table)
    return EXIT_VERIFY if violated else EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "stability": cmd_stability,
    "gamma": cmd_gamma,
    "domain": cmd_domain,
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except _Exit as exc:
        return exc.code
    except UsageError as exc:
        parser.error(str(exc))
    except (ParseError, ModelStructureError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (ConvergenceError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
