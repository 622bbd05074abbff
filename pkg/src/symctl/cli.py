"""Command-line front end: ``solve``, ``simulate``, ``check`` and ``bench``.

Exit codes: 0 success, 1 error, 2 partial domain (or initial state outside
the controller domain), 3 violations found.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from symctl import __version__
from symctl.ellipsoid_abstraction import (
    LazyTreeParams,
    build_lazy_ellipsoid_abstraction,
    export_tree_csv,
)
from symctl.errors import DomainExitError, SizeCapError, SymctlError
from symctl.geometry import Hyperrectangle, UniformGrid
from symctl.grid_abstraction import GridAbstractionParams, build_grid_abstraction, estimate_size, make_grid
from symctl.problems import dump_problem, load_problem, parse_override, problem_from_spec, parse_problem_text
from symctl.render import render_run
from symctl.symbolic import CoverQuantizer, GridQuantizer, check_frr, check_mcr, load_model, save_model
from symctl.synthesis import (
    abstract_problem,
    concretize,
    export_controller_csv,
    export_value_csv,
    load_controller_csv,
    load_value_csv,
    solve_reach_avoid,
    solve_safety,
)
from symctl.system import DisturbancePolicy, closed_loop_trajectory

log = logging.getLogger("symctl")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL, EXIT_VIOLATIONS = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "SYMCTL_OUTPUT_ROOT"
MANIFEST_VERSION = 1
SOLVERS = ("grid", "lazy-ellipsoid")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _default_out(name, solver):
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "symctl_runs"))
    return root / f"{name}-{solver}"


def grid_from_problem(problem, gspec):
    state_grid = make_grid(problem.state_set, gspec.state_half_lengths, gspec.state_origin, "corner")
    input_grid = make_grid(problem.input_set, gspec.input_half_lengths, gspec.input_origin, "center")
    return state_grid, input_grid


def _grid_params(problem, solver_cfg, args, prior=None):
    if solver_cfg.grid is None:
        raise SymctlError("the problem file has no [grid] section")
    state_grid, input_grid = grid_from_problem(problem, solver_cfg.grid)
    obstacles = list(problem.obstacles)
    return GridAbstractionParams(
        state_grid=state_grid,
        input_grid=input_grid,
        obstacle_sets=obstacles,
        stability_prior=solver_cfg.grid.stability_prior if prior is None else prior,
        input_set=problem.input_set,
        cells_cap=getattr(args, "cells_cap", None) or solver_cfg.grid.cells_cap,
        threads=getattr(args, "threads", 1) or 1,
    )


def _lazy_params(problem, solver_cfg, args):
    lz = solver_cfg.lazy
    return LazyTreeParams(
        max_iterations=getattr(args, "max_iterations", None) or lz.max_iterations,
        sample_seed=solver_cfg.seed,
        initial_shape_scale=lz.initial_shape_scale,
        shrink_factor=lz.shrink_factor,
        cost_weights=problem.cost_weights,
        goal_bias=lz.goal_bias,
        input_margin=lz.input_margin,
        max_shrinks=lz.max_shrinks,
    )


def run_solver(problem, solver_cfg, solver, args=None, prior=None):
    """Abstraction plus synthesis. Returns a dict of results and timings."""
    t0 = time.perf_counter()
    out = {"solver": solver}
    if solver == "grid":
        params = _grid_params(problem, solver_cfg, args, prior)
        model, quantizer = build_grid_abstraction(problem.system, params, problem.state_set)
        out.update(params=params, stats=model.build_stats)
        t1 = time.perf_counter()
        ap = abstract_problem(problem, model, quantizer)
        if ap.kind == "reach_avoid":
            controller, values = solve_reach_avoid(ap)
        else:
            controller = solve_safety(ap)
            values = None
        interface = None
    else:
        params = _lazy_params(problem, solver_cfg, args)
        lazy = build_lazy_ellipsoid_abstraction(problem, problem.system, params)
        model, quantizer, interface, _ = lazy
        out.update(params=params, stats=lazy.stats, lazy=lazy)
        t1 = time.perf_counter()
        ap = abstract_problem(problem, model, quantizer)
        controller, values = solve_reach_avoid(ap)
    t2 = time.perf_counter()
    out.update(model=model, quantizer=quantizer, interface=interface, controller=controller, values=values,
               abstract=ap, abstraction_s=t1 - t0, synthesis_s=t2 - t1, total_s=t2 - t0)
    return out


def _winning_ids(ap, controller):
    dom = set(controller.domain)
    if ap.kind == "reach_avoid":
        dom |= set(ap.target_ids.tolist())
    return dom


def _params_record(params):
    if isinstance(params, GridAbstractionParams):
        return {
            "state_origin": params.state_grid.origin.tolist(),
            "state_half_lengths": params.state_grid.cell_half_lengths.tolist(),
            "input_origin": params.input_grid.origin.tolist(),
            "input_half_lengths": params.input_grid.cell_half_lengths.tolist(),
            "stability_prior": params.stability_prior,
            "obstacles": len(params.obstacle_sets),
        }
    return {k: getattr(params, k) for k in ("max_iterations", "sample_seed", "initial_shape_scale",
                                             "shrink_factor", "goal_bias", "input_margin", "max_shrinks")}


def _overrides(args):
    return dict(parse_override(p) for p in (args.param or []))


def cmd_solve(args):
    overrides = _overrides(args)
    problem, solver_cfg = load_problem(args.problem, overrides)
    solver = args.solver or solver_cfg.solver
    if args.seed is not None:
        solver_cfg.seed = args.seed
    out = Path(args.out) if args.out else _default_out(problem.name, solver)
    if solver == "grid" and solver_cfg.grid is not None:
        est = estimate_size(_grid_params(problem, solver_cfg, args))
        log.info("grid: %d cells, %d cell-input pairs", est.cells, est.cell_input_pairs)
    res = run_solver(problem, solver_cfg, solver, args)
    out.mkdir(parents=True, exist_ok=True)
    raw = dict(problem.config)
    raw.setdefault("solver", {})
    raw["solver"] = dict(raw["solver"], default=solver, seed=solver_cfg.seed)
    (out / "problem.toml").write_text(dump_problem(raw))
    model, ap, controller = res["model"], res["abstract"], res["controller"]
    extra = {"quantizer": res["quantizer"].kind}
    if solver == "grid":
        g = res["params"].state_grid
        extra["grid"] = {"origin": g.origin.tolist(), "half_lengths": g.cell_half_lengths.tolist()}
    model_hash = save_model(model, out, problem.state_set.dim, problem.input_set.dim, extra)
    export_controller_csv(controller, out / "controller.csv", model_hash)
    if res["values"] is not None:
        export_value_csv(res["values"], out / "values.csv")
    if solver == "lazy-ellipsoid":
        export_tree_csv(res["lazy"].cells, out / "tree.csv")
    win = _winning_ids(ap, controller)
    initial = ap.initial_ids.tolist()
    covered = sum(1 for i in initial if i in win)
    fraction = covered / len(initial) if initial else 0.0
    summary = {
        "states": model.num_states,
        "inputs": model.num_inputs,
        "transitions": model.num_transitions,
        "winning_states": len(win),
        "initial_states": len(initial),
        "initial_covered_fraction": fraction,
        "heuristic_growth_bound": bool(problem.system.error_bound_heuristic),
        "infeasible": bool(getattr(controller, "infeasible", False)),
        "violations": None,
    }
    if solver == "lazy-ellipsoid":
        lazy = res["lazy"]
        summary.update(tree_covered=lazy.covered, tree_certified=lazy.certified,
                       tree_coverage_fraction=lazy.coverage_fraction, tree_iterations=lazy.iterations)
    artifacts = sorted(p.name for p in out.iterdir() if p.is_file() and p.name not in ("manifest.json", "timings.json"))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "problem_name": problem.name,
        "problem_sha256": _sha256(out / "problem.toml"),
        "solver": solver,
        "seed": solver_cfg.seed,
        "parameters": _params_record(res["params"]),
        "parameter_overrides": {k: overrides[k] for k in sorted(overrides)},
        "model_sha256": model_hash,
        "summary": summary,
        "artifacts": {name: _sha256(out / name) for name in artifacts},
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timings.json", {"abstraction_s": res["abstraction_s"], "synthesis_s": res["synthesis_s"],
                                       "total_s": res["total_s"]})
    print(f"{problem.name} [{solver}]: {model.num_states} states, {model.num_transitions} transitions, "
          f"{len(win)} winning, initial covered {fraction:.3f}; abstraction {res['abstraction_s']:.2f}s, "
          f"synthesis {res['synthesis_s']:.2f}s -> {out}")
    if solver == "lazy-ellipsoid" and not res["lazy"].covered:
        print(f"tree did not cover the initial set (coverage {res['lazy'].coverage_fraction:.3f})")
        return EXIT_PARTIAL
    if fraction < 1.0 or summary["infeasible"]:
        return EXIT_PARTIAL
    return EXIT_OK


# -- loading a solved run ------------------------------------------------------

class Run:
    """Artifacts of a solved run, reloaded from disk."""

    def __init__(self, directory):
        d = Path(directory)
        self.dir = d
        for name in ("manifest.json", "problem.toml", "model_header.json", "controller.csv"):
            if not (d / name).exists():
                raise SymctlError(f"missing artifact {d / name}")
        self.manifest = json.loads((d / "manifest.json").read_text())
        spec, raw = parse_problem_text((d / "problem.toml").read_text(), source=str(d / "problem.toml"))
        self.problem, self.solver_cfg = problem_from_spec(spec, raw)
        self.model, self.header, self.hash_ok = load_model(d)
        self.controller, self.controller_hash = load_controller_csv(d / "controller.csv")
        self.values = load_value_csv(d / "values.csv") if (d / "values.csv").exists() else None
        if self.header.get("quantizer") == "grid_partition":
            g = self.header["grid"]
            grid = UniformGrid(g["origin"], g["half_lengths"], self.problem.state_set)
            centers = np.array([c.center for c in self.model.cell_of])
            id_of_linear = np.full(grid.num_cells, -1, dtype=np.int64)
            id_of_linear[grid.linear_index(grid.index_of(centers))] = np.arange(len(centers))
            self.quantizer = GridQuantizer(grid, id_of_linear)
            self.interface = None
        else:
            self.quantizer = CoverQuantizer(self.model.cell_of)
            inputs = self.model.input_of

            def interface(x1, x2, u2):
                return [inputs[int(u2)](x1)]

            self.interface = interface

    @property
    def is_grid(self):
        return self.quantizer.kind == "grid_partition"

    def concrete_controller(self):
        return concretize(self.controller, self.quantizer, self.interface, self.model.input_of)

    def start_bound(self, x):
        if self.values is None:
            return None
        ids = self.quantizer.resolve(x)
        vals = [self.values[i] for i in ids]
        return max(vals) if vals else None


def _nearest_domain_cell(run, x):
    ids = np.array(sorted(run.controller.domain), dtype=np.int64)
    if len(ids) == 0:
        return None
    centers = np.array([run.model.cell_of[i].center for i in ids])
    k = int(np.argmin(np.linalg.norm(centers - x, axis=1)))
    return int(ids[k]), centers[k].tolist()


def _parse_vector(text):
    return np.array([float(v) for v in text.split(",")], dtype=float)


def cmd_simulate(args):
    run = Run(args.run)
    problem = run.problem
    concrete = problem.concrete()
    controller = run.concrete_controller()
    if args.x0 is not None:
        starts = [_parse_vector(args.x0)]
    else:
        rng = np.random.default_rng(args.sample_initial)
        init = problem.initial_set
        starts = list(np.atleast_2d(init.sample(rng, args.count)))
    target = problem.target_set
    obstacles = problem.obstacles
    if problem.kind == "reach_avoid":
        def stop(x):
            return bool(target.contains(x))
    else:
        def stop(x):
            return False
    out = Path(args.out) if args.out else run.dir
    out.mkdir(parents=True, exist_ok=True)
    rows, records, paths = [], [], []
    outside = violations = 0
    n, m = problem.state_set.dim, problem.input_set.dim
    for k, x0 in enumerate(starts):
        rec = {"index": k, "x0": x0.tolist()}
        if not controller.domain_predicate(x0) and not stop(x0):
            hint = _nearest_domain_cell(run, x0)
            rec.update(status="outside_domain", nearest_domain_cell=hint)
            records.append(rec)
            outside += 1
            print(f"x0 = {x0.tolist()} is outside the controller domain; nearest domain cell: {hint}")
            continue
        disturbance = DisturbancePolicy.parse(args.disturbance)
        if disturbance.kind != "zero":
            disturbance = DisturbancePolicy(disturbance.kind, disturbance.seed + k)
        try:
            traj = closed_loop_trajectory(concrete, controller, problem.stage_cost, x0, stop, args.steps, disturbance)
            status = traj.status
        except DomainExitError as exc:
            traj, status = exc.trajectory, "domain_exit"
        hit_obstacle = any(bool(np.any(o.contains(traj.states))) for o in obstacles)
        left_bounds = not bool(np.all(problem.state_set.contains(traj.states, 1e-9)))
        if problem.kind == "reach_avoid":
            ok = status == "stopped" and not hit_obstacle and not left_bounds
        else:
            ok = status == "timeout" and bool(np.all(problem.safe_set.contains(traj.states, 1e-9)))
        bound = run.start_bound(x0)
        within = None if bound is None or not np.isfinite(bound) else bool(traj.total_cost <= bound + 1e-6)
        if not ok or within is False:
            violations += 1
        rec.update(status=status, satisfied=ok, steps=traj.length, cost=traj.total_cost, cost_bound=bound,
                   within_bound=within, hit_obstacle=hit_obstacle)
        records.append(rec)
        paths.append(traj.states)
        for t, x in enumerate(traj.states):
            u = traj.inputs[t] if t < traj.length else [float("nan")] * m
            c = traj.costs[t] if t < traj.length else float("nan")
            rows.append([k, t] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u] + [repr(float(c))])
    with open(out / "trajectories.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["trajectory", "step"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)] + ["cost"])
        wr.writerows(rows)
    _write_json(out / "simulation.json", {"trajectories": records, "outside_domain": outside,
                                          "violations": violations, "disturbance": args.disturbance})
    _write_plot_layers(run, out, paths)
    reached = sum(1 for r in records if r.get("satisfied"))
    print(f"simulated {len(records)} trajectories: {reached} satisfied the specification, "
          f"{outside} started outside the domain, {violations} violations")
    if outside:
        return EXIT_PARTIAL
    return EXIT_VIOLATIONS if violations else EXIT_OK


def _set_row(name, s):
    if isinstance(s, Hyperrectangle):
        return [name, "box"] + [repr(float(v)) for v in s.center] + [repr(float(v)) for v in s.half_lengths]
    return [name, "ellipsoid"] + [repr(float(v)) for v in s.center] + [repr(float(v)) for v in s.shape.ravel()]


def _problem_sets(problem):
    sets = [("initial", problem.initial_set)]
    if problem.target_set is not None:
        sets.append(("target", problem.target_set))
    if problem.safe_set is not None:
        sets.append(("safe", problem.safe_set))
    sets += [("obstacle", o) for o in problem.obstacles]
    return sets


def _write_plot_layers(run, out, paths):
    model = run.model
    values = run.values if run.values is not None else np.where(
        np.isin(np.arange(model.num_states), sorted(run.controller.domain)), 0.0, np.inf)
    with open(out / "plot_cells.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "kind", "value", "parameters"])
        for i in range(model.num_states):
            row = _set_row(i, model.cell_of[i])
            v = values[i]
            wr.writerow([i, row[1], "inf" if np.isinf(v) else repr(float(v)), " ".join(row[2:])])
    sets = _problem_sets(run.problem)
    with open(out / "plot_sets.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["name", "kind", "parameters"])
        for name, s in sets:
            row = _set_row(name, s)
            wr.writerow([name, row[1], " ".join(row[2:])])
    cells = [model.cell_of[i] for i in range(model.num_states)]
    (out / "plot.svg").write_text(render_run(run.problem.state_set, cells, values, sets, paths))


def cmd_check(args):
    run = Run(args.run)
    concrete = run.problem.concrete()
    samples = run.solver_cfg.check_samples if args.samples is None else args.samples
    if run.is_grid:
        report = check_frr(concrete, run.model, run.quantizer, samples, args.seed)
    else:
        report = check_mcr(concrete, run.model, run.quantizer, run.interface, samples, args.seed)
    rec = report.to_dict()
    rec["model_hash_matches"] = bool(run.hash_ok and run.controller_hash == run.header.get("content_sha256"))
    rec["seed"] = args.seed
    out = Path(args.out) if args.out else run.dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "check_report.json", rec)
    flag = " (vacuous: 0 samples)" if report.vacuous else ""
    print(f"{report.relation} check: {report.samples} samples, {report.violation_count} violations{flag}")
    if not rec["model_hash_matches"]:
        print("warning: model files do not match the recorded hash")
    return EXIT_VIOLATIONS if report.violations else EXIT_OK


# -- bench -------------------------------------------------------------------

BENCH_COLUMNS = ["name", "solver", "abstraction_s", "synthesis_s", "total_s"]


def _bench_entries(path):
    """Lines of ``problem [solver] [prior|no-prior|both]``; ``#`` starts a comment."""
    entries = []
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        prob = parts[0]
        if not Path(prob).is_absolute() and (base / prob).exists():
            prob = str(base / prob)
        solver = parts[1] if len(parts) > 1 else None
        prior = parts[2] if len(parts) > 2 else "config"
        entries.append((prob, solver, prior))
    return entries


def cmd_bench(args):
    rows, failures = [], []
    for prob, solver, prior in _bench_entries(args.problems):
        try:
            problem, cfg = load_problem(prob)
        except SymctlError as exc:
            failures.append({"problem": prob, "error": str(exc)})
            rows.append([Path(prob).stem, solver or "?", "nan", "nan", "nan"])
            continue
        solver = solver or cfg.solver
        variants = [(solver, None)]
        if solver == "grid" and prior in ("both", "prior", "no-prior"):
            variants = []
            if prior in ("both", "prior"):
                variants.append(("grid+prior", True))
            if prior in ("both", "no-prior"):
                variants.append(("grid-prior", False))
        for label, flag in variants:
            times = []
            try:
                for _ in range(args.repetitions):
                    res = run_solver(problem, cfg, solver, args, prior=flag)
                    times.append((res["abstraction_s"], res["synthesis_s"], res["total_s"]))
                med = [statistics.median(t[i] for t in times) for i in range(3)]
                rows.append([problem.name, label] + [f"{v:.4f}" for v in med])
            except SymctlError as exc:
                failures.append({"problem": problem.name, "solver": label, "error": str(exc)})
                rows.append([problem.name, label, "nan", "nan", "nan"])
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "symctl_runs")) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(BENCH_COLUMNS)
        wr.writerows(rows)
    widths = [max(len(str(r[i])) for r in rows + [BENCH_COLUMNS]) for i in range(len(BENCH_COLUMNS))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [BENCH_COLUMNS] + rows]
    text = "\n".join(lines) + "\n"
    (out / "bench.txt").write_text(text)
    if failures:
        _write_json(out / "bench_failures.json", failures)
    print(text, end="")
    return EXIT_ERROR if failures and len(failures) == len(rows) else EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="symctl", description="Abstraction-based controller synthesis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="build an abstraction and synthesize a controller")
    s.add_argument("problem", help="problem file (or the name of a shipped problem)")
    s.add_argument("--solver", choices=SOLVERS)
    s.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<name>-<solver>)")
    s.add_argument("--seed", type=int)
    s.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a problem parameter")
    s.add_argument("--cells-cap", type=int, help="refuse grids with more cells than this")
    s.add_argument("--threads", type=int, default=1, help="worker threads for the grid abstraction")
    s.add_argument("--max-iterations", type=int, help="lazy tree iteration cap")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="closed-loop simulation of a solved run")
    s.add_argument("run", help="directory written by solve")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--x0", help="comma-separated initial state")
    g.add_argument("--sample-initial", type=int, default=0, metavar="SEED", help="sample initial states")
    s.add_argument("--count", type=int, default=1, help="number of sampled initial states")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--disturbance", default="zero", help="zero, random[:seed] or worst_sampled[:seed]")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("check", help="sampling check of the abstraction relation")
    s.add_argument("run")
    s.add_argument("--samples", type=int, help="default: solver.check_samples of the problem")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("bench", help="timing table over a list of problems")
    s.add_argument("problems", help="text file: one 'problem [solver] [prior|no-prior|both]' per line")
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except SizeCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"size estimate: {exc.estimate.cells} cells, {exc.estimate.cell_input_pairs} cell-input pairs",
              file=sys.stderr)
        return EXIT_ERROR
    except SymctlError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
