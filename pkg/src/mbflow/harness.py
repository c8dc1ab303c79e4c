"""Experiment driver: builds problems from a config, runs them, writes artifacts.

Every data file is written with full round-trip float formatting so reruns
with the same config and seed are byte-identical.  The manifest is written
last and lists each file with its SHA-256 digest; only its timing fields
vary between reruns.
"""

import csv
import hashlib
import io
import json
import math
import os
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import constrained, obstacle, sparse
from .config import emit_config
from .convex import CompositePotential, QuadraticPotential
from .core import (
    BatchSystem,
    SolverOptions,
    _error_curve,
    draw_schedule,
    gradient_flow,
    mini_batch_flow,
    minimizing_movement,
    report_from_curves,
    sweep_grid,
)
from .exceptions import SolverError

__all__ = ["RunError", "build_case", "run", "timing_report", "write_csv"]


def _fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path, header, rows):
    """Write rows with a ``\\n`` terminator and round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, (int, np.integer)) and not isinstance(v, bool) else _fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class RunError(RuntimeError):
    """A failure inside a run, with the context needed to locate it."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


class _Case:
    """A problem family resolved into a batch system and a list of starts."""

    def __init__(self, system, starts, labels, options, metadata=None):
        self.system = system
        self.starts = starts
        self.labels = labels
        self.options = options
        self.metadata = metadata or {}


def _options(cfg):
    s = cfg.solver
    return SolverOptions(s.method, s.inner_step, s.reference_step)


def _flow_step(cfg, opts, h):
    # a plain flow run uses the family step h; sweeps keep the finer solver default
    if cfg.scheme == "flow" and cfg.solver.reference_step is None:
        return SolverOptions(opts.method, opts.inner_step, h)
    return opts


def build_case(cfg):
    """Batch system, initial states and solver options for a non-obstacle family."""
    blk = cfg.block
    if cfg.family == "sparse":
        p = sparse.SparseProblem(blk.A, blk.b, blk.lam, tuple(blk.pi))
        u0 = np.zeros(p.dim) if blk.u0 is None else np.asarray(blk.u0, float)
        opts = _flow_step(cfg, _options(cfg), blk.h)
        return _Case(sparse.build_system(p), [u0], [""], opts, {"problem": p})
    if cfg.family == "constrained-qp":
        from .convex import Polyhedron

        p = constrained.ConstrainedProblem(Polyhedron(blk.A, blk.b), blk.ud, blk.yd, tuple(blk.probs))
        starts = [constrained.feasible_start(p, s, blk.project_start) for s in blk.starts]
        method = "explicit" if cfg.solver.method == "auto" else cfg.solver.method
        opts = _flow_step(cfg, SolverOptions(method, cfg.solver.inner_step, cfg.solver.reference_step), blk.h)
        labels = [f"start{k}_" for k in range(len(starts))] if len(starts) > 1 else [""]
        return _Case(constrained.build_system(p), starts, labels, opts, {"problem": p})
    if cfg.family == "custom":
        subs = []
        for t in blk.sub_potentials:
            d = len(t.H)
            q = QuadraticPotential(np.asarray(t.H, float), np.zeros(d) if t.c is None else t.c, t.constant)
            subs.append(CompositePotential(q, t.l1_weights, t.l1_centers))
        batches = [[i - 1 for i in b] for b in blk.batches]
        sys = BatchSystem(subs, blk.weights, batches, blk.batch_probs)
        sys.check()
        return _Case(sys, [np.asarray(blk.u0, float)], [""], _options(cfg))
    raise ValueError(f"family {cfg.family!r} has no batch-system case")


class _Writer:
    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def json(self, name, obj):
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.files.append(name)

    def inventory(self):
        return [{"file": f, "sha256": _sha256(self.out / f)} for f in self.files]


def _trajectory_rows(tr):
    return [[t, *np.ravel(u)] for t, u in zip(tr.times, tr.states)]


def _trajectory_header(dim):
    return ["t"] + [f"u{i + 1}" for i in range(dim)]


def _report_json(rep, extra=None):
    out = {
        "epsilons": [float(e) for e in rep.epsilons],
        "sup_values": [float(v) for v in rep.sup_values],
        "sup_std_err": [float(v) for v in rep.sup_std_err],
        "slope": None if rep.slope is None else float(rep.slope),
        "slope_stderr": None if rep.slope_stderr is None else float(rep.slope_stderr),
        "quantity": rep.quantity,
        "R": rep.R,
        "scheme": rep.scheme,
        "degenerate": bool(rep.degenerate),
    }
    out.update(extra or {})
    return out


def _run_case(cfg, case, w, seed, threads, stages):
    T, R = cfg.T, cfg.R
    reports = {}
    C = case.metadata["problem"].constraint if cfg.family == "constrained-qp" else None
    for u0, label in zip(case.starts, case.labels):
        t0 = time.perf_counter()
        eps = list(cfg.epsilons)
        grid = sweep_grid(T, eps) if cfg.scheme != "flow" else None
        ref = gradient_flow(case.system.full_potential, u0, T, grid, case.options)
        w.csv(f"{label}flow.csv", _trajectory_header(u0.size), _trajectory_rows(ref))
        stages[f"{label}reference"] = time.perf_counter() - t0
        if cfg.scheme == "flow":
            continue
        violation = float(np.max(C.residual(ref.states))) if C is not None else None
        curves = []
        for k, e in enumerate(eps):
            t0 = time.perf_counter()
            try:
                sched = draw_schedule(case.system, e, T, seed)
                if cfg.scheme == "mini-batch":
                    tr = mini_batch_flow(case.system, sched, u0, None, case.options)
                else:
                    tr = minimizing_movement(case.system, sched, u0)
                w.csv(f"{label}trajectory_eps{k}.csv", _trajectory_header(u0.size), _trajectory_rows(tr))
                curve, paths = _error_curve(case.system, u0, T, e, R, seed, cfg.scheme, case.options, ref,
                                            1.0, threads, keep_paths=True)
            except (SolverError, ValueError, ArithmeticError) as exc:
                raise RunError(str(exc), {
                    "family": cfg.family, "epsilon": float(e), "start": label.rstrip("_") or None,
                    "time": getattr(exc, "time", None), "type": type(exc).__name__,
                }) from exc
            if C is not None:
                violation = max(violation, float(np.max(C.residual(paths.reshape(-1, u0.size)))))
            curves.append(curve)
            rows = [[t, m, s, R] for t, m, s in zip(curve.times, curve.mean_sq, curve.std_err)]
            w.csv(f"{label}error_eps{k}.csv", ["t", "mean_sq_error", "std_err", "R"], rows)
            stages[f"{label}eps{k}"] = time.perf_counter() - t0
        if len(eps) >= 3 and R >= 2:
            rep = report_from_curves(eps, curves)
            w.csv(f"{label}convergence.csv", ["epsilon", "sup_mse", "std_err", "R"], rep.rows())
            extra = {"u0": [float(x) for x in u0]}
            if C is not None:
                extra["max_constraint_violation"] = violation
            reports[label.rstrip("_") or "main"] = _report_json(rep, extra)
    return reports


def _run_obstacle(cfg, w, seed, threads, stages):
    blk = cfg.block
    grid = obstacle.Grid2D(blk.N)
    spec = obstacle.default_spec(grid, blk.delta, blk.s, cfg.T)
    part = obstacle.build_partition(grid, blk.ramp_halfwidth)
    batches = None if blk.batches is None else [[i - 1 for i in b] for b in blk.batches]
    system = obstacle.DDSystem(spec, part, batches, blk.probs)
    t0 = time.perf_counter()
    eps = list(cfg.epsilons)
    x, y = grid.coords()
    snaps = blk.snapshots or [cfg.T]
    if cfg.scheme == "flow" or len(eps) < 3:
        step = blk.reference_step or min(eps) / 16
        times = np.unique(np.concatenate([sweep_grid(cfg.T, eps), snaps]))
        ref = obstacle.reference_trajectory(spec, times, step)
        _write_snapshots(w, "reference", ref, snaps, x, y)
        stages["reference"] = time.perf_counter() - t0
        if cfg.scheme == "flow":
            return {}
        for k, e in enumerate(eps):
            K = math.ceil(cfg.T / e - 1e-9)
            paths = [obstacle.dd_trajectory(system, obstacle._draw_indices(system.probs, K, seed + r), e, times)
                     for r in range(cfg.R)]
            diff = np.stack(paths) - ref.states[None]
            sq = grid.spacing ** 2 * np.sum(diff * diff, axis=-1)
            se = sq.std(axis=0, ddof=1) / math.sqrt(cfg.R) if cfg.R > 1 else np.full(times.size, np.nan)
            rows = [[t, m, s, cfg.R] for t, m, s in zip(times, sq.mean(axis=0), se)]
            w.csv(f"error_eps{k}.csv", ["t", "mean_sq_error", "std_err", "R"], rows)
        return {}
    res = obstacle.run_dd_experiment(spec, eps, cfg.R, seed, reference_step=blk.reference_step,
                                     threads=threads, system=system)
    stages["sweep"] = time.perf_counter() - t0
    rep = res.report
    for k, c in enumerate(rep.curves):
        rows = [[t, m, s, c.R] for t, m, s in zip(c.times, c.mean_sq, c.std_err)]
        w.csv(f"error_eps{k}.csv", ["t", "mean_sq_error", "std_err", "R"], rows)
    w.csv("convergence.csv", ["epsilon", "sup_mse", "std_err", "R"],
          [(e, *c.sup("mse"), c.R) for e, c in zip(rep.epsilons, rep.curves)])
    w.csv("convergence_norm.csv", ["epsilon", "sup_mean_error", "std_err", "R"], rep.rows())
    snap_times = [t for t in snaps if np.any(np.isclose(res.reference.times, t))]
    _write_snapshots(w, "reference", res.reference, snap_times, x, y)
    extra = {
        "penetration": res.penetration,
        "penetration_constant": res.penetration_constant,
        "failures": res.failures,
    }
    return {"main": _report_json(rep, extra)}


def _write_snapshots(w, tag, traj, snaps, x, y):
    for t in snaps:
        u = traj.states[int(np.argmin(np.abs(traj.times - t)))]
        w.csv(f"{tag}_snapshot_t{t:g}.csv", ["x", "y", "u"], zip(x, y, u))


def run(cfg, out=None, seed=None, threads=None):
    """Execute ``cfg`` and write its artifacts; returns the manifest dictionary."""
    out = Path(out or cfg.output_dir)
    seed = cfg.seed if seed is None else int(seed)
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    w = _Writer(out)
    stages = {}
    started = time.perf_counter()
    w.json("config.json", json.loads(emit_config(cfg)))
    if cfg.family == "obstacle-dd":
        reports = _run_obstacle(cfg, w, seed, threads, stages)
    else:
        reports = _run_case(cfg, build_case(cfg), w, seed, threads, stages)
    if reports:
        w.json("report.json", reports)
    stages["total"] = time.perf_counter() - started
    manifest = {
        "config": json.loads(emit_config(cfg)),
        "seed": seed,
        "seeds": [seed + r for r in range(cfg.R)],
        "version": _version(),
        "wall_clock": stages,
        "files": w.inventory(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# timing


def _random_sparse(d, rng):
    r = math.ceil(d / 2)
    return sparse.SparseProblem(rng.random((r, d)), rng.random(r), 1.0)


def timing_report(sizes, repeats=3, epsilon=0.04, T=1.0, h=0.01, seed=0):
    """Wall-clock of explicit gradient-flow stepping vs mini-batch stepping.

    For each size ``d`` a random instance with ``r = ceil(d/2)`` rows and
    ``U(0, 1)`` entries is drawn.  Both runs take explicit Euler steps of
    length ``h`` (reduced to ``1 / |A^T A|`` when needed for stability):
    the flow evaluates the full subgradient each step, the mini-batch run
    only the gradient of the batch drawn for the current segment.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for d in sizes:
        p = _random_sparse(int(d), rng)
        L = float(np.linalg.eigvalsh(p.gram)[-1])
        step = min(h, 1.0 / L)
        n = max(1, math.ceil(T / step - 1e-9))
        sys = sparse.build_system(p)
        sched = draw_schedule(sys, epsilon, T, seed)
        seg = np.minimum((np.arange(n) * (T / n) / epsilon).astype(int), sched.K - 1)
        branch = sched.indices[seg]
        pi1, pi2 = p.pi
        G, Atb = p.gram, p.A.T @ p.b

        def flow():
            u = np.zeros(p.dim)
            for _ in range(n):
                u = u - step * (G @ u - Atb + p.lam * np.sign(u))
            return u

        def mini():
            u = np.zeros(p.dim)
            for j in branch:
                u = u - step * ((G @ u - Atb) / pi1 if j == 0 else (p.lam / pi2) * np.sign(u))
            return u

        tf = _mean_time(flow, repeats)
        tm = _mean_time(mini, repeats)
        rows.append({"size": int(d), "flow_seconds": tf, "minibatch_seconds": tm, "ratio": tf / tm, "step": step})
    return rows


def _mean_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def write_timing(rows, out):
    w = _Writer(out)
    w.csv("timing.csv", ["size", "flow_seconds", "minibatch_seconds", "ratio"],
          [[r["size"], r["flow_seconds"], r["minibatch_seconds"], r["ratio"]] for r in rows])
    manifest = {"version": _version(), "files": w.inventory()}
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def env_threads():
    v = os.environ.get("MBFLOW_THREADS")
    return int(v) if v and v.isdigit() else None
