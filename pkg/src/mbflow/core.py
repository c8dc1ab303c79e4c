"""Batch systems, random schedules and the three integrators.

A :class:`BatchSystem` holds sub-potentials ``phi_1..phi_n`` with weights
``p_i`` and batches ``B_1..B_m`` drawn with probabilities ``pi_j``.  The
batch potential of ``B`` is the plain average of its members, and the
weights must satisfy ``p_i = sum_{j: i in B_j} pi_j / |B_j|`` so that the
probability-weighted batch potentials average back to the full potential.

Potentials are duck-typed.  The integrators need ``prox(x, tau)``,
``subgradient(u)`` and ``value(u)``; ``flow(u, t)`` (with ``has_flow``) and
``explicit_step(u, dt)`` are used when present.  All of them act rowwise on
stacks of states, so many realizations advance together.

Batch indices are 0-based throughout.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
import math
import os

import numpy as np

from .exceptions import BatchSystemError, DomainError

__all__ = [
    "BatchSchedule",
    "BatchSystem",
    "ConvergenceReport",
    "ErrorCurve",
    "SolverOptions",
    "Trajectory",
    "ValidationResult",
    "VarianceSplit",
    "convergence_sweep",
    "draw_schedule",
    "evaluation_grid",
    "expectation_error",
    "fit_slope",
    "gradient_flow",
    "mini_batch_flow",
    "minimizing_movement",
    "pathwise_bound",
    "per_example_variance",
    "report_from_curves",
    "validate_batch_system",
    "variance_lambda",
    "variance_ratio_report",
    "variance_split",
]

SUM_TOL = 1e-12
SCHEMES = ("gradient-flow", "mini-batch", "minimizing-movement")
REALIZATION_BLOCK = 16


# ---------------------------------------------------------------------------
# batch systems


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    relation: str = None
    message: str = ""

    def __bool__(self):
        return self.ok


class BatchSystem:
    """Sub-potentials grouped into randomly selected batches.

    Parameters
    ----------
    sub_potentials : sequence
        ``n`` potentials.
    weights : array_like
        ``p_1..p_n``, nonnegative, summing to one.
    batches : sequence of sequences of int
        ``m`` nonempty index sets over ``0..n-1``.
    batch_probs : array_like
        ``pi_1..pi_m``, positive, summing to one.
    """

    def __init__(self, sub_potentials, weights, batches, batch_probs):
        self.sub_potentials = tuple(sub_potentials)
        self.weights = np.asarray(weights, dtype=float)
        self.batches = tuple(tuple(int(i) for i in B) for B in batches)
        self.batch_probs = np.asarray(batch_probs, dtype=float)

    @classmethod
    def singletons(cls, sub_potentials, probs):
        """One batch per sub-potential; then ``p = pi``."""
        probs = np.asarray(probs, dtype=float)
        return cls(sub_potentials, probs, [(i,) for i in range(len(probs))], probs)

    @classmethod
    def single_batch(cls, sub_potentials):
        """All sub-potentials in one batch, uniform weights."""
        n = len(sub_potentials)
        return cls(sub_potentials, np.full(n, 1.0 / n), [tuple(range(n))], [1.0])

    @property
    def n(self):
        return len(self.sub_potentials)

    @property
    def m(self):
        return len(self.batches)

    @property
    def dim(self):
        return self.sub_potentials[0].dim

    def __repr__(self):
        return f"BatchSystem(n={self.n}, m={self.m}, pi={np.round(self.batch_probs, 4).tolist()})"

    def check(self):
        result = validate_batch_system(self)
        if not result:
            raise BatchSystemError(result.relation, result.message)
        return self

    @cached_property
    def batch_potentials(self):
        return tuple(
            sum((1.0 / len(B)) * self.sub_potentials[i] for i in B) for B in self.batches
        )

    def batch_potential(self, j):
        return self.batch_potentials[j]

    @cached_property
    def full_potential(self):
        return sum(p * phi for p, phi in zip(self.weights, self.sub_potentials))


def validate_batch_system(sys):
    """Check the structural relations of a batch system.

    Returns a :class:`ValidationResult`; on failure ``relation`` names the
    first violated check.
    """
    p, pi = sys.weights, sys.batch_probs
    n = sys.n
    if p.shape != (n,) or pi.shape != (len(sys.batches),) or n == 0 or len(sys.batches) == 0:
        return ValidationResult(False, "shape", f"expected {n} weights and {len(sys.batches)} batch probabilities")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SUM_TOL:
        return ValidationResult(False, "weight_sum", f"weights must be nonnegative and sum to 1 (sum={p.sum():.15g})")
    if abs(pi.sum() - 1.0) > SUM_TOL:
        return ValidationResult(False, "prob_sum", f"batch probabilities sum to {pi.sum():.15g}")
    if np.any(pi <= 0):
        return ValidationResult(False, "prob_positive", "every batch probability must be positive")
    for j, B in enumerate(sys.batches):
        if not B:
            return ValidationResult(False, "empty_batch", f"batch {j} is empty")
        if any(i < 0 or i >= n for i in B):
            return ValidationResult(False, "coverage", f"batch {j} refers to an index outside 0..{n - 1}")
    covered = set().union(*sys.batches)
    if covered != set(range(n)):
        missing = sorted(set(range(n)) - covered)
        return ValidationResult(False, "coverage", f"indices {missing} belong to no batch")
    implied = np.zeros(n)
    for pj, B in zip(pi, sys.batches):
        for i in B:
            implied[i] += pj / len(B)
    bad = np.flatnonzero(np.abs(implied - p) > SUM_TOL)
    if bad.size:
        i = bad[0]
        return ValidationResult(
            False, "compatibility",
            f"p[{i}]={p[i]:.15g} but batch probabilities imply {implied[i]:.15g}",
        )
    return ValidationResult(True)


# ---------------------------------------------------------------------------
# schedules


def _draw_indices(probs, K, seed):
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    u = gen.random(K)
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


@dataclass(frozen=True)
class BatchSchedule:
    epsilon: float
    horizon: float
    indices: np.ndarray
    seed: int = None

    @property
    def K(self):
        return len(self.indices)

    @property
    def switch_times(self):
        return self.epsilon * np.arange(1, self.K + 1)


def _n_segments(epsilon, T):
    return max(1, math.ceil(T / epsilon - 1e-9))


def draw_schedule(sys, epsilon, T, seed):
    """Draw ``ceil(T / epsilon)`` i.i.d. batch indices with ``P(j) = pi_j``."""
    if epsilon <= 0 or T <= 0:
        raise ValueError("epsilon and T must be positive")
    if epsilon > T:
        raise ValueError("epsilon must not exceed the horizon")
    sys.check()
    K = _n_segments(epsilon, T)
    return BatchSchedule(float(epsilon), float(T), _draw_indices(sys.batch_probs, K, seed), seed)


# ---------------------------------------------------------------------------
# trajectories and integrators


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    scheme: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time nodes must start at 0 and increase strictly")
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per time node required")

    @property
    def final(self):
        return self.states[-1]

    def lookup(self, times, rtol=1e-9):
        """States at the given nodes, which must belong to this trajectory's grid."""
        times = np.asarray(times, dtype=float)
        pos = np.clip(np.searchsorted(self.times, times), 0, self.times.size - 1)
        left = np.clip(pos - 1, 0, None)
        pick = np.where(np.abs(self.times[left] - times) < np.abs(self.times[pos] - times), left, pos)
        scale = max(self.times[-1], 1.0)
        if np.any(np.abs(self.times[pick] - times) > rtol * scale):
            raise ValueError("requested times are not nodes of the reference trajectory")
        return self.states[pick]


@dataclass
class SolverOptions:
    """Integrator choice.

    ``method`` is ``"auto"`` (exact evolver when available, else implicit),
    ``"exact"``, ``"implicit"`` (proximal sub-steps) or ``"explicit"``
    (projected explicit Euler sub-steps).  ``inner_step`` defaults to
    ``min(epsilon / 10, 1e-3)``; ``reference_step`` is the step of the
    reference flow and defaults to ``1e-3``.
    """

    method: str = "auto"
    inner_step: float = None
    reference_step: float = None

    def __post_init__(self):
        if self.method not in ("auto", "exact", "implicit", "explicit"):
            raise ValueError(f"unknown method {self.method!r}")

    def inner(self, epsilon):
        return self.inner_step if self.inner_step else min(epsilon / 10.0, 1e-3)

    def reference(self):
        return self.reference_step if self.reference_step else 1e-3


def evolve(potential, U, duration, method="auto", step=1e-3):
    """Advance states ``U`` by ``duration`` under the flow of ``potential``."""
    if duration <= 0:
        return U
    if method in ("auto", "exact") and getattr(potential, "has_flow", False):
        return potential.flow(U, duration)
    if method == "exact":
        raise ValueError(f"{potential!r} has no exact evolver")
    n = max(1, math.ceil(duration / step - 1e-9))
    dt = duration / n
    if method == "explicit":
        for _ in range(n):
            U = potential.explicit_step(U, dt)
    else:
        for _ in range(n):
            U = potential.prox(U, dt)
    return U


def evaluation_grid(T, epsilon=None, n_uniform=201):
    """Uniform nodes on ``[0, T]`` merged with the switching times ``k epsilon``."""
    uniform = np.linspace(0.0, T, n_uniform)
    if epsilon is None:
        return uniform
    K = _n_segments(epsilon, T)
    switches = epsilon * np.arange(0, K + 1)
    switches = switches[switches < T - 1e-12 * T]
    near = np.abs(uniform[:, None] - switches[None, :]).min(axis=1) <= 1e-12 * max(T, 1.0)
    grid = np.concatenate([switches, uniform[~near]])
    grid = np.unique(grid)
    grid[-1] = T
    return grid


def _default_times(T, epsilon=None, times=None):
    if times is not None:
        times = np.asarray(times, dtype=float)
        if epsilon is not None:
            grid = evaluation_grid(T, epsilon)
            times = np.unique(np.concatenate([times, grid]))
        return times
    return evaluation_grid(T, epsilon)


def gradient_flow(potential, u0, T, times=None, options=None):
    """Reference solution of ``u' in -d phi(u)`` sampled at ``times``."""
    options = options or SolverOptions()
    times = _default_times(T, None, times)
    u0 = np.asarray(u0, dtype=float)
    if hasattr(potential, "in_domain") and not np.all(potential.in_domain(u0)):
        raise DomainError("initial state outside the domain of the potential")
    method = "implicit" if options.method == "auto" else options.method
    if options.method == "auto" and getattr(potential, "has_flow", False):
        method = "exact"
    states = np.empty((times.size,) + u0.shape)
    u = u0.copy()
    states[0] = u
    for k in range(1, times.size):
        u = evolve(potential, u, times[k] - times[k - 1], method, options.reference())
        states[k] = u
    return Trajectory(times, states, "gradient-flow", {"method": method, "step": options.reference()})


def _segment_of(times, epsilon, K):
    return np.minimum(np.floor(times / epsilon + 1e-9).astype(int), K - 1)


def _apply_grouped(fn, sys, U, idx):
    out = np.empty_like(U)
    for j in np.unique(idx):
        mask = idx == j
        out[mask] = fn(sys.batch_potential(j), U[mask])
    return out


def _mini_batch_paths(sys, indices, epsilon, U0, times, options):
    """Piecewise flows for stacked schedules; returns ``(R, N, d)``."""
    R, K = indices.shape
    h = options.inner(epsilon)
    method = options.method
    out = np.empty((R, times.size) + U0.shape[1:])
    U = U0.copy()
    out[:, 0] = U
    seg = _segment_of(times[:-1], epsilon, K)
    for k in range(1, times.size):
        dt = times[k] - times[k - 1]
        U = _apply_grouped(lambda phi, X: evolve(phi, X, dt, method, h), sys, U, indices[:, seg[k - 1]])
        out[:, k] = U
    return out


def _minimizing_movement_paths(sys, indices, epsilon, U0, times):
    """Proximal sequences, read off as ``w(t) = w_{k_t}``; returns ``(R, N, d)``."""
    R, K = indices.shape
    W = np.empty((R, K + 1) + U0.shape[1:])
    W[:, 0] = U0
    for k in range(K):
        W[:, k + 1] = _apply_grouped(lambda phi, X: phi.prox(X, epsilon), sys, W[:, k], indices[:, k])
    # k_t = min{k : t < k eps}; the horizon itself takes the left limit
    kt = np.minimum(np.floor(times / epsilon + 1e-9).astype(int) + 1, K)
    return W[:, kt]


def _check_state(sys, u0):
    for j, phi in enumerate(sys.batch_potentials):
        if hasattr(phi, "in_domain") and not np.all(phi.in_domain(u0)):
            raise DomainError(f"initial state outside the domain of batch potential {j}")


def mini_batch_flow(sys, schedule, u0, times=None, options=None):
    """Mini-batch descent flow for one realized schedule.

    On segment ``[(k-1) eps, k eps)`` the state follows the gradient flow of
    batch ``schedule.indices[k-1]``.
    """
    sys.check()
    options = options or SolverOptions()
    u0 = np.asarray(u0, dtype=float)
    _check_state(sys, u0)
    times = _default_times(schedule.horizon, schedule.epsilon, times)
    paths = _mini_batch_paths(sys, schedule.indices[None, :], schedule.epsilon, u0[None], times, options)
    meta = {"epsilon": schedule.epsilon, "inner_step": options.inner(schedule.epsilon), "seed": schedule.seed}
    return Trajectory(times, paths[0], "mini-batch", meta)


def minimizing_movement(sys, schedule, u0, times=None):
    """Randomized minimizing movement ``w_k = prox_{eps phi_{B_{j_k}}}(w_{k-1})``.

    The trajectory is piecewise constant: ``w(t) = w_k`` on
    ``[(k-1) eps, k eps)``; at the horizon it takes the left limit.
    """
    sys.check()
    u0 = np.asarray(u0, dtype=float)
    _check_state(sys, u0)
    times = _default_times(schedule.horizon, schedule.epsilon, times)
    paths = _minimizing_movement_paths(sys, schedule.indices[None, :], schedule.epsilon, u0[None], times)
    meta = {"epsilon": schedule.epsilon, "seed": schedule.seed}
    return Trajectory(times, paths[0], "minimizing-movement", meta)


# ---------------------------------------------------------------------------
# variance


@dataclass
class VarianceSplit:
    selections: np.ndarray
    minimal: np.ndarray

    def bias(self, probs):
        return probs @ self.selections - self.minimal


def variance_split(sys, u):
    """Per-batch subgradients ``xi_j(u)`` averaging to the minimal-norm subgradient.

    Kink and normal-cone selections are taken from the full potential's
    minimal-norm subgradient and shared by every batch, which makes the
    average exact.  Smooth potentials just use their gradients.
    """
    u = np.asarray(u, dtype=float)
    full = sys.full_potential
    if hasattr(full, "min_norm_parts"):
        parts = full.min_norm_parts(u)
        sel = np.array([phi.aligned_subgradient(u, parts) for phi in sys.batch_potentials])
        return VarianceSplit(sel, parts.vector)
    if getattr(full, "is_smooth", False):
        sel = np.array([phi.subgradient(u) for phi in sys.batch_potentials])
        return VarianceSplit(sel, full.subgradient(u))
    raise NotImplementedError(f"no subgradient split available for {full!r}")


def variance_lambda(sys, u, split=None):
    """``sum_j pi_j |xi_j(u) - d phi(u)°|^2``."""
    split = split or variance_split(sys, u)
    dev = split.selections - split.minimal
    return float(sys.batch_probs @ np.sum(dev * dev, axis=-1))


def per_example_variance(sys, u):
    """``sum_i p_i |eta_i(u) - d phi(u)°|^2`` over the sub-potentials themselves.

    ``eta_i`` are subgradients of the individual sub-potentials, aligned with
    the full potential's selection exactly as in :func:`variance_split`.
    """
    u = np.asarray(u, dtype=float)
    full = sys.full_potential
    if hasattr(full, "min_norm_parts"):
        parts = full.min_norm_parts(u)
        sel = np.array([phi.aligned_subgradient(u, parts) for phi in sys.sub_potentials])
        minimal = parts.vector
    else:
        sel = np.array([phi.subgradient(u) for phi in sys.sub_potentials])
        minimal = full.subgradient(u)
    dev = sel - minimal
    return float(sys.weights @ np.sum(dev * dev, axis=-1))


def variance_ratio_report(n, m, d=3, trials=20, seed=0):
    """Empirical ``Lambda / Gamma`` on random quadratic systems with ``m`` equal batches.

    Each trial draws ``n`` random quadratics, splits them into ``m``
    consecutive batches of size ``n / m`` with uniform probabilities and
    evaluates both variances at a random state.  The closed-form factor
    ``(n - m) / (m (n - 1))`` is returned alongside for comparison only.
    """
    if n % m:
        raise ValueError("m must divide n")
    rng = np.random.default_rng(seed)
    from .convex import quadratic

    ratios = []
    size = n // m
    for _ in range(trials):
        subs = []
        for _ in range(n):
            G = rng.standard_normal((d, d))
            subs.append(quadratic(G @ G.T, rng.standard_normal(d)))
        batches = [list(range(j * size, (j + 1) * size)) for j in range(m)]
        sys = BatchSystem(subs, np.full(n, 1.0 / n), batches, np.full(m, 1.0 / m))
        u = rng.standard_normal(d)
        ratios.append(variance_lambda(sys, u) / per_example_variance(sys, u))
    ratios = np.array(ratios)
    return {
        "n": n,
        "m": m,
        "mean_ratio": float(ratios.mean()),
        "min_ratio": float(ratios.min()),
        "max_ratio": float(ratios.max()),
        "closed_form_factor": (n - m) / (m * (n - 1)) if n > 1 else float("nan"),
    }


def pathwise_bound(sys, reference):
    """Deterministic bound on ``|v_eps(t) - u(t)|`` along a reference trajectory.

    ``max_j pi_j^{-1/2} sqrt(t) (int_0^t Lambda(u(s)) ds)^{1/2}`` with the
    integral by the trapezoidal rule on the reference grid.
    """
    lam = np.array([variance_lambda(sys, u) for u in reference.states])
    dt = np.diff(reference.times)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * dt * (lam[1:] + lam[:-1]))])
    return np.max(sys.batch_probs ** -0.5) * np.sqrt(reference.times * integral)


# ---------------------------------------------------------------------------
# Monte-Carlo error statistics


@dataclass
class ErrorCurve:
    times: np.ndarray
    mean_sq: np.ndarray
    std_err: np.ndarray
    mean_norm: np.ndarray
    norm_std_err: np.ndarray
    R: int
    epsilon: float
    scheme: str
    seeds: tuple = ()

    @property
    def sup_mse(self):
        return float(np.max(self.mean_sq))

    @property
    def sup_mean_norm(self):
        return float(np.max(self.mean_norm))

    def sup(self, quantity="mse"):
        vals, errs = (self.mean_sq, self.std_err) if quantity == "mse" else (self.mean_norm, self.norm_std_err)
        k = int(np.argmax(vals))
        return float(vals[k]), float(errs[k])


def _default_threads():
    try:
        return max(1, int(os.environ.get("MBFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _realization_paths(sys, u0, T, epsilon, seeds, scheme, options, times, threads):
    K = _n_segments(epsilon, T)
    indices = np.array([_draw_indices(sys.batch_probs, K, s) for s in seeds])
    U0 = np.repeat(u0[None], len(seeds), axis=0)

    def run(rows):
        if scheme == "minimizing-movement":
            return _minimizing_movement_paths(sys, indices[rows], epsilon, U0[rows], times)
        return _mini_batch_paths(sys, indices[rows], epsilon, U0[rows], times, options)

    # fixed-size blocks keep the floating-point work identical for any thread count
    rows = np.arange(len(seeds))
    chunks = [rows[i:i + REALIZATION_BLOCK] for i in range(0, rows.size, REALIZATION_BLOCK)]
    threads = threads or _default_threads()
    if threads <= 1 or len(chunks) < 2:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts, axis=0)


def _error_curve(sys, u0, T, epsilon, R, base_seed, scheme, options, reference, weight, threads, times=None,
                 keep_paths=False):
    if scheme not in ("mini-batch", "minimizing-movement"):
        raise ValueError(f"scheme must be 'mini-batch' or 'minimizing-movement', got {scheme!r}")
    options = options or SolverOptions()
    u0 = np.asarray(u0, dtype=float)
    times = evaluation_grid(T, epsilon) if times is None else times
    if reference is None:
        reference = gradient_flow(sys.full_potential, u0, T, times, options)
    ref = reference.lookup(times)
    seeds = tuple(base_seed + r for r in range(R))
    paths = _realization_paths(sys, u0, T, epsilon, seeds, scheme, options, times, threads)
    diff = (paths - ref[None]).reshape(R, times.size, -1)
    sq = weight * np.sum(diff * diff, axis=-1)
    norm = np.sqrt(sq)
    # sums run over the realization axis in index order
    mean_sq = sq.mean(axis=0)
    mean_norm = norm.mean(axis=0)
    if R > 1:
        std_err = sq.std(axis=0, ddof=1) / math.sqrt(R)
        norm_se = norm.std(axis=0, ddof=1) / math.sqrt(R)
    else:
        std_err = np.full(times.size, np.nan)
        norm_se = np.full(times.size, np.nan)
    curve = ErrorCurve(times, mean_sq, std_err, mean_norm, norm_se, R, float(epsilon), scheme, seeds)
    return (curve, paths) if keep_paths else curve


def expectation_error(sys, u0, T, epsilon, R, base_seed=0, scheme="mini-batch", options=None,
                      reference=None, weight=1.0, threads=None):
    """Monte-Carlo estimate of ``E |x_eps(t) - u(t)|^2`` on the evaluation grid.

    Realization ``r`` uses seed ``base_seed + r``.  ``reference`` may be a
    precomputed :class:`Trajectory` whose grid contains the evaluation grid;
    otherwise the full potential's gradient flow is integrated.  ``weight``
    scales squared norms (e.g. a cell area for grid functions).
    """
    if R < 2:
        raise ValueError("at least two realizations are needed for error statistics")
    sys.check()
    return _error_curve(sys, u0, T, epsilon, R, base_seed, scheme, options, reference, weight, threads)


def fit_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x`` and its standard error."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    n = lx.size
    if n > 2:
        resid = ly - A @ coef
        sxx = np.sum((lx - lx.mean()) ** 2)
        se = math.sqrt(np.sum(resid ** 2) / (n - 2) / sxx)
    else:
        se = float("nan")
    return float(coef[0]), se


@dataclass
class ConvergenceReport:
    epsilons: np.ndarray
    curves: list
    sup_values: np.ndarray
    sup_std_err: np.ndarray
    slope: float
    slope_stderr: float
    R: int
    seeds: tuple
    scheme: str
    quantity: str = "mse"
    degenerate: bool = False

    def rows(self):
        return [
            (float(e), float(v), float(s), self.R)
            for e, v, s in zip(self.epsilons, self.sup_values, self.sup_std_err)
        ]


def sweep_grid(T, epsilons, n_uniform=201):
    """Union of the evaluation grids of every epsilon in a sweep."""
    grid = np.unique(np.concatenate([evaluation_grid(T, e, n_uniform) for e in epsilons]))
    keep = np.concatenate([[True], np.diff(grid) > 1e-12 * max(T, 1.0)])
    grid = grid[keep]
    grid[-1] = T
    return grid


def convergence_sweep(sys, u0, T, epsilons, R, base_seed=0, scheme="mini-batch", options=None,
                      quantity="mse", reference=None, weight=1.0, threads=None, tol=1e-20):
    """Error statistics over a decreasing list of ``epsilon`` and the fitted rate.

    ``quantity`` selects what is fitted: ``"mse"`` (sup of the mean squared
    error) or ``"norm"`` (sup of the mean error norm).  If every sup value is
    below ``tol`` the fit is flagged degenerate and ``slope`` is ``None``.
    """
    epsilons = np.asarray(epsilons, dtype=float)
    if epsilons.size < 3 or np.any(np.diff(epsilons) >= 0) or np.any(epsilons <= 0):
        raise ValueError("epsilons must be positive, strictly decreasing, at least three values")
    if R < 2:
        raise ValueError("at least two realizations are needed")
    sys.check()
    options = options or SolverOptions()
    u0 = np.asarray(u0, dtype=float)
    if reference is None:
        grid = sweep_grid(T, epsilons)
        reference = gradient_flow(sys.full_potential, u0, T, grid, options)
    curves = [
        _error_curve(sys, u0, T, e, R, base_seed, scheme, options, reference, weight, threads)
        for e in epsilons
    ]
    return report_from_curves(epsilons, curves, quantity, tol)


def report_from_curves(epsilons, curves, quantity="mse", tol=1e-20):
    """Fit the convergence rate to precomputed error curves (one per epsilon)."""
    epsilons = np.asarray(epsilons, dtype=float)
    sups = np.array([c.sup(quantity) for c in curves])
    vals, errs = sups[:, 0], sups[:, 1]
    threshold = tol if quantity == "mse" else math.sqrt(tol)
    if np.all(vals <= threshold):
        slope, se, degenerate = None, None, True
    else:
        slope, se = fit_slope(epsilons, np.maximum(vals, threshold))
        degenerate = False
    first = curves[0]
    return ConvergenceReport(epsilons, curves, vals, errs, slope, se, first.R, first.seeds, first.scheme,
                             quantity, degenerate)
