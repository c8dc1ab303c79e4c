"""Penalized parabolic obstacle problem with randomized domain decomposition.

The state is a grid function on the interior nodes of ``[-1, 1]^2`` with
homogeneous Dirichlet data.  The reference dynamics are backward Euler steps
of

    u_t = div(grad u) + f + (1/delta) m_s(psi - u),

where ``m_s(x) = (x + sqrt(x^2 + s^2)) / 2`` smooths ``max(x, 0)``.  The
randomized scheme replaces the diffusion and source by one subdomain's share
``div(chi_B grad u) + chi_B f`` per step and keeps the penalty in full.

Subdomain weights are normalized by the sub-potential weights ``p_i``
(``chi_B = |B|^{-1} sum_{i in B} chi_i / p_i``), so the expected operator is
the full Laplacian and a single batch holding every subdomain reproduces the
reference step exactly.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .core import (
    ConvergenceReport,
    ErrorCurve,
    Trajectory,
    _default_threads,
    _draw_indices,
    _n_segments,
    evaluation_grid,
    report_from_curves,
    sweep_grid,
)
from .exceptions import BatchSystemError, SolverError

__all__ = [
    "DDSystem",
    "Grid2D",
    "ObstacleSpec",
    "PartitionOfUnity",
    "build_partition",
    "dd_minimizing_step",
    "dd_trajectory",
    "discrete_energy",
    "obstacle_residual",
    "default_spec",
    "penalized_step",
    "projected_gauss_seidel",
    "ramp",
    "reference_trajectory",
    "run_dd_experiment",
    "two_paraboloid_obstacle",
    "weighted_laplacian",
]

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50


@dataclass(frozen=True, eq=False)
class Grid2D:
    """``N x N`` interior nodes of ``[-1, 1]^2``, flattened row-major (``y`` major)."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 4:
            raise ValueError(f"N must be an integer >= 4, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def spacing(self):
        return 2.0 / (self.N + 1)

    @property
    def size(self):
        return self.N * self.N

    @property
    def axis(self):
        """Interior node coordinates along one axis."""
        return -1.0 + self.spacing * np.arange(1, self.N + 1)

    @property
    def full_axis(self):
        """Node coordinates including the two boundary nodes."""
        return -1.0 + self.spacing * np.arange(self.N + 2)

    def mesh(self, full=False):
        a = self.full_axis if full else self.axis
        X, Y = np.meshgrid(a, a)  # rows vary in y, columns in x
        return X, Y

    def coords(self):
        X, Y = self.mesh()
        return X.ravel(), Y.ravel()

    def evaluate(self, fn, full=False):
        X, Y = self.mesh(full)
        out = np.broadcast_to(np.asarray(fn(X, Y), dtype=float), X.shape)
        return out.copy() if full else out.ravel().copy()

    def l2_norm(self, v):
        """Discrete L2 norm: ``spacing * |v|``."""
        return self.spacing * float(np.linalg.norm(v))


def two_paraboloid_obstacle(x, y):
    """Two inverted paraboloids of radius 1/2 centred at ``(+-1/2, 0)``, zero elsewhere."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    left = 4 * (x + 0.5) ** 2 + 4 * y ** 2
    right = 4 * (x - 0.5) ** 2 + 4 * y ** 2
    return np.where(left < 1, -left, np.where(right < 1, -right, 0.0))


@dataclass(frozen=True, eq=False)
class ObstacleSpec:
    grid: Grid2D
    psi: np.ndarray
    f: np.ndarray
    u0: np.ndarray
    delta: float = 1e-8
    s: float = 1e-10
    T: float = 0.5

    def __post_init__(self):
        n = self.grid.size
        for name in ("psi", "f", "u0"):
            v = np.asarray(getattr(self, name), dtype=float)
            v = np.full(n, float(v)) if v.ndim == 0 else v.ravel()
            if v.size != n:
                raise ValueError(f"{name} must have {n} entries, got {v.size}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.delta <= 0 or self.s <= 0 or self.T <= 0:
            raise ValueError("delta, s and T must be positive")
        ring = two_sided_ring(self.grid, self.psi)
        if ring.max() > 0:
            raise ValueError("the obstacle must be nonpositive next to the boundary")


def two_sided_ring(grid, v):
    """Values of a grid function on the outermost ring of interior nodes."""
    V = np.asarray(v).reshape(grid.N, grid.N)
    return np.concatenate([V[0], V[-1], V[:, 0], V[:, -1]])


def default_spec(grid=None, delta=1e-8, s=1e-10, T=0.5):
    """Two-paraboloid obstacle, ``f = -1``, ``u0 = 0``."""
    grid = grid or Grid2D(20)
    return ObstacleSpec(grid, grid.evaluate(two_paraboloid_obstacle), -1.0, 0.0, delta, s, T)


# ---------------------------------------------------------------------------
# partition of unity and operators


def ramp(x, w=0.1):
    """0 left of ``-w``, 1 right of ``w``, linear in between."""
    return np.clip((np.asarray(x, dtype=float) + w) / (2 * w), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """Weights ``chi_1..chi_4`` on the full node set, shape ``(4, N+2, N+2)``.

    Order: lower-left, lower-right, upper-left, upper-right.
    """

    grid: Grid2D
    weights: np.ndarray
    halfwidth: float

    @property
    def m(self):
        return self.weights.shape[0]

    def interior(self, i):
        return self.weights[i][1:-1, 1:-1].ravel()


def build_partition(grid, ramp_halfwidth=0.1):
    if not 0 < ramp_halfwidth < 1:
        raise ValueError("ramp_halfwidth must lie in (0, 1)")
    X, Y = grid.mesh(full=True)
    hx, hy = ramp(X, ramp_halfwidth), ramp(Y, ramp_halfwidth)
    chis = np.stack([(1 - hx) * (1 - hy), hx * (1 - hy), (1 - hx) * hy, hx * hy])
    return PartitionOfUnity(grid, chis, float(ramp_halfwidth))


def weighted_laplacian(grid, chi=1.0):
    """Five-point ``div(chi grad u)`` with Dirichlet boundary.

    ``chi`` is a scalar or an array over the full ``(N+2, N+2)`` node set;
    each face uses the mean of ``chi`` at its two end nodes.
    """
    N, h = grid.N, grid.spacing
    C = np.broadcast_to(np.asarray(chi, dtype=float), (N + 2, N + 2))
    if np.any(C < 0):
        raise ValueError("weights must be nonnegative")
    # face coefficients: east faces between columns c and c+1, north faces between rows r and r+1
    east = 0.5 * (C[1:-1, :-1] + C[1:-1, 1:])  # (N, N+1)
    north = 0.5 * (C[:-1, 1:-1] + C[1:, 1:-1])  # (N+1, N)
    idx = np.arange(N * N).reshape(N, N)
    diag = -(east[:, :-1] + east[:, 1:] + north[:-1, :] + north[1:, :])
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    # horizontal couplings
    a = east[:, 1:-1]
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [a.ravel(), a.ravel()]
    # vertical couplings
    b = north[1:-1, :]
    rows += [idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols += [idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals += [b.ravel(), b.ravel()]
    L = sp.coo_matrix(
        (np.concatenate(vals) / h ** 2, (np.concatenate(rows), np.concatenate(cols))),
        shape=(N * N, N * N),
    )
    return L.tocsr()


# ---------------------------------------------------------------------------
# implicit steps


def smooth_max(x, s):
    return 0.5 * (x + np.hypot(x, s))


def _smooth_max_slope(x, s):
    return 0.5 * (1.0 + x / np.hypot(x, s))


def _smooth_max_integral(x, s):
    # antiderivative of smooth_max; asinh avoids the cancellation in log(x + r)
    return 0.25 * (x * x + x * np.hypot(x, s) + s * s * np.arcsinh(x / s))


def _implicit_solve(w_prev, tau, L, source, spec, tol=NEWTON_TOL, max_iter=NEWTON_MAXITER):
    """Newton solve of ``w - w_prev = tau (L w + source + m_s(psi - w) / delta)``.

    Stops when the scaled residual ``|F|_inf / (1 + |w|_inf)`` is at most
    ``tol`` or the Newton correction has shrunk to rounding level.
    """
    n = w_prev.size
    I = sp.identity(n, format="csc")
    base = (I - tau * L).tocsc()
    k = tau / spec.delta
    w = w_prev.copy()
    lu, pattern = None, None
    history = []
    for _ in range(max_iter + 1):
        gap = spec.psi - w
        pen = smooth_max(gap, spec.s)
        F = w - w_prev - tau * (L @ w + source) - k * pen
        res = float(np.max(np.abs(F))) / (1.0 + float(np.max(np.abs(w))))
        history.append(res)
        if res <= tol:
            return w, history
        if len(history) > max_iter:
            break
        d = _smooth_max_slope(gap, spec.s)
        if lu is None or not np.array_equal(d, pattern):
            lu = splu((base + sp.diags(k * d, format="csc")).tocsc())
            pattern = d
        dw = lu.solve(F)
        w = w - dw
        # with tau / delta large the residual floor is set by rounding in the
        # penalty term; a correction at machine precision means convergence
        if np.max(np.abs(dw)) <= 4 * np.finfo(float).eps * (1.0 + np.max(np.abs(w))):
            return w, history
    raise SolverError(f"Newton did not reach residual {tol:g} in {max_iter} iterations", history=history)


def penalized_step(state, h_time, spec, L=None):
    """One backward Euler step of the full penalized problem."""
    if h_time <= 0:
        raise ValueError("h_time must be positive")
    L = weighted_laplacian(spec.grid) if L is None else L
    w, _ = _implicit_solve(np.asarray(state, dtype=float), h_time, L, spec.f, spec)
    return w


class DDSystem:
    """Batches of subdomains with their averaged operators.

    ``batches`` are lists of 0-based subdomain indices drawn with
    probabilities ``probs``; the sub-potential weights are implied by
    ``p_i = sum_{j : i in B_j} pi_j / |B_j|``.
    """

    def __init__(self, spec, partition, batches=None, probs=None):
        m = partition.m
        batches = [[i] for i in range(m)] if batches is None else [list(b) for b in batches]
        probs = np.full(len(batches), 1.0 / len(batches)) if probs is None else np.asarray(probs, float)
        if probs.shape != (len(batches),) or np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-12:
            raise BatchSystemError("prob_sum", "batch probabilities must be positive and sum to 1")
        if any(len(b) == 0 for b in batches):
            raise BatchSystemError("empty_batch", "every batch needs at least one subdomain")
        p = np.zeros(m)
        for b, q in zip(batches, probs):
            for i in b:
                if not 0 <= i < m:
                    raise BatchSystemError("shape", f"subdomain index {i} out of range")
                p[i] += q / len(b)
        if np.any(p == 0):
            raise BatchSystemError("coverage", "every subdomain must belong to some batch")
        self.spec = spec
        self.partition = partition
        self.batches = batches
        self.probs = probs
        self.weights = p
        self.chi = []
        self.operators = []
        self.sources = []
        for b in batches:
            chi = sum(partition.weights[i] / p[i] for i in b) / len(b)
            self.chi.append(chi)
            self.operators.append(weighted_laplacian(spec.grid, chi))
            self.sources.append(chi[1:-1, 1:-1].ravel() * spec.f)
        self.full_operator = weighted_laplacian(spec.grid)

    @property
    def m(self):
        return len(self.batches)

    def step(self, state, j, epsilon):
        if not 0 <= j < self.m:
            raise ValueError(f"batch index {j} out of range")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        w, _ = _implicit_solve(np.asarray(state, dtype=float), epsilon, self.operators[j], self.sources[j], self.spec)
        return w


def dd_minimizing_step(state, j, epsilon, spec, partition, batches=None, probs=None):
    """One proximal step of batch ``j`` (0-based)."""
    return DDSystem(spec, partition, batches, probs).step(state, j, epsilon)


def discrete_energy(spec, u, L=None):
    """``h^2 [ -u.Lu/2 - f.u + sum M_s(psi - u) / delta ]`` with ``M_s' = m_s``."""
    L = weighted_laplacian(spec.grid) if L is None else L
    u = np.asarray(u, dtype=float)
    e = -0.5 * u @ (L @ u) - spec.f @ u + np.sum(_smooth_max_integral(spec.psi - u, spec.s)) / spec.delta
    return spec.grid.spacing ** 2 * float(e)


# ---------------------------------------------------------------------------
# stationary oracle


def projected_gauss_seidel(spec, tol=1e-12, max_sweeps=100_000, omega=1.0):
    """Stationary obstacle problem ``-Lu >= f, u >= psi`` with complementarity."""
    L = weighted_laplacian(spec.grid).tocsr()
    diag = L.diagonal()
    u = np.maximum(spec.psi, 0.0)
    indptr, indices, data = L.indptr, L.indices, L.data
    for _ in range(max_sweeps):
        change = 0.0
        for i in range(u.size):
            row = slice(indptr[i], indptr[i + 1])
            off = data[row] @ u[indices[row]] - diag[i] * u[i]
            # solve  -(diag u_i + off) = f_i  then project
            target = -(spec.f[i] + off) / diag[i]
            new = max(spec.psi[i], u[i] + omega * (target - u[i]))
            change = max(change, abs(new - u[i]))
            u[i] = new
        if change <= tol:
            return u
    raise SolverError(f"projected Gauss-Seidel did not settle to {tol:g}")


def obstacle_residual(spec, u):
    """Largest violation of the discrete complementarity conditions."""
    L = weighted_laplacian(spec.grid)
    r = -(L @ u) - spec.f
    gap = u - spec.psi
    return float(max(np.max(np.maximum(-r, 0)), np.max(np.maximum(-gap, 0)), np.max(np.abs(np.minimum(r, gap)))))


# ---------------------------------------------------------------------------
# trajectories and the convergence study


def reference_trajectory(spec, times, step):
    """Backward Euler with sub-steps no longer than ``step`` hitting every node."""
    times = np.asarray(times, dtype=float)
    L = weighted_laplacian(spec.grid)
    states = np.empty((times.size, spec.grid.size))
    u = spec.u0.copy()
    states[0] = u
    for k in range(1, times.size):
        span = times[k] - times[k - 1]
        n = max(1, math.ceil(span / step - 1e-9))
        for _ in range(n):
            u, _ = _implicit_solve(u, span / n, L, spec.f, spec)
        states[k] = u
    return Trajectory(times, states, "gradient-flow", {"step": step})


def dd_trajectory(system, indices, epsilon, times):
    """Randomized minimizing movement ``w(t) = w_{k_t}`` for one index sequence."""
    K = len(indices)
    W = np.empty((K + 1, system.spec.grid.size))
    W[0] = system.spec.u0
    for k, j in enumerate(indices):
        W[k + 1] = system.step(W[k], int(j), epsilon)
    kt = np.minimum(np.floor(np.asarray(times) / epsilon + 1e-9).astype(int) + 1, K)
    return W[kt]


@dataclass
class ObstacleReport:
    report: ConvergenceReport
    reference: Trajectory
    penetration: float
    penetration_constant: float
    failures: list = field(default_factory=list)


def run_dd_experiment(spec, epsilons, R=8, seed=0, partition=None, batches=None, probs=None,
                      reference_step=None, threads=None, system=None):
    """Monte-Carlo study of the randomized minimizing movement.

    Errors are measured in the discrete L2 norm and the slope is fitted to
    the sup over time of the mean (not squared) error.  A realization whose
    Newton solve fails is dropped and its diagnostic recorded.
    """
    epsilons = np.asarray(epsilons, dtype=float)
    if epsilons.size < 3 or np.any(np.diff(epsilons) >= 0) or np.any(epsilons <= 0):
        raise ValueError("epsilons must be positive, strictly decreasing, at least three values")
    if R < 2:
        raise ValueError("at least two realizations are needed")
    if system is None:
        partition = partition or build_partition(spec.grid)
        system = DDSystem(spec, partition, batches, probs)
    T = spec.T
    step = reference_step or float(epsilons.min()) / 16
    grid = sweep_grid(T, epsilons)
    reference = reference_trajectory(spec, grid, step)
    penetration = float(np.max(np.maximum(spec.psi[None] - reference.states, 0.0)))
    seeds = tuple(seed + r for r in range(R))
    weight = spec.grid.spacing ** 2
    threads = threads or _default_threads()
    failures = []
    curves = []
    for eps in epsilons:
        times = evaluation_grid(T, eps)
        ref = reference.lookup(times)
        K = _n_segments(eps, T)

        def run(s, eps=eps, times=times, K=K):
            try:
                return dd_trajectory(system, _draw_indices(system.probs, K, s), eps, times)
            except SolverError as exc:
                failures.append({"epsilon": float(eps), "seed": s, "error": str(exc), "history": exc.history})
                return None

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                paths = list(pool.map(run, seeds))
        else:
            paths = [run(s) for s in seeds]
        good = [p for p in paths if p is not None]
        if len(good) < 2:
            raise SolverError(f"fewer than two realizations succeeded at epsilon={eps:g}")
        P = np.stack(good)
        penetration = max(penetration, float(np.max(np.maximum(spec.psi[None, None] - P, 0.0))))
        diff = P - ref[None]
        sq = weight * np.sum(diff * diff, axis=-1)
        norm = np.sqrt(sq)
        n = len(good)
        curves.append(ErrorCurve(
            times, sq.mean(axis=0), sq.std(axis=0, ddof=1) / math.sqrt(n),
            norm.mean(axis=0), norm.std(axis=0, ddof=1) / math.sqrt(n),
            n, float(eps), "minimizing-movement", seeds,
        ))
    failures.sort(key=lambda d: (-d["epsilon"], d["seed"]))
    report = report_from_curves(epsilons, curves, "norm")
    return ObstacleReport(report, reference, penetration, penetration / math.sqrt(spec.delta), failures)
