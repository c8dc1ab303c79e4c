"""Sparse inversion: ``1/2 |A u - b|^2 + lam |u|_1`` split into two batches.

Batch 1 carries the data term scaled by ``1 / pi_1`` and batch 2 the l1
term scaled by ``1 / pi_2``, so each mini-batch segment has a closed form:
a linear flow for batch 1 and a uniform shrink toward zero for batch 2.
"""

from dataclasses import dataclass
import math

import numpy as np

from .convex import CompositePotential, QuadraticPotential, soft_threshold, weighted_l1
from .core import BatchSystem, Trajectory, evaluation_grid
from .exceptions import SolverError

__all__ = [
    "LassoResult",
    "SparseProblem",
    "build_system",
    "exact_mbd_segment",
    "gamma_bound",
    "lambda_upper_bound",
    "lasso_optimum",
    "objective",
    "default_instance",
    "sparse_flow_reference",
]


@dataclass(frozen=True, eq=False)
class SparseProblem:
    A: np.ndarray
    b: np.ndarray
    lam: float
    pi: tuple = (0.5, 0.5)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.shape != (A.shape[0],):
            raise ValueError(f"b has shape {b.shape}, A has {A.shape[0]} rows")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        pi = tuple(float(p) for p in self.pi)
        if len(pi) != 2 or min(pi) <= 0 or abs(sum(pi) - 1.0) > 1e-12:
            raise ValueError("pi must be two positive probabilities summing to 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "pi", pi)

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def gram(self):
        return self.A.T @ self.A

    def residual_gradient(self, u):
        """``A^T (A u - b)``."""
        return (np.asarray(u) @ self.A.T - self.b) @ self.A


def default_instance(pi=(0.5, 0.5)):
    A = [[1.76, 0.4], [0.98, 2.24]]
    b = [1.87, -0.98]
    return SparseProblem(A, b, 1.0, pi)


def _data_term(p, scale=1.0):
    q = QuadraticPotential(scale * p.gram, -scale * (p.A.T @ p.b), 0.5 * scale * p.b @ p.b)
    return CompositePotential(q)


def objective(p):
    """The full potential as a :class:`CompositePotential`."""
    return _data_term(p) + weighted_l1(np.full(p.dim, p.lam))


def build_system(p):
    """Two singleton batches: data term / ``pi_1`` and l1 term / ``pi_2``."""
    pi1, pi2 = p.pi
    phi1 = _data_term(p, 1.0 / pi1)
    phi2 = weighted_l1(np.full(p.dim, p.lam / pi2))
    return BatchSystem.singletons([phi1, phi2], p.pi)


def exact_mbd_segment(p, branch, v_start, duration):
    """Closed-form state after ``duration`` on a segment of batch ``branch`` (1 or 2)."""
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    pi1, pi2 = p.pi
    v_start = np.asarray(v_start, dtype=float)
    if branch == 1:
        return _data_term(p, 1.0 / pi1).flow(v_start, duration)
    if branch == 2:
        return soft_threshold(v_start, p.lam * duration / pi2)
    raise ValueError(f"branch must be 1 or 2, got {branch!r}")


def sparse_flow_reference(p, u0, T, h=0.01, mode="forward-backward", times=None):
    """Time-stepped sparse inversion flow.

    ``mode="forward-backward"`` takes an explicit step on the data term and
    soft-thresholds; ``mode="explicit"`` steps along the minimal-norm
    subgradient (plain explicit Euler).  Without ``times`` the states at the
    uniform nodes ``k h`` are returned; otherwise every requested node is hit
    exactly with sub-steps no longer than ``h``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    L = float(np.linalg.eigvalsh(p.gram)[-1]) if p.dim else 0.0
    if mode == "explicit" and h * L >= 2:
        raise ValueError(f"explicit step too large: h*|A^T A| = {h * L:.3g} >= 2")
    if mode not in ("forward-backward", "explicit"):
        raise ValueError(f"unknown mode {mode!r}")
    full = objective(p)
    u = np.asarray(u0, dtype=float).copy()

    def step(u, dt):
        if mode == "explicit":
            return u - dt * full.subgradient(u)
        return soft_threshold(u - dt * p.residual_gradient(u), dt * p.lam)

    if times is None:
        n = max(1, round(T / h))
        times = np.linspace(0.0, T, n + 1)
    else:
        times = np.asarray(times, dtype=float)
    states = np.empty((times.size, u.size))
    states[0] = u
    for k in range(1, times.size):
        dt_total = times[k] - times[k - 1]
        n = max(1, math.ceil(dt_total / h - 1e-9))
        dt = dt_total / n
        for _ in range(n):
            u = step(u, dt)
        states[k] = u
    return Trajectory(times, states, "gradient-flow", {"mode": mode, "step": h})


@dataclass
class LassoResult:
    u: np.ndarray
    kkt_residual: float
    certificate: np.ndarray
    sweeps: int


def _kkt(p, u):
    r = -p.residual_gradient(u)
    nz = u != 0
    per = np.where(nz, np.abs(r - p.lam * np.sign(u)), np.maximum(np.abs(r) - p.lam, 0.0))
    return per


def lasso_optimum(p, tol=1e-10, max_sweeps=200_000):
    """Minimizer by cyclic coordinate descent, with a KKT certificate.

    ``certificate[i]`` states that ``-[A^T (A u - b)]_i`` lies in
    ``lam * d|u_i|`` up to ``tol``.
    """
    A, b, lam = p.A, p.b, p.lam
    col = np.sum(A * A, axis=0)
    if np.any(col == 0):
        raise ValueError("A has a zero column")
    u = np.zeros(p.dim)
    resid = b - A @ u
    for sweep in range(1, max_sweeps + 1):
        for i in range(p.dim):
            rho = A[:, i] @ resid + col[i] * u[i]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col[i]
            if new != u[i]:
                resid -= A[:, i] * (new - u[i])
                u[i] = new
        per = _kkt(p, u)
        if per.max() <= tol:
            return LassoResult(u, float(per.max()), per <= tol, sweep)
    raise SolverError(f"coordinate descent did not reach KKT residual {tol:g} in {max_sweeps} sweeps")


def gamma_bound(p, u):
    """``(pi_2^2 / pi_1) |A^T (A u - b)|^2 + (pi_1^2 / pi_2) (lam d)^2``."""
    pi1, pi2 = p.pi
    g = p.residual_gradient(u)
    return float(pi2 ** 2 / pi1 * g @ g + pi1 ** 2 / pi2 * (p.lam * p.dim) ** 2)


def lambda_upper_bound(p, u):
    """A bound that does hold for the variance of the two-batch split.

    With ``g = A^T (A u - b)`` and ``eta`` the l1 part of the minimal-norm
    subgradient, the variance equals
    ``|sqrt(pi_2/pi_1) g - sqrt(pi_1/pi_2) eta|^2``, hence is at most
    ``2 (pi_2/pi_1) |g|^2 + 2 (pi_1/pi_2) lam^2 d``.
    """
    pi1, pi2 = p.pi
    g = p.residual_gradient(u)
    return float(2 * pi2 / pi1 * g @ g + 2 * pi1 / pi2 * p.lam ** 2 * p.dim)


def default_grid(T, epsilon):
    return evaluation_grid(T, epsilon)
