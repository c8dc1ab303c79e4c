"""Projected gradient dynamics for a two-variable problem on a polyhedron.

The objective is

    psi(u) = 2 |u1 - ud| + 3 (u2 - yd)^2 - 2 u1 - 3 u2

over the polygon ``C``, split into three sub-potentials drawn with
probabilities ``(1/2, 1/4, 1/4)``:

    psi_1 = psi,  psi_2 = 4 |u1 - ud| - 4 u1,  psi_3 = 6 (u2 - yd)^2 - 6 u2.

These carry no probability prefactor; with one, the probability-weighted
average would not reproduce ``psi``.

Note that ``psi`` is flat in ``u1`` for ``u1 >= ud`` (the kink slope and
the linear term cancel), so minimizers form a segment whenever that segment
meets ``C``.
"""

from dataclasses import dataclass

import numpy as np

from .convex import (
    CompositePotential,
    Polyhedron,
    QuadraticPotential,
    _FaceCandidates,
    indicator,
)
from .core import BatchSystem, SolverOptions, gradient_flow, mini_batch_flow
from .exceptions import DomainError, SolverError

__all__ = [
    "ConstrainedProblem",
    "QPOptimum",
    "build_system",
    "feasible_start",
    "mbd_projected_flow",
    "default_constraint",
    "projected_euler_flow",
    "qp_optimum",
    "sub_potential",
    "sub_potential_subgrad",
]

DEFAULT_STARTS = ((8.0, 4.0), (13.0, 8.0), (20.0, 14.0))


def default_constraint():
    """``5u1+3u2<=120, 4u1+6u2<=150, u1-2u2<=0, u1>=7, u2<=15``."""
    A = [[5, 3], [4, 6], [1, -2], [-1, 0], [0, 1]]
    b = [120, 150, 0, -7, 15]
    return Polyhedron(A, b)


@dataclass(frozen=True, eq=False)
class ConstrainedProblem:
    constraint: Polyhedron
    ud: float = 10.0
    yd: float = 10.0
    probs: tuple = (0.5, 0.25, 0.25)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != 3 or min(probs) <= 0 or abs(sum(probs) - 1) > 1e-12:
            raise ValueError("probs must be three positive numbers summing to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def default(cls, ud=10.0, yd=10.0):
        return cls(default_constraint(), ud, yd)


def _term(kink_w, lin1, quad2, lin2, ud, yd):
    # kink_w |u1 - ud| + lin1 u1 + quad2 (u2 - yd)^2 + lin2 u2
    H = np.diag([0.0, 2.0 * quad2])
    c = np.array([lin1, -2.0 * quad2 * yd + lin2])
    q = QuadraticPotential(H, c, quad2 * yd * yd)
    return CompositePotential(q, [kink_w, 0.0], [ud, 0.0])


def sub_potential(p, j, constrained=False):
    """Sub-potential ``j`` in ``{1, 2, 3}``, optionally plus the indicator of ``C``."""
    coeffs = {1: (2.0, -2.0, 3.0, -3.0), 2: (4.0, -4.0, 0.0, 0.0), 3: (0.0, 0.0, 6.0, -6.0)}
    if j not in coeffs:
        raise ValueError(f"j must be 1, 2 or 3, got {j!r}")
    phi = _term(*coeffs[j], p.ud, p.yd)
    return phi + indicator(p.constraint) if constrained else phi


def objective(p, constrained=True):
    return sub_potential(p, 1, constrained)


def build_system(p):
    return BatchSystem.singletons([sub_potential(p, j, True) for j in (1, 2, 3)], p.probs)


def sub_potential_subgrad(p, j, u):
    """Minimal-norm subgradient of sub-potential ``j`` (without the constraint)."""
    return sub_potential(p, j).subgradient(np.asarray(u, dtype=float))


def feasible_start(p, u0, project_start=False):
    """Return ``u0`` if it lies in ``C``; otherwise raise or, on request, project it.

    The listed start ``(20, 14)`` violates the first two constraints, so
    experiments that use it pass ``project_start=True`` and begin from its
    projection, which lies on the boundary of ``C``.
    """
    u0 = np.asarray(u0, dtype=float)
    if p.constraint.contains(u0):
        return u0
    if project_start:
        return p.constraint.project(u0)
    raise DomainError(f"initial point {u0.tolist()} violates the constraints")


def projected_euler_flow(p, u0, T, h=0.01, times=None, project_start=False):
    """Explicit Euler on the full objective followed by projection onto ``C``.

    Each step moves along the minimal-norm subgradient of the unconstrained
    objective and projects back, the classical projected gradient update.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    u0 = feasible_start(p, u0, project_start)
    if times is None:
        times = np.linspace(0.0, T, max(1, round(T / h)) + 1)
    opts = SolverOptions(method="explicit", reference_step=h)
    return gradient_flow(objective(p), u0, T, times, opts)


def mbd_projected_flow(p, schedule, u0, h=0.01, times=None, project_start=False):
    """Mini-batch projected flow: per segment, projected Euler on the drawn sub-potential."""
    if h <= 0:
        raise ValueError("step must be positive")
    u0 = feasible_start(p, u0, project_start)
    opts = SolverOptions(method="explicit", inner_step=h)
    return mini_batch_flow(build_system(p), schedule, u0, times, opts)


@dataclass
class QPOptimum:
    u: np.ndarray
    value: float
    descent_u: np.ndarray
    descent_value: float

    @property
    def agreement(self):
        """Objective gap between the two independent solves."""
        return abs(self.value - self.descent_value)


def _projected_subgradient(phi, C, start, tol=1e-8, max_iter=200_000):
    # diminishing steps a / sqrt(k), best iterate kept
    u = C.project(np.asarray(start, dtype=float))
    best_u, best = u.copy(), float(phi.value(u))
    a = 1.0
    stall = 0
    for k in range(1, max_iter + 1):
        g, theta = phi._unconstrained_subgradient(u)
        g = g + phi.l1_weights * theta
        if not np.any(g):
            return u, float(phi.value(u))
        new = C.project(u - (a / np.sqrt(k)) * g)
        val = float(phi.value(new))
        if val < best - tol * 1e-3:
            stall = 0
        else:
            stall += 1
        if val < best:
            best, best_u = val, new.copy()
        if np.max(np.abs(new - u)) < tol * 1e-2 or stall > 20_000:
            break
        u = new
    return best_u, best


def qp_optimum(p, psi=None, tol=1e-8):
    """Minimize ``psi`` over ``C`` two ways and report both.

    The face-enumeration solve is exact (it scans the stationary points of
    every face and kink combination); the projected subgradient run is an
    independent check.  ``psi`` defaults to the problem objective and may be
    any :class:`CompositePotential` without its own constraint.
    """
    psi = objective(p, constrained=False) if psi is None else psi
    C = p.constraint
    cand = _FaceCandidates(psi.quadratic.H, C.A, C.b, psi.l1_weights, psi.l1_centers)
    u = cand.minimize(psi.quadratic.c[None])[0]
    value = float(psi.value(u))
    start = C.vertices.mean(axis=0)
    du, dval = _projected_subgradient(psi, C, start, tol)
    if not np.isfinite(dval):
        raise SolverError("projected subgradient descent left the feasible set")
    return QPOptimum(u, value, du, dval)
