"""Convex building blocks: prox operators, polyhedral projection, subgradients.

Everything here works on a single state of shape ``(d,)`` or on a stack of
states of shape ``(n, d)``; the stacked form is what the Monte-Carlo drivers
use to advance many realizations at once.

The workhorse is :class:`CompositePotential`,

    phi(u) = 1/2 u^T H u + c^T u + k + sum_i w_i |u_i - z_i| + indicator_C(u),

with ``C`` an optional :class:`Polyhedron`.  Potentials of this form are
closed under nonnegative linear combination, which is how batch potentials
are assembled from sub-potentials.
"""

from dataclasses import dataclass
from functools import cached_property
import itertools

import numpy as np
from scipy.optimize import lsq_linear

from .exceptions import DomainError, InfeasibleError, SolverError

__all__ = [
    "CompositePotential",
    "Polyhedron",
    "QuadraticPotential",
    "SubgradientParts",
    "exact_quadratic_flow",
    "indicator",
    "minimal_norm_subgradient",
    "project_polyhedron",
    "prox",
    "quadratic",
    "soft_threshold",
    "weighted_l1",
]

FEAS_TOL = 1e-9
PROX_TOL = 1e-12
PROX_MAXITER = 100_000
_SERIES_CUTOFF = 1e-6


def _rowdot(U, M):
    """Row-wise ``M @ u`` for a stack ``U``; each row is computed independently."""
    return (U[..., None, :] * M).sum(axis=-1)


def soft_threshold(x, tau):
    """Componentwise shrinkage ``sgn(x) * max(|x| - tau, 0)``.

    ``tau`` may be a scalar or broadcast against ``x``.
    """
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _phi1(x):
    # (1 - exp(-x)) / x, continuous at 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    out = -np.expm1(-safe) / safe
    series = 1.0 - x / 2.0 + x * x / 6.0
    return np.where(small, series, out)


# ---------------------------------------------------------------------------
# polyhedra and face enumeration


class _FaceCandidates:
    """Stationary points of a quadratic on every face of a polyhedron.

    For ``f(w) = 1/2 w^T M w + q^T w + sum_i l_i |w_i - z_i|`` each candidate
    is an affine map ``w = G q + h``: the minimizer of the sign-fixed quadratic
    restricted to the affine hull of a face (kinks ``w_i = z_i`` count as
    faces).  The true minimizer over the polyhedron is the feasible candidate
    of least objective.
    """

    def __init__(self, M, A, b, l1_weights=None, l1_centers=None):
        d = M.shape[0]
        self.M = M
        self.A = A
        self.b = b
        self.l1_weights = np.zeros(d) if l1_weights is None else l1_weights
        self.l1_centers = np.zeros(d) if l1_centers is None else l1_centers
        kinks = np.flatnonzero(self.l1_weights > 0)
        K = 0 if A is None else A.shape[0]
        eye = np.eye(d)
        # faces grouped by the number of equality rows so each group is solved as a stack
        groups = {}
        for signs in itertools.product((-1.0, 0.0, 1.0), repeat=len(kinks)):
            signs = np.asarray(signs)
            lin = np.zeros(d)
            lin[kinks] = self.l1_weights[kinks] * signs
            zero = kinks[signs == 0]
            room = d - len(zero)
            for size in range(0, min(room, K) + 1):
                for subset in itertools.combinations(range(K), size):
                    subset = list(subset)
                    rows = np.vstack([eye[zero], A[subset]]) if size else eye[zero]
                    rhs = np.concatenate([self.l1_centers[zero], b[subset]]) if size else self.l1_centers[zero]
                    groups.setdefault(rows.shape[0], []).append((rows, rhs, lin))
        maps, offsets = [], []
        for r, items in sorted(groups.items()):
            E = np.array([it[0] for it in items]).reshape(len(items), r, d)
            e = np.array([it[1] for it in items], dtype=float).reshape(len(items), r)
            lin = np.array([it[2] for it in items])
            if r:
                keep = np.linalg.matrix_rank(E) == r
                E, e, lin = E[keep], e[keep], lin[keep]
            G, h = self._solve_maps(M, E, e, lin)
            maps.append(G)
            offsets.append(h)
        self.maps = np.concatenate(maps)
        self.offsets = np.concatenate(offsets)

    @staticmethod
    def _solve_maps(M, E, e, lin):
        n, r, d = E.shape
        kkt = np.zeros((n, d + r, d + r))
        kkt[:, :d, :d] = M
        kkt[:, :d, d:] = np.swapaxes(E, 1, 2)
        kkt[:, d:, :d] = E
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(kkt)
        inv = np.empty_like(kkt)
        good = np.isfinite(cond) & (cond <= 1e13)
        if np.any(good):
            inv[good] = np.linalg.inv(kkt[good])
        for i in np.flatnonzero(~good):
            inv[i] = np.linalg.pinv(kkt[i])
        # w = inv[:d, :d] @ (-(q + lin)) + inv[:d, d:] @ e
        G = -inv[:, :d, :d]
        h = np.einsum("nij,nj->ni", G, lin) + np.einsum("nij,nj->ni", inv[:, :d, d:], e)
        return G, h

    def objective(self, W, Q):
        quad = 0.5 * np.sum(W * _rowdot(W, self.M), axis=-1)
        lin = np.sum(W * Q, axis=-1)
        l1 = np.sum(self.l1_weights * np.abs(W - self.l1_centers), axis=-1)
        return quad + lin + l1

    def minimize(self, Q):
        """Minimize for each row of ``Q`` (shape ``(n, d)``)."""
        W = np.einsum("cij,nj->nci", self.maps, Q) + self.offsets[None]
        if self.A is not None:
            slack = self.b + 1e-12 * (1.0 + np.abs(self.b))
            feasible = np.all(W @ self.A.T <= slack, axis=-1)
        else:
            feasible = np.ones(W.shape[:2], dtype=bool)
        obj = self.objective(W, Q[:, None, :])
        obj = np.where(feasible, obj, np.inf)
        best = np.argmin(obj, axis=1)
        if not np.all(np.isfinite(obj[np.arange(len(Q)), best])):
            raise InfeasibleError("no feasible face candidate")
        return W[np.arange(len(Q)), best]


class Polyhedron:
    """The set ``{u : A u <= b}``.

    Nonemptiness is checked at construction by projecting the origin.
    Projection enumerates active constraint subsets, so it is meant for
    small dimension (``d <= 3``) and a handful of rows.
    """

    def __init__(self, A, b):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if A.shape[0] < 1:
            raise ValueError("polyhedron needs at least one constraint")
        if b.shape != (A.shape[0],):
            raise ValueError(f"b has shape {b.shape}, expected ({A.shape[0]},)")
        self.A = A
        self.b = b
        self._projector = _FaceCandidates(np.eye(self.dim), A, b)
        self._metric_cache = {}
        self.project(np.zeros(self.dim))

    @property
    def dim(self):
        return self.A.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Polyhedron)
            and self.A.shape == other.A.shape
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.b, other.b)
        )

    def __hash__(self):
        return hash((self.A.tobytes(), self.b.tobytes()))

    def __repr__(self):
        return f"Polyhedron(K={self.A.shape[0]}, d={self.dim})"

    def residual(self, u):
        """Largest constraint violation ``max_k (a_k . u - b_k)``, per row."""
        u = np.asarray(u, dtype=float)
        return np.max(u @ self.A.T - self.b, axis=-1)

    def contains(self, u, tol=FEAS_TOL):
        u = np.asarray(u, dtype=float)
        return np.all(u @ self.A.T <= self.b + tol * (1.0 + np.abs(self.b)), axis=-1)

    def intersect(self, other):
        rows = np.vstack([self.A, other.A])
        rhs = np.concatenate([self.b, other.b])
        _, keep = np.unique(np.column_stack([rows, rhs]), axis=0, return_index=True)
        keep = np.sort(keep)
        return Polyhedron(rows[keep], rhs[keep])

    @cached_property
    def vertices(self):
        d = self.dim
        out = []
        for subset in itertools.combinations(range(self.A.shape[0]), d):
            E = self.A[list(subset)]
            if np.linalg.matrix_rank(E) < d:
                continue
            v = np.linalg.solve(E, self.b[list(subset)])
            if self.contains(v) and not any(np.allclose(v, w, atol=1e-12) for w in out):
                out.append(v)
        return np.array(out).reshape(-1, d)

    def project(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        outside = (flat @ self.A.T > self.b).any(axis=1)
        if not outside.any():
            return x.copy()
        out = flat.copy()
        out[outside] = self._projector.minimize(-flat[outside])
        return out.reshape(x.shape)

    def _metric_minimizer(self, M, l1_weights, l1_centers):
        key = (M.tobytes(), l1_weights.tobytes(), l1_centers.tobytes())
        cand = self._metric_cache.get(key)
        if cand is None:
            if len(self._metric_cache) > 16:
                self._metric_cache.clear()
            cand = _FaceCandidates(M, self.A, self.b, l1_weights, l1_centers)
            self._metric_cache[key] = cand
        return cand

    def active(self, u, tol=FEAS_TOL):
        u = np.asarray(u, dtype=float)
        return u @ self.A.T >= self.b - tol * (1.0 + np.abs(self.b))


def project_polyhedron(P, x):
    """Euclidean projection of ``x`` onto the polyhedron ``P``."""
    return P.project(x)


# ---------------------------------------------------------------------------
# quadratic potentials


def exact_quadratic_flow(Q, u0, t):
    """Exact solution at time ``t`` of ``u' = -(H u + c)`` from ``u0``.

    Uses the symmetric eigendecomposition of ``H``; the factor
    ``(1 - exp(-t lam)) / lam`` switches to its Taylor series when
    ``t lam`` is tiny.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    u0 = np.asarray(u0, dtype=float)
    if t == 0:
        return u0.copy()
    lam, V = Q.eigh
    lam = np.maximum(lam, 0.0)
    y0 = u0 @ V
    cy = V.T @ Q.c
    y = np.exp(-lam * t) * y0 - t * _phi1(lam * t) * cy
    return y @ V.T


@dataclass(frozen=True, eq=False)
class QuadraticPotential:
    """``1/2 u^T H u + c^T u + constant`` with ``H`` symmetric PSD."""

    H: np.ndarray
    c: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if H.shape[0] != H.shape[1] or c.shape != (H.shape[0],):
            raise ValueError(f"inconsistent shapes H{H.shape}, c{c.shape}")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12:
            raise ValueError("H must be symmetric")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "constant", float(self.constant))
        if self.eigh[0].size and self.eigh[0][0] < -1e-10:
            raise ValueError(f"H is not positive semidefinite (min eig {self.eigh[0][0]:.3g})")

    @property
    def dim(self):
        return self.H.shape[0]

    @cached_property
    def eigh(self):
        return np.linalg.eigh(0.5 * (self.H + self.H.T))

    @cached_property
    def is_diagonal(self):
        return np.count_nonzero(self.H - np.diag(np.diag(self.H))) == 0

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * np.sum(u * _rowdot(u, self.H), axis=-1) + u @ self.c + self.constant

    def gradient(self, u):
        return _rowdot(np.asarray(u, dtype=float), self.H) + self.c

    def flow(self, u, t):
        return exact_quadratic_flow(self, u, t)

    def __add__(self, other):
        return QuadraticPotential(self.H + other.H, self.c + other.c, self.constant + other.constant)

    def scale(self, a):
        return QuadraticPotential(a * self.H, a * self.c, a * self.constant)


# ---------------------------------------------------------------------------
# composite potentials


@dataclass
class SubgradientParts:
    """The pieces of a minimal-norm subgradient.

    ``vector = smooth + l1_weights * theta + A_active^T mu`` where ``theta``
    is the selected element of ``[-1, 1]`` per coordinate (the sign off the
    kink) and ``mu >= 0`` are multipliers of the active constraint rows.
    """

    vector: np.ndarray
    theta: np.ndarray
    active: np.ndarray
    mu: np.ndarray


def _scalar_kink_flow(y0, a, beta, w, t):
    """Exact flow of ``y' = -a y - beta - w sgn(y)`` (``a, w >= 0``).

    The multivalued ``sgn`` at 0 resolves to the minimal-norm selection, so
    trajectories stick at 0 when ``|beta| <= w``.  All arguments broadcast.
    """
    y0, a, beta, w = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y0, a, beta, w)))

    def drift(y, kappa, tau):
        return y * np.exp(-a * tau) - kappa * tau * _phi1(a * tau)

    s = np.sign(y0)
    kappa = beta + w * s
    hits = (s != 0) & (s * kappa > 0)
    ratio = np.where(hits, a * y0 / np.where(kappa == 0, 1.0, kappa), 0.0)
    t_hit = np.where(
        a > 0,
        np.log1p(ratio) / np.where(a > 0, a, 1.0),
        y0 / np.where(kappa == 0, 1.0, kappa),
    )
    t_hit = np.where(hits, t_hit, np.inf)
    t_hit = np.where(s == 0, 0.0, t_hit)

    before = t <= t_hit
    y = np.where(before, drift(y0, kappa, t), 0.0)

    rest = np.where(before, 0.0, t - np.where(np.isfinite(t_hit), t_hit, 0.0))
    leave = (~before) & (np.abs(beta) > w)
    s2 = -np.sign(beta)
    kappa2 = beta + w * s2
    y_after = np.where(leave, drift(np.zeros_like(y0), kappa2, rest), 0.0)
    return np.where(before, y, y_after)


class CompositePotential:
    """Quadratic + weighted shifted l1 + polyhedral indicator.

    Parameters
    ----------
    quadratic : QuadraticPotential
    l1_weights : array_like, optional
        Nonnegative ``w``; zero entries carry no kink.
    l1_centers : array_like, optional
        Kink locations ``z``; defaults to the origin.
    constraint : Polyhedron, optional
    """

    def __init__(self, quadratic, l1_weights=None, l1_centers=None, constraint=None):
        d = quadratic.dim
        w = np.zeros(d) if l1_weights is None else np.asarray(l1_weights, dtype=float).reshape(d)
        z = np.zeros(d) if l1_centers is None else np.asarray(l1_centers, dtype=float).reshape(d)
        if np.any(w < 0):
            raise ValueError("l1 weights must be nonnegative")
        if constraint is not None and constraint.dim != d:
            raise ValueError("constraint dimension mismatch")
        self.quadratic = quadratic
        self.l1_weights = w
        self.l1_centers = np.where(w > 0, z, 0.0)
        self.constraint = constraint
        self._kinked = w > 0
        self._safe_w = np.where(self._kinked, w, 1.0)

    def __repr__(self):
        parts = ["quadratic"]
        if self.has_l1:
            parts.append("l1")
        if self.constraint is not None:
            parts.append(repr(self.constraint))
        return f"CompositePotential(d={self.dim}, {' + '.join(parts)})"

    @property
    def dim(self):
        return self.quadratic.dim

    @property
    def has_l1(self):
        return bool(np.any(self.l1_weights > 0))

    @property
    def is_smooth(self):
        return not self.has_l1 and self.constraint is None

    # -- algebra ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)) and other == 0:
            return self
        if not isinstance(other, CompositePotential):
            return NotImplemented
        both = (self.l1_weights > 0) & (other.l1_weights > 0)
        if np.any(self.l1_centers[both] != other.l1_centers[both]):
            raise ValueError("cannot add l1 terms with different kink locations")
        z = np.where(self.l1_weights > 0, self.l1_centers, other.l1_centers)
        if self.constraint is None:
            C = other.constraint
        elif other.constraint is None or other.constraint == self.constraint:
            C = self.constraint
        else:
            C = self.constraint.intersect(other.constraint)
        return CompositePotential(
            self.quadratic + other.quadratic, self.l1_weights + other.l1_weights, z, C
        )

    __radd__ = __add__

    def __mul__(self, a):
        a = float(a)
        if a < 0:
            raise ValueError("only nonnegative scaling preserves convexity")
        return CompositePotential(
            self.quadratic.scale(a), a * self.l1_weights, self.l1_centers, self.constraint
        )

    __rmul__ = __mul__

    # -- evaluation -------------------------------------------------------

    def value(self, u):
        u = np.asarray(u, dtype=float)
        v = self.quadratic.value(u) + np.sum(
            self.l1_weights * np.abs(u - self.l1_centers), axis=-1
        )
        if self.constraint is not None:
            v = np.where(self.constraint.contains(u), v, np.inf)
        return v

    def in_domain(self, u):
        if self.constraint is None:
            return np.ones(np.shape(u)[:-1], dtype=bool)
        return self.constraint.contains(u)

    def _unconstrained_subgradient(self, u):
        g = self.quadratic.gradient(u)
        if not self._kinked.any():
            return g, np.zeros_like(g)
        dev = u - self.l1_centers
        theta = np.sign(dev) * self._kinked
        kink = self._kinked & (dev == 0)
        if kink.any():
            theta = np.where(kink, np.clip(-g / self._safe_w, -1.0, 1.0), theta)
        return g, theta

    def min_norm_parts(self, u):
        """Minimal-norm subgradient of a single state, with its pieces."""
        u = np.asarray(u, dtype=float)
        if u.ndim != 1:
            raise ValueError("min_norm_parts expects a single state")
        g, theta = self._unconstrained_subgradient(u)
        w = self.l1_weights
        if self.constraint is None:
            return SubgradientParts(g + w * theta, theta, np.zeros(0, dtype=int), np.zeros(0))
        if not self.constraint.contains(u):
            raise DomainError(f"state outside the constraint set (violation {self.constraint.residual(u):.3g})")
        active = np.flatnonzero(self.constraint.active(u))
        kink = np.flatnonzero((w > 0) & (u == self.l1_centers))
        if active.size == 0:
            return SubgradientParts(g + w * theta, theta, active, np.zeros(0))
        # min || g + w_K theta_K + sum_active mu_k a_k ||, theta_K in [-1,1], mu >= 0
        d = self.dim
        off = np.where((w > 0) & (u != self.l1_centers), w * theta, 0.0)
        cols = [w[i] * np.eye(d)[i] for i in kink] + [self.constraint.A[k] for k in active]
        B = np.column_stack(cols)
        lb = np.concatenate([-np.ones(kink.size), np.zeros(active.size)])
        ub = np.concatenate([np.ones(kink.size), np.full(active.size, np.inf)])
        res = lsq_linear(B, -(g + off), bounds=(lb, ub), method="bvls", tol=1e-15)
        coef = res.x
        theta = theta.copy()
        theta[kink] = coef[: kink.size]
        mu = coef[kink.size:]
        vector = g + w * theta + self.constraint.A[active].T @ mu
        return SubgradientParts(vector, theta, active, mu)

    def subgradient(self, u):
        """Minimal-norm element of the subdifferential (rowwise for stacks)."""
        u = np.asarray(u, dtype=float)
        if self.constraint is None:
            g, theta = self._unconstrained_subgradient(u)
            return g + self.l1_weights * theta
        if u.ndim == 1:
            return self.min_norm_parts(u).vector
        return np.array([self.min_norm_parts(row).vector for row in u])

    def aligned_subgradient(self, u, parts):
        """A subgradient at ``u`` reusing the kink and normal-cone selection of ``parts``.

        ``parts`` comes from the full potential; summing the aligned
        subgradients of the batch potentials with their probabilities then
        reproduces ``parts.vector`` exactly.
        """
        u = np.asarray(u, dtype=float)
        out = self.quadratic.gradient(u) + self.l1_weights * parts.theta
        if self.constraint is not None and parts.active.size:
            out = out + self.constraint.A[parts.active].T @ parts.mu
        return out

    # -- dynamics ---------------------------------------------------------

    @property
    def has_flow(self):
        if self.constraint is not None:
            return False
        return not self.has_l1 or self.quadratic.is_diagonal

    def flow(self, u, t):
        """Exact gradient-flow map over a duration ``t``."""
        if not self.has_flow:
            raise NotImplementedError("no closed-form flow for this potential")
        u = np.asarray(u, dtype=float)
        if not self.has_l1:
            return exact_quadratic_flow(self.quadratic, u, t)
        a = np.diag(self.quadratic.H)
        z = self.l1_centers
        beta = a * z + self.quadratic.c
        return z + _scalar_kink_flow(u - z, a, beta, self.l1_weights, t)

    def project(self, u):
        if self.constraint is None:
            return np.asarray(u, dtype=float)
        return self.constraint.project(u)

    def explicit_step(self, u, dt):
        """Projected explicit Euler step along the unconstrained subgradient."""
        g, theta = self._unconstrained_subgradient(np.asarray(u, dtype=float))
        return self.project(u - dt * (g + self.l1_weights * theta))

    def prox(self, x, tau):
        """``argmin_w phi(w) + |w - x|^2 / (2 tau)``."""
        if tau <= 0:
            raise ValueError("prox step must be positive")
        x = np.asarray(x, dtype=float)
        H, c = self.quadratic.H, self.quadratic.c
        d = self.dim
        if self.constraint is not None:
            M = H + np.eye(d) / tau
            flat = np.atleast_2d(x)
            cand = self.constraint._metric_minimizer(M, self.l1_weights, self.l1_centers)
            return cand.minimize(c - flat / tau).reshape(x.shape)
        if not self.has_l1:
            rhs = x - tau * c
            return np.linalg.solve(np.eye(d) + tau * H, rhs.T).T
        if self.quadratic.is_diagonal:
            h = np.diag(H)
            denom = 1.0 + tau * h
            m = (x - tau * c) / denom
            z = self.l1_centers
            return z + soft_threshold(m - z, tau * self.l1_weights / denom)
        return self._prox_forward_backward(x, tau)

    def _prox_forward_backward(self, x, tau):
        H, c = self.quadratic.H, self.quadratic.c
        L = max(self.quadratic.eigh[0][-1], 0.0) + 1.0 / tau
        z = self.l1_centers
        thr = self.l1_weights / L
        w = np.array(x, dtype=float)
        for _ in range(PROX_MAXITER):
            grad = _rowdot(w, H) + c + (w - x) / tau
            new = z + soft_threshold(w - grad / L - z, thr)
            if np.max(np.abs(new - w)) <= PROX_TOL * (1.0 + np.max(np.abs(new))):
                return new
            w = new
        raise SolverError(f"forward-backward prox did not converge in {PROX_MAXITER} iterations")


def quadratic(H, c=None, constant=0.0):
    """Composite potential with only the quadratic part."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    c = np.zeros(H.shape[0]) if c is None else c
    return CompositePotential(QuadraticPotential(H, c, constant))


def weighted_l1(weights, centers=None):
    """``sum_i w_i |u_i - z_i|``."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    d = w.size
    return CompositePotential(QuadraticPotential(np.zeros((d, d)), np.zeros(d)), w, centers)


def indicator(P):
    """Indicator of a polyhedron: 0 inside, +inf outside."""
    d = P.dim
    return CompositePotential(QuadraticPotential(np.zeros((d, d)), np.zeros(d)), constraint=P)


def prox(potential, x, tau):
    return potential.prox(x, tau)


def minimal_norm_subgradient(potential, u):
    """Least-norm element of the subdifferential of ``potential`` at ``u``."""
    u = np.asarray(u, dtype=float)
    if hasattr(potential, "in_domain") and not np.all(potential.in_domain(u)):
        raise DomainError("state outside the effective domain")
    return potential.subgradient(u)
