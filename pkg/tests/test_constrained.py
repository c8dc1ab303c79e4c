import numpy as np
import pytest

from mbflow.constrained import (
    DEFAULT_STARTS,
    ConstrainedProblem,
    build_system,
    feasible_start,
    mbd_projected_flow,
    objective,
    default_constraint,
    projected_euler_flow,
    qp_optimum,
    sub_potential,
    sub_potential_subgrad,
)
from mbflow.convex import Polyhedron, quadratic
from mbflow.core import BatchSchedule, draw_schedule, variance_split
from mbflow.exceptions import DomainError


@pytest.fixture(scope="module")
def inst():
    return ConstrainedProblem.default()


def _interior_probes(p, rng, n):
    lo, hi = p.constraint.vertices.min(axis=0), p.constraint.vertices.max(axis=0)
    out = []
    while len(out) < n:
        u = lo + (hi - lo) * rng.random(2)
        if np.max(p.constraint.residual(u)) < -1e-3:
            out.append(u)
    return np.array(out)


def _argmin_segment(p):
    # psi is flat in u1 for u1 >= ud and minimal in u2 at yd + 1/2, so the
    # minimizers are {(u1, yd + 1/2) : u1 >= ud} cut by C
    u2 = p.yd + 0.5
    C = p.constraint
    hi = np.inf
    for (a1, a2), b in zip(C.A, C.b):
        if a1 > 0:
            hi = min(hi, (b - a2 * u2) / a1)
    return np.array([p.ud, u2]), np.array([hi, u2])


def _distance_to_segment(u, a, b):
    t = np.clip((u - a) @ (b - a) / ((b - a) @ (b - a)), 0.0, 1.0)
    return float(np.linalg.norm(u - (a + t * (b - a))))


# -- problem data -------------------------------------------------------------


def test_default_constraint_rows():
    C = default_constraint()
    assert C.contains([13.0, 8.0])
    assert C.contains([8.0, 4.0])
    assert not C.contains([6.0, 10.0])


def test_listed_boundary_start_is_outside(inst):
    u = np.array(DEFAULT_STARTS[2])
    # 5*20 + 3*14 = 142 > 120 and 4*20 + 6*14 = 164 > 150
    C = inst.constraint
    assert (C.A @ u - C.b)[:2] == pytest.approx([22.0, 14.0])
    assert not C.contains(u)


@pytest.mark.parametrize("probs", [(0.5, 0.5), (0.5, 0.25, 0.3), (1.0, 0.0, 0.0)])
def test_problem_rejects_bad_probs(probs):
    with pytest.raises(ValueError):
        ConstrainedProblem(default_constraint(), probs=probs)


def test_sub_potential_index_checked(inst):
    with pytest.raises(ValueError):
        sub_potential(inst, 4)


# -- split --------------------------------------------------------------------


def test_reconstruction_identity(inst, rng):
    probs = np.array(inst.probs)
    psi = objective(inst, constrained=False)
    for u in rng.uniform(-30, 30, size=(100, 2)):
        mix = sum(q * sub_potential(inst, j).value(u) for q, j in zip(probs, (1, 2, 3)))
        assert mix == pytest.approx(psi.value(u), abs=1e-12 * max(1.0, abs(psi.value(u))))


def test_hand_written_objective(inst, rng):
    psi = objective(inst, constrained=False)
    for u1, u2 in rng.uniform(-20, 20, size=(20, 2)):
        expected = 2 * abs(u1 - 10) + 3 * (u2 - 10) ** 2 - 2 * u1 - 3 * u2
        assert psi.value([u1, u2]) == pytest.approx(expected, rel=1e-13, abs=1e-12)


@pytest.mark.parametrize("u1", [-3.0, 7.0, 10.0, 25.0])
def test_third_subgradient_at_target(inst, u1):
    assert np.allclose(sub_potential_subgrad(inst, 3, [u1, inst.yd]), [0.0, -6.0], atol=1e-14)


def test_second_subgradient_at_kink_is_valid(inst, rng):
    u = np.array([inst.ud, 3.0])
    g = sub_potential_subgrad(inst, 2, u)
    assert -8.0 <= g[0] <= 0.0 and g[1] == 0.0
    phi = sub_potential(inst, 2)
    for z in rng.uniform(-50, 50, size=(200, 2)):
        assert phi.value(z) >= phi.value(u) + g @ (z - u) - 1e-12


def test_split_unbiased_at_interior_points(inst, rng):
    sys = build_system(inst)
    for u in _interior_probes(inst, rng, 100):
        split = variance_split(sys, u)
        assert np.max(np.abs(split.bias(sys.batch_probs))) <= 1e-10
        assert np.allclose(split.minimal, objective(inst, constrained=False).subgradient(u), atol=1e-12)


# -- starts -------------------------------------------------------------------


def test_infeasible_start_rejected(inst):
    with pytest.raises(DomainError):
        feasible_start(inst, DEFAULT_STARTS[2])
    with pytest.raises(DomainError):
        projected_euler_flow(inst, DEFAULT_STARTS[2], 1.0)


def test_infeasible_start_projected_on_request(inst):
    u = feasible_start(inst, DEFAULT_STARTS[2], project_start=True)
    assert inst.constraint.contains(u)
    assert np.max(inst.constraint.residual(u)) == pytest.approx(0.0, abs=1e-9)


# -- projected Euler ----------------------------------------------------------


def test_projected_flow_stationary_at_minimizer(inst):
    opt = qp_optimum(inst).u
    h = 0.01
    tr = projected_euler_flow(inst, opt, 2.0, h)
    assert np.max(np.abs(tr.states - opt)) <= h * 1e-6


def test_projected_flow_reaches_minimizer_set(inst):
    opt = qp_optimum(inst)
    tr = projected_euler_flow(inst, [13.0, 8.0], 10.0, 0.01)
    a, b = _argmin_segment(inst)
    assert _distance_to_segment(tr.final, a, b) <= 0.05
    assert objective(inst).value(tr.final) == pytest.approx(opt.value, abs=0.05)


@pytest.mark.parametrize("start", DEFAULT_STARTS)
def test_projected_flow_nodes_feasible(inst, start):
    tr = projected_euler_flow(inst, start, 10.0, 0.01, project_start=True)
    assert np.max(inst.constraint.residual(tr.states)) <= 1e-10


def test_projected_flow_descends(inst, rng):
    psi = objective(inst)
    h = 0.01
    for u0 in _interior_probes(inst, rng, 5):
        tr = projected_euler_flow(inst, u0, 10.0, h)
        vals = np.array([psi.value(u) for u in tr.states])
        assert np.all(np.diff(vals) <= h)


# -- mini-batch ---------------------------------------------------------------


def test_first_batch_only_schedule_equals_projected_flow(inst):
    eps, T = 0.04, 10.0
    sched = BatchSchedule(eps, T, np.zeros(250, dtype=int), seed=None)
    mb = mbd_projected_flow(inst, sched, [13.0, 8.0], 0.01)
    ref = projected_euler_flow(inst, [13.0, 8.0], T, 0.01, times=mb.times)
    assert np.max(np.abs(mb.states - ref.states)) <= 1e-10


def test_mini_batch_mean_endpoint_near_flow(inst):
    sys = build_system(inst)
    u0 = [13.0, 8.0]
    ends = [mbd_projected_flow(inst, draw_schedule(sys, 0.04, 10.0, r), u0).final for r in range(64)]
    ref = projected_euler_flow(inst, u0, 10.0, 0.01).final
    assert np.linalg.norm(np.mean(ends, axis=0) - ref) <= 0.1


def test_mini_batch_nodes_feasible(inst):
    sys = build_system(inst)
    for r in range(4):
        tr = mbd_projected_flow(inst, draw_schedule(sys, 0.08, 10.0, r), DEFAULT_STARTS[2], project_start=True)
        assert np.max(inst.constraint.residual(tr.states)) <= 1e-10


# -- optimum oracle -----------------------------------------------------------


def test_optimum_of_interior_target(inst):
    z = np.array([12.0, 9.0])
    res = qp_optimum(inst, quadratic(2 * np.eye(2), -2 * z, z @ z))
    assert np.allclose(res.u, z, atol=1e-10)
    assert np.allclose(res.descent_u, z, atol=1e-6)


def test_optimum_of_norm_is_projection_of_origin(inst):
    res = qp_optimum(inst, quadratic(2 * np.eye(2)))
    assert np.allclose(res.u, [7.0, 3.5], atol=1e-10)
    assert np.allclose(res.u, inst.constraint.project([0.0, 0.0]), atol=1e-9)
    assert res.agreement <= 1e-6


def test_default_optimum_methods_agree(inst):
    res = qp_optimum(inst)
    assert res.agreement <= 1e-6
    a, b = _argmin_segment(inst)
    assert _distance_to_segment(res.u, a, b) <= 1e-9
    assert _distance_to_segment(res.descent_u, a, b) <= 1e-4


def test_optimum_on_small_box():
    box = Polyhedron([[1, 0], [-1, 0], [0, 1], [0, -1]], [1, 1, 1, 1])
    p = ConstrainedProblem(box, ud=10.0, yd=10.0)
    # psi decreases in both coordinates on the box, so the corner (1, 1) wins
    assert np.allclose(qp_optimum(p).u, [1.0, 1.0], atol=1e-10)
