import math

import numpy as np
import pytest

from mbflow.convex import quadratic, weighted_l1
from mbflow.core import (
    BatchSchedule,
    BatchSystem,
    SolverOptions,
    Trajectory,
    convergence_sweep,
    draw_schedule,
    evaluation_grid,
    expectation_error,
    fit_slope,
    gradient_flow,
    mini_batch_flow,
    minimizing_movement,
    pathwise_bound,
    per_example_variance,
    validate_batch_system,
    variance_lambda,
    variance_ratio_report,
    variance_split,
)
from mbflow.exceptions import BatchSystemError

from conftest import random_psd


def _linear(a):
    # phi(u) = a . u as a degenerate quadratic
    a = np.atleast_1d(np.asarray(a, float))
    return quadratic(np.zeros((a.size, a.size)), a)


# -- validation ---------------------------------------------------------------


def test_single_batch_is_valid():
    sys = BatchSystem([_linear(1.0), _linear(2.0)], [0.5, 0.5], [[0, 1]], [1.0])
    assert validate_batch_system(sys).ok


def test_default_singletons_are_valid():
    subs = [_linear(1.0)] * 3
    assert validate_batch_system(BatchSystem.singletons(subs, [0.5, 0.25, 0.25])).ok


@pytest.mark.parametrize(
    "weights, batches, probs, relation",
    [
        ([0.5, 0.5], [[0], [1]], [0.9, 0.1], "compatibility"),
        ([0.6, 0.5], [[0], [1]], [0.6, 0.5], "weight_sum"),
        ([0.5, 0.5], [[0], [1]], [0.7, 0.4], "prob_sum"),
        ([0.5, 0.5], [[0, 1], [1]], [1.0, 0.0], "prob_positive"),
        ([0.5, 0.5], [[0, 1], []], [0.5, 0.5], "empty_batch"),
        ([1.0, 0.0], [[0]], [1.0], "coverage"),
    ],
)
def test_validation_reports_relation(weights, batches, probs, relation):
    sys = BatchSystem([_linear(1.0), _linear(2.0)], weights, batches, probs)
    res = validate_batch_system(sys)
    assert not res.ok and res.relation == relation
    with pytest.raises(BatchSystemError) as info:
        sys.check()
    assert info.value.relation == relation


def test_batch_potential_is_average():
    sys = BatchSystem([_linear(1.0), _linear(3.0)], [0.5, 0.5], [[0, 1]], [1.0])
    assert sys.batch_potential(0).subgradient(np.zeros(1))[0] == pytest.approx(2.0)


# -- schedules ----------------------------------------------------------------


def test_single_batch_schedule_is_constant():
    sys = BatchSystem.single_batch([_linear(1.0)])
    for seed in range(5):
        assert not np.any(draw_schedule(sys, 0.1, 1.0, seed).indices)


def test_schedule_frequency_within_binomial_band():
    sys = BatchSystem.singletons([_linear(1.0), _linear(2.0)], [0.5, 0.5])
    s = draw_schedule(sys, 1e-4, 1.0, 7)
    assert s.K == 10000
    # 3 sigma band for a binomial(10000, 1/2) proportion
    band = 3 * math.sqrt(0.25 / s.K)
    assert abs(np.mean(s.indices == 0) - 0.5) <= band
    assert 0.485 <= np.mean(s.indices == 0) <= 0.515


def test_schedule_is_deterministic():
    sys = BatchSystem.singletons([_linear(1.0), _linear(2.0)], [0.3, 0.7])
    a = draw_schedule(sys, 0.01, 2.0, 99)
    b = draw_schedule(sys, 0.01, 2.0, 99)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert not np.array_equal(a.indices, draw_schedule(sys, 0.01, 2.0, 100).indices)


@pytest.mark.parametrize("eps, T, K", [(0.3, 1.0, 4), (0.25, 1.0, 4), (0.1, 0.5, 5), (0.04, 5.0, 125)])
def test_schedule_length(eps, T, K):
    sys = BatchSystem.singletons([_linear(1.0), _linear(2.0)], [0.5, 0.5])
    assert draw_schedule(sys, eps, T, 0).K == K


@pytest.mark.parametrize("eps, T", [(0.0, 1.0), (-0.1, 1.0), (0.1, 0.0), (2.0, 1.0)])
def test_schedule_rejects_bad_arguments(eps, T):
    sys = BatchSystem.single_batch([_linear(1.0)])
    with pytest.raises(ValueError):
        draw_schedule(sys, eps, T, 0)


def test_inverse_cdf_ties_go_low():
    # probabilities (1/2, 0+, ...) cannot be built, so check the boundary directly
    from mbflow.core import _draw_indices

    idx = _draw_indices(np.array([0.25, 0.25, 0.5]), 20000, 3)
    freq = np.bincount(idx, minlength=3) / idx.size
    np.testing.assert_allclose(freq, [0.25, 0.25, 0.5], atol=0.015)


# -- reference flow -------------------------------------------------------------


def test_gradient_flow_linear_decay():
    tr = gradient_flow(quadratic([[1.0]]), np.array([1.0]), 1.0)
    assert tr.final[0] == pytest.approx(math.exp(-1), rel=1e-13)


def test_gradient_flow_abs_sticks_at_zero():
    tr = gradient_flow(weighted_l1([1.0]), np.array([0.5]), 1.0)
    expected = np.maximum(0.5 - tr.times, 0.0)
    np.testing.assert_allclose(tr.states[:, 0], expected, atol=1e-14)


def test_gradient_flow_abs_matches_prox_euler():
    opts = SolverOptions(method="implicit", reference_step=1e-4)
    tr = gradient_flow(weighted_l1([1.0]), np.array([0.5]), 1.0, options=opts)
    np.testing.assert_allclose(tr.states[:, 0], np.maximum(0.5 - tr.times, 0.0), atol=1e-12)


def test_gradient_flow_stationary():
    tr = gradient_flow(quadratic(np.eye(3)), np.zeros(3), 2.0)
    assert not np.any(tr.states)


def test_trajectory_lookup_rejects_foreign_times():
    tr = Trajectory(np.array([0.0, 0.5, 1.0]), np.zeros((3, 1)), "gradient-flow")
    np.testing.assert_array_equal(tr.lookup([0.5, 1.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        tr.lookup([0.25])


def test_trajectory_requires_increasing_times():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.5, 0.5]), np.zeros((3, 1)), "gradient-flow")


def test_evaluation_grid_contains_switches():
    g = evaluation_grid(1.0, 0.3)
    for t in (0.0, 0.3, 0.6, 0.9, 1.0):
        assert np.min(np.abs(g - t)) < 1e-15
    assert np.all(np.diff(g) > 0)


# -- mini-batch flow ------------------------------------------------------------


def test_mini_batch_single_batch_equals_flow(rng):
    H = random_psd(rng, 3)
    subs = [quadratic(H, rng.standard_normal(3)), quadratic(H, rng.standard_normal(3))]
    sys = BatchSystem.single_batch(subs)
    u0 = rng.standard_normal(3)
    sched = draw_schedule(sys, 0.1, 2.0, 0)
    mb = mini_batch_flow(sys, sched, u0)
    ref = gradient_flow(sys.full_potential, u0, 2.0, mb.times)
    np.testing.assert_allclose(mb.states, ref.states, atol=1e-12)


def test_mini_batch_forced_schedule(split_1d):
    sched = BatchSchedule(0.5, 1.0, np.array([0, 1]))
    tr = mini_batch_flow(split_1d, sched, np.array([1.0]), times=[0.0, 0.5, 1.0])
    assert tr.lookup([0.5])[0, 0] == pytest.approx(math.exp(-1), rel=1e-14)
    assert tr.final[0] == 0.0


def test_mini_batch_forced_schedule_fine_steps(split_1d):
    sched = BatchSchedule(0.5, 1.0, np.array([0, 1]))
    opts = SolverOptions(method="implicit", inner_step=1e-5)
    tr = mini_batch_flow(split_1d, sched, np.array([1.0]), times=[0.0, 0.5, 1.0], options=opts)
    assert tr.lookup([0.5])[0, 0] == pytest.approx(math.exp(-1), abs=1e-5)
    assert abs(tr.final[0]) < 1e-12


def test_mini_batch_common_minimizer_is_fixed(rng):
    z = rng.standard_normal(2)
    subs = [quadratic(np.eye(2), -z), quadratic(2 * np.eye(2), -2 * z), weighted_l1([1.0, 1.0], z)]
    sys = BatchSystem.singletons(subs, [0.2, 0.3, 0.5])
    tr = mini_batch_flow(sys, draw_schedule(sys, 0.05, 1.0, 4), z)
    np.testing.assert_allclose(tr.states, np.broadcast_to(z, tr.states.shape), atol=1e-13)


def test_mini_batch_energy_decreases_per_segment(split_1d):
    sched = draw_schedule(split_1d, 0.1, 1.0, 3)
    tr = mini_batch_flow(split_1d, sched, np.array([1.3]))
    seg = np.minimum((tr.times[:-1] / 0.1 + 1e-9).astype(int), sched.K - 1)
    for k in range(sched.K):
        rows = np.flatnonzero(seg == k)
        nodes = np.append(rows, rows[-1] + 1)
        phi = split_1d.batch_potential(sched.indices[k])
        vals = phi.value(tr.states[nodes])
        assert np.all(np.diff(vals) <= 1e-13)


# -- minimizing movement --------------------------------------------------------


def test_minimizing_movement_quadratic_closed_form():
    sys = BatchSystem.single_batch([quadratic([[1.0]])])
    eps = 0.1
    sched = draw_schedule(sys, eps, 1.0, 0)
    times = eps * np.arange(sched.K) + 0.5 * eps
    tr = minimizing_movement(sys, sched, np.array([1.0]), times=np.concatenate([[0.0], times]))
    for t, w in zip(tr.times, tr.states[:, 0]):
        k = min(int(np.floor(t / eps + 1e-9)) + 1, sched.K)
        assert w == pytest.approx((1 + eps) ** -k, rel=1e-14)


def test_minimizing_movement_l1_is_soft_threshold():
    sys = BatchSystem.single_batch([weighted_l1([2.0])])
    sched = draw_schedule(sys, 0.05, 0.5, 0)
    tr = minimizing_movement(sys, sched, np.array([0.7]))
    k = np.minimum(np.floor(tr.times / 0.05 + 1e-9).astype(int) + 1, sched.K)
    np.testing.assert_allclose(tr.states[:, 0], np.maximum(0.7 - 0.1 * k, 0.0), atol=1e-14)


def test_minimizing_movement_converges_at_t1():
    sys = BatchSystem.single_batch([quadratic([[1.0]])])
    errs = []
    for eps in (0.1, 0.05, 0.025, 0.0125):
        tr = minimizing_movement(sys, draw_schedule(sys, eps, 1.0, 0), np.array([1.0]))
        errs.append(abs(tr.final[0] - math.exp(-1)))
        assert tr.final[0] == pytest.approx((1 + eps) ** -math.ceil(1 / eps - 1e-9), rel=1e-13)
    assert np.all(np.diff(errs) < 0)


# -- variance -------------------------------------------------------------------


def test_identical_subpotentials_have_zero_variance(rng):
    phi = quadratic(random_psd(rng, 2), rng.standard_normal(2))
    sys = BatchSystem.singletons([phi, phi, phi], [0.2, 0.3, 0.5])
    for u in rng.standard_normal((5, 2)):
        assert variance_lambda(sys, u) == pytest.approx(0.0, abs=1e-24)


def test_constant_gradient_variance():
    sys = BatchSystem.singletons([_linear(0.0), _linear(2.0)], [0.5, 0.5])
    assert variance_lambda(sys, np.zeros(1)) == pytest.approx(1.0, abs=1e-15)


def test_variance_matches_sampled_selections(rng):
    subs = [quadratic(random_psd(rng, 2), rng.standard_normal(2)) for _ in range(3)]
    probs = np.array([0.2, 0.5, 0.3])
    sys = BatchSystem.singletons([(1 / p) * 1.0 * s for s, p in zip(subs, probs)], probs)
    u = rng.standard_normal(2)
    split = variance_split(sys, u)
    draws = draw_schedule(sys, 1e-6, 1.0, 11).indices
    xi = split.selections[draws]
    emp = np.mean(np.sum((xi - xi.mean(axis=0)) ** 2, axis=1))
    lam = variance_lambda(sys, u)
    # 3 sigma from the sample variance of the squared deviations
    dev = np.sum((xi - split.minimal) ** 2, axis=1)
    assert abs(emp - lam) <= 3 * dev.std() / math.sqrt(draws.size) + 1e-9


def test_split_is_unbiased_with_kinks(split_1d):
    for u in (np.array([0.0]), np.array([0.3]), np.array([-2.0])):
        split = variance_split(split_1d, u)
        np.testing.assert_allclose(split.bias(split_1d.batch_probs), 0.0, atol=1e-15)


def test_singleton_lambda_equals_per_example_variance(rng):
    subs = [quadratic(random_psd(rng, 2), rng.standard_normal(2)) + weighted_l1([0.5, 0.1]) for _ in range(4)]
    sys = BatchSystem.singletons(subs, np.full(4, 0.25))
    for u in rng.standard_normal((5, 2)):
        assert variance_lambda(sys, u) == per_example_variance(sys, u)


def test_single_batch_lambda_is_zero(rng):
    subs = [quadratic(random_psd(rng, 2), rng.standard_normal(2)) for _ in range(4)]
    sys = BatchSystem.single_batch(subs)
    assert variance_lambda(sys, rng.standard_normal(2)) == pytest.approx(0.0, abs=1e-20)


def test_variance_ratio_report_extremes():
    assert variance_ratio_report(4, 4, trials=3)["mean_ratio"] == pytest.approx(1.0, rel=1e-12)
    assert variance_ratio_report(4, 1, trials=3)["mean_ratio"] == pytest.approx(0.0, abs=1e-12)


def test_pathwise_bound_holds(split_1d):
    u0 = np.array([1.5])
    ref = gradient_flow(split_1d.full_potential, u0, 1.0, evaluation_grid(1.0, 0.05))
    bound = pathwise_bound(split_1d, ref)
    for seed in range(10):
        tr = mini_batch_flow(split_1d, draw_schedule(split_1d, 0.05, 1.0, seed), u0, times=ref.times)
        err = np.abs(tr.states[:, 0] - ref.states[:, 0])
        assert np.all(err <= bound + 1e-9)


# -- Monte-Carlo statistics ----------------------------------------------------


def test_expectation_error_single_batch_is_zero(rng):
    sys = BatchSystem.single_batch([quadratic(random_psd(rng, 2), rng.standard_normal(2))])
    curve = expectation_error(sys, rng.standard_normal(2), 1.0, 0.1, 4)
    assert curve.sup_mse <= 1e-24


def test_expectation_error_zero_variance_system(rng):
    phi = quadratic(random_psd(rng, 2), rng.standard_normal(2))
    sys = BatchSystem.singletons([phi, phi], [0.3, 0.7])
    assert expectation_error(sys, rng.standard_normal(2), 1.0, 0.2, 8).sup_mse <= 1e-24


def test_expectation_error_needs_two_realizations(split_1d):
    with pytest.raises(ValueError):
        expectation_error(split_1d, np.array([1.0]), 1.0, 0.1, 1)


def test_one_segment_worse_than_many(split_1d):
    u0 = np.array([1.0])
    big = expectation_error(split_1d, u0, 1.0, 1.0, 256)
    small = expectation_error(split_1d, u0, 1.0, 1.0 / 32, 256)
    assert big.sup_mse > small.sup_mse


def test_threads_do_not_change_results(split_1d):
    u0 = np.array([1.0])
    a = expectation_error(split_1d, u0, 1.0, 0.05, 16, threads=1)
    b = expectation_error(split_1d, u0, 1.0, 0.05, 16, threads=3)
    np.testing.assert_array_equal(a.mean_sq, b.mean_sq)
    np.testing.assert_array_equal(a.std_err, b.std_err)


def test_fit_slope_exact_power():
    eps = np.array([0.4, 0.2, 0.1, 0.05])
    slope, se = fit_slope(eps, 3 * eps ** 1.5)
    assert slope == pytest.approx(1.5, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-10)


def test_sweep_degenerate_flag(rng):
    phi = quadratic(random_psd(rng, 2), rng.standard_normal(2))
    sys = BatchSystem.singletons([phi, phi], [0.5, 0.5])
    rep = convergence_sweep(sys, rng.standard_normal(2), 1.0, [0.2, 0.1, 0.05], 4)
    assert rep.degenerate and rep.slope is None


def test_sweep_requires_decreasing_list(split_1d):
    with pytest.raises(ValueError):
        convergence_sweep(split_1d, np.array([1.0]), 1.0, [0.1, 0.2, 0.05], 4)


def test_sweep_report_is_deterministic(split_1d):
    args = (split_1d, np.array([1.0]), 1.0, [0.2, 0.1, 0.05], 16, 5)
    a, b = convergence_sweep(*args), convergence_sweep(*args)
    np.testing.assert_array_equal(a.sup_values, b.sup_values)
    assert a.slope == b.slope


def test_split_system_sweep_slope(split_1d):
    eps = [0.32, 0.16, 0.08, 0.04, 0.02, 0.01]
    rep = convergence_sweep(split_1d, np.array([1.0]), 1.0, eps, 128)
    assert rep.slope >= 0.8, rep.sup_values


def test_minimizing_movement_sweep_on_smooth_quadratic(rng):
    H1, H2 = random_psd(rng, 2), random_psd(rng, 2)
    sys = BatchSystem.singletons([quadratic(H1, [1.0, 0.0]), quadratic(H2, [0.0, -1.0])], [0.5, 0.5])
    rep = convergence_sweep(sys, np.array([1.0, 1.0]), 1.0, [0.2, 0.1, 0.05, 0.025, 0.0125], 64,
                            scheme="minimizing-movement")
    assert rep.slope >= 0.8, rep.sup_values
