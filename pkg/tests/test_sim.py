"""Closed-loop simulation and the online-comparison harness."""

import numpy as np
import pytest

from quifs import sim
from quifs.dynamics import LinearDynamics
from quifs.mpc import Box, MpcProblem, solve_at_state
from quifs.sim import (compare_with_online_rhc, disturbance_sequence,
                       run_report, simulate_closed_loop)


def test_equilibrium_stays_at_origin(double_integrator, coarse_policy):
    traj = simulate_closed_loop(double_integrator, coarse_policy,
                                np.zeros(2), steps=50)
    assert not traj.truncated
    assert traj.steps == 50
    eps = coarse_policy.budget.epsilon
    assert np.max(np.abs(traj.controls)) <= eps
    assert np.max(np.abs(traj.states)) <= 0.5  # stays near the origin
    assert run_report(double_integrator, traj).recursively_feasible


def test_interior_start_converges(double_integrator, coarse_policy):
    traj = simulate_closed_loop(double_integrator, coarse_policy,
                                np.array([3.0, 0.0]), steps=200)
    rep = run_report(double_integrator, traj)
    assert rep.recursively_feasible
    assert rep.violations == 0
    assert rep.terminal_radius <= 0.2


def test_out_of_domain_truncates_with_flag(double_integrator, coarse_policy):
    traj = simulate_closed_loop(double_integrator, coarse_policy,
                                np.array([7.0, 0.0]), steps=10)
    assert traj.truncated
    assert traj.steps == 0
    assert traj.states.shape == (1, 2)
    rep = run_report(double_integrator, traj)
    assert not rep.recursively_feasible


def test_lengths_consistent(double_integrator, coarse_policy):
    traj = simulate_closed_loop(double_integrator, coarse_policy,
                                np.array([1.0, 0.2]), steps=17)
    assert traj.states.shape[0] == traj.controls.shape[0] + 1


def test_disturbance_generators_deterministic(double_integrator):
    import dataclasses
    p = dataclasses.replace(
        double_integrator,
        disturbance_set=Box(np.array([-0.01, -0.01]), np.array([0.01, 0.01])))
    a = disturbance_sequence(p, 10, "uniform", seed=4)
    b = disturbance_sequence(p, 10, "uniform", seed=4)
    c = disturbance_sequence(p, 10, "uniform", seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all(np.abs(a) <= 0.01)
    v = disturbance_sequence(p, 10, "vertices", seed=0)
    assert set(map(tuple, np.unique(v, axis=0))) <= set(
        map(tuple, p.disturbance_set.vertices()))
    assert disturbance_sequence(double_integrator, 10, "uniform", 0) is None


def test_compare_gap_bounded_by_margin(double_integrator, coarse_policy):
    rep, traj, traj_on = compare_with_online_rhc(
        double_integrator, coarse_policy, np.array([2.0, -0.5]), steps=60)
    assert rep.recursively_feasible
    assert rep.sup_control_gap <= coarse_policy.budget.epsilon
    assert np.isfinite(rep.sup_state_gap)
    assert traj.steps == 60 and traj_on.steps == 60


def test_oracle_lookup_policy_has_zero_gap(double_integrator, coarse_policy,
                                           monkeypatch):
    # replace the table by direct oracle lookups: matched-state gap collapses
    p_noisy = double_integrator.with_noise(coarse_policy.budget.epsilon)

    def oracle_eval(pol, x):
        res = solve_at_state(p_noisy, np.asarray(x, float))
        return res.control if res.status == "feasible" else None

    monkeypatch.setattr(sim, "evaluate_policy", oracle_eval)
    rep, _, _ = compare_with_online_rhc(
        double_integrator, coarse_policy, np.array([1.0, 0.3]), steps=20)
    assert rep.sup_control_gap <= 1e-7


def test_value_offset_recorded_without_disturbance(double_integrator,
                                                   coarse_policy):
    rep, _, _ = compare_with_online_rhc(
        double_integrator, coarse_policy, np.array([2.0, 0.0]), steps=40)
    # descent up to an epsilon-proportional offset
    assert np.isfinite(rep.value_offset)
    assert rep.value_offset <= 60.0 * coarse_policy.budget.epsilon


def test_csv_outputs(tmp_path, double_integrator, coarse_policy):
    rep, traj, traj_on = compare_with_online_rhc(
        double_integrator, coarse_policy, np.array([1.0, 0.0]), steps=10)
    f1 = tmp_path / "traj.csv"
    f2 = tmp_path / "twin.csv"
    sim.trajectory_to_csv(traj, str(f1))
    sim.twin_csv(traj, traj_on, str(f2))
    head = f2.read_text().splitlines()[0]
    assert head.split(",")[:1] == ["t"]
    assert "u1_online" in head and "control_gap" in head
    assert len(f1.read_text().splitlines()) == traj.states.shape[0] + 1
