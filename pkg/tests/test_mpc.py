"""Pointwise oracles: recursion reference, constrained solves, net sampling."""

import math

import numpy as np
import pytest

from quifs.dynamics import LinearDynamics, NonlinearDynamics
from quifs.errors import EmptyNetError
from quifs.extend import estimate_lipschitz
from quifs.mpc import (Box, Ellipsoid, HPolytope, MpcProblem, SolverOptions,
                       riccati_reference, sample_net, solve_at_state,
                       solve_at_states)
from quifs.qp import FEASIBLE, INFEASIBLE


def _unconstrained(A, B, Q, R, P, N):
    d = A.shape[0]
    big = 1e9 * np.ones(d)
    return MpcProblem(horizon=N, dynamics=LinearDynamics(A, B), Q=Q, R=R, P=P,
                      state_set=Box(-big, big),
                      control_set=Box(-1e9 * np.ones(B.shape[1] if B.ndim > 1 else 1),
                                      1e9 * np.ones(B.shape[1] if B.ndim > 1 else 1)))


# ---------------------------------------------------------------------------
# backward-recursion reference
# ---------------------------------------------------------------------------


def test_one_step_gain_by_hand():
    p = _unconstrained(np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.eye(2), 1)
    K = riccati_reference(p)
    assert len(K) == 1
    assert np.allclose(K[0], 0.5 * np.eye(2), atol=1e-14)


def test_zero_horizon_rejected(double_integrator):
    import dataclasses
    with pytest.raises(ValueError):
        dataclasses.replace(double_integrator, horizon=0)


def test_gains_match_dense_algebra_oracle(double_integrator):
    # independent oracle: the unconstrained condensed minimizer is
    # U = -H^{-1} qmat x0, so the first-control gain is its top block
    from quifs.mpc import _condensed
    p = double_integrator
    gains = riccati_reference(p)
    solver, qmat, _, _, _, _ = _condensed(p)
    Kdense = np.linalg.solve(solver.H, qmat)[:p.control_dim]
    assert np.allclose(Kdense, gains[0], atol=1e-9)


def test_riccati_needs_linear(duffing_like):
    with pytest.raises(ValueError):
        riccati_reference(duffing_like)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------


def test_origin_is_fixed_point(double_integrator):
    res = solve_at_state(double_integrator, np.zeros(2))
    assert res.status == FEASIBLE
    assert np.max(np.abs(res.control)) < 1e-10
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_unconstrained_matches_recursion(double_integrator):
    A = double_integrator.dynamics.A
    B = double_integrator.dynamics.B
    p = _unconstrained(A, B, np.eye(2), np.array([[1.0]]), np.zeros((2, 2)), 15)
    gains = riccati_reference(p)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x0 = rng.uniform(-3, 3, size=2)
        res = solve_at_state(p, x0)
        assert res.status == FEASIBLE
        assert np.max(np.abs(res.control + gains[0] @ x0)) < 1e-6


def test_value_nonnegative(double_integrator):
    rng = np.random.default_rng(4)
    X0 = rng.uniform([-3, -0.5], [3, 0.5], size=(20, 2))
    for res in solve_at_states(double_integrator, X0):
        assert res.status == FEASIBLE
        assert res.value >= -1e-12


def test_kkt_residuals_below_target(double_integrator):
    p = double_integrator.with_noise(0.05)
    rng = np.random.default_rng(6)
    X0 = rng.uniform([-5.5, -0.9], [5.5, 0.9], size=(200, 2))
    for res in solve_at_states(p, X0):
        if res.status == FEASIBLE:
            assert res.stats.primal_res <= 1e-8


def test_noise_tightens_control_bounds(double_integrator):
    # a deeply saturated state returns exactly the tightened bound
    p = double_integrator.with_noise(0.05)
    res = solve_at_state(p, np.array([5.0, 0.9]))
    assert res.status == FEASIBLE
    assert abs(res.control[0]) == pytest.approx(1.95, abs=1e-8)
    # first control plus any admissible noise stays inside the control set
    for v in (-0.05, 0.05):
        assert -2.0 - 1e-9 <= res.control[0] + v <= 2.0 + 1e-9


def test_outside_state_set_infeasible(double_integrator):
    res = solve_at_state(double_integrator, np.array([7.0, 0.0]))
    assert res.status == INFEASIBLE
    assert res.control is None and res.value is None


def test_unreachable_corner_infeasible(double_integrator):
    # x2 at its bound forces x1 out of range on the next step
    res = solve_at_state(double_integrator.with_noise(0.05),
                         np.array([6.0, 1.0]))
    assert res.status == INFEASIBLE


def test_polytope_state_set():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    # diamond |x1|/6 + |x2| <= 1
    G = np.array([[1 / 6.0, 1.0], [1 / 6.0, -1.0],
                  [-1 / 6.0, 1.0], [-1 / 6.0, -1.0]])
    p = MpcProblem(horizon=10, dynamics=LinearDynamics(A, B),
                   Q=np.eye(2), R=np.array([[1.0]]), P=np.zeros((2, 2)),
                   state_set=HPolytope(G, np.ones(4)),
                   control_set=Box(np.array([-2.0]), np.array([2.0])))
    assert solve_at_state(p, np.zeros(2)).status == FEASIBLE
    assert solve_at_state(p, np.array([5.0, 0.9])).status == INFEASIBLE


def test_disturbance_support_tightening():
    # with a disturbance box, late-step state bounds shrink by the
    # accumulated support; a state right at the nominal boundary with no
    # slack becomes infeasible
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    base = dict(horizon=10, dynamics=LinearDynamics(A, B), Q=np.eye(2),
                R=np.array([[1.0]]),
                P=np.zeros((2, 2)),
                state_set=Box(np.array([-6.0, -1.0]), np.array([6.0, 1.0])),
                control_set=Box(np.array([-2.0]), np.array([2.0])))
    x0 = np.array([5.5, 0.9])
    nominal = MpcProblem(**base)
    noisy = MpcProblem(**base, disturbance_set=Box(np.array([-0.05, -0.05]),
                                                   np.array([0.05, 0.05])))
    assert solve_at_state(nominal, x0).status == FEASIBLE
    assert solve_at_state(noisy, x0).status == INFEASIBLE


# ---------------------------------------------------------------------------
# nonlinear solves vs exhaustive enumeration
# ---------------------------------------------------------------------------


def _enumeration_oracle(p, x0, levels):
    """Brute-force N-step control enumeration on a fixed grid."""
    N = p.horizon
    grids = np.meshgrid(*([levels] * N), indexing="ij")
    UU = np.stack([g.ravel() for g in grids], axis=-1)[..., None]  # (k^N,N,1)
    X = np.broadcast_to(x0, (UU.shape[0], 2)).copy()
    J = np.zeros(UU.shape[0])
    ok = np.ones(UU.shape[0], dtype=bool)
    for t in range(N):
        J += np.einsum("bi,ij,bj->b", X, p.Q, X) \
            + p.R[0, 0] * UU[:, t, 0] ** 2
        X = p.dynamics.step(X, UU[:, t])
        ok &= p.state_set.contains(X, tol=1e-12)
    J[~ok] = np.inf
    best = int(np.argmin(J))
    return UU[best, 0, 0], float(J[best])


@pytest.mark.parametrize("x0", [(2.0, -2.0), (1.5, 2.5), (-3.0, 1.0)])
def test_nonlinear_solver_vs_enumeration(duffing_like, x0):
    import dataclasses
    p3 = dataclasses.replace(duffing_like, horizon=3)
    levels = np.linspace(-5.0, 5.0, 9)
    resolution = levels[1] - levels[0]
    u_enum, j_enum = _enumeration_oracle(p3, np.array(x0), levels)
    res = solve_at_state(p3, np.array(x0))
    assert res.status == FEASIBLE
    assert abs(res.control[0] - u_enum) <= resolution
    assert res.value <= j_enum + 1e-9  # continuous optimum dominates the grid


def test_nonlinear_origin(duffing_like):
    res = solve_at_state(duffing_like, np.zeros(2))
    assert res.status == FEASIBLE
    assert np.max(np.abs(res.control)) < 1e-8
    assert res.value == pytest.approx(0.0, abs=1e-10)


def test_nonlinear_infeasible_state(duffing_like):
    # x2 so large that x1 must leave the box next step regardless of u
    res = solve_at_state(duffing_like, np.array([4.95, 4.95]))
    assert res.status == INFEASIBLE


def test_nonlinear_noise_tightens_controls(duffing_like):
    p = duffing_like.with_noise(0.25)
    res = solve_at_state(p, np.array([2.0, 2.0]))
    assert res.status == FEASIBLE
    assert abs(res.control[0]) <= 5.0 - 0.25 + 1e-8


def test_nonlinear_stiff_corner_infeasible(duffing_like):
    # cubic stiffness overwhelms the control authority from here, so the
    # velocity bound cannot be kept
    p = duffing_like.with_noise(0.25)
    assert solve_at_state(p, np.array([3.0, 3.0])).status == INFEASIBLE


def test_ellipsoid_terminal_set_nonlinear():
    dyn = NonlinearDynamics(rhs=("x2 + (0.5 + 0.5*x1)*u1",
                                 "x1 + (0.5 - 2*x2)*u1"),
                            dim=2, control_dim=1, integrator="rk4", ts=0.1)
    P = np.array([[19.6415, 13.1099], [13.1099, 19.6414]])
    p = MpcProblem(horizon=15, dynamics=dyn, Q=0.01 * np.eye(2),
                   R=np.array([[0.01]]), P=P,
                   state_set=Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
                   control_set=Box(np.array([-1.0]), np.array([1.0])),
                   terminal_set=Ellipsoid(P))
    res = solve_at_state(p, np.array([-0.3, -0.4]))
    assert res.status == FEASIBLE
    assert abs(res.control[0]) <= 1.0 + 1e-9
    assert res.value > 0
    # a state whose drift outruns the bilinear control authority
    assert solve_at_state(p, np.array([-0.7, -0.85])).status != FEASIBLE


# ---------------------------------------------------------------------------
# net sampling
# ---------------------------------------------------------------------------


def test_sample_net_shapes_and_interior(double_integrator):
    p = double_integrator.with_noise(0.05)
    net = sample_net(p, 0.25, Box(np.array([-6.0, -1.0]), np.array([6.0, 1.0])))
    assert net.box_shape == (49, 9)
    # interior points are feasible
    interior = net.feasible[10:-10, 2:-2]
    assert interior.all()
    assert net.sup_norm() <= 1.95 + 1e-9


def test_sample_net_single_column(double_integrator):
    net = sample_net(double_integrator, 15.0,
                     Box(np.array([-6.0, -1.0]), np.array([6.0, 1.0])))
    assert net.box_shape == (1, 1)


def test_sample_net_empty_box(double_integrator):
    net = sample_net(double_integrator, 1.0,
                     Box(np.array([0.2, 0.2]), np.array([0.8, 0.8])))
    assert net.n_feasible == 0
    with pytest.raises(EmptyNetError):
        estimate_lipschitz(net)


def test_sample_net_deterministic(duffing_like):
    p = duffing_like.with_noise(0.05)
    box = Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    n1 = sample_net(p, 0.5, box)
    n2 = sample_net(p, 0.5, box)
    assert np.array_equal(n1.values, n2.values)
    assert np.array_equal(n1.feasible, n2.feasible)


# ---------------------------------------------------------------------------
# problem validation
# ---------------------------------------------------------------------------


def test_problem_validation():
    A = np.eye(2)
    B = np.array([[1.0], [0.0]])
    ok = dict(horizon=5, dynamics=LinearDynamics(A, B), Q=np.eye(2),
              R=np.array([[1.0]]), P=np.zeros((2, 2)),
              state_set=Box(-np.ones(2), np.ones(2)),
              control_set=Box(np.array([-1.0]), np.array([1.0])))
    MpcProblem(**ok)
    bad = dict(ok)
    bad["R"] = np.array([[0.0]])
    with pytest.raises(ValueError):
        MpcProblem(**bad)
    bad = dict(ok)
    bad["Q"] = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        MpcProblem(**bad)
    bad = dict(ok)
    bad["state_set"] = Box(np.array([0.5, -1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        MpcProblem(**bad)


def test_origin_fixed_point_enforced():
    dyn = NonlinearDynamics(rhs=("x1 + 1",), dim=1, control_dim=1, ts=0.1)
    with pytest.raises(ValueError):
        MpcProblem(horizon=3, dynamics=dyn, Q=np.eye(1), R=np.eye(1),
                   P=np.zeros((1, 1)),
                   state_set=Box(np.array([-1.0]), np.array([1.0])),
                   control_set=Box(np.array([-1.0]), np.array([1.0])))
