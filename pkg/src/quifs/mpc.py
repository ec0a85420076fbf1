"""Finite-horizon problem model and pointwise feedback oracles.

The oracle answers one question: for a given initial state, what is the
first control of the optimal input sequence of the robustified
finite-horizon problem, or is that problem infeasible there?  Sweeping the
oracle over a grid yields the sample net the rest of the pipeline works on.

Robustification follows a constraint-tightening surrogate of the minmax
formulation: control bounds shrink by the approximation-noise radius, and
state/terminal constraints shrink by the worst-case accumulated effect of
the disturbance-plus-noise set propagated through the dynamics (support
functions for the linear case, first-order interval propagation along the
nominal trajectory for the nonlinear case).  Conservative, but recursive
feasibility carries over and any minmax solver could be substituted
behind the same oracle signature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .dynamics import Dynamics, LinearDynamics, NonlinearDynamics, step_jacobians
from .extend import FeasibleNet
from .qp import FEASIBLE, INFEASIBLE, NONCONVERGED, CondensedQpSolver

_BIG = 1e18


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        # zero width is allowed so {0} control sets stay representable
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def has_origin_interior(self) -> bool:
        return bool(np.all(self.lo < 0) and np.all(self.hi > 0))

    def vertices(self) -> np.ndarray:
        d = self.dim
        out = np.empty((2 ** d, d))
        for i in range(2 ** d):
            bits = [(i >> k) & 1 for k in range(d)]
            out[i] = np.where(bits, self.hi, self.lo)
        return out


@dataclass(frozen=True)
class HPolytope:
    """Rows a_i' x <= b_i."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != b.size:
            raise ValueError("one offset per polytope row is required")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.A.T <= self.b + tol, axis=-1)

    def has_origin_interior(self) -> bool:
        return bool(np.all(self.b > 0))


@dataclass(frozen=True)
class Ellipsoid:
    """Sublevel set {x : x' P x <= 1}."""

    P: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if np.max(np.abs(P - P.T)) > 1e-10 or np.any(np.linalg.eigvalsh(P) <= 0):
            raise ValueError("ellipsoid matrix must be symmetric positive definite")
        object.__setattr__(self, "P", P)

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x) <= 1.0 + tol

    def has_origin_interior(self) -> bool:
        return True


StateSet = Union[Box, HPolytope]
TerminalSet = Union[Box, HPolytope, Ellipsoid]


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    qp_eps: float = 1e-8
    qp_max_iter: int = 20000
    qp_rho: float = 1.0
    nlp_max_iter: int = 100
    nlp_tol: float = 1e-7
    nlp_feas_tol: float = 1e-6
    penalty_stages: tuple = (1e3, 1e5, 1e7)
    seeds: tuple = (0, 1, 2)


def _check_sym(M, name, psd=False, pd=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(M)
    if pd and np.any(w <= 0):
        raise ValueError(f"{name} must be positive definite")
    if psd and np.any(w < -1e-10):
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True, eq=False)
class MpcProblem:
    """Dynamics, costs, constraint sets and horizon of one control problem.

    ``approx_noise`` is the half-width of the control uncertainty cube that
    the synthesis stage injects; zero means the nominal problem.
    """

    horizon: int
    dynamics: Dynamics
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    state_set: StateSet
    control_set: Box
    terminal_set: Optional[TerminalSet] = None
    disturbance_set: Optional[Box] = None
    approx_noise: float = 0.0
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        d, m = self.dynamics.dim, self.dynamics.control_dim
        object.__setattr__(self, "Q", _check_sym(self.Q, "Q", psd=True))
        object.__setattr__(self, "R", _check_sym(self.R, "R", pd=True))
        object.__setattr__(self, "P", _check_sym(self.P, "P", psd=True))
        if self.Q.shape != (d, d) or self.P.shape != (d, d):
            raise ValueError("state cost matrices must be d x d")
        if self.R.shape != (m, m):
            raise ValueError("control cost matrix must be m x m")
        if self.state_set.dim != d or self.control_set.dim != m:
            raise ValueError("constraint sets must match the state/control dims")
        for name, s in (("state", self.state_set),
                        ("terminal", self.terminal_set),
                        ("disturbance", self.disturbance_set)):
            if s is not None and not s.has_origin_interior():
                raise ValueError(f"{name} set must contain the origin in its interior")
        # the control set may degenerate to {0}; it still has to cover 0
        if not self.control_set.contains(np.zeros(m)):
            raise ValueError("control set must contain the origin")
        if self.approx_noise < 0:
            raise ValueError("approximation noise radius must be nonnegative")
        z = np.zeros((1, d))
        zu = np.zeros((1, m))
        if float(np.max(np.abs(self.dynamics.step(z, zu)))) > 1e-9:
            raise ValueError("the origin must be a fixed point of the dynamics")

    @property
    def dim(self) -> int:
        return self.dynamics.dim

    @property
    def control_dim(self) -> int:
        return self.dynamics.control_dim

    @property
    def is_linear(self) -> bool:
        return isinstance(self.dynamics, LinearDynamics)

    def with_noise(self, eps: float) -> "MpcProblem":
        """Copy of this problem with the approximation-noise radius set."""
        return replace(self, approx_noise=float(eps))

    def tightened_control_box(self) -> Box:
        """Control bounds shrunk by the noise radius; a range narrower than
        the noise collapses to its midpoint (the only robust choice left)."""
        eps = self.approx_noise
        lo = self.control_set.lo + eps
        hi = self.control_set.hi - eps
        narrow = lo > hi
        if narrow.any():
            mid = 0.5 * (self.control_set.lo + self.control_set.hi)
            lo = np.where(narrow, mid, lo)
            hi = np.where(narrow, mid, hi)
        return Box(lo=lo, hi=hi)


@dataclass(frozen=True)
class SolverStats:
    iterations: int
    primal_res: float
    dual_res: float


@dataclass(frozen=True)
class OracleResult:
    status: str
    control: Optional[np.ndarray]
    value: Optional[float]
    stats: SolverStats


# ---------------------------------------------------------------------------
# linear path: condensed QP with support-function tightening
# ---------------------------------------------------------------------------


def _box_support(lo, hi, v):
    """sup over w in [lo, hi] of v' w, vectorized over rows of v."""
    return np.sum(np.maximum(v * hi, v * lo), axis=-1)


@lru_cache(maxsize=32)
def _condensed(p: MpcProblem):
    dyn: LinearDynamics = p.dynamics
    A, Bm = dyn.A, dyn.B
    d, m, N = p.dim, p.control_dim, p.horizon
    powers = [np.eye(d)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    gamma = np.vstack([powers[t] for t in range(1, N + 1)])          # (N d, d)
    phi = np.zeros((N * d, N * m))
    for t in range(1, N + 1):
        for k in range(t):
            phi[(t - 1) * d:t * d, k * m:(k + 1) * m] = powers[t - 1 - k] @ Bm
    qbar = np.zeros((N * d, N * d))
    for t in range(1, N):
        qbar[(t - 1) * d:t * d, (t - 1) * d:t * d] = p.Q
    qbar[(N - 1) * d:, (N - 1) * d:] = p.P
    H = 2.0 * (phi.T @ qbar @ phi + np.kron(np.eye(N), p.R))
    H = 0.5 * (H + H.T)
    qmat = 2.0 * (phi.T @ qbar @ gamma)                              # q = qmat @ x0
    cmat = gamma.T @ qbar @ gamma + p.Q

    eps = p.approx_noise
    ubox = p.tightened_control_box()

    def support_path(a_rows, t):
        """Accumulated worst-case offset of noise entering steps 0..t-1."""
        off = np.zeros(a_rows.shape[0])
        v = a_rows
        for _ in range(t):
            if p.disturbance_set is not None:
                off += _box_support(p.disturbance_set.lo, p.disturbance_set.hi, v)
            if eps > 0:
                off += eps * np.sum(np.abs(v @ Bm), axis=-1)
            v = v @ A
        return off

    rows, row_x0, base_lo, base_hi = [], [], [], []
    ident = np.eye(N * m)
    for t in range(N):
        for i in range(m):
            rows.append(ident[t * m + i])
            row_x0.append(np.zeros(d))
            base_lo.append(ubox.lo[i])
            base_hi.append(ubox.hi[i])

    def add_state_rows(constraint, t):
        blk = slice((t - 1) * d, t * d)
        if isinstance(constraint, Box):
            G = np.eye(d)
            off_hi = support_path(G, t)
            off_lo = support_path(-G, t)
            lo_t = constraint.lo + off_lo
            hi_t = constraint.hi - off_hi
            for i in range(d):
                rows.append(G[i] @ phi[blk])
                row_x0.append(G[i] @ gamma[blk])
                base_lo.append(lo_t[i])
                base_hi.append(hi_t[i])
        elif isinstance(constraint, HPolytope):
            off = support_path(constraint.A, t)
            for i in range(constraint.A.shape[0]):
                rows.append(constraint.A[i] @ phi[blk])
                row_x0.append(constraint.A[i] @ gamma[blk])
                base_lo.append(-_BIG)
                base_hi.append(constraint.b[i] - off[i])
        else:
            raise ValueError(
                "ellipsoidal sets are not supported by the linear solver path"
            )

    for t in range(1, N):
        add_state_rows(p.state_set, t)
    if p.terminal_set is not None:
        add_state_rows(p.terminal_set, N)

    Ac = np.vstack(rows)
    solver = CondensedQpSolver(H, Ac, rho=p.options.qp_rho, eps=p.options.qp_eps,
                               max_iter=p.options.qp_max_iter)
    return (solver, qmat, cmat, np.vstack(row_x0),
            np.asarray(base_lo), np.asarray(base_hi))


def _solve_linear_raw(p: MpcProblem, X0: np.ndarray, warm=None):
    solver, qmat, cmat, row_x0, base_lo, base_hi = _condensed(p)
    q = X0 @ qmat.T
    shift = X0 @ row_x0.T
    l = base_lo[None, :] - shift
    ub = base_hi[None, :] - shift
    res = solver.solve(q, l, ub, warm=warm)
    const = np.einsum("bi,ij,bj->b", X0, cmat, X0)
    return res, res.value + const


def _solve_linear_batch(p: MpcProblem, X0: np.ndarray, warm=None):
    res, values = _solve_linear_raw(p, X0, warm)
    in_state = p.state_set.contains(X0, tol=1e-9)
    m = p.control_dim
    controls = res.x[:, :m]
    out = []
    for i in range(X0.shape[0]):
        status = res.status[i] if in_state[i] else INFEASIBLE
        ok = status == FEASIBLE
        out.append(OracleResult(
            status=status,
            control=controls[i].copy() if ok else None,
            value=float(values[i]) if ok else None,
            stats=SolverStats(int(res.iterations[i]), float(res.kkt[i]),
                              float(res.kkt[i])),
        ))
    return out


# ---------------------------------------------------------------------------
# nonlinear path: penalty + accelerated projected gradient, multi-start
# ---------------------------------------------------------------------------


def _state_margins(p: MpcProblem, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Componentwise worst-case state deviation from control noise and
    disturbance, to first order along each trajectory.

    Uses signed transition products |Phi(t,k) B_k| summed over the injection
    step k, which keeps the oscillation cancellations that a plain interval
    recursion would destroy.
    """
    B0, Np1, d = X.shape
    N = Np1 - 1
    m = p.control_dim
    S = np.zeros((B0, N + 1, d))
    eps = p.approx_noise
    wmag = None
    if p.disturbance_set is not None:
        wmag = np.maximum(np.abs(p.disturbance_set.lo),
                          np.abs(p.disturbance_set.hi))
    Jx, Ju = _trajectory_jacobians(p, X, U)
    Jw = _disturbance_jacobians(p, X, U) if wmag is not None else None
    # G[:, k] = Phi(t+1, k) @ B_k, grown by one left factor per step
    G = np.zeros((B0, N, d, m))
    W = np.zeros((B0, N, d, wmag.size)) if wmag is not None else None
    for t in range(N):
        if t > 0:
            G[:, :t] = np.einsum("bij,bkjm->bkim", Jx[:, t], G[:, :t])
            if W is not None:
                W[:, :t] = np.einsum("bij,bkjm->bkim", Jx[:, t], W[:, :t])
        G[:, t] = Ju[:, t]
        if W is not None:
            W[:, t] = Jw[:, t]
        S[:, t + 1] = eps * np.sum(np.abs(G[:, :t + 1]), axis=(1, 3))
        if W is not None:
            S[:, t + 1] += np.einsum("bkij,j->bi", np.abs(W[:, :t + 1]), wmag)
    return S


def _disturbance_jacobians(p: MpcProblem, X, U, delta: float = 1e-5):
    """d(step)/dw along the trajectory, by central differences."""
    B0, Np1, d = X.shape
    N = Np1 - 1
    dyn = p.dynamics
    if isinstance(dyn, LinearDynamics):
        return np.broadcast_to(np.eye(d), (B0, N, d, d))
    pdim = max(dyn.disturbance_dim, 1)
    Xf = X[:, :N].reshape(B0 * N, d)
    Uf = U.reshape(B0 * N, p.control_dim)
    E = np.empty((B0 * N, d, pdim))
    for k in range(pdim):
        e = np.zeros(pdim)
        e[k] = delta
        wp = np.broadcast_to(e, (B0 * N, pdim))
        E[:, :, k] = (dyn.step(Xf, Uf, wp) - dyn.step(Xf, Uf, -wp)) / (2 * delta)
    return E.reshape(B0, N, d, pdim)


def _rollout(p: MpcProblem, X0: np.ndarray, U: np.ndarray) -> np.ndarray:
    B0, N, m = U.shape
    X = np.empty((B0, N + 1, p.dim))
    X[:, 0] = X0
    for t in range(N):
        X[:, t + 1] = p.dynamics.step(X[:, t], U[:, t])
    return X


def _violations(p: MpcProblem, X: np.ndarray, margins: np.ndarray):
    """Per-point stacked constraint excess over steps 1..N (tightened)."""
    B0, Np1, d = X.shape
    N = Np1 - 1
    excess = np.zeros((B0, 0))
    for t in range(1, N + 1):
        terminal = t == N
        cons = p.terminal_set if (terminal and p.terminal_set is not None) \
            else (None if terminal else p.state_set)
        if cons is None:
            continue
        st = margins[:, t]
        if isinstance(cons, Box):
            e = np.maximum(0.0, np.maximum(X[:, t] - (cons.hi[None, :] - st),
                                           (cons.lo[None, :] + st) - X[:, t]))
        elif isinstance(cons, HPolytope):
            off = st @ np.abs(cons.A).T
            e = np.maximum(0.0, X[:, t] @ cons.A.T - (cons.b[None, :] - off))
        else:  # Ellipsoid, shrink the level radius by the margin
            lam = math.sqrt(float(np.max(np.linalg.eigvalsh(cons.P))))
            lvl = np.einsum("bi,ij,bj->b", X[:, t], cons.P, X[:, t])
            level = np.maximum(1.0 - lam * np.linalg.norm(st, axis=1), 0.0)
            e = np.maximum(0.0, np.sqrt(np.maximum(lvl, 0.0)) - level)[:, None]
        excess = np.concatenate([excess, e], axis=1)
    return excess


def _trajectory_jacobians(p: MpcProblem, X, U):
    """Step Jacobians at every (x_t, u_t), time axis folded into the batch."""
    B0, N, m = U.shape
    d = p.dim
    Jx, Ju = step_jacobians(p.dynamics, X[:, :N].reshape(B0 * N, d),
                            U.reshape(B0 * N, m))
    return Jx.reshape(B0, N, d, d), Ju.reshape(B0, N, d, m)


def _nl_cost_grad(p: MpcProblem, X0, U, margins, rho_pen, want_grad=True):
    """Objective with quadratic penalty, and its gradient via the adjoint."""
    B0, N, m = U.shape
    d = p.dim
    X = _rollout(p, X0, U)
    J = np.einsum("bti,ij,btj->b", X[:, :N], p.Q, X[:, :N]) \
        + np.einsum("bti,ij,btj->b", U, p.R, U) \
        + np.einsum("bi,ij,bj->b", X[:, N], p.P, X[:, N])
    pen_grad = np.zeros_like(X)
    pen = np.zeros(B0)
    for t in range(1, N + 1):
        terminal = t == N
        cons = p.terminal_set if (terminal and p.terminal_set is not None) \
            else (None if terminal else p.state_set)
        if cons is None:
            continue
        st = margins[:, t]
        if isinstance(cons, Box):
            over = np.maximum(0.0, X[:, t] - (cons.hi[None, :] - st))
            under = np.maximum(0.0, (cons.lo[None, :] + st) - X[:, t])
            pen += np.sum(over * over + under * under, axis=1)
            pen_grad[:, t] += 2.0 * (over - under)
        elif isinstance(cons, HPolytope):
            off = st @ np.abs(cons.A).T
            e = np.maximum(0.0, X[:, t] @ cons.A.T - (cons.b[None, :] - off))
            pen += np.sum(e * e, axis=1)
            pen_grad[:, t] += 2.0 * e @ cons.A
        else:
            lam = math.sqrt(float(np.max(np.linalg.eigvalsh(cons.P))))
            shrink = np.maximum(1.0 - lam * np.linalg.norm(st, axis=1), 1e-9)
            lvl = np.einsum("bi,ij,bj->b", X[:, t], cons.P, X[:, t])
            e = np.maximum(0.0, lvl - shrink ** 2)
            pen += e * e
            pen_grad[:, t] += (4.0 * e)[:, None] * (X[:, t] @ cons.P)
    total = J + rho_pen * pen
    if not want_grad:
        return total, X
    Jx, Ju = _trajectory_jacobians(p, X, U)
    G = np.empty_like(U)
    lam_adj = 2.0 * (X[:, N] @ p.P) + rho_pen * pen_grad[:, N]
    for t in range(N - 1, -1, -1):
        G[:, t] = 2.0 * (U[:, t] @ p.R) + np.einsum("bij,bi->bj", Ju[:, t], lam_adj)
        lam_adj = 2.0 * (X[:, t] @ p.Q) + rho_pen * pen_grad[:, t] \
            + np.einsum("bij,bi->bj", Jx[:, t], lam_adj)
    return total, X, G


def _penalty_quadratics(p: MpcProblem, X, margins, rho_pen):
    """Gradient and Gauss-Newton Hessian of the state penalty, per step."""
    B0, Np1, d = X.shape
    grad = np.zeros((B0, Np1, d))
    hess = np.zeros((B0, Np1, d, d))
    for t in range(1, Np1):
        terminal = t == Np1 - 1
        cons = p.terminal_set if (terminal and p.terminal_set is not None) \
            else (None if terminal else p.state_set)
        if cons is None:
            continue
        st = margins[:, t]
        if isinstance(cons, Box):
            over = np.maximum(0.0, X[:, t] - (cons.hi[None, :] - st))
            under = np.maximum(0.0, (cons.lo[None, :] + st) - X[:, t])
            grad[:, t] = 2.0 * rho_pen * (over - under)
            active = ((over > 0) | (under > 0)).astype(float)
            hess[:, t] = 2.0 * rho_pen * active[:, :, None] * np.eye(d)[None]
        elif isinstance(cons, HPolytope):
            off = st @ np.abs(cons.A).T
            e = np.maximum(0.0, X[:, t] @ cons.A.T - (cons.b[None, :] - off))
            grad[:, t] = 2.0 * rho_pen * e @ cons.A
            act = (e > 0).astype(float)
            hess[:, t] = 2.0 * rho_pen * np.einsum(
                "bk,ki,kj->bij", act, cons.A, cons.A)
        else:
            lam = math.sqrt(float(np.max(np.linalg.eigvalsh(cons.P))))
            shrink = np.maximum(1.0 - lam * np.linalg.norm(st, axis=1), 1e-9)
            lvl = np.einsum("bi,ij,bj->b", X[:, t], cons.P, X[:, t])
            e = np.maximum(0.0, lvl - shrink ** 2)
            px = X[:, t] @ cons.P
            grad[:, t] = rho_pen * (4.0 * e)[:, None] * px
            hess[:, t] = rho_pen * 8.0 * np.einsum("bi,bj->bij", px, px) \
                + rho_pen * (4.0 * e)[:, None, None] * (2.0 * cons.P)[None]
        hess[:, t] = 0.5 * (hess[:, t] + np.swapaxes(hess[:, t], 1, 2))
    return grad, hess


def _sqp_lite(p: MpcProblem, X0, U, margins, rho_pen, max_iter, tol):
    """Batched Gauss-Newton sweep solver with clamped control updates.

    Each iteration builds the local quadratic value recursion along the
    current trajectory, computes feedforward/feedback corrections with the
    controls clamped into their tightened box, and line-searches the
    forward roll.  Converged points freeze and drop out of the batch.
    """
    ubox = p.tightened_control_box()
    lo, hi = ubox.lo[None, None, :], ubox.hi[None, None, :]
    lo1, hi1 = ubox.lo[None, :], ubox.hi[None, :]
    N, d, m = p.horizon, p.dim, p.control_dim
    B_all = U.shape[0]
    U_out = U.copy()
    J_out = np.empty(B_all)
    pg_out = np.full(B_all, np.inf)
    act = np.arange(B_all)
    X0a, Ma = X0, margins
    Uk = np.clip(U, lo, hi)
    Jk, _ = _nl_cost_grad(p, X0a, Uk, Ma, rho_pen, want_grad=False)
    mu = np.full(B_all, 1e-8)
    alphas = np.array([1.0, 0.5, 0.25, 0.1, 0.03, 0.01, 0.003])
    for _ in range(max_iter):
        B0 = act.size
        X = _rollout(p, X0a, Uk)
        Jx, Ju = _trajectory_jacobians(p, X, Uk)
        pg_t, ph_t = _penalty_quadratics(p, X, Ma, rho_pen)
        Vx = 2.0 * (X[:, N] @ p.P) + pg_t[:, N]
        Vxx = np.broadcast_to(2.0 * p.P, (B0, d, d)) + ph_t[:, N]
        ks = np.empty((B0, N, m))
        Ks = np.empty((B0, N, m, d))
        maxk = np.zeros(B0)
        for t in range(N - 1, -1, -1):
            A_t, B_t = Jx[:, t], Ju[:, t]
            Qx = 2.0 * (X[:, t] @ p.Q) + pg_t[:, t] \
                + np.einsum("bij,bi->bj", A_t, Vx)
            Qu = 2.0 * (Uk[:, t] @ p.R) + np.einsum("bij,bi->bj", B_t, Vx)
            VA = np.einsum("bij,bjk->bik", Vxx, A_t)
            VB = np.einsum("bij,bjk->bik", Vxx, B_t)
            Qxx = np.broadcast_to(2.0 * p.Q, (B0, d, d)) \
                + ph_t[:, t] + np.einsum("bji,bjk->bik", A_t, VA)
            Quu = np.broadcast_to(2.0 * p.R, (B0, m, m)) \
                + np.einsum("bji,bjk->bik", B_t, VB) \
                + mu[:, None, None] * np.eye(m)[None]
            Qux = np.einsum("bji,bjk->bik", B_t, VA)
            Qinv = np.linalg.inv(Quu)
            k_t = -np.einsum("bij,bj->bi", Qinv, Qu)
            K_t = -np.einsum("bij,bjk->bik", Qinv, Qux)
            # clamp the nominal update; freeze feedback on clamped coordinates
            clip_hi = Uk[:, t] + k_t > hi1
            clip_lo = Uk[:, t] + k_t < lo1
            k_t = np.clip(Uk[:, t] + k_t, lo1, hi1) - Uk[:, t]
            K_t[clip_hi | clip_lo] = 0.0
            ks[:, t] = k_t
            Ks[:, t] = K_t
            maxk = np.maximum(maxk, np.max(np.abs(k_t), axis=1))
            Vx = Qx + np.einsum("bij,bi->bj", K_t, Qu + np.einsum(
                "bij,bj->bi", Quu, k_t)) + np.einsum("bij,bi->bj", Qux, k_t)
            Vxx = Qxx + np.einsum("bji,bjk,bkl->bil", K_t, Quu, K_t) \
                + np.einsum("bji,bjk->bik", K_t, Qux) \
                + np.einsum("bji,bjk->bik", Qux, K_t)
            Vxx = 0.5 * (Vxx + np.swapaxes(Vxx, 1, 2))
        # forward pass with per-point step selection
        J_best = Jk.copy()
        U_best = Uk.copy()
        improved = np.zeros(B0, dtype=bool)
        for alpha in alphas:
            Utrial = np.empty_like(Uk)
            xs = X0a
            for t in range(N):
                du = alpha * ks[:, t] + np.einsum(
                    "bij,bj->bi", Ks[:, t], xs - X[:, t])
                Utrial[:, t] = np.clip(Uk[:, t] + du, lo1, hi1)
                xs = p.dynamics.step(xs, Utrial[:, t])
            Jt, _ = _nl_cost_grad(p, X0a, Utrial, Ma, rho_pen, want_grad=False)
            gain = Jt < J_best - 1e-14
            if gain.any():
                U_best[gain] = Utrial[gain]
                J_best[gain] = Jt[gain]
                improved |= gain
            if improved.all():
                break
        mu = np.where(improved, np.maximum(mu * 0.3, 1e-8),
                      np.minimum(mu * 10.0 + 1e-8, 1e6))
        moved = np.max(np.abs(U_best - Uk), axis=(1, 2))
        Uk, Jk = U_best, J_best
        done = (moved < tol) & (maxk < 10 * tol)
        stuck = (~improved) & (mu >= 1e6)
        out_now = done | stuck
        if out_now.any():
            sub = act[out_now]
            U_out[sub] = Uk[out_now]
            J_out[sub] = Jk[out_now]
            keep = ~out_now
            if not keep.any():
                act = act[:0]
                break
            act = act[keep]
            X0a, Ma, Uk, Jk, mu = X0a[keep], Ma[keep], Uk[keep], Jk[keep], mu[keep]
    if act.size:
        U_out[act] = Uk
        J_out[act] = Jk
    # stationarity: projected gradient residual at unit pseudo-step
    _, _, G = _nl_cost_grad(p, X0, U_out, margins, rho_pen)
    pg_out = np.max(np.abs(U_out - np.clip(U_out - G, lo, hi)), axis=(1, 2))
    return U_out, None, pg_out


def _optimize_multistart(p: MpcProblem, X0: np.ndarray, margins: np.ndarray):
    """Best-of-three-starts solve at fixed margins; escalates the penalty
    only for the points still violating after each stage."""
    opts = p.options
    N, m = p.horizon, p.control_dim
    B0 = X0.shape[0]
    ubox = p.tightened_control_box()
    best_U = None
    best_J = np.full(B0, np.inf)
    best_viol = np.full(B0, np.inf)
    best_pg = np.full(B0, np.inf)
    for k, sd in enumerate(opts.seeds):
        if k == 0:
            U = np.zeros((B0, N, m))
        else:
            rng = np.random.default_rng(sd)
            U = rng.uniform(ubox.lo, ubox.hi, size=(B0, N, m))
        U, _, pg = _sqp_lite(p, X0, U, margins, opts.penalty_stages[0],
                             opts.nlp_max_iter, opts.nlp_tol)
        X = _rollout(p, X0, U)
        viol = np.max(_violations(p, X, margins), axis=1, initial=0.0)
        for rho_pen in opts.penalty_stages[1:]:
            sel = viol > opts.nlp_feas_tol
            if not sel.any():
                break
            Us, _, pgs = _sqp_lite(p, X0[sel], U[sel], margins[sel], rho_pen,
                                   opts.nlp_max_iter, opts.nlp_tol)
            U[sel] = Us
            pg[sel] = pgs
            Xs = _rollout(p, X0[sel], Us)
            viol[sel] = np.max(_violations(p, Xs, margins[sel]), axis=1,
                               initial=0.0)
            X[sel] = Xs
        Jpure = (np.einsum("bti,ij,btj->b", X[:, :N], p.Q, X[:, :N])
                 + np.einsum("bti,ij,btj->b", U, p.R, U)
                 + np.einsum("bi,ij,bj->b", X[:, N], p.P, X[:, N]))
        take = _lex_better(viol, Jpure, U, best_viol, best_J, best_U,
                           opts.nlp_feas_tol)
        if best_U is None:
            best_U = U.copy()
        else:
            best_U[take] = U[take]
        best_J = np.where(take, Jpure, best_J)
        best_viol = np.where(take, viol, best_viol)
        best_pg = np.where(take, pg, best_pg)
    return best_U, best_J, best_viol, best_pg


def _solve_nonlinear_batch(p: MpcProblem, X0: np.ndarray):
    opts = p.options
    N, d = p.horizon, p.dim
    B0 = X0.shape[0]
    in_state = p.state_set.contains(X0, tol=1e-9)

    margins = np.zeros((B0, N + 1, d))
    best_U, best_J, best_viol, best_pg = _optimize_multistart(p, X0, margins)

    # one margin refinement: re-solve only the points whose noise-tightened
    # constraints are violated by the nominal solution
    if p.approx_noise > 0 or p.disturbance_set is not None:
        X = _rollout(p, X0, best_U)
        margins = _state_margins(p, X, best_U)
        viol_m = np.max(_violations(p, X, margins), axis=1, initial=0.0)
        redo = viol_m > opts.nlp_feas_tol
        best_viol = viol_m
        if redo.any():
            U2, J2, v2, pg2 = _optimize_multistart(p, X0[redo], margins[redo])
            best_U[redo] = U2
            best_J[redo] = J2
            best_viol[redo] = v2
            best_pg[redo] = pg2

    out = []
    for i in range(B0):
        if not in_state[i]:
            out.append(OracleResult(INFEASIBLE, None, None, SolverStats(0, 0.0, 0.0)))
            continue
        feas = best_viol[i] <= opts.nlp_feas_tol
        stationary = best_pg[i] <= 100 * opts.nlp_tol
        if feas:
            out.append(OracleResult(
                FEASIBLE, best_U[i, 0].copy(), float(best_J[i]),
                SolverStats(opts.nlp_max_iter, float(best_viol[i]),
                            float(best_pg[i]))))
        elif stationary:
            out.append(OracleResult(INFEASIBLE, None, None,
                                    SolverStats(opts.nlp_max_iter,
                                                float(best_viol[i]), 0.0)))
        else:
            out.append(OracleResult(NONCONVERGED, None, None,
                                    SolverStats(opts.nlp_max_iter,
                                                float(best_viol[i]),
                                                float(best_pg[i]))))
    return out


def _lex_better(viol, J, U, best_viol, best_J, best_U, feas_tol):
    """Feasibility first, then value, then lexicographic control order."""
    if best_U is None:
        return np.ones(viol.shape[0], dtype=bool)
    feas_new = viol <= feas_tol
    feas_old = best_viol <= feas_tol
    better = (feas_new & ~feas_old) | (~feas_new & ~feas_old & (viol < best_viol))
    both = feas_new & feas_old
    if both.any():
        jb = both & (J < best_J - 1e-12)
        tie = both & (np.abs(J - best_J) <= 1e-12)
        if tie.any():
            flat_new = U.reshape(U.shape[0], -1)
            flat_old = best_U.reshape(best_U.shape[0], -1)
            diff = flat_new - flat_old
            first = np.argmax(np.abs(diff) > 1e-12, axis=1)
            lex = diff[np.arange(diff.shape[0]), first] < 0
            jb = jb | (tie & lex)
        better = better | jb
    return better


# ---------------------------------------------------------------------------
# public oracle API
# ---------------------------------------------------------------------------


def solve_at_state(p: MpcProblem, x0) -> OracleResult:
    """First optimal control of the tightened problem at one initial state."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    return solve_at_states(p, x0[None, :])[0]


def solve_at_states(p: MpcProblem, X0) -> list:
    """Batch oracle; one OracleResult per row of X0."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != p.dim:
        raise ValueError("initial states must match the problem dimension")
    if p.is_linear:
        return _solve_linear_batch(p, X0)
    return _solve_nonlinear_batch(p, X0)


def sample_net(p: MpcProblem, h: float, box: Box, chunk: int = 65536) -> FeasibleNet:
    """Solve the oracle on the spacing-h lattice inside ``box``.

    Feasible points carry their first optimal control; infeasible points are
    holes, and points where the solver gave up are both holes and flagged in
    the separate nonconverged mask.  Deterministic for fixed problem data.
    """
    if h <= 0:
        raise ValueError("net spacing must be positive")
    d = p.dim
    lo_idx = np.array([math.ceil(box.lo[k] / h - 1e-12) for k in range(d)],
                      dtype=np.int64)
    hi_idx = np.array([math.floor(box.hi[k] / h + 1e-12) for k in range(d)],
                      dtype=np.int64)
    if np.any(hi_idx < lo_idx):
        shape = tuple((np.maximum(hi_idx - lo_idx + 1, 0)).tolist())
        return FeasibleNet(spacing=h, lo=lo_idx,
                           values=np.zeros(shape + (p.control_dim,)),
                           feasible=np.zeros(shape, dtype=bool),
                           nonconverged=np.zeros(shape, dtype=bool),
                           offset=np.zeros(d))
    axes = [np.arange(lo_idx[k], hi_idx[k] + 1) for k in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    shape = grids[0].shape
    pts = np.stack([grid.ravel() for grid in grids], axis=-1).astype(float) * h
    n = pts.shape[0]
    values = np.full((n, p.control_dim), np.nan)
    feas = np.zeros(n, dtype=bool)
    nonc = np.zeros(n, dtype=bool)
    if p.is_linear and n > 4096:
        values, feas, nonc = _sample_linear_warm(p, pts, shape, chunk)
    else:
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            for i, res in enumerate(solve_at_states(p, pts[sl])):
                j = start + i
                if res.status == FEASIBLE:
                    feas[j] = True
                    values[j] = res.control
                elif res.status == NONCONVERGED:
                    nonc[j] = True
    return FeasibleNet(
        spacing=h, lo=lo_idx,
        values=values.reshape(shape + (p.control_dim,)),
        feasible=feas.reshape(shape), nonconverged=nonc.reshape(shape),
        offset=np.zeros(d),
    )


def _sample_linear_warm(p: MpcProblem, pts: np.ndarray, shape: tuple,
                        chunk: int, stride: int = 4):
    """Two-pass grid sweep: solve a coarse subgrid cold, then warm-start
    every point from its nearest coarse neighbor.  Deterministic."""
    d = len(shape)
    n = pts.shape[0]
    coarse_axes = [np.unique(np.r_[np.arange(0, shape[k], stride), shape[k] - 1])
                   for k in range(d)]
    cgrids = np.meshgrid(*coarse_axes, indexing="ij")
    cshape = cgrids[0].shape
    cflat = np.ravel_multi_index(tuple(g.ravel() for g in cgrids), shape)
    cres, _ = _solve_linear_raw(p, pts[cflat])

    # map each grid point to its nearest coarse point, per axis
    nearest = []
    for k in range(d):
        ax = coarse_axes[k]
        pos = np.clip(np.searchsorted(ax, np.arange(shape[k])), 0, ax.size - 1)
        left = np.clip(pos - 1, 0, ax.size - 1)
        use_left = np.abs(ax[left] - np.arange(shape[k])) \
            <= np.abs(ax[pos] - np.arange(shape[k]))
        nearest.append(np.where(use_left, left, pos))
    mgrids = np.meshgrid(*nearest, indexing="ij")
    cmap = np.ravel_multi_index(tuple(g.ravel() for g in mgrids), cshape)

    values = np.full((n, p.control_dim), np.nan)
    feas = np.zeros(n, dtype=bool)
    nonc = np.zeros(n, dtype=bool)
    in_state = p.state_set.contains(pts, tol=1e-9)
    m = p.control_dim
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        src = cmap[sl]
        warm = (cres.x[src], cres.z[src], cres.y[src])
        res, _ = _solve_linear_raw(p, pts[sl], warm=warm)
        ok = (res.status == FEASIBLE) & in_state[sl]
        feas[sl] = ok
        values[sl.start + np.nonzero(ok)[0]] = res.x[ok][:, :m]
        nonc[sl] = (res.status == NONCONVERGED) & in_state[sl]
    return values, feas, nonc


def riccati_reference(p: MpcProblem) -> list:
    """Finite-horizon backward-recursion gains; test oracle for the
    unconstrained linear case (u_t = -K_t x_t)."""
    if not p.is_linear:
        raise ValueError("the recursion reference needs linear dynamics")
    A, Bm = p.dynamics.A, p.dynamics.B
    if np.any(np.linalg.eigvalsh(p.R) <= 0):
        raise ValueError("control cost must be positive definite")
    Pk = p.P.copy()
    gains = []
    for _ in range(p.horizon):
        S = p.R + Bm.T @ Pk @ Bm
        K = np.linalg.solve(S, Bm.T @ Pk @ A)
        Pk = p.Q + A.T @ Pk @ A - A.T @ Pk @ Bm @ K
        Pk = 0.5 * (Pk + Pk.T)
        gains.append(K)
    gains.reverse()
    return gains
