"""Dense operator-splitting solver for batches of box-constrained QPs.

Solves  minimize 0.5 u'Hu + q'u  subject to  l <= A u <= ub  for many
right-hand sides (q, l, ub) sharing the same H and A, which is exactly the
shape of a condensed finite-horizon problem swept over a grid of initial
states.  The iteration is the standard over-relaxed splitting with a fixed
penalty and a shared dense factorization; converged points are polished by
an active-set equality solve so KKT residuals land well below the 1e-8
target, and primal infeasibility is certified from the dual increment
direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NONCONVERGED = "nonconverged"

_BIG = 1e18  # stands in for an absent bound


@dataclass(frozen=True)
class QpBatchResult:
    status: np.ndarray      # object array of status strings, (B,)
    x: np.ndarray           # (B, n) primal solutions (garbage where infeasible)
    value: np.ndarray       # (B,) objective values
    iterations: np.ndarray  # (B,)
    kkt: np.ndarray         # (B,) max of primal/dual residual at exit
    z: np.ndarray = None    # final slack iterates, for warm starting
    y: np.ndarray = None    # final dual iterates, for warm starting


class CondensedQpSolver:
    """Operator-splitting solver with shared matrices across the batch."""

    def __init__(self, H: np.ndarray, A: np.ndarray, rho: float = 1.0,
                 sigma: float = 1e-6, alpha: float = 1.6,
                 eps: float = 1e-8, eps_pinf: float = 1e-10,
                 max_iter: int = 20000, check_every: int = 50):
        self.H = np.asarray(H, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.n = self.H.shape[0]
        self.m = self.A.shape[0]
        self.rho = rho
        self.sigma = sigma
        self.alpha = alpha
        self.eps = eps
        self.eps_pinf = eps_pinf
        self.max_iter = max_iter
        self.check_every = check_every
        M = self.H + sigma * np.eye(self.n) + rho * (self.A.T @ self.A)
        self._Minv = np.linalg.inv(M)

    def solve(self, q: np.ndarray, l: np.ndarray, ub: np.ndarray,
              warm=None) -> QpBatchResult:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        l = np.atleast_2d(np.asarray(l, dtype=float))
        ub = np.atleast_2d(np.asarray(ub, dtype=float))
        B = q.shape[0]
        n, m = self.n, self.m
        if warm is None:
            x = np.zeros((B, n))
            z = np.zeros((B, m))
            y = np.zeros((B, m))
        else:
            x, z, y = (np.array(w, dtype=float) for w in warm)
        status = np.array([NONCONVERGED] * B, dtype=object)
        iters = np.zeros(B, dtype=int)
        kkt = np.full(B, np.inf)
        xout = np.zeros((B, n))
        zout = np.zeros((B, m))
        yout = np.zeros((B, m))

        live = np.arange(B)
        # rows with inverted bounds are infeasible outright
        bad = np.any(l > ub + 1e-12, axis=1)
        status[bad] = INFEASIBLE
        live = live[~bad]
        q_l, l_l, u_l = q[live], l[live], ub[live]
        x_l, z_l, y_l = x[live], z[live], y[live]

        it = 0
        while live.size and it < self.max_iter:
            span = min(self.check_every, self.max_iter - it)
            y_prev = y_l.copy()
            for _ in range(span):
                rhs = self.sigma * x_l - q_l + (self.rho * z_l - y_l) @ self.A
                x_t = rhs @ self._Minv.T
                z_t = x_t @ self.A.T
                x_l = self.alpha * x_t + (1 - self.alpha) * x_l
                z_mix = self.alpha * z_t + (1 - self.alpha) * z_l + y_l / self.rho
                z_new = np.clip(z_mix, l_l, u_l)
                y_l = self.rho * (z_mix - z_new)  # z_mix already carries y/rho
                z_l = z_new
            it += span

            ax = x_l @ self.A.T
            pri = np.max(np.abs(ax - z_l), axis=1)
            dua = np.max(np.abs(x_l @ self.H.T + q_l + y_l @ self.A), axis=1)
            done = np.zeros(live.size, dtype=bool)
            # polish attempts are cheap; try as soon as the active set looks
            # settled rather than waiting for tight splitting residuals
            maybe = (pri < 1e-3) & (dua < 1e-3)
            crude = (pri < self.eps) & (dua < self.eps)
            cand = np.nonzero(maybe | crude)[0]
            if cand.size:
                px_c, pk_c = self._polish_batch(q_l[cand], l_l[cand],
                                                u_l[cand], z_l[cand])
                for ci, i in enumerate(cand):
                    good = pk_c[ci] <= self.eps
                    if good or crude[i]:
                        j = live[i]
                        xout[j] = px_c[ci] if good else x_l[i]
                        zout[j] = z_l[i]
                        yout[j] = y_l[i]
                        kkt[j] = pk_c[ci] if good else max(pri[i], dua[i])
                        status[j] = FEASIBLE
                        iters[j] = it
                        done[i] = True

            dy = y_l - y_prev
            inf_mask = self._primal_infeasible_batch(dy, l_l, u_l) & ~done
            for i in np.nonzero(inf_mask)[0]:
                j = live[i]
                status[j] = INFEASIBLE
                iters[j] = it
                zout[j] = z_l[i]
                yout[j] = y_l[i]
                done[i] = True

            if done.any():
                keep = ~done
                live = live[keep]
                q_l, l_l, u_l = q_l[keep], l_l[keep], u_l[keep]
                x_l, z_l, y_l = x_l[keep], z_l[keep], y_l[keep]

        for i, j in enumerate(live):
            xout[j] = x_l[i]
            zout[j] = z_l[i]
            yout[j] = y_l[i]
            iters[j] = it
        value = np.einsum("bi,ij,bj->b", xout, self.H, xout) * 0.5 \
            + np.sum(xout * q, axis=1)
        return QpBatchResult(status=status, x=xout, value=value,
                             iterations=iters, kkt=kkt, z=zout, y=yout)

    def _polish_batch(self, q, l, ub, z, tol_act: float = 1e-7):
        """Active-set equality solve, grouped by activity signature.

        Points sharing a signature share one factorization; the grid sweep
        has few distinct active sets, so this is the fast path.
        """
        k = q.shape[0]
        low = (z <= l + tol_act) & (l > -_BIG)
        up = (ub - z <= tol_act) & (ub < _BIG) & ~low
        codes = (low.astype(np.int8) + 2 * up.astype(np.int8))
        _, inverse = np.unique(codes, axis=0, return_inverse=True)
        px = np.zeros((k, self.n))
        pk = np.full(k, np.inf)
        for gid in np.unique(inverse):
            members = np.nonzero(inverse == gid)[0]
            i0 = members[0]
            act = np.nonzero(low[i0] | up[i0])[0]
            na = act.size
            Aa = self.A[act]
            K = np.zeros((self.n + na, self.n + na))
            K[:self.n, :self.n] = self.H
            K[:self.n, self.n:] = Aa.T
            K[self.n:, :self.n] = Aa
            K[self.n:, self.n:] = -1e-12 * np.eye(na)
            ba = np.where(low[i0][act][None, :], l[members][:, act],
                          ub[members][:, act])
            rhs = np.concatenate([-q[members], ba], axis=1)
            try:
                sol = np.linalg.solve(K, rhs.T).T
            except np.linalg.LinAlgError:
                continue
            gx = sol[:, :self.n]
            gy = sol[:, self.n:]
            gz = gx @ self.A.T
            pri = np.max(np.maximum(gz - ub[members], l[members] - gz),
                         axis=1, initial=0.0)
            dua = np.max(np.abs(gx @ self.H.T + q[members] + gy @ Aa), axis=1)
            comp_lo = np.where(low[i0][act][None, :], gy, 0.0)
            comp_hi = np.where(up[i0][act][None, :], gy, 0.0)
            comp_ok = (np.all(comp_lo <= 1e-9, axis=1)
                       & np.all(comp_hi >= -1e-9, axis=1))
            res = np.where(comp_ok, np.maximum(pri, dua), np.inf)
            px[members] = gx
            pk[members] = res
        return px, pk

    def _primal_infeasible_batch(self, dy, l, ub, tol: float = 1e-7):
        """Certificate test on the dual increment direction, whole batch."""
        nrm = np.max(np.abs(dy), axis=1)
        viable = nrm > self.eps_pinf
        safe = np.where(nrm > 0, nrm, 1.0)[:, None]
        v = dy / safe
        pos, neg = np.maximum(v, 0.0), np.minimum(v, 0.0)
        # a certificate needs no mass on absent bounds
        ok_support = ~(np.any(pos * (ub >= _BIG) > tol, axis=1)
                       | np.any(-neg * (l <= -_BIG) > tol, axis=1))
        gap = (np.sum(np.where(pos > 0, ub * pos, 0.0), axis=1)
               + np.sum(np.where(neg < 0, l * neg, 0.0), axis=1))
        atv = np.max(np.abs(v @ self.A), axis=1)
        return viable & ok_support & (gap < -tol) & (atv < tol)
