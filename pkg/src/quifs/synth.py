"""End-to-end policy synthesis: budget, sample, extend, interpolate, restrict.

The pipeline turns a problem plus an error margin into a deployable lookup
policy:

  1. pilot-sample a coarse grid to estimate the feedback's sup norm and
     Lipschitz rank (the rank estimate is doubled for safety unless the
     configuration asserts one);
  2. pick (D, h, r0) so the three error sources split the margin;
  3. solve the tightened problem on the spacing-h net;
  4. extend the samples over every lattice point a stencil can reach;
  5. freeze the result together with its certificate.

Evaluation clips the interpolant into the control box; the clip can move a
value by at most the certified error, because the sampled feedback already
lives in the noise-tightened box.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .budget import ApproximationBudget, select_budget
from .errors import EmptyNetError, SynthesisError
from .extend import (FeasibleNet, dilated_target_box, estimate_lipschitz,
                     lipschitz_extend)
from .interp import LatticeField, truncated_interpolate
from .kernels import GeneratingFunction, catalog
from .mpc import Box, MpcProblem, sample_net, solve_at_states
from .qp import FEASIBLE, NONCONVERGED


@dataclass(frozen=True)
class ExplicitPolicy:
    """Deployable truncated interpolant with its certificate and domain test.

    The domain predicate accepts x when the nearest lattice index (the
    infinity-norm h/2 cell) is a feasible net point; stencils reachable
    from any such x are fully populated by construction.
    """

    field: LatticeField
    kernel: GeneratingFunction
    budget: ApproximationBudget
    control_lo: np.ndarray
    control_hi: np.ndarray
    config_hash: str = ""

    @property
    def dim(self) -> int:
        return self.field.dim

    @property
    def control_dim(self) -> int:
        return self.field.control_dim

    def domain_mask(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self.field.spacing
        idx = np.rint((x - self.field.offset[None, :]) / h).astype(np.int64)
        rel = idx - self.field.lo[None, :]
        shape = np.array(self.field.box_shape)
        inside = np.all((rel >= 0) & (rel < shape[None, :]), axis=1)
        ok = np.zeros(x.shape[0], dtype=bool)
        if inside.any():
            flat = np.ravel_multi_index(tuple(rel[inside].T), tuple(shape))
            ok[inside] = self.field.feasible.reshape(-1)[flat]
        return ok

    def domain_contains(self, x) -> bool:
        return bool(self.domain_mask(np.atleast_1d(np.asarray(x, float))[None, :])[0])


def evaluate_policy(pol: ExplicitPolicy, x) -> Optional[np.ndarray]:
    """Policy value at one state, or None when x is outside the domain."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    vals, ok = evaluate_policy_batch(pol, x[None, :])
    return vals[0] if ok[0] else None


def evaluate_policy_batch(pol: ExplicitPolicy, X):
    """Vectorized evaluation; returns (values, in_domain mask).

    Values are clipped into the control box componentwise; rows outside the
    domain hold NaN.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ok = pol.domain_mask(X)
    out = np.full((X.shape[0], pol.control_dim), np.nan)
    if ok.any():
        raw = truncated_interpolate(pol.field, pol.kernel, pol.budget.shape,
                                    pol.budget.truncation_radius, X[ok])
        out[ok] = np.clip(raw, pol.control_lo[None, :], pol.control_hi[None, :])
    return out, ok


def _pilot_net(p: MpcProblem, box: Box, divisions: int = 16) -> FeasibleNet:
    width = box.hi - box.lo
    h = float(np.min(width)) / divisions
    return sample_net(p, h, box)


def _sample_box(p: MpcProblem, override: Optional[Box]) -> Box:
    if override is not None:
        return override
    if isinstance(p.state_set, Box):
        return p.state_set
    raise SynthesisError(
        "polytopic state sets need an explicit sample box in the config"
    )


def synthesize(p: MpcProblem, epsilon: float, kernel_name: str,
               sample_box: Optional[Box] = None,
               rank_override: Optional[float] = None,
               shape_override: Optional[float] = None,
               radius_override: Optional[float] = None,
               config_hash: str = "", log: Optional[list] = None):
    """Run the full pipeline; returns (ExplicitPolicy, log events).

    ``rank_override`` asserts the Lipschitz rank verbatim (no doubling), as
    configurations may when the rank is known; otherwise the pilot estimate
    is doubled and re-checked on the fine net, restarting at most once with
    the larger rank.
    """
    if epsilon <= 0:
        raise ValueError("error margin must be positive")
    events = log if log is not None else []

    def note(event, **kw):
        events.append({"event": event, "t": time.time(), **kw})

    g = catalog(kernel_name, p.dim)
    p_noisy = p.with_noise(epsilon)
    box = _sample_box(p, sample_box)
    spacing_cap = float(np.min(box.hi - box.lo)) / 32.0

    pilot = _pilot_net(p_noisy, box)
    if pilot.n_feasible == 0:
        raise EmptyNetError("pilot sampling found no feasible states")
    sup_used = pilot.sup_norm()
    if rank_override is not None:
        L_hat = float(rank_override)
        note("pilot", sup_norm=sup_used, rank="asserted", L0=L_hat)
    else:
        est = estimate_lipschitz(pilot)
        L_hat = est.safety_rank
        note("pilot", sup_norm=sup_used, rank_raw=est.raw_rank, L0=L_hat)

    budget = None
    net = None
    for attempt in range(2):
        budget = select_budget(epsilon, g, L_hat, sup_used,
                               shape_override=shape_override,
                               radius_override=radius_override,
                               spacing_cap=spacing_cap if L_hat == 0 else None)
        note("budget", attempt=attempt, h=budget.spacing, D=budget.shape,
             r0=budget.truncation_radius, L0=L_hat, sup_norm=sup_used,
             interp=budget.interp_term, saturation=budget.saturation_term,
             truncation=budget.truncation_term)
        net = sample_net(p_noisy, budget.spacing, box)
        if net.n_feasible == 0:
            raise EmptyNetError("no lattice point admits a feasible solution")
        frac_nonconv = float(net.nonconverged.sum()) / net.feasible.size
        note("net", points=int(net.feasible.size), feasible=net.n_feasible,
             nonconverged=int(net.nonconverged.sum()))
        if frac_nonconv > 0.01:
            raise SynthesisError(
                f"{100 * frac_nonconv:.2f}% of lattice points did not converge; "
                "check the solver options"
            )
        sup_fine = net.sup_norm()
        sup_used = max(sup_used, sup_fine)
        if rank_override is None:
            raw_fine = estimate_lipschitz(net).raw_rank
            if 2.0 * raw_fine > L_hat * (1 + 1e-9) and attempt == 0:
                note("restart", reason="fine net rank exceeds pilot rank",
                     raw_fine=raw_fine)
                L_hat = 2.0 * raw_fine
                continue
        final = select_budget(epsilon, g, L_hat, sup_used,
                              shape_override=shape_override,
                              radius_override=radius_override,
                              spacing_cap=spacing_cap if L_hat == 0 else None)
        if abs(final.spacing - budget.spacing) > 1e-15 * budget.spacing \
                or final.shape != budget.shape:
            if attempt == 0:
                note("restart", reason="sup norm grew enough to move the budget")
                continue
            raise SynthesisError("budget did not stabilize after one restart")
        budget = final
        break

    lo, hi = dilated_target_box(net, budget.truncation_radius)
    fld = lipschitz_extend(net, budget.lipschitz_rank, lo, hi)
    note("extension", targets=int(fld.extended.sum()),
         box_lo=[int(v) for v in lo], box_hi=[int(v) for v in hi])

    ubox = p.control_set
    pol = ExplicitPolicy(field=fld, kernel=g, budget=budget,
                         control_lo=ubox.lo.copy(), control_hi=ubox.hi.copy(),
                         config_hash=config_hash)
    note("done", certified=budget.certified, epsilon=epsilon)
    return pol, events


@dataclass(frozen=True)
class CertificationReport:
    sup_error: float
    epsilon: float
    n_checked: int
    n_outside: int
    n_nonconverged: int
    passed: bool
    worst_state: Optional[np.ndarray] = None


def certify(pol: ExplicitPolicy, p: MpcProblem, grid_div: int = 3,
            offset_denom: int = 7, max_points: int = 2000,
            seed: int = 7, chunk: int = 4096) -> CertificationReport:
    """Empirical sup-error check against the oracle on an off-lattice grid.

    The validation lattice has spacing h/grid_div and is shifted by
    h/offset_denom so it avoids the interpolation lattice; a deterministic
    subsample of at most ``max_points`` in-domain points is solved with the
    oracle and compared against the interpolant in the max norm.
    """
    h = pol.field.spacing
    eps = pol.budget.epsilon
    p_noisy = p.with_noise(eps)
    fine = h / grid_div
    shift = h / offset_denom
    lo_pt = pol.field.offset + pol.field.lo * h
    hi_pt = pol.field.offset + pol.field.hi * h
    ranges = [np.arange(math.ceil((lo_pt[k] - shift) / fine),
                        math.floor((hi_pt[k] - shift) / fine) + 1)
              for k in range(pol.dim)]
    counts = np.array([r.size for r in ranges], dtype=np.int64)
    total = int(np.prod(counts))
    rng = np.random.default_rng(seed)
    draw = min(max_points * 4, total)
    flat = rng.choice(total, size=draw, replace=False)
    idx = np.stack(np.unravel_index(flat, tuple(counts)), axis=-1)
    pts = shift + fine * np.stack(
        [ranges[k][idx[:, k]] for k in range(pol.dim)], axis=-1)
    ok = pol.domain_mask(pts)
    pts = pts[ok][:max_points]
    if pts.shape[0] == 0:
        raise SynthesisError("no in-domain validation points were drawn")
    sup_err = 0.0
    worst = None
    n_outside = 0
    n_nonconv = 0
    n_checked = 0
    vals, _ = evaluate_policy_batch(pol, pts)
    for start in range(0, pts.shape[0], chunk):
        sl = slice(start, min(start + chunk, pts.shape[0]))
        for i, res in enumerate(solve_at_states(p_noisy, pts[sl])):
            if res.status == FEASIBLE:
                err = float(np.max(np.abs(vals[sl.start + i] - res.control)))
                n_checked += 1
                if err > sup_err:
                    sup_err = err
                    worst = pts[sl.start + i].copy()
            elif res.status == NONCONVERGED:
                n_nonconv += 1
            else:
                n_outside += 1
    return CertificationReport(
        sup_error=sup_err, epsilon=eps, n_checked=n_checked,
        n_outside=n_outside, n_nonconverged=n_nonconv,
        passed=sup_err <= eps, worst_state=worst,
    )
