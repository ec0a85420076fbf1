"""Lipschitz-rank estimation and inf-convolution extension of sampled maps.

The sampled feedback lives on an h-net: the subset of the cardinal grid
where the finite-horizon problem is solvable.  Interpolation stencils near
the boundary (and over interior holes) reach lattice points outside that
net, so before interpolating we extend the samples to every index a stencil
can touch with

    u_E(x) = min over net points y of ( u(y) + L0 * ||x - y||_2 ),

computed independently for each control component.  The extension keeps the
Lipschitz rank and coincides with the stored samples on the net by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyNetError, EstimationError
from .interp import LatticeField, _frozen_array


@dataclass(frozen=True)
class FeasibleNet:
    """Solver samples on the cardinal grid restricted to the feasible set.

    ``values`` holds mu*(m*h) where ``feasible`` is set and NaN elsewhere;
    ``nonconverged`` marks grid points where the solver hit its iteration
    cap (they count as holes but are tracked separately).
    """

    spacing: float
    lo: np.ndarray            # (d,) integer corner index
    values: np.ndarray        # box_shape + (m_u,)
    feasible: np.ndarray      # bool, box_shape
    nonconverged: np.ndarray  # bool, box_shape
    offset: np.ndarray        # (d,) lattice origin shift

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("net spacing must be strictly positive")
        object.__setattr__(self, "lo", _frozen_array(self.lo, dtype=np.int64))
        object.__setattr__(self, "values", _frozen_array(self.values, dtype=float))
        object.__setattr__(self, "feasible", _frozen_array(self.feasible, dtype=bool))
        object.__setattr__(self, "nonconverged",
                           _frozen_array(self.nonconverged, dtype=bool))
        object.__setattr__(self, "offset", _frozen_array(self.offset, dtype=float))
        if not np.all(np.isfinite(self.values[self.feasible])):
            raise ValueError("feasible net values must be finite")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def control_dim(self) -> int:
        return self.values.shape[-1]

    @property
    def box_shape(self) -> tuple:
        return self.values.shape[:-1]

    @property
    def n_feasible(self) -> int:
        return int(np.count_nonzero(self.feasible))

    def feasible_points(self) -> np.ndarray:
        """Physical coordinates of the feasible lattice points, (k, d)."""
        idx = np.argwhere(self.feasible) + self.lo[None, :]
        return self.offset[None, :] + idx.astype(float) * self.spacing

    def feasible_values(self) -> np.ndarray:
        return self.values[self.feasible]

    def sup_norm(self) -> float:
        if self.n_feasible == 0:
            return 0.0
        return float(np.max(np.abs(self.feasible_values())))


@dataclass(frozen=True)
class LipschitzEstimate:
    """Finite-difference rank estimate with the doubled safety value."""

    raw_rank: float
    safety_rank: float
    method: str = "grid-gradient-sup"

    def __post_init__(self):
        if self.safety_rank != 2.0 * self.raw_rank:
            raise ValueError("safety rank must be exactly twice the raw rank")


def estimate_lipschitz(net: FeasibleNet) -> LipschitzEstimate:
    """Sup over the net of the numerical-gradient norm, per control component.

    Central differences where both axis neighbors are feasible, one-sided
    where only one is, and the axis is skipped when both are missing.  The
    returned safety rank doubles the raw estimate.
    """
    if net.n_feasible == 0:
        raise EmptyNetError("cannot estimate a Lipschitz rank from an empty net")
    vals = np.where(net.feasible[..., None], net.values, np.nan)
    h = net.spacing
    grad_sq = np.zeros_like(vals)
    any_axis = np.zeros(net.box_shape, dtype=bool)
    for axis in range(net.dim):
        vplus = _shift(vals, -1, axis)
        vminus = _shift(vals, +1, axis)
        central = (vplus - vminus) / (2.0 * h)
        fwd = (vplus - vals) / h
        bwd = (vals - vminus) / h
        gk = np.where(np.isfinite(central), central,
                      np.where(np.isfinite(fwd), fwd, bwd))
        have = np.isfinite(gk)
        grad_sq += np.where(have, gk * gk, 0.0)
        any_axis |= np.any(have, axis=-1)
    usable = net.feasible & any_axis
    if not usable.any():
        raise EstimationError(
            "net is degenerate: no feasible point has a feasible axis neighbor"
        )
    raw = math.sqrt(float(np.max(grad_sq[usable])))
    return LipschitzEstimate(raw_rank=raw, safety_rank=2.0 * raw)


def _shift(a: np.ndarray, step: int, axis: int) -> np.ndarray:
    """Shift along one axis, padding the vacated slots with NaN."""
    out = np.full_like(a, np.nan)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step < 0:
        src[axis] = slice(-step, None)
        dst[axis] = slice(None, step)
    else:
        src[axis] = slice(None, -step)
        dst[axis] = slice(step, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


def dilated_target_box(net: FeasibleNet, r0: float) -> tuple:
    """Index box covering every stencil a feasible query point can touch."""
    idx = np.argwhere(net.feasible)
    if idx.size == 0:
        raise EmptyNetError("empty net has no target box")
    pad = int(math.ceil(r0)) + 1
    lo = net.lo + idx.min(axis=0) - pad
    hi = net.lo + idx.max(axis=0) + pad
    return lo.astype(np.int64), hi.astype(np.int64)


def lipschitz_extend(net: FeasibleNet, L0: float, target_lo, target_hi,
                     chunk: int = 256) -> LatticeField:
    """Fill the target index box: net values verbatim, inf-convolution elsewhere.

    Requires L0 at least the raw rank of the net, otherwise the extension
    would undercut interior samples.  Extension of distinct points is
    independent; the result is assembled once and frozen.
    """
    if net.n_feasible == 0:
        raise EmptyNetError("cannot extend an empty net")
    if L0 < 0:
        raise ValueError("Lipschitz rank must be nonnegative")
    target_lo = np.asarray(target_lo, dtype=np.int64)
    target_hi = np.asarray(target_hi, dtype=np.int64)
    if np.any(target_hi < target_lo):
        raise ValueError("degenerate target box")
    shape = tuple((target_hi - target_lo + 1).tolist())
    d, m_u = net.dim, net.control_dim
    values = np.zeros(shape + (m_u,))
    feas = np.zeros(shape, dtype=bool)

    # copy the net verbatim where the boxes overlap
    src_idx = np.argwhere(net.feasible)
    abs_idx = src_idx + net.lo[None, :]
    keep = np.all((abs_idx >= target_lo) & (abs_idx <= target_hi), axis=-1)
    rel = (abs_idx[keep] - target_lo[None, :])
    values[tuple(rel.T)] = net.values[tuple(src_idx[keep].T)]
    feas[tuple(rel.T)] = True

    src_pts = net.feasible_points()
    src_vals = net.feasible_values()
    src_sq = np.sum(src_pts * src_pts, axis=1)
    todo = np.argwhere(~feas)
    for block in _spatial_tiles(todo, chunk):
        pts = net.offset[None, :] + (block + target_lo[None, :]) * net.spacing
        inc0 = _clip_incumbents(net, block + target_lo[None, :], pts, L0)
        out = _infconv_tile(pts, src_pts, src_sq, src_vals, L0, inc0=inc0)
        for j in range(m_u):
            values[tuple(block.T) + (j,)] = out[:, j]
    ext = ~feas
    return LatticeField(
        spacing=net.spacing, lo=target_lo, values=values,
        present=np.ones(shape, dtype=bool), feasible=feas, extended=ext,
        offset=np.array(net.offset, dtype=float),
    )


def _spatial_tiles(todo: np.ndarray, chunk: int):
    """Split target indices into spatially compact tiles, one per grid block.

    Tight tile bounding boxes are what make the pruning in _infconv_tile
    effective; index order inside a tile stays lexicographic.
    """
    nt, d = todo.shape
    if nt <= chunk:
        if nt:
            yield todo
        return
    side = max(2, int(round(chunk ** (1.0 / d))))
    blocks = todo // side
    order = np.lexsort(tuple(blocks.T[::-1]))
    todo = todo[order]
    blocks = blocks[order]
    splits = 1 + np.nonzero(np.any(np.diff(blocks, axis=0) != 0, axis=1))[0]
    for tile in np.split(todo, splits):
        yield tile


def _clip_incumbents(net: FeasibleNet, abs_idx: np.ndarray, pts: np.ndarray,
                     L0: float) -> np.ndarray:
    """Upper bounds on the extension from index-clamped net candidates.

    Clamping the target index into the net box lands on the exact minimizer
    whenever the nearby samples are flat, which is what makes the tile
    pruning bite on saturated feedback maps.
    """
    shape = np.array(net.box_shape, dtype=np.int64)
    rel = np.clip(abs_idx - net.lo[None, :], 0, shape[None, :] - 1)
    flat = np.ravel_multi_index(tuple(rel.T), tuple(shape))
    ok = net.feasible.reshape(-1)[flat]
    cand_pts = net.offset[None, :] + (rel + net.lo[None, :]) * net.spacing
    dist = np.sqrt(np.sum((pts - cand_pts) ** 2, axis=1))
    vals = net.values.reshape(-1, net.control_dim)[flat]
    inc = vals + L0 * dist[:, None]
    inc[~ok] = np.inf
    return inc


def _infconv_tile(pts: np.ndarray, src_pts: np.ndarray, src_sq: np.ndarray,
                  src_vals: np.ndarray, L0: float, seed_count: int = 1000,
                  inc0: np.ndarray = None) -> np.ndarray:
    """Exact min over sources of value + L0 * distance, for one target tile.

    Brute force with two admissible prunes that never change the result:
    a source whose value plus L0 times its distance to the tile bounding
    box exceeds the worst incumbent in the tile is dropped outright, and
    the remaining candidates are screened per target with squared-distance
    comparisons so the square root only runs on entries that can still
    improve the incumbent.
    """
    n, d = pts.shape
    m_u = src_vals.shape[1]
    ns = src_pts.shape[0]
    out = np.empty((n, m_u))
    box_lo = pts.min(axis=0)
    box_hi = pts.max(axis=0)
    clamped = np.clip(src_pts, box_lo[None, :], box_hi[None, :])
    gap = src_pts - clamped
    dist_lb = np.sqrt(np.sum(gap * gap, axis=1))
    pts_sq = np.sum(pts * pts, axis=1)
    step = max(1, int(1.0e8 / (8 * max(n, 1))))
    for j in range(m_u):
        metric = src_vals[:, j] + L0 * dist_lb  # valid lower bound per source
        if ns > seed_count:
            seed = np.argpartition(metric, seed_count)[:seed_count]
        else:
            seed = np.arange(ns)
        d2 = (pts_sq[:, None] + src_sq[seed][None, :]
              - 2.0 * pts @ src_pts[seed].T)
        cand = src_vals[seed, j][None, :] + L0 * np.sqrt(np.maximum(d2, 0.0))
        best = cand.min(axis=1)
        if inc0 is not None:
            best = np.minimum(best, inc0[:, j])
        worst = float(best.max())
        surv = np.nonzero(metric <= worst)[0]
        for s0 in range(0, surv.size, step):
            sel = surv[s0:s0 + step]
            d2 = (pts_sq[:, None] + src_sq[sel][None, :]
                  - 2.0 * pts @ src_pts[sel].T)
            # squared screen: improvement needs L0^2 d2 < (best - value)^2
            margin = best[:, None] - src_vals[sel, j][None, :]
            better = (margin > 0.0) & (d2 * L0 * L0 < margin * margin)
            rows, cols = np.nonzero(better)
            if rows.size == 0:
                continue
            vals = (src_vals[sel, j][cols]
                    + L0 * np.sqrt(np.maximum(d2[rows, cols], 0.0)))
            np.minimum.at(best, rows, vals)
        out[:, j] = best
    return out
