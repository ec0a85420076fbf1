"""Closed-loop rollouts of explicit policies and stability checks.

The simulator rolls the true dynamics under the lookup policy with a chosen
disturbance realization (zero, cycling over the disturbance-box vertices,
or seeded uniform draws) and tracks constraint satisfaction and domain
membership step by step.  The comparison harness runs a twin online
receding-horizon simulation on the same disturbance realization and also
re-solves the oracle at the explicit trajectory's own states, which is
where the certified per-step control gap applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mpc import MpcProblem, solve_at_state, solve_at_states
from .qp import FEASIBLE
from .synth import ExplicitPolicy, evaluate_policy


@dataclass(frozen=True)
class Trajectory:
    """One closed-loop run; lengths stay consistent even when truncated."""

    states: np.ndarray        # (T+1, d)
    controls: np.ndarray      # (T, m)
    disturbances: Optional[np.ndarray]  # (T, p) or None
    in_domain: np.ndarray     # (T,) domain test at each applied step
    state_ok: np.ndarray      # (T+1,) state-constraint satisfaction
    truncated: bool           # stopped early on an out-of-domain state

    @property
    def steps(self) -> int:
        return self.controls.shape[0]


@dataclass(frozen=True)
class StabilityReport:
    recursively_feasible: bool
    terminal_radius: float       # max 2-norm over the tail window
    violations: int              # states outside the constraint set
    sup_control_gap: float       # vs the oracle at matched states
    sup_state_gap: float         # vs the twin online trajectory
    value_offset: float          # max of V(x+) - V(x) + stage cost, or nan
    nonconverged_steps: int = 0

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "recursively_feasible": self.recursively_feasible,
            "terminal_radius": self.terminal_radius,
            "violations": self.violations,
            "sup_control_gap": clean(self.sup_control_gap),
            "sup_state_gap": clean(self.sup_state_gap),
            "value_offset": clean(self.value_offset),
            "nonconverged_steps": self.nonconverged_steps,
        }


def disturbance_sequence(p: MpcProblem, steps: int, kind: str = "zero",
                         seed: int = 0) -> Optional[np.ndarray]:
    """Deterministic disturbance realization: zero, vertex cycling, or
    seeded uniform samples over the disturbance box."""
    W = p.disturbance_set
    if W is None or kind == "zero":
        return None
    if kind == "vertices":
        verts = W.vertices()
        return verts[np.arange(steps) % verts.shape[0]]
    if kind == "uniform":
        rng = np.random.default_rng(seed)
        return rng.uniform(W.lo, W.hi, size=(steps, W.dim))
    raise ValueError("disturbance kind must be 'zero', 'vertices' or 'uniform'")


def simulate_closed_loop(p: MpcProblem, pol: ExplicitPolicy, x0, steps: int,
                         disturbance: str = "zero", seed: int = 0) -> Trajectory:
    """Roll x+ = f(x, policy(x), w); truncates (with a flag) if the state
    leaves the policy domain, which counts as a recursive-feasibility
    failure and is reported rather than raised."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    w_seq = disturbance_sequence(p, steps, disturbance, seed)
    d, m = p.dim, p.control_dim
    states = [x0.copy()]
    controls = []
    in_dom = []
    x = x0.copy()
    truncated = False
    for t in range(steps):
        u = evaluate_policy(pol, x)
        if u is None:
            truncated = True
            break
        in_dom.append(True)
        controls.append(u)
        w = None if w_seq is None else w_seq[t][None, :]
        x = p.dynamics.step(x[None, :], u[None, :], w)[0]
        states.append(x.copy())
    states = np.array(states)
    controls = np.array(controls).reshape(len(controls), m)
    state_ok = p.state_set.contains(states, tol=1e-9)
    dist_used = None if w_seq is None else w_seq[:controls.shape[0]]
    return Trajectory(states=states, controls=controls,
                      disturbances=dist_used,
                      in_domain=np.array(in_dom, dtype=bool),
                      state_ok=np.asarray(state_ok, dtype=bool),
                      truncated=truncated)


def run_report(p: MpcProblem, traj: Trajectory, tail: int = 20) -> StabilityReport:
    """Report for a single rollout, without the online comparison fields."""
    radius = _tail_radius(traj.states, tail)
    violations = int(np.count_nonzero(~traj.state_ok))
    return StabilityReport(
        recursively_feasible=not traj.truncated and violations == 0,
        terminal_radius=radius, violations=violations,
        sup_control_gap=float("nan"), sup_state_gap=float("nan"),
        value_offset=float("nan"),
    )


def _tail_radius(states: np.ndarray, tail: int) -> float:
    window = states[-min(tail, states.shape[0]):]
    return float(np.max(np.linalg.norm(window, axis=1)))


def compare_with_online_rhc(p: MpcProblem, pol: ExplicitPolicy, x0, steps: int,
                            disturbance: str = "zero", seed: int = 0,
                            tail: int = 20):
    """Twin rollouts on one disturbance realization plus matched-state gaps.

    Returns (StabilityReport, explicit trajectory, online trajectory).  The
    online twin re-solves the noise-tightened problem at its own states each
    step; the control-gap field re-solves it at the explicit trajectory's
    states, where the certificate bounds the difference by epsilon.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    p_oracle = p.with_noise(pol.budget.epsilon)
    w_seq = disturbance_sequence(p, steps, disturbance, seed)
    traj = simulate_closed_loop(p, pol, x0, steps, disturbance, seed)

    # twin run driven by the online solver
    states_on = [x0.copy()]
    controls_on = []
    nonconv = 0
    x = x0.copy()
    for t in range(steps):
        res = solve_at_state(p_oracle, x)
        if res.status != FEASIBLE:
            if res.status == "nonconverged":
                nonconv += 1
            break
        u = res.control
        controls_on.append(u)
        w = None if w_seq is None else w_seq[t][None, :]
        x = p.dynamics.step(x[None, :], u[None, :], w)[0]
        states_on.append(x.copy())
    states_on = np.array(states_on)
    controls_on = np.array(controls_on).reshape(len(controls_on), p.control_dim)
    traj_on = Trajectory(
        states=states_on, controls=controls_on,
        disturbances=None if w_seq is None else w_seq[:controls_on.shape[0]],
        in_domain=np.ones(controls_on.shape[0], dtype=bool),
        state_ok=np.asarray(p.state_set.contains(states_on, tol=1e-9), bool),
        truncated=controls_on.shape[0] < steps,
    )

    # oracle at the explicit trajectory's own states: the certified gap
    gap = 0.0
    value_offset = float("nan")
    if traj.steps:
        results = solve_at_states(p_oracle, traj.states[:traj.steps])
        vals = []
        for t, res in enumerate(results):
            if res.status == FEASIBLE:
                gap = max(gap, float(np.max(np.abs(res.control
                                                   - traj.controls[t]))))
                vals.append(res.value)
            else:
                vals.append(None)
                if res.status == "nonconverged":
                    nonconv += 1
        offs = []
        for t in range(len(vals) - 1):
            if vals[t] is None or vals[t + 1] is None:
                continue
            stage = float(traj.states[t] @ p.Q @ traj.states[t]
                          + traj.controls[t] @ p.R @ traj.controls[t])
            offs.append(vals[t + 1] - vals[t] + stage)
        if offs:
            value_offset = float(max(offs))

    common = min(traj.states.shape[0], states_on.shape[0])
    state_gap = float(np.max(np.abs(traj.states[:common] - states_on[:common]))) \
        if common else float("nan")
    violations = int(np.count_nonzero(~traj.state_ok))
    report = StabilityReport(
        recursively_feasible=not traj.truncated and violations == 0,
        terminal_radius=_tail_radius(traj.states, tail),
        violations=violations,
        sup_control_gap=gap,
        sup_state_gap=state_gap,
        value_offset=value_offset,
        nonconverged_steps=nonconv,
    )
    return report, traj, traj_on


def trajectory_to_csv(traj: Trajectory, path: str) -> None:
    d = traj.states.shape[1]
    m = traj.controls.shape[1] if traj.controls.size else 1
    with open(path, "w") as fh:
        head = ["t"] + [f"x{k+1}" for k in range(d)] \
            + [f"u{j+1}" for j in range(m)] + ["in_domain", "state_ok"]
        fh.write(",".join(head) + "\n")
        for t in range(traj.states.shape[0]):
            cells = [str(t)] + [repr(float(v)) for v in traj.states[t]]
            if t < traj.controls.shape[0]:
                cells += [repr(float(v)) for v in traj.controls[t]]
                cells += [str(int(traj.in_domain[t]))]
            else:
                cells += [""] * m + [""]
            cells += [str(int(traj.state_ok[t]))]
            fh.write(",".join(cells) + "\n")


def twin_csv(traj: Trajectory, traj_on: Trajectory, path: str) -> None:
    """Combined table: t, explicit state, online state, both controls, gap."""
    d = traj.states.shape[1]
    m = traj.controls.shape[1] if traj.controls.size else 1
    T = max(traj.states.shape[0], traj_on.states.shape[0])
    with open(path, "w") as fh:
        head = ["t"] + [f"x{k+1}_explicit" for k in range(d)] \
            + [f"x{k+1}_online" for k in range(d)] \
            + [f"u{j+1}_explicit" for j in range(m)] \
            + [f"u{j+1}_online" for j in range(m)] + ["control_gap"]
        fh.write(",".join(head) + "\n")
        for t in range(T):
            cells = [str(t)]
            for tr in (traj, traj_on):
                if t < tr.states.shape[0]:
                    cells += [repr(float(v)) for v in tr.states[t]]
                else:
                    cells += [""] * d
            ue = traj.controls[t] if t < traj.controls.shape[0] else None
            uo = traj_on.controls[t] if t < traj_on.controls.shape[0] else None
            cells += [repr(float(v)) for v in ue] if ue is not None else [""] * m
            cells += [repr(float(v)) for v in uo] if uo is not None else [""] * m
            if ue is not None and uo is not None:
                cells.append(repr(float(np.max(np.abs(ue - uo)))))
            else:
                cells.append("")
            fh.write(",".join(cells) + "\n")
