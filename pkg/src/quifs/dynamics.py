"""Dynamics models: linear state-space maps and nonlinear vector fields.

Nonlinear right-hand sides come from problem configurations as strings in a
small fixed expression grammar (sums, products, powers, sin/cos/exp over
the symbols x1..xd, u1..um, w1..wp) and are compiled into vectorized numpy
callables.  Continuous-time fields are discretized by forward Euler or a
classical fourth-order Runge-Kutta step; the disturbance input is held
constant across Runge-Kutta stages.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

_ALLOWED_CALLS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Add, ast.Sub, ast.Mult,
    ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Call, ast.Name, ast.Load,
    ast.Constant,
)


def compile_expression(expr: str, names: dict, path: str = "expression"):
    """Compile one grammar expression into f(env) with vectorized numpy ops.

    ``names`` maps each allowed symbol ("x1", "u2", ...) to a function of
    the evaluation environment returning the corresponding column.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(path, f"cannot parse {expr!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(
                path, f"operation {type(node).__name__} is outside the grammar"
            )
        if isinstance(node, ast.Call):
            if (not isinstance(node.func, ast.Name)
                    or node.func.id not in _ALLOWED_CALLS
                    or len(node.args) != 1 or node.keywords):
                raise ConfigError(path, "only sin(), cos(), exp() calls are allowed")
        if isinstance(node, ast.Name) and node.id not in names \
                and node.id not in _ALLOWED_CALLS:
            raise ConfigError(path, f"unknown symbol {node.id!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(path, "only numeric literals are allowed")

    def run(node, env):
        if isinstance(node, ast.Expression):
            return run(node.body, env)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return names[node.id](env)
        if isinstance(node, ast.UnaryOp):
            val = run(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else +val
        if isinstance(node, ast.BinOp):
            a, b = run(node.left, env), run(node.right, env)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            if isinstance(node.op, ast.Div):
                return a / b
            return a ** b
        if isinstance(node, ast.Call):
            return _ALLOWED_CALLS[node.func.id](run(node.args[0], env))
        raise ConfigError(path, f"unsupported node {type(node).__name__}")

    return lambda env: run(tree, env)


@dataclass(frozen=True)
class LinearDynamics:
    """x+ = A x + B u + w with an additive disturbance."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ValueError("state matrix must be square")
        if B.shape[0] != A.shape[0]:
            raise ValueError("actuation matrix must have one row per state")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def disturbance_dim(self) -> int:
        return self.A.shape[0]

    def step(self, x, u, w=None):
        out = x @ self.A.T + u @ self.B.T
        if w is not None:
            out = out + w
        return out


@dataclass(frozen=True)
class NonlinearDynamics:
    """Discrete map built from continuous-time right-hand-side expressions.

    ``rhs`` has one expression per state coordinate; Jacobians are taken by
    central finite differences wherever a solver needs them.
    """

    rhs: tuple                    # expression strings, length d
    dim: int
    control_dim: int
    disturbance_dim: int = 0
    integrator: str = "euler"
    ts: float = 0.05
    _compiled: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.rhs) != self.dim:
            raise ValueError("one right-hand-side expression per state is required")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError("integrator must be 'euler' or 'rk4'")
        if self.ts <= 0:
            raise ValueError("sampling time must be positive")
        names = {}
        for i in range(self.dim):
            names[f"x{i + 1}"] = (lambda env, k=i: env[0][..., k])
        for i in range(self.control_dim):
            names[f"u{i + 1}"] = (lambda env, k=i: env[1][..., k])
        for i in range(self.disturbance_dim):
            names[f"w{i + 1}"] = (lambda env, k=i: env[2][..., k])
        compiled = tuple(
            compile_expression(e, names, path=f"dynamics.rhs[{i}]")
            for i, e in enumerate(self.rhs)
        )
        object.__setattr__(self, "_compiled", compiled)

    def _field(self, x, u, w):
        env = (x, u, w)
        cols = [np.broadcast_to(fn(env), x[..., 0].shape) for fn in self._compiled]
        return np.stack(cols, axis=-1)

    def step(self, x, u, w=None):
        """One discrete step; w is held constant across integrator stages."""
        if w is None:
            w = np.zeros(x.shape[:-1] + (max(self.disturbance_dim, 1),))
        ts = self.ts
        if self.integrator == "euler":
            return x + ts * self._field(x, u, w)
        k1 = self._field(x, u, w)
        k2 = self._field(x + 0.5 * ts * k1, u, w)
        k3 = self._field(x + 0.5 * ts * k2, u, w)
        k4 = self._field(x + ts * k3, u, w)
        return x + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


Dynamics = LinearDynamics | NonlinearDynamics


def step_jacobians(dyn: Dynamics, x: np.ndarray, u: np.ndarray,
                   delta: float = 1e-5):
    """Batched Jacobians (d/dx, d/du) of one discrete step by central differences."""
    if isinstance(dyn, LinearDynamics):
        B0 = x.shape[0]
        return (np.broadcast_to(dyn.A, (B0, dyn.dim, dyn.dim)),
                np.broadcast_to(dyn.B, (B0, dyn.dim, dyn.control_dim)))
    d, m = dyn.dim, dyn.control_dim
    Jx = np.empty(x.shape[:-1] + (d, d))
    Ju = np.empty(x.shape[:-1] + (d, m))
    for k in range(d):
        e = np.zeros(d)
        e[k] = delta
        Jx[..., :, k] = (dyn.step(x + e, u) - dyn.step(x - e, u)) / (2 * delta)
    for k in range(m):
        e = np.zeros(m)
        e[k] = delta
        Ju[..., :, k] = (dyn.step(x, u + e) - dyn.step(x, u - e)) / (2 * delta)
    return Jx, Ju
