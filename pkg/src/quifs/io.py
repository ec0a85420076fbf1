"""Configuration files, policy-table persistence, and tabular exports.

Problem configurations are strict JSON: unknown keys are rejected with the
offending path, matrices are shape- and symmetry-checked before the problem
object is built, and the canonical serialization is hashed so synthesized
tables carry their provenance.

Policy tables are a self-describing little-endian binary format (magic
"QPT1"): a header with the lattice geometry and the full error budget, a
row-major float64 value payload with one flag byte per lattice point, and a
SHA-256 footer over everything before it.  Loading verifies the checksum
and re-checks the budget invariants; writes go through a temp file and an
atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .budget import ApproximationBudget
from .dynamics import LinearDynamics, NonlinearDynamics
from .errors import ConfigError, TableFormatError
from .interp import LatticeField
from .kernels import CATALOG_NAMES, catalog
from .mpc import Box, Ellipsoid, HPolytope, MpcProblem, SolverOptions
from .synth import ExplicitPolicy

MAGIC = b"QPT1"
VERSION = 1

_FLAG_FEASIBLE = 1
_FLAG_EXTENDED = 2
_FLAG_PRESENT = 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthesisSpec:
    epsilon: float
    kernel: str
    sample_box: Optional[Box] = None
    rank_override: Optional[float] = None
    shape_override: Optional[float] = None
    radius_override: Optional[float] = None


@dataclass(frozen=True)
class ProblemConfig:
    problem: MpcProblem
    synthesis: SynthesisSpec
    config_hash: str
    raw: dict


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}.{key}", "missing required field")
    return d[key]


def _no_extras(d: dict, allowed: set, path: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown key")


def _matrix(val, shape, path: str) -> np.ndarray:
    try:
        arr = np.array(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "not a numeric matrix") from None
    if arr.shape != shape:
        raise ConfigError(path, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(path, "entries must be finite")
    return arr


def _sym_matrix(val, n, path):
    m = _matrix(val, (n, n), path)
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-12:
        raise ConfigError(path, "matrix is not symmetric")
    return m


def _vector(val, n, path) -> np.ndarray:
    arr = _matrix(val, (n,), path)
    return arr


def _box(d: dict, n: int, path: str) -> Box:
    _no_extras(d, {"type", "lo", "hi"}, path)
    lo = _vector(_require(d, "lo", path), n, f"{path}.lo")
    hi = _vector(_require(d, "hi", path), n, f"{path}.hi")
    try:
        return Box(lo=lo, hi=hi)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _set_spec(d, n, path, kinds=("box", "polytope", "ellipsoid")):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    kind = d.get("type", "box")
    if kind not in kinds:
        raise ConfigError(f"{path}.type", f"must be one of {kinds}")
    if kind == "box":
        return _box(d, n, path)
    if kind == "polytope":
        _no_extras(d, {"type", "A", "b"}, path)
        A = np.atleast_2d(np.array(_require(d, "A", path), dtype=float))
        if A.shape[1] != n:
            raise ConfigError(f"{path}.A", f"rows must have {n} entries")
        b = _vector(_require(d, "b", path), A.shape[0], f"{path}.b")
        return HPolytope(A=A, b=b)
    _no_extras(d, {"type", "P"}, path)
    P = _sym_matrix(_require(d, "P", path), n, f"{path}.P")
    try:
        return Ellipsoid(P=P)
    except ValueError as exc:
        raise ConfigError(f"{path}.P", str(exc)) from None


def _dynamics(d: dict, dim: int, m: int, path: str):
    kind = _require(d, "type", path)
    if kind == "linear":
        _no_extras(d, {"type", "A", "B"}, path)
        A = _matrix(_require(d, "A", path), (dim, dim), f"{path}.A")
        B = np.array(_require(d, "B", path), dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape != (dim, m):
            raise ConfigError(f"{path}.B", f"expected shape {(dim, m)}")
        return LinearDynamics(A=A, B=B)
    if kind == "nonlinear":
        _no_extras(d, {"type", "rhs", "integrator", "ts", "disturbance_dim"},
                   path)
        rhs = _require(d, "rhs", path)
        if not isinstance(rhs, list) or len(rhs) != dim \
                or not all(isinstance(e, str) for e in rhs):
            raise ConfigError(f"{path}.rhs",
                              f"expected a list of {dim} expression strings")
        integ = d.get("integrator", "euler")
        if integ not in ("euler", "rk4"):
            raise ConfigError(f"{path}.integrator", "must be 'euler' or 'rk4'")
        ts = d.get("ts", 0.05)
        if not isinstance(ts, (int, float)) or ts <= 0:
            raise ConfigError(f"{path}.ts", "must be a positive number")
        pdim = d.get("disturbance_dim", 0)
        return NonlinearDynamics(rhs=tuple(rhs), dim=dim, control_dim=m,
                                 disturbance_dim=int(pdim),
                                 integrator=integ, ts=float(ts))
    raise ConfigError(f"{path}.type", "must be 'linear' or 'nonlinear'")


def parse_config(raw: dict) -> ProblemConfig:
    """Validate a configuration dictionary and build the problem objects."""
    if not isinstance(raw, dict):
        raise ConfigError("$", "configuration must be a JSON object")
    _no_extras(raw, {"schema_version", "problem", "synthesis", "solver"}, "$")
    if raw.get("schema_version") != 1:
        raise ConfigError("$.schema_version", "unsupported schema version")
    pd = _require(raw, "problem", "$")
    _no_extras(pd, {"dim", "control_dim", "horizon", "dynamics", "cost",
                    "state_set", "control_set", "terminal_set",
                    "disturbance_set"}, "$.problem")
    dim = _require(pd, "dim", "$.problem")
    m = _require(pd, "control_dim", "$.problem")
    horizon = _require(pd, "horizon", "$.problem")
    if not isinstance(dim, int) or dim < 1:
        raise ConfigError("$.problem.dim", "must be a positive integer")
    if not isinstance(m, int) or m < 1:
        raise ConfigError("$.problem.control_dim", "must be a positive integer")
    if not isinstance(horizon, int) or horizon < 1:
        raise ConfigError("$.problem.horizon", "must be a positive integer")
    dyn = _dynamics(_require(pd, "dynamics", "$.problem"), dim, m,
                    "$.problem.dynamics")
    cd = _require(pd, "cost", "$.problem")
    _no_extras(cd, {"Q", "R", "P"}, "$.problem.cost")
    Q = _sym_matrix(_require(cd, "Q", "$.problem.cost"), dim, "$.problem.cost.Q")
    R = _sym_matrix(_require(cd, "R", "$.problem.cost"), m, "$.problem.cost.R")
    P = _sym_matrix(cd["P"], dim, "$.problem.cost.P") if "P" in cd \
        else np.zeros((dim, dim))
    state_set = _set_spec(_require(pd, "state_set", "$.problem"), dim,
                          "$.problem.state_set", kinds=("box", "polytope"))
    control_set = _box(_require(pd, "control_set", "$.problem"), m,
                       "$.problem.control_set")
    term = pd.get("terminal_set")
    terminal = None if term is None else _set_spec(term, dim,
                                                   "$.problem.terminal_set")
    dist = pd.get("disturbance_set")
    disturbance = None if dist is None else _box(dist, dim,
                                                 "$.problem.disturbance_set")

    sd = _require(raw, "synthesis", "$")
    _no_extras(sd, {"epsilon", "kernel", "sample_box", "overrides"},
               "$.synthesis")
    eps = _require(sd, "epsilon", "$.synthesis")
    if not isinstance(eps, (int, float)) or eps <= 0:
        raise ConfigError("$.synthesis.epsilon", "must be a positive number")
    kernel = _require(sd, "kernel", "$.synthesis")
    if kernel not in CATALOG_NAMES:
        raise ConfigError("$.synthesis.kernel",
                          f"must be one of {CATALOG_NAMES}")
    sbox = sd.get("sample_box")
    sample_box = None if sbox is None else _box(sbox, dim,
                                                "$.synthesis.sample_box")
    ov = sd.get("overrides", {})
    _no_extras(ov, {"D", "L0", "r0"}, "$.synthesis.overrides")
    for key in ov:
        if not isinstance(ov[key], (int, float)) or ov[key] <= 0:
            raise ConfigError(f"$.synthesis.overrides.{key}",
                              "must be a positive number")

    so = raw.get("solver", {})
    _no_extras(so, {"qp_eps", "qp_max_iter", "nlp_max_iter", "nlp_tol",
                    "nlp_feas_tol", "seeds"}, "$.solver")
    seeds = so.get("seeds", [0, 1, 2])
    if not (isinstance(seeds, list) and len(seeds) == 3
            and all(isinstance(s, int) for s in seeds)):
        raise ConfigError("$.solver.seeds", "must be a list of three integers")
    options = SolverOptions(
        qp_eps=float(so.get("qp_eps", 1e-8)),
        qp_max_iter=int(so.get("qp_max_iter", 20000)),
        nlp_max_iter=int(so.get("nlp_max_iter", 300)),
        nlp_tol=float(so.get("nlp_tol", 1e-7)),
        nlp_feas_tol=float(so.get("nlp_feas_tol", 1e-6)),
        seeds=tuple(seeds),
    )
    try:
        problem = MpcProblem(horizon=horizon, dynamics=dyn, Q=Q, R=R, P=P,
                             state_set=state_set, control_set=control_set,
                             terminal_set=terminal,
                             disturbance_set=disturbance, options=options)
    except ValueError as exc:
        raise ConfigError("$.problem", str(exc)) from None
    spec = SynthesisSpec(
        epsilon=float(eps), kernel=kernel, sample_box=sample_box,
        rank_override=float(ov["L0"]) if "L0" in ov else None,
        shape_override=float(ov["D"]) if "D" in ov else None,
        radius_override=float(ov["r0"]) if "r0" in ov else None,
    )
    return ProblemConfig(problem=problem, synthesis=spec,
                         config_hash=config_digest(raw), raw=raw)


def config_digest(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: str) -> ProblemConfig:
    with open(path, "r") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# policy tables
# ---------------------------------------------------------------------------


def _pack_header(pol: ExplicitPolicy) -> bytes:
    f = pol.field
    b = pol.budget
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, 0)
    out += struct.pack("<II", f.dim, f.control_dim)
    out += struct.pack("<10d", f.spacing, b.shape, b.truncation_radius,
                       b.epsilon, b.lipschitz_rank, b.sup_norm,
                       pol.kernel.truncation_bound_constant,
                       b.interp_term, b.saturation_term, b.truncation_term)
    name = pol.kernel.name.encode()
    out += struct.pack("<H", len(name)) + name
    out += np.asarray(f.lo, dtype="<i8").tobytes()
    out += np.asarray(f.box_shape, dtype="<u8").tobytes()
    out += np.asarray(f.offset, dtype="<f8").tobytes()
    out += np.asarray(pol.control_lo, dtype="<f8").tobytes()
    out += np.asarray(pol.control_hi, dtype="<f8").tobytes()
    hh = pol.config_hash.encode()
    out += struct.pack("<H", len(hh)) + hh
    out += struct.pack("<B", 1)  # flags layout version
    return bytes(out)


def save_table(pol: ExplicitPolicy, path: str) -> None:
    """Serialize a policy atomically; bit-identical for identical policies."""
    f = pol.field
    header = _pack_header(pol)
    values = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    flags = (f.feasible.astype(np.uint8) * _FLAG_FEASIBLE
             | f.extended.astype(np.uint8) * _FLAG_EXTENDED
             | f.present.astype(np.uint8) * _FLAG_PRESENT)
    flag_bytes = flags.reshape(-1).tobytes()
    body = header + values + flag_bytes
    digest = hashlib.sha256(body).digest()
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".qpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TableFormatError("table file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_table(path: str) -> ExplicitPolicy:
    """Load and verify a policy table; checksum or schema problems raise."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 36 or blob[:4] != MAGIC:
        raise TableFormatError("not a policy table (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TableFormatError("checksum mismatch; the file is corrupt")
    rd = _Reader(body)
    rd.take(4)
    version, _ = rd.unpack("<II")
    if version != VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    d, m_u = rd.unpack("<II")
    (h, D, r0, eps, L0, sup_norm, B,
     interp_term, sat_term, trunc_term) = rd.unpack("<10d")
    (nlen,) = rd.unpack("<H")
    kernel_name = rd.take(nlen).decode()
    lo = np.frombuffer(rd.take(8 * d), dtype="<i8").copy()
    shape = tuple(int(v) for v in np.frombuffer(rd.take(8 * d), dtype="<u8"))
    offset = np.frombuffer(rd.take(8 * d), dtype="<f8").copy()
    control_lo = np.frombuffer(rd.take(8 * m_u), dtype="<f8").copy()
    control_hi = np.frombuffer(rd.take(8 * m_u), dtype="<f8").copy()
    (hlen,) = rd.unpack("<H")
    config_hash = rd.take(hlen).decode()
    (flags_layout,) = rd.unpack("<B")
    if flags_layout != 1:
        raise TableFormatError(f"unknown flags layout {flags_layout}")
    count = int(np.prod(shape))
    values = np.frombuffer(rd.take(8 * count * m_u), dtype="<f8").copy()
    values = values.reshape(shape + (m_u,))
    flags = np.frombuffer(rd.take(count), dtype=np.uint8).reshape(shape)
    if rd.pos != len(body):
        raise TableFormatError("trailing bytes after the payload")

    base = catalog(kernel_name, int(d), calibrate=False).calibrated(B)
    budget = ApproximationBudget(
        epsilon=eps, shape=D, spacing=h, truncation_radius=r0,
        lipschitz_rank=L0, sup_norm=sup_norm, interp_term=interp_term,
        saturation_term=sat_term, truncation_term=trunc_term,
    )
    budget.check()
    field = LatticeField(
        spacing=h, lo=lo, values=values,
        present=(flags & _FLAG_PRESENT) != 0,
        feasible=(flags & _FLAG_FEASIBLE) != 0,
        extended=(flags & _FLAG_EXTENDED) != 0,
        offset=offset,
    )
    return ExplicitPolicy(field=field, kernel=base, budget=budget,
                          control_lo=control_lo, control_hi=control_hi,
                          config_hash=config_hash)


def export_csv(pol: ExplicitPolicy, path: str) -> None:
    """Human-inspectable dump: index, coordinates, values, flags."""
    f = pol.field
    idx = np.argwhere(f.present | ~f.present)  # every index, in order
    coords = f.offset[None, :] + (idx + f.lo[None, :]) * f.spacing
    vals = f.values.reshape(-1, f.control_dim)
    feas = f.feasible.reshape(-1)
    ext = f.extended.reshape(-1)
    with open(path, "w") as fh:
        head = [f"m{k}" for k in range(f.dim)] + [f"x{k+1}" for k in range(f.dim)] \
            + [f"u{j+1}" for j in range(f.control_dim)] + ["feasible", "extended"]
        fh.write(",".join(head) + "\n")
        for row in range(idx.shape[0]):
            cells = [str(int(v + f.lo[k])) for k, v in enumerate(idx[row])]
            cells += [repr(float(c)) for c in coords[row]]
            cells += [repr(float(v)) for v in vals[row]]
            cells += [str(int(feas[row])), str(int(ext[row]))]
            fh.write(",".join(cells) + "\n")


def write_log(events: list, path: str) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
