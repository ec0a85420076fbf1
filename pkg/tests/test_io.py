"""Configuration parsing and policy-table round trips."""

import copy
import json

import numpy as np
import pytest

from quifs import io as qio
from quifs.errors import ConfigError, TableFormatError

BASE_CONFIG = {
    "schema_version": 1,
    "problem": {
        "dim": 2, "control_dim": 1, "horizon": 15,
        "dynamics": {"type": "linear",
                     "A": [[1.0, 0.1], [0.0, 1.0]],
                     "B": [[0.005], [0.1]]},
        "cost": {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[1.0]]},
        "state_set": {"type": "box", "lo": [-6.0, -1.0], "hi": [6.0, 1.0]},
        "control_set": {"lo": [-2.0], "hi": [2.0]},
        "terminal_set": None,
        "disturbance_set": None,
    },
    "synthesis": {"epsilon": 0.05, "kernel": "laguerre-m3"},
}

NONLINEAR_CONFIG = {
    "schema_version": 1,
    "problem": {
        "dim": 2, "control_dim": 1, "horizon": 25,
        "dynamics": {"type": "nonlinear",
                     "rhs": ["x2", "u1 - 0.6*x2 - x1**3 - x1"],
                     "integrator": "euler", "ts": 0.05},
        "cost": {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[0.5]]},
        "state_set": {"type": "box", "lo": [-5.0, -5.0], "hi": [5.0, 5.0]},
        "control_set": {"lo": [-5.0], "hi": [5.0]},
        "terminal_set": None,
        "disturbance_set": None,
    },
    "synthesis": {"epsilon": 0.05, "kernel": "laguerre-m3",
                  "sample_box": {"lo": [-2.75, -2.75], "hi": [2.75, 2.75]}},
}


def test_parse_linear_config():
    cfg = qio.parse_config(copy.deepcopy(BASE_CONFIG))
    assert cfg.problem.horizon == 15
    assert cfg.problem.is_linear
    assert cfg.synthesis.kernel == "laguerre-m3"
    assert len(cfg.config_hash) == 64


def test_parse_nonlinear_config():
    cfg = qio.parse_config(copy.deepcopy(NONLINEAR_CONFIG))
    assert not cfg.problem.is_linear
    assert cfg.problem.dynamics.ts == 0.05
    assert cfg.synthesis.sample_box is not None


def test_asymmetric_cost_rejected_with_path():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["problem"]["cost"]["Q"] = [[1.0, 0.5], [0.0, 1.0]]
    with pytest.raises(ConfigError) as err:
        qio.parse_config(raw)
    assert "$.problem.cost.Q" in str(err.value)


def test_unknown_keys_rejected():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["problem"]["extra"] = 1
    with pytest.raises(ConfigError) as err:
        qio.parse_config(raw)
    assert "extra" in str(err.value)
    raw = copy.deepcopy(BASE_CONFIG)
    raw["synthesis"]["overrides"] = {"rho": 1.0}
    with pytest.raises(ConfigError):
        qio.parse_config(raw)


def test_dimension_mismatch_rejected():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["problem"]["dynamics"]["A"] = [[1.0]]
    with pytest.raises(ConfigError) as err:
        qio.parse_config(raw)
    assert "$.problem.dynamics.A" in str(err.value)


def test_origin_interior_enforced():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["problem"]["state_set"]["lo"] = [0.5, -1.0]
    with pytest.raises(ConfigError):
        qio.parse_config(raw)


def test_bad_kernel_name():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["synthesis"]["kernel"] = "spline"
    with pytest.raises(ConfigError):
        qio.parse_config(raw)


def test_hash_stable_under_key_order():
    a = copy.deepcopy(BASE_CONFIG)
    b = json.loads(json.dumps(a, sort_keys=True))
    assert qio.config_digest(a) == qio.config_digest(b)


def test_overrides_parsed():
    raw = copy.deepcopy(BASE_CONFIG)
    raw["synthesis"]["overrides"] = {"L0": 2.0, "D": 2.0, "r0": 6.0}
    cfg = qio.parse_config(raw)
    assert cfg.synthesis.rank_override == 2.0
    assert cfg.synthesis.shape_override == 2.0
    assert cfg.synthesis.radius_override == 6.0


# ---------------------------------------------------------------------------
# table round trips (policy built once per session by a small synthesis)
# ---------------------------------------------------------------------------


@pytest.fixture()
def small_policy(coarse_policy):
    return coarse_policy


def test_round_trip_bit_exact(small_policy, tmp_path):
    p1 = tmp_path / "a.qpt"
    p2 = tmp_path / "b.qpt"
    qio.save_table(small_policy, str(p1))
    loaded = qio.load_table(str(p1))
    qio.save_table(loaded, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.field.values, small_policy.field.values)
    assert np.array_equal(loaded.field.feasible, small_policy.field.feasible)
    assert loaded.budget == small_policy.budget
    assert loaded.config_hash == small_policy.config_hash


def test_truncated_file_rejected(small_policy, tmp_path):
    p1 = tmp_path / "a.qpt"
    qio.save_table(small_policy, str(p1))
    blob = p1.read_bytes()
    bad = tmp_path / "bad.qpt"
    bad.write_bytes(blob[:-40])
    with pytest.raises(TableFormatError):
        qio.load_table(str(bad))
    # corrupted payload byte is caught by the checksum
    flipped = bytearray(blob)
    flipped[len(flipped) // 2] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(TableFormatError):
        qio.load_table(str(bad))


def test_wrong_magic_rejected(tmp_path):
    f = tmp_path / "x.qpt"
    f.write_bytes(b"NOPE" + b"\0" * 100)
    with pytest.raises(TableFormatError):
        qio.load_table(str(f))


def test_csv_export(small_policy, tmp_path):
    path = tmp_path / "table.csv"
    qio.export_csv(small_policy, str(path))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("m0,m1,x1,x2,u1")
    assert len(lines) == 1 + int(np.prod(small_policy.field.box_shape))


def test_write_log(tmp_path):
    path = tmp_path / "log.jsonl"
    qio.write_log([{"event": "a", "v": 1}, {"event": "b"}], str(path))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[0]["event"] == "a" and rows[1]["event"] == "b"
