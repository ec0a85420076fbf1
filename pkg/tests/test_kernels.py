"""Kernel registry: closed forms, moment orders, transforms, saturation."""

import dataclasses
import math

import numpy as np
import pytest

from quifs import kernels
from quifs.errors import KernelError

ALL_KERNELS = [
    ("gauss", 1), ("laguerre-m3", 1), ("laguerre-m5", 1),
    ("trig-gauss", 1), ("sech", 1),
    ("laguerre-m3", 2), ("laguerre-m5", 2), ("laguerre-m3", 4),
]


def _get(name, dim):
    return kernels.catalog(name, dim, calibrate=False)


# ---------------------------------------------------------------------------
# closed-form point values
# ---------------------------------------------------------------------------


def test_gauss_at_zero():
    g = _get("gauss", 1)
    assert g.eval(np.array([0.0])) == pytest.approx(1.0 / math.sqrt(math.pi),
                                                    abs=1e-14)


def test_sixth_order_2d_at_zero():
    g = _get("laguerre-m3", 2)
    assert g.eval(np.zeros(2)) == pytest.approx(3.0 / math.pi, abs=1e-14)


def test_sixth_order_2d_at_radius_sq_two():
    # direct substitution: (1/pi)(3 - 6 + 2) e^{-2}
    g = _get("laguerre-m3", 2)
    x = np.array([math.sqrt(2.0), 0.0])
    assert g.eval(x) == pytest.approx(-(1.0 / math.pi) * math.exp(-2.0),
                                      rel=1e-12)


def test_sixth_order_4d_closed_form():
    g = _get("laguerre-m3", 4)
    # (1/pi^2)(6 - 4 y + y^2/2) e^{-y}
    for y in (0.0, 1.0, 2.5):
        x = np.zeros(4)
        x[0] = math.sqrt(y)
        expect = (6.0 - 4.0 * y + 0.5 * y * y) * math.exp(-y) / math.pi ** 2
        assert g.eval(x) == pytest.approx(expect, rel=1e-12)


def test_tenth_order_2d_closed_form():
    g = _get("laguerre-m5", 2)
    for y in (0.0, 0.7, 3.0):
        x = np.array([math.sqrt(y), 0.0])
        expect = (5.0 - 10.0 * y + 5.0 * y ** 2 - (5.0 / 6.0) * y ** 3
                  + y ** 4 / 24.0) * math.exp(-y) / math.pi
        assert g.eval(x) == pytest.approx(expect, rel=1e-12)


def test_radially_symmetric_entries_depend_on_radius_only():
    g = _get("laguerre-m3", 2)
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=2)
        r = np.linalg.norm(v)
        assert g.eval(v) == pytest.approx(g.eval(np.array([r, 0.0])), rel=1e-12)


def test_eval_rejects_wrong_dimension():
    g = _get("laguerre-m3", 2)
    with pytest.raises(ValueError):
        g.eval(np.zeros(3))
    with pytest.raises(ValueError):
        g.eval(np.array([np.nan, 0.0]))


# ---------------------------------------------------------------------------
# interpolation-rate constant
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("M,expect", [(6, 1.0 / 7.0), (10, 1.0 / 11.0),
                                      (1, 0.5), (2, 1.0 / 3.0)])
def test_cgamma_closed_form(M, expect):
    assert kernels.cgamma(M) == pytest.approx(expect, rel=0, abs=0)
    # equals M * Gamma(M) / Gamma(M + 2)
    assert kernels.cgamma(M) == pytest.approx(
        M * math.gamma(M) / math.gamma(M + 2), rel=1e-15)


def test_cgamma_rejects_nonpositive_order():
    with pytest.raises(ValueError):
        kernels.cgamma(0)


# ---------------------------------------------------------------------------
# moment verification
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,dim", ALL_KERNELS)
def test_moments_pass_at_declared_order(name, dim):
    g = _get(name, dim)
    rep = kernels.verify_moments(g, quad_tol=1e-6)
    assert rep.passed
    assert abs(rep.integral - 1.0) < 1e-8


@pytest.mark.parametrize("name,dim", ALL_KERNELS)
def test_moments_fail_two_orders_higher(name, dim):
    g = _get(name, dim)
    bumped = dataclasses.replace(g, moment_order=g.moment_order + 2)
    rep = kernels.verify_moments(bumped, quad_tol=1e-6)
    assert not rep.passed
    bad_lengths = {sum(e.alpha) for e in rep.entries if not e.ok}
    assert g.moment_order in bad_lengths


def test_gauss_first_moment_vanishes_by_symmetry(gauss1):
    rep = kernels.verify_moments(gauss1, quad_tol=1e-10)
    first = [e for e in rep.entries if e.alpha == (1,)]
    assert abs(first[0].value) < 1e-12


def test_sech_unit_integral():
    rep = kernels.verify_moments(_get("sech", 1), quad_tol=1e-8)
    assert abs(rep.integral - 1.0) < 1e-8


# ---------------------------------------------------------------------------
# decay envelope
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,dim", ALL_KERNELS)
def test_decay_envelope_on_ray(name, dim):
    g = _get(name, dim)
    r = np.linspace(0.0, 20.0, 2001)
    x = np.zeros((r.size, dim))
    x[:, 0] = r
    vals = np.abs(g.eval(x)) * (1.0 + r) ** g.decay_exponent
    assert np.all(vals <= g.decay_constant)


# ---------------------------------------------------------------------------
# Fourier transforms and the saturation estimate
# ---------------------------------------------------------------------------


def _fourier_by_quadrature(g, xi):
    """Independent check: cosine-transform quadrature on a wide interval."""
    half = 30.0 if g.family == "sech" else 12.0
    t, w = np.polynomial.legendre.leggauss(400)
    x = half * t
    vals = g.eval(x[:, None])
    return float(np.sum(half * w * vals * np.cos(2.0 * math.pi * x * xi)))


@pytest.mark.parametrize("name", ["gauss", "laguerre-m3", "laguerre-m5",
                                  "trig-gauss", "sech"])
def test_transform_matches_quadrature(name):
    g = _get(name, 1)
    rng = np.random.default_rng(11)
    for _ in range(10):
        xi = rng.uniform(-2.0, 2.0)
        quad = _fourier_by_quadrature(g, xi)
        assert abs(quad - float(g.fourier(np.array([xi])))) < 1e-6


def test_transform_is_one_at_zero():
    for name, dim in ALL_KERNELS:
        g = _get(name, dim)
        assert float(g.fourier(np.zeros(dim))) == pytest.approx(1.0, abs=1e-8)


def test_saturation_gauss_matches_direct_lattice_sum(gauss1):
    # independent oracle: brute-force sum over a wide integer window
    nu = np.arange(-50, 51, dtype=float)
    nz = nu[nu != 0.0]
    direct = float(np.sum(np.exp(-np.pi ** 2 * 2.0 * nz ** 2)))
    est = kernels.saturation_estimate(gauss1, 2.0)
    assert direct == pytest.approx(5.350576e-09, rel=1e-5)
    assert est >= direct * (1.0 - 1e-12)  # upper bound, modulo roundoff
    assert est == pytest.approx(direct, rel=1e-6)


def test_saturation_sixth_order_2d_value(lag3_d2):
    # brute-force 2-D lattice sum of |F(sqrt(2) nu)| as the oracle
    rng = np.arange(-6, 7)
    G1, G2 = np.meshgrid(rng, rng, indexing="ij")
    nu = np.stack([G1.ravel(), G2.ravel()], axis=-1).astype(float)
    nu = nu[np.any(nu != 0, axis=1)]
    direct = float(np.sum(np.abs(lag3_d2.fourier(math.sqrt(2.0) * nu))))
    est = kernels.saturation_estimate(lag3_d2, 2.0)
    assert est == pytest.approx(direct, rel=1e-6)
    assert est == pytest.approx(2.3067e-06, rel=1e-3)
    # small enough to support a 5e-3 margin with unit-scale feedback
    assert est * 2.0 < 0.005 / 3.0


@pytest.mark.parametrize("name,dim", ALL_KERNELS)
def test_saturation_monotone_in_shape(name, dim):
    g = _get(name, dim)
    ladder = [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0]
    vals = [kernels.saturation_estimate(g, D) for D in ladder]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-10  # vanishes as the shape parameter grows


def test_catalog_rejects_unknown_and_wrong_dim():
    with pytest.raises(KernelError):
        kernels.catalog("spline", 2)
    with pytest.raises(KernelError):
        kernels.catalog("sech", 2)
    with pytest.raises(KernelError):
        kernels.catalog("trig-gauss", 3)


def test_catalog_kernels_are_frozen(lag3_d2):
    with pytest.raises(dataclasses.FrozenInstanceError):
        lag3_d2.dim = 3
