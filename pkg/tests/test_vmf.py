import math

import mpmath as mp
import numpy as np
import pytest
import torch
from scipy.special import ive

from s3pt.vmf import (
    debye_polynomials,
    log_bessel_iv,
    log_vmf_normalizer,
    log_vmf_normalizer_np,
    series_threshold,
)

from .oracles import vmf3_log_normalizer, vmf_log_normalizer_quad


@pytest.mark.parametrize("kappa", np.logspace(-3, 3, 50))
def test_d3_closed_form(kappa):
    assert abs(float(log_vmf_normalizer_np(kappa, 3)) - vmf3_log_normalizer(kappa)) < 1e-10


def test_d3_at_two_by_hand():
    expected = math.log(2.0) - math.log(4 * math.pi) - math.log(3.626860407847019)
    assert abs(float(log_vmf_normalizer_np(2.0, 3)) - expected) < 1e-10


@pytest.mark.parametrize("dim", [3, 16, 64, 256])
def test_kappa_zero_is_inverse_sphere_area(dim):
    area = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    assert float(log_vmf_normalizer_np(0.0, dim)) == pytest.approx(-math.log(area), abs=1e-12)


@pytest.mark.parametrize("dim", [16, 64, 256])
def test_matches_quadrature(dim):
    for kappa in np.logspace(-3, 3, 13):
        oracle = vmf_log_normalizer_quad(float(kappa), dim)
        # 1e-8 relative on C itself is 1e-8 absolute on log C
        assert abs(float(log_vmf_normalizer_np(kappa, dim)) - oracle) < 1e-8, (dim, kappa)


@pytest.mark.parametrize("kappa", [1.0, 10.0, 100.0, 1000.0])
def test_d64_reference_points(kappa):
    assert abs(float(log_vmf_normalizer_np(kappa, 64)) - vmf_log_normalizer_quad(kappa, 64)) < 1e-8


@pytest.mark.parametrize("dim", [2, 3, 5, 16, 64, 256, 1024])
def test_regimes_agree_at_boundary(dim):
    k = series_threshold(dim)
    grid = np.array([k * (1 - 1e-9), k, k * (1 + 1e-9)])
    series = log_vmf_normalizer_np(grid, dim, regime="series")
    asym = log_vmf_normalizer_np(grid, dim, regime="asymptotic")
    assert np.abs(series - asym).max() < 1e-12 * max(1.0, abs(series).max())
    auto = log_vmf_normalizer_np(grid, dim)
    assert np.abs(np.diff(auto)).max() < 1e-8


@pytest.mark.parametrize("dim", [4, 64, 256])
def test_log_bessel_against_mpmath(dim):
    nu = dim / 2 - 1
    x = np.logspace(-2, 2.5, 30)
    ref = np.array([float(mp.log(mp.besseli(nu, v))) for v in x])
    assert np.abs(log_bessel_iv(nu, x) - ref).max() < 1e-10 * np.abs(ref).max()


def test_debye_polynomials_low_order():
    u = [np.trim_zeros(np.asarray(p), "b") for p in debye_polynomials(3)]
    # u_1(t) = (3t - 5t^3)/24, u_2(t) = (81t^2 - 462t^4 + 385t^6)/1152
    assert u[0].tolist() == [1.0]
    assert u[1] == pytest.approx([0.0, 3 / 24, 0.0, -5 / 24])
    assert u[2] == pytest.approx([0, 0, 81 / 1152, 0, -462 / 1152, 0, 385 / 1152])


@pytest.mark.parametrize("dim", [3, 16, 64])
def test_gradient_matches_bessel_ratio(dim):
    kappa = torch.tensor([0.01, 0.3, 2.0, 30.0, 400.0], dtype=torch.float64, requires_grad=True)
    log_vmf_normalizer(kappa, dim).sum().backward()
    k = kappa.detach().numpy()
    # ive ratio equals the I ratio since the exp(-x) factors cancel
    ratio = ive(dim / 2, k) / ive(dim / 2 - 1, k)
    assert np.allclose(kappa.grad.numpy(), -ratio, rtol=1e-10, atol=1e-14)


def test_gradcheck():
    kappa = torch.tensor([0.05, 1.5, 12.0, 90.0], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda k: log_vmf_normalizer(k, 64), (kappa,), eps=1e-6, atol=1e-7)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        log_vmf_normalizer(torch.tensor([-1.0]), 8)
    with pytest.raises(ValueError):
        log_vmf_normalizer(torch.tensor([float("inf")]), 8)
    with pytest.raises(ValueError):
        log_vmf_normalizer(torch.tensor([1.0]), 1)


def test_large_kappa_stays_finite():
    out = log_vmf_normalizer_np(np.array([1e4, 1e6]), 64)
    assert np.isfinite(out).all()
