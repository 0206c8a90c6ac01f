import numpy as np
import pytest
from scipy.special import exp1

from vortexmf import euler_pde as pde
from vortexmf.noise import NoiseModel, constant_mode, fourier_mode

TWO_PI = 2.0 * np.pi


def _gaussian(n=128, L=6.0, w=0.5):
    return pde.from_profile("gaussian", n, L, width=w), w


def test_from_profile_unit_mass_and_validation():
    g, _ = _gaussian()
    assert g.mass == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        pde.from_profile("square", 16, 1.0)
    with pytest.raises(ValueError):
        pde.VorticityGrid(1.0, np.zeros((4, 5)))
    with pytest.raises(ValueError):
        pde.VorticityGrid(0.0, np.zeros((4, 4)))


def test_biot_savart_gaussian_closed_form():
    g, w = _gaussian()
    u = pde.biot_savart(g)
    x = g.coords
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    inner = (r2 > 0) & (np.sqrt(r2) < 2.0)
    swirl = np.where(r2 > 0, -np.expm1(-r2 / (2 * w * w)) / (TWO_PI * np.where(r2 > 0, r2, 1.0)), 0.0)
    exact = np.stack([x[..., 1] * swirl, -x[..., 0] * swirl])
    err = np.max(np.abs(u - exact)[:, inner])
    assert err < 2e-3 * np.max(np.abs(exact))


def test_log_potential_gaussian_closed_form():
    # corrected midpoint rule: second order in h against the exact radial potential
    errs = []
    for n in (64, 128):
        g, w = _gaussian(n=n)
        phi = pde.log_potential(g)
        x = g.coords
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        sel = (r2 > 0.01) & (r2 < 9.0)
        exact = -(np.log(r2[sel]) + exp1(r2[sel] / (2 * w * w))) / (4 * np.pi)
        errs.append(np.max(np.abs(phi[sel] - exact)))
    assert errs[1] < 3e-4
    assert errs[0] / errs[1] > 3.0


def test_constant_density_has_no_periodic_velocity():
    g = pde.VorticityGrid(2.0, np.ones((32, 32)))
    assert np.max(np.abs(pde.biot_savart(g, gauge="periodic"))) < 1e-14
    with pytest.raises(ValueError):
        pde.biot_savart(g, gauge="other")


def test_velocity_divergence_free():
    g = pde.from_profile("two-blob", 128, 6.0)
    u = pde.biot_savart(g)
    kx, ky = g.wavenumbers
    div = np.real(np.fft.ifft2(1j * kx * np.fft.fft2(u[0]) + 1j * ky * np.fft.fft2(u[1])))
    assert np.max(np.abs(div)) < 1e-10 * np.max(np.abs(u))


def test_radial_profile_is_steady():
    g, _ = _gaussian()
    out = g
    for n in range(10):
        out = pde.step(out, NoiseModel.zero(), None, n, 0.05)
    assert np.max(np.abs(out.values - g.values)) < 2e-5 * np.max(g.values)
    assert out.t == pytest.approx(0.5)


def test_step_conserves_mass_exactly():
    g = pde.from_profile("two-blob", 64, 6.0)
    noise = NoiseModel((fourier_mode(0.3, (1.0, 1.0), 0.2),))
    out = pde.step(g, noise, None, 0, 0.05, dW=[0.2])
    assert out.mass == pytest.approx(g.mass, rel=1e-14)
    with pytest.raises(pde.CFLError):
        pde.step(g, NoiseModel.zero(), None, 0, 100.0)
    with pytest.raises(ValueError):
        pde.step(g, NoiseModel.zero(), None, 0, 0.0)


def test_constant_noise_translates():
    g, _ = _gaussian(n=128)
    noise = NoiseModel((constant_mode(1.0, (1.0, 0.0)), constant_mode(1.0, (0.0, 1.0))))
    dW = np.array([0.3, -0.2])
    moved = pde.transport_noise(g, g.values, noise, dW)
    exact = pde.translate(g, dW).values
    assert np.sum(np.abs(moved - exact)) * g.cell_area < 1e-3


def test_translate_is_exact_for_whole_cells():
    g, _ = _gaussian(n=64)
    np.testing.assert_allclose(pde.translate(g, (g.h, 0.0)).values, np.roll(g.values, 1, axis=0), atol=1e-13)


def test_lp_norms_of_gaussian():
    g, w = _gaussian(n=256, L=6.0)
    assert pde.lp_norm(g, 1) == pytest.approx(1.0, rel=1e-12)
    assert pde.lp_norm(g, 2) == pytest.approx(1.0 / np.sqrt(4 * np.pi * w * w), rel=1e-10)
    assert pde.lp_norm(g, np.inf) == pytest.approx(1.0 / (TWO_PI * w * w), rel=1e-10)
    with pytest.raises(ValueError):
        pde.lp_norm(g, 3)


def test_moment_check_matches_direct_sum():
    g = pde.from_profile("gaussian", 16, 2.0, width=0.4)
    first, second = pde.moment_check(g)
    x = g.coords.reshape(-1, 2)
    w = g.values.ravel() * g.cell_area
    d = x[:, None] - x[None]
    direct = np.sum(w[:, None] * w[None] * 0.5 * np.log1p(np.sum(d * d, axis=-1)))
    assert second == pytest.approx(direct, rel=1e-12)
    assert first == pytest.approx(np.sum(w * 0.5 * np.log1p(np.sum(x * x, axis=-1))), rel=1e-12)


def test_support_monitor():
    g = pde.from_profile("gaussian", 64, 2.0, width=0.6)
    with pytest.raises(pde.SupportError):
        pde.step(g, NoiseModel.zero(), None, 0, 1e-3)


def test_dump_load_roundtrip(tmp_path):
    g = pde.from_profile("smoothed-disc", 32, 4.0).with_values(pde.from_profile("smoothed-disc", 32, 4.0).values, t=0.7)
    pde.dump_grid(g, tmp_path / "g.bin")
    back = pde.load_grid(tmp_path / "g.bin")
    np.testing.assert_array_equal(back.values, g.values)
    assert (back.L, back.t) == (g.L, g.t)
    pde.coarse_frame_csv(g, tmp_path / "g.csv")
    assert np.loadtxt(tmp_path / "g.csv", delimiter=",").shape == (8, 8)


def test_flowmap_deposit_preserves_mass():
    g = pde.from_profile("smoothed-disc", 64, 4.0)
    flow = pde.flowmap_from_grid(g)
    assert flow.weights.sum() == pytest.approx(g.mass, rel=1e-12)
    assert pde.deposit(flow, g).mass == pytest.approx(g.mass, rel=1e-12)
