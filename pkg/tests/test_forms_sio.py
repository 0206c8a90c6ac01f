import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vortexmf import coulomb
from vortexmf import euler_pde as pde
from vortexmf import forms_sio as fs
from vortexmf.noise import NoiseModel, fourier_mode

TWO_PI = 2.0 * np.pi


def _smooth_field():
    return fs.noise_field(NoiseModel((fourier_mode(0.8, (1.0, 2.0), 0.3),)), 0)


def _brute_force(order, v, x, w, grid, fw):
    """Double loop over every point and grid cell, written out independently."""
    nodes = grid.coords.reshape(-1, 2)
    pts = np.concatenate([x, nodes])
    wts = np.concatenate([w, fw * grid.values.ravel() * grid.cell_area])
    vals = v(pts)
    n_p = len(x)
    J_nodes = v.jac(nodes)
    diag_cells = fs.diagonal_value(order, J_nodes, lattice=True)
    total = 0.0
    for i in range(len(pts)):
        z = pts[i] - pts
        r2 = np.sum(z * z, axis=1)
        d = vals[i] - vals
        r2[i] = 1.0
        if order == 1:
            k = -np.sum(z * d, axis=1) / (TWO_PI * r2)
        else:
            zd = np.sum(z * d, axis=1)
            k = -(np.sum(d * d, axis=1) / r2 - 2 * zd * zd / r2**2) / TWO_PI
        k[i] = 0.0 if i < n_p else diag_cells[i - n_p] * grid.cell_area / (grid.cell_area)
        row = wts[i] * wts * k
        if i >= n_p:
            row[i] = wts[i] ** 2 * diag_cells[i - n_p]
        total += row.sum()
    return total


@pytest.mark.parametrize("order", [1, 2])
def test_forms_match_brute_force(order):
    grid = pde.from_profile("gaussian", 64, 3.0, width=0.5)
    rng = np.random.default_rng(order)
    # particles off the nodes
    x = rng.uniform(-1, 1, size=(3, 2)) + 0.37 * grid.h
    v = _smooth_field()
    m = fs.SignedMeasurePair(x, grid)
    got = fs.bilinear_form(order, v, m, m)
    want = _brute_force(order, v, x, np.full(3, 1 / 3), grid, -1.0)
    assert got == pytest.approx(want, rel=1e-6)


def test_particle_only_forms_brute_force():
    x = np.random.default_rng(3).normal(size=(7, 2))
    v = _smooth_field()
    m = fs.SignedMeasurePair(x, None)
    for order, K in ((1, fs.kernel_K1), (2, fs.kernel_K2)):
        want = sum(K(v, x[i], x[j]) for i in range(7) for j in range(7) if i != j) / 49
        assert fs.bilinear_form(order, v, m, m) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_linear_and_constant_fields(order):
    grid = pde.from_profile("gaussian", 64, 3.0, width=0.5)
    x = np.random.default_rng(5).uniform(-1, 1, size=(10, 2)) + 0.3 * grid.h
    m = fs.SignedMeasurePair(x, grid)
    ident = fs.linear_field(np.eye(2))
    want = fs.linear_field_offdiagonal_value(order, 10)
    assert abs(fs.bilinear_form(order, ident, m, m) - want) < 1e-12
    assert abs(fs.bilinear_form(order, fs.constant_field((0.4, -1.3)), m, m)) < 1e-12


def test_linear_field_particle_values():
    x = np.random.default_rng(6).normal(size=(5, 2))
    m = fs.SignedMeasurePair(x, None)
    ident = fs.linear_field(np.eye(2))
    # K1 = -1/(2 pi) and K2 = 1/(2 pi) off the diagonal; 20 ordered pairs of weight 1/25
    assert fs.form_K1(ident, m) == pytest.approx(-20 / 25 / TWO_PI, rel=1e-13)
    assert fs.form_K2(ident, m) == pytest.approx(20 / 25 / TWO_PI, rel=1e-13)


def test_kernels_against_coulomb_derivatives():
    rng = np.random.default_rng(7)
    v = _smooth_field()
    x, y = rng.normal(size=(2, 20, 2))
    d = v(x) - v(y)
    k1 = np.sum(coulomb.grad_g_trunc(x - y, 0.0) * d, axis=-1)
    np.testing.assert_allclose(fs.kernel_K1(v, x, y), k1, rtol=1e-12)
    H = np.array([coulomb.hess_g(z) for z in x - y])
    k2 = np.einsum("ma,mab,mb->m", d, H, d)
    np.testing.assert_allclose(fs.kernel_K2(v, x, y), k2, rtol=1e-10)


@given(st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_kernels_symmetric(seed):
    rng = np.random.default_rng(seed)
    v = _smooth_field()
    x, y = rng.normal(size=(2, 8, 2))
    np.testing.assert_allclose(fs.kernel_K1(v, x, y), fs.kernel_K1(v, y, x), rtol=1e-12)
    np.testing.assert_allclose(fs.kernel_K2(v, x, y), fs.kernel_K2(v, y, x), rtol=1e-12)


def test_polarization_and_symmetry():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 6, 2))
    v = _smooth_field()
    w = 1 / 12
    ma = fs.SignedMeasurePair(a, None, particle_weight=w)
    mb = fs.SignedMeasurePair(b, None, particle_weight=w)
    mab = fs.SignedMeasurePair(np.concatenate([a, b]), None, particle_weight=w)
    for order in (1, 2):
        B = fs.bilinear_form(order, v, ma, mb)
        assert B == pytest.approx(fs.bilinear_form(order, v, mb, ma), rel=1e-12)
        Q = fs.bilinear_form(order, v, mab, mab)
        assert Q == pytest.approx(fs.bilinear_form(order, v, ma, ma) + fs.bilinear_form(order, v, mb, mb) + 2 * B,
                                  rel=1e-12)


def test_rotation_covariance():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(8, 2))
    A = rng.normal(size=(2, 2))
    t = 0.7
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    for order in (1, 2):
        a = fs.bilinear_form(order, fs.linear_field(A), *(2 * [fs.SignedMeasurePair(x, None)]))
        rot = fs.SignedMeasurePair(x @ R.T, None)
        b = fs.bilinear_form(order, fs.linear_field(R @ A @ R.T), rot, rot)
        assert b == pytest.approx(a, rel=1e-12)


def test_diagonal_values():
    rng = np.random.default_rng(10)
    J = rng.normal(size=(5, 2, 2))
    div = J[:, 0, 0] + J[:, 1, 1]
    np.testing.assert_allclose(fs.diagonal_value(1, J, lattice=False), -div / (4 * np.pi), atol=1e-15)
    np.testing.assert_allclose(fs.diagonal_value(1, J, lattice=True), -div / (4 * np.pi), atol=1e-15)
    # K2 circle average of the limit for symmetric traceless J is zero
    S = np.array([[1.0, 0.5], [0.5, -1.0]])
    assert abs(fs.diagonal_value(2, S, lattice=False)) < 1e-15


def test_coincident_particles_rejected():
    m = fs.SignedMeasurePair(np.array([[0.0, 0.0], [0.0, 0.0]]), None)
    with pytest.raises(fs.CoincidentParticlesError):
        fs.form_K1(_smooth_field(), m)
    with pytest.raises(ValueError):
        fs.bilinear_form(3, _smooth_field(), m, m)


def test_diagonal_extend_adds_circle_average():
    x = np.random.default_rng(11).normal(size=(4, 2))
    v = _smooth_field()
    m = fs.SignedMeasurePair(x, None)
    extra = np.sum(fs.diagonal_value(1, v.jac(x), lattice=False)) / 16
    assert fs.form_K1(v, m, diagonal="extend") == pytest.approx(fs.form_K1(v, m) + extra, rel=1e-12)


def test_spectral_and_lattice_point_grid_routes_agree():
    grid = pde.from_profile("gaussian", 128, 4.0, width=0.6)
    x = np.random.default_rng(12).normal(scale=0.6, size=(32, 2))
    v = _smooth_field()
    m = fs.SignedMeasurePair(x, grid)
    for order in (1, 2):
        a = fs.bilinear_form(order, v, m, m, point_grid="lattice")
        b = fs.bilinear_form(order, v, m, m, point_grid="spectral")
        # the lattice route converges slowly in h; a few percent at n=128
        assert abs(a - b) < 3e-2 * (abs(a) + 1e-3)


def test_component_kernel_circle_averages_vanish():
    for fam in ("K0", "K1", "K2"):
        for idx in fs.component_index_sets(fam):
            assert abs(fs.circle_average(lambda z: fs.component_kernels(z, fam, idx))) < 1e-12
    z = np.array([[0.3, -0.4]])
    K0 = np.array([[fs.component_kernels(z, "K0", (a, b))[0] for b in range(2)] for a in range(2)])
    assert np.trace(K0) == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(K0, coulomb.hess_g(z[0]), rtol=1e-12)
    with pytest.raises(ValueError):
        fs.component_kernels([[0.0, 0.0]], "K0", (0, 0))


def test_boundary_constants():
    assert fs.boundary_constants("C", (0, 1)) == pytest.approx(0.0, abs=1e-15)
    assert fs.boundary_constants("C", (0, 0)) == pytest.approx(-0.5, abs=1e-15)
    assert fs.boundary_constants("C", (1, 1)) == pytest.approx(-0.5, abs=1e-15)


def test_bump_and_mollifier():
    r1 = fs.bump_support_radius()
    assert 0 < r1 <= 1.0
    g = np.linspace(-1, 1, 801)
    X, Y = np.meshgrid(g, g, indexing="ij")
    c = fs.chi(np.stack([X, Y], axis=-1))
    assert c.min() >= 0.0 and c.max() <= 1.0
    assert np.sum(c) * (g[1] - g[0]) ** 2 == pytest.approx(1.0, abs=1e-3)
    A = np.array([[0.3, 1.0], [-0.5, 0.2]])
    lin = fs.linear_field(A, (1.0, 2.0))
    moll = fs.mollify(lin, 0.1)
    pts = np.random.default_rng(13).normal(size=(10, 2))
    np.testing.assert_allclose(moll(pts), lin(pts), atol=1e-12)
    np.testing.assert_allclose(moll.jac(pts), lin.jac(pts), atol=1e-10)
    v = _smooth_field()
    eps = 0.05
    assert np.max(np.linalg.norm(fs.mollify(v, eps)(pts) - v(pts), axis=-1)) <= v.lip * eps * r1
    with pytest.raises(ValueError):
        fs.mollify(v, 0.5)


def test_principal_value_matches_spectral():
    grid = pde.VorticityGrid(np.pi, np.zeros((128, 128)))
    v = fs.noise_field(NoiseModel((fourier_mode(0.8, (1.0, 1.0), 0.3),)), 0)
    f = fs.smooth_test_function(grid, np.random.default_rng(0))
    nodes = [(67, 66), (56, 70)]
    pts = np.array([grid.coords[i, j] for i, j in nodes])
    for order in (1, 2):
        spec = fs.sio_apply(v, f, order, grid=grid)
        pv = fs.sio_apply(v, f, order, grid=grid, method="pv", points=pts)
        at = np.stack([spec[:, :, i, j] for i, j in nodes], axis=-1)
        # periodic spectral operator versus lattice sum over the box: agree up to the image terms
        assert np.max(np.abs(pv - at)) < 0.1 * np.max(np.abs(spec))
    with pytest.raises(ValueError):
        fs.sio_apply(v, f, 1, grid=grid, method="pv", points=pts + 0.3 * grid.h)


def test_adjoint_identity():
    grid = pde.VorticityGrid(np.pi, np.zeros((64, 64)))
    v = _smooth_field()
    rng = np.random.default_rng(14)
    f = fs.smooth_test_function(grid, rng)
    G = rng.normal(size=(2, 2, 64, 64))
    for order in (1, 2):
        lhs = np.sum(fs.sio_apply(v, f, order, grid=grid, dealias=False) * G)
        rhs = np.sum(f * fs.sio_adjoint_apply(v, G, order, grid))
        assert lhs == pytest.approx(rhs, rel=1e-9)
