import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vortexmf import euler_pde as pde
from vortexmf import modulated_energy as me

TWO_PI = 2.0 * np.pi


def _g(r):
    return -np.log(r) / TWO_PI


def _grid(n=16, L=2.0):
    return pde.from_profile("gaussian", n, L, width=0.35)


def test_two_particles_without_density():
    d = 0.3
    rep = me.modulated_energy([[0.0, 0.0], [d, 0.0]], None)
    assert rep.F_avg == pytest.approx(0.5 * _g(d), rel=1e-15)
    assert rep.term_px == rep.term_xx == 0.0
    assert me.energy_terms([[0.0, 0.0], [d, 0.0]], _grid(), xi_weight=0.0) == (rep.F_avg, 0.0, 0.0)


def test_brute_force_small_grid():
    grid = _grid()
    h = grid.h
    rng = np.random.default_rng(0)
    # particles at cell centres so that every particle-node distance exceeds the disc radius
    idx = rng.choice(grid.n, size=(4, 2), replace=False)
    x = -grid.L + h * (idx + 0.5)
    N = len(x)
    nodes = grid.coords.reshape(-1, 2)
    w = grid.values.ravel() * h * h
    pp = sum(_g(np.linalg.norm(x[i] - x[j])) for i in range(N) for j in range(N) if i != j) / N**2
    px = sum(w @ _g(np.linalg.norm(nodes - x[i], axis=1)) for i in range(N)) / N
    rho = h / np.sqrt(np.pi)
    self_cell = -0.5 * rho**2 * np.log(rho) + 0.25 * rho**2
    xx = 0.0
    for a in range(len(nodes)):
        r = np.linalg.norm(nodes - nodes[a], axis=1)
        r[a] = 1.0
        k = _g(r)
        k[a] = self_cell / (h * h)
        xx += w[a] * (k @ w)
    rep = me.modulated_energy(x, grid, support_tol=None)
    assert rep.term_pp == pytest.approx(pp, rel=1e-12)
    assert rep.term_px == pytest.approx(px, rel=1e-12)
    assert rep.term_xx == pytest.approx(xx, rel=1e-12)
    assert rep.F_avg == pytest.approx(rep.recomputed(), abs=1e-15)


def test_potential_at_nodes_matches_fft_route():
    grid = _grid(n=32)
    nodes = grid.coords.reshape(-1, 2)
    np.testing.assert_allclose(me.potential_at(grid, nodes), me.log_potential_grid(grid).ravel(), atol=1e-13)


@given(st.integers(2, 30), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_N_scaled_energy_matches(N, seed):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(N, 2))
    grid = _grid()
    rep = me.modulated_energy(x, grid, support_tol=None)
    assert me.modulated_energy_N(x, grid) == pytest.approx(N * N * rep.F_avg, rel=1e-10, abs=1e-10)


def test_cross_term_routes_agree():
    grid = pde.from_profile("gaussian", 128, 6.0, width=0.6)
    x = np.random.default_rng(1).normal(scale=0.5, size=(20, 2))
    a = me.modulated_energy(x, grid, cross="quadrature").F_avg
    b = me.modulated_energy(x, grid, cross="interpolated").F_avg
    assert abs(a - b) < 1e-4
    with pytest.raises(ValueError):
        me.energy_terms(x, grid, cross="other")


def test_support_check():
    wide = pde.from_profile("gaussian", 32, 1.0, width=0.5)
    with pytest.raises(me.BoxSupportError):
        me.modulated_energy([[0.0, 0.0], [0.1, 0.0]], wide)


def test_renormalized_smeared_energy_without_density():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=(6, 2))
    eta = 0.2 * me.min_distance(x)
    F_N = me.modulated_energy_N(x, None)
    val = me.smeared_energy(x, eta, None) - 6 * _g(eta)
    # disjoint circles interact exactly like points
    assert val == pytest.approx(F_N, rel=1e-12)


def test_smeared_energy_routes_agree():
    # expanded pair sums versus direct quadrature of |grad H|^2 over the box
    grid = pde.from_profile("gaussian", 64, 4.0, width=0.5)
    x = np.array([[-0.6, 0.1], [0.5, 0.3]])
    etas = [0.05, 0.08]
    a = me.smeared_energy(x, etas, grid)
    b = me.smeared_energy(x, etas, grid, method="field")
    assert b == pytest.approx(a, rel=3e-3)
    with pytest.raises(ValueError):
        me.smeared_energy(x, 0.0, None)


def test_r_vec_and_close_pairs():
    x = np.array([[0.0, 0.0], [0.4, 0.0], [3.0, 0.0]])
    np.testing.assert_allclose(me.r_vec(x, 0.5), [0.1, 0.1, 0.5])
    assert me.close_pairs(x, 0.5) == 2
    assert me.close_pairs(x, 0.3) == 0
    assert me.close_pairs(x, 2.6) == 4
    with pytest.raises(ValueError):
        me.r_vec(x, 1.5)
    with pytest.raises(ValueError):
        me.close_pairs(x, 0.0)


def test_sobolev_norm_of_point_mass():
    # ||delta||^2 in H^-2 is int (1 + |k|^2)^-2 dk = pi
    empty = pde.VorticityGrid(4.0, np.zeros((64, 64)))
    assert me.sobolev_distance([[0.3, -0.2]], empty, -2.0) == pytest.approx(np.sqrt(np.pi), rel=1e-3)
    with pytest.raises(ValueError):
        me.sobolev_distance([[0.0, 0.0]], empty, -1.0)


def test_sobolev_distance_translation_invariant():
    grid = pde.from_profile("gaussian", 64, 4.0, width=0.5)
    x = np.random.default_rng(3).normal(scale=0.5, size=(16, 2))
    a = me.sobolev_distance(x, grid)
    shift = np.array([3 * grid.h, -2 * grid.h])
    b = me.sobolev_distance(x + shift, pde.translate(grid, shift))
    assert b == pytest.approx(a, rel=1e-8)
    # the distance shrinks as the empirical measure approaches the density
    many = pde.VorticityGrid(grid.L, grid.values)
    far = me.sobolev_distance(x + 2.0, many)
    assert far > a


def test_lower_bound_chain_keys():
    x = np.random.default_rng(4).uniform(-1, 1, size=(5, 2))
    out = me.lower_bound_chain(x, 0.25 * me.min_distance(x), None)
    assert set(out) == {"lhs", "energy_part", "error_scale", "F_N", "smeared"}
    assert out["error_scale"] == 0.0
    assert out["lhs"] >= 0.0
