import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from vortexmf import bounds as B


def test_osgood_M_values_and_inverse():
    assert float(B.osgood_M(np.exp(-np.e))) == pytest.approx(1.0, abs=1e-15)
    assert float(B.osgood_M(B.E_INV)) == 0.0
    x = np.exp(np.linspace(np.log(1e-8), -1.0, 50))
    np.testing.assert_allclose(B.osgood_Minv(B.osgood_M(x)), x, rtol=1e-12)
    y = np.linspace(0, 3, 20)
    np.testing.assert_allclose(B.osgood_M(B.osgood_Minv(y)), y, atol=1e-12)
    for bad in (0.0, 0.5):
        with pytest.raises(ValueError):
            B.osgood_M(bad)
    with pytest.raises(ValueError):
        B.osgood_Minv(-0.1)


def test_M_is_the_osgood_integral():
    # M(a) - M(b) = int_a^b dr / (r ln(1/r))
    from scipy.integrate import quad
    a, b = 1e-4, 0.2
    val, _ = quad(lambda r: 1.0 / (r * np.log(1.0 / r)), a, b)
    assert float(B.osgood_M(a) - B.osgood_M(b)) == pytest.approx(val, rel=1e-10)


@given(st.floats(-10, 10), st.floats(1e-6, 1.0))
def test_regularizer_properties(r, eps):
    v = float(B.regularizer(r, eps=eps))
    assert v >= eps and v >= abs(r)
    assert v == pytest.approx(np.sqrt(eps * eps + r * r), rel=1e-15)


def test_regularizer_defaults_and_errors():
    assert float(B.regularizer(0.0, N=100)) == pytest.approx(np.log(100) / 100)
    with pytest.raises(ValueError):
        B.regularizer(0.0)
    with pytest.raises(ValueError):
        B.regularizer(0.0, eps=0.0)


def test_eps_schedule():
    for e3 in np.linspace(1e-4, B.E_INV, 200):
        e2 = B.solve_eps2(e3)
        assert 0 < e2 <= B.E_INV
        assert abs(e2 * np.log(1 / e2) - e3 * e3) < 1e-12
    e1, e2, e3 = B.epsilon_schedule(0.05, 1000, 2.0)
    assert e3 == 0.05 and e1 == pytest.approx(e2 * e2, rel=1e-15)
    assert B.epsilon_schedule(5.0, 1000, 2.0)[2] == pytest.approx(B.E_INV)
    assert B.epsilon_schedule(5.0, 1000, 10.0)[2] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        B.epsilon_schedule(0.1, 2, 1.0)
    with pytest.raises(ValueError):
        B.epsilon_schedule(0.0, 1000, 1.0)
    with pytest.raises(ValueError):
        B.solve_eps2(1.0)


def _params(**kw):
    base = dict(xi_inf=1.0, sigma_grad=1.0, C=1.0, F0=1e-3, N=10**6, t=0.1)
    base.update(kw)
    return B.EnvelopeParams(**base)


def test_envelope_monotone():
    ts = np.linspace(0, 0.5, 40)
    env_t = [B.envelope(_params(t=t)) for t in ts]
    assert np.all(np.diff(env_t) > 0)
    env_N = [B.envelope(_params(N=2**k, F0=0.0)) for k in range(12, 24)]
    assert np.all(np.diff(env_N) < 0)
    env_F = [B.envelope(_params(F0=f)) for f in (1e-4, 1e-3, 1e-2)]
    assert np.all(np.diff(env_F) > 0)
    assert B.envelope(_params(t=0.0)) == pytest.approx(1e-3)


def test_admissibility_threshold():
    p = _params(F0=0.05)
    t_star = B.admissibility_threshold(p, 10.0)
    assert t_star is not None
    assert B.admissible(p.with_t(0.999 * t_star))
    assert not B.admissible(p.with_t(1.001 * t_star))
    assert B.admissibility_threshold(_params(F0=1e-6), 1e-3) is None
    with pytest.raises(ValueError):
        B.envelope(p.with_t(2 * t_star))
    assert not B.admissible(_params(N=5, xi_inf=10.0))


def test_params_validation():
    with pytest.raises(ValueError):
        _params(C=-1.0)
    with pytest.raises(ValueError):
        _params(N=1)
    with pytest.raises(ValueError):
        _params().log_factor("other")


def test_closure_without_feedback_is_linear():
    t = np.linspace(0, 1, 11)
    s = B.MaximalSeries(t, np.full(11, 0.01))
    res = B.osgood_closure(s, 0.0, 0.02)
    np.testing.assert_allclose(res.osgood_bound, 0.01 + 0.02 * t, rtol=1e-14)
    np.testing.assert_allclose(res.integral_bound, 0.01 + 0.02 * t, rtol=1e-14)
    assert res.exit_time is None


def test_closure_solves_osgood_ode():
    A, c = 1.5, 1e-3
    t = np.linspace(0, 1, 101)
    sol = solve_ivp(lambda _, y: A * y * np.log(1 / y), (0, 1), [c], t_eval=t, rtol=1e-12, atol=1e-15)
    s = B.MaximalSeries(t, sol.y[0])
    res = B.osgood_closure(s, A, 0.0)
    np.testing.assert_allclose(res.osgood_bound, sol.y[0], rtol=1e-8)
    # the ODE solution is a fixed point of the integral inequality
    np.testing.assert_allclose(res.integral_bound, sol.y[0], rtol=1e-3)


def test_closure_exit_time():
    t = np.linspace(0, 1, 11)
    s = B.MaximalSeries(t, np.linspace(0.1, 0.5, 11))
    res = B.osgood_closure(s, 1.0, 0.0)
    assert res.exit_time == pytest.approx(0.7)
    assert np.isnan(res.osgood_bound[-1]) and not np.isnan(res.osgood_bound[0])
    with pytest.raises(ValueError):
        B.osgood_closure(s, -1.0, 0.0)


def test_closure_matches_envelope():
    p = _params(F0=2e-3, N=4096)
    t = np.linspace(0, 0.4, 9)
    s = B.MaximalSeries(t, np.full(t.size, p.F0))
    theorem = B.closure_from_params(s, p, form="theorem").osgood_bound
    np.testing.assert_allclose(theorem, [B.envelope(p.with_t(ti)) for ti in t], rtol=1e-12)
    closure = B.closure_from_params(s, p).osgood_bound
    assert np.all(closure <= theorem + 1e-15)


def test_maximal_series():
    s = B.MaximalSeries.from_samples([0, 1, 2], [0.3, 0.1, 0.5])
    np.testing.assert_array_equal(s.values, [0.3, 0.3, 0.5])
    r = B.MaximalSeries.from_samples([0, 1], [0.0, 0.0], N=100)
    np.testing.assert_allclose(r.values, np.log(100) / 100)
    with pytest.raises(ValueError):
        B.MaximalSeries([0, 1], [0.2, 0.1])
    with pytest.raises(ValueError):
        B.MaximalSeries([1, 0], [0.1, 0.2])


def test_envelope_table(tmp_path):
    p = _params(F0=0.05)
    t_star = B.admissibility_threshold(p, 10.0)
    rows = B.envelope_table(tmp_path / "env.csv", [0.0, 2 * t_star], [0.05, 0.06], p)
    assert rows[0][3] == 1 and rows[1][3] == 0 and np.isnan(rows[1][2])
    assert (tmp_path / "env.csv").read_text().startswith("t,G_hat,envelope,admissible")
