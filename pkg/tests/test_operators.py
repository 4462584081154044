import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from muslx.operators import (ExponentField, Flux, TruncationFamily, bounded_flux_bound, double_phase_flux,
                             linear_flux, plaplace_flux, potential_consistency, regularize, truncate,
                             truncate_derivative, truncate_smooth, verify_coercivity,
                             verify_monotonicity)
from muslx.orlicz import NFunction, conjugate_nfunction, double_phase_nfunction, isotropic, power

X0 = (np.zeros(1), np.zeros(1))


def at(A, xi, t=0.0, x=X0):
    return A(t, x, np.asarray(xi, dtype=float).reshape(2, 1))[:, 0]


def test_plaplace_examples():
    np.testing.assert_allclose(at(plaplace_flux(2), [3, -1]), [3, -1])
    np.testing.assert_allclose(at(plaplace_flux(4), [1, 0]), [1, 0])
    np.testing.assert_allclose(at(plaplace_flux(3), [2, 0]), [4, 0])


def test_plaplace_rejects_small_exponent():
    with pytest.raises(ValueError):
        plaplace_flux(1.0)
    with pytest.raises(ValueError):
        plaplace_flux(ExponentField.piecewise([1.0], [2.0, 0.5]))


def test_double_phase_examples():
    np.testing.assert_allclose(at(double_phase_flux(2, 4, 1.0), [1, 1]), [3, 3])
    A = double_phase_flux(2, 3, lambda t, x: x[0])
    np.testing.assert_allclose(at(A, [2, 0], x=(np.array([0.5]), np.zeros(1))), [4, 0])
    with pytest.raises(ValueError):
        double_phase_flux(3, 2)
    with pytest.raises(ValueError):
        double_phase_flux(2, 3, -1.0)


def test_double_phase_without_weight_is_plaplace():
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(2, 1000))
    x = (rng.uniform(size=1000), rng.uniform(size=1000))
    assert np.max(np.abs(double_phase_flux(1.5, 3, 0.0)(0.0, x, xi) - plaplace_flux(1.5)(0.0, x, xi))) == 0


@pytest.mark.parametrize("A", [plaplace_flux(1.5), plaplace_flux(4), double_phase_flux(2, 4),
                               linear_flux(2.0), plaplace_flux(3, delta_reg=0.1)])
def test_flux_vanishes_at_zero(A):
    assert np.all(at(A, [0, 0]) == 0)


def test_regularize_examples():
    zero = Flux(lambda t, x, xi: np.zeros_like(xi), label="zero")
    np.testing.assert_allclose(at(regularize(zero, 0.1, power(2)), [2, 0]), [0.2, 0])
    np.testing.assert_allclose(at(regularize(plaplace_flux(2), 1.0, power(4)), [1, 1]), [3, 3])
    assert np.all(at(regularize(plaplace_flux(2), 1.0, power(4)), [0, 0]) == 0)
    assert regularize(zero, 0.0, power(2)) is zero
    with pytest.raises(ValueError):
        regularize(zero, -1.0, power(2))


def test_regularize_is_additive():
    rng = np.random.default_rng(2)
    xi = rng.normal(size=(2, 500))
    x = (rng.uniform(size=500),) * 2
    A = plaplace_flux(3)
    m = power(4)
    diff = regularize(A, 0.3, m)(0.0, x, xi) - A(0.0, x, xi)
    r = np.sqrt((xi**2).sum(axis=0))
    np.testing.assert_allclose(diff, 0.3 * m.deriv(r) / r * xi, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("A", [plaplace_flux(1.5), plaplace_flux(4), double_phase_flux(2, 4, 0.7),
                               regularize(plaplace_flux(2), 0.5, power(3)),
                               plaplace_flux(2.5, delta_reg=0.3)])
def test_potential_consistency(A):
    assert potential_consistency(A) <= 1e-6


@pytest.mark.parametrize("A", [plaplace_flux(1.5), plaplace_flux(4), double_phase_flux(2, 4, 0.7),
                               regularize(plaplace_flux(3), 0.5, power(4))])
def test_jacobian_matches_finite_differences(A):
    rng = np.random.default_rng(4)
    xi = rng.normal(size=(2, 50)) + 0.2
    x = (rng.uniform(size=50),) * 2
    J = A.jacobian(0.0, x, xi)
    for k in range(2):
        e = np.zeros_like(xi)
        e[k] = 1e-6
        fd = (A(0.0, x, xi + e) - A(0.0, x, xi - e)) / 2e-6
        np.testing.assert_allclose(J[:, k], fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
def test_plaplace_coercivity_identity(p):
    m = power(p)
    rep = verify_coercivity(plaplace_flux(p), isotropic(m), conjugate_nfunction(power(p / (p - 1))),
                            samples=20_000, scale=1.0)
    assert rep.passed
    assert rep.witness["max_abs_margin"] <= 1e-12


def test_double_phase_coercivity_margin_reported():
    A = double_phase_flux(2, 4, 1.0)
    M = double_phase_nfunction(2, 4, 1.0, 1.0)
    # the conjugate of r^2/2 + r^4/4 has no closed form; x^2/2 bounds it
    # from above, so the margin is only reported
    Mstar = NFunction(lambda t, x, r: r**2 / 2, power(2), power(2))
    rep = verify_coercivity(A, M, Mstar, samples=10_000)
    assert rep.samples == 10_000
    assert np.isfinite(rep.worst)


def test_coercivity_failure_reported():
    rep = verify_coercivity(plaplace_flux(2), isotropic(power(2, 1.0)), isotropic(power(2)),
                            samples=1000)
    assert not rep.passed
    assert rep.worst < 0


@pytest.mark.parametrize("A", [plaplace_flux(1.5), plaplace_flux(2), plaplace_flux(4),
                               double_phase_flux(2, 4, 1.0)])
def test_strict_monotonicity(A):
    rep = verify_monotonicity(A, samples=20_000)
    assert rep.passed and rep.worst > 0


def test_monotonicity_linear_exact():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 2, 100))
    x = (np.zeros(100),) * 2
    A = plaplace_flux(2)
    prod = ((A(0.0, x, a) - A(0.0, x, b)) * (a - b)).sum(axis=0)
    np.testing.assert_allclose(prod, ((a - b) ** 2).sum(axis=0), rtol=1e-14)


def test_bounded_flux_bound():
    assert bounded_flux_bound(plaplace_flux(2), 5.0) == pytest.approx(5.0)
    assert bounded_flux_bound(plaplace_flux(3), 2.0) == pytest.approx(4.0)
    assert bounded_flux_bound(plaplace_flux(3), 0.0) == 0.0
    assert bounded_flux_bound(plaplace_flux(3), 1.0) <= bounded_flux_bound(plaplace_flux(3), 2.0)


# -- exponent fields -------------------------------------------------------------


def test_exponent_intervals_closed_on_right():
    f = ExponentField.piecewise([1.0], [2.0, 4.0])
    assert f(1.0, (np.zeros(1),))[0] == 2.0
    assert f(1.0 + 1e-12, (np.zeros(1),))[0] == 4.0
    assert f(0.0, (np.zeros(1),))[0] == 2.0


def test_exponent_restrict_and_affine():
    f = ExponentField.piecewise([1.0, 2.0], [2.0, [3.0, 1.0], 2.0])
    sub = f.restrict(1.0, 2.0)
    assert sub.breakpoints == ()
    assert sub(1.5, (np.array([0.5]),))[0] == 3.5
    assert f.bounds() == (2.0, 4.0)
    with pytest.raises(ValueError):
        ExponentField.piecewise([2.0, 1.0], [2, 3, 4])


def test_linear_coefficient_tracks_time():
    A = plaplace_flux(ExponentField.piecewise([1.0], [2.0, 4.0]))
    assert A.linear_coefficient(0.5) == 1.0
    assert A.linear_coefficient(1.0) == 1.0
    assert A.linear_coefficient(1.5) is None
    assert plaplace_flux(2, delta_reg=0.1).linear_coefficient(0.0) is None


# -- truncations -------------------------------------------------------------------


def test_truncation_examples():
    fam = TruncationFamily(3.0)
    T, G = truncate(fam, np.array([5.0, -5.0, 2.0]))
    np.testing.assert_array_equal(T, [3, -3, 2])
    assert G[0] == pytest.approx(10.5)
    assert G[0] == pytest.approx(quad(lambda z: truncate(fam, z)[0], 0, 5)[0])
    T, dT, G = truncate_smooth(TruncationFamily(1.0, 0.5), np.array([1.5]))
    assert T[0] == pytest.approx(1.25)
    with pytest.raises(ValueError):
        TruncationFamily(0.0)
    with pytest.raises(ValueError):
        truncate_smooth(TruncationFamily(1.0), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10), st.floats(-50, 50))
def test_truncation_invariants(k, z):
    fam = TruncationFamily(k)
    T, G = truncate(fam, z)
    assert abs(T) <= k
    if abs(z) <= k:
        assert T == z and G == pytest.approx(0.5 * z * z)
    assert truncate_derivative(fam, z) == (1.0 if abs(z) < k else 0.0)


def test_primitive_is_convex():
    z = np.linspace(-10, 10, 4001)
    G = truncate(TruncationFamily(2.0), z)[1]
    assert np.all(np.diff(G, 2) >= -1e-12)


@pytest.mark.parametrize("k,delta", [(1.0, 0.5), (2.0, 0.1), (0.3, 1.0)])
def test_smooth_truncation_properties(k, delta):
    fam = TruncationFamily(k, delta)
    z = np.linspace(0, k + 3 * delta, 20001)
    h = z[1] - z[0]
    T, dT, G = truncate_smooth(fam, z)
    assert np.all((dT >= 0) & (dT <= 1))
    second = np.diff(T, 2) / h**2
    assert np.max(np.abs(second)) <= 1.6 / delta
    assert np.all(np.diff(T, 2) <= 1e-12)
    # T' and G' agree with finite differences of T and G
    np.testing.assert_allclose(np.gradient(T, h)[1:-1], dT[1:-1], atol=5e-6 / delta)
    np.testing.assert_allclose(np.gradient(G, h)[1:-1], T[1:-1], atol=1e-5 * (k + delta))
    Tm, _, Gm = truncate_smooth(fam, -z)
    np.testing.assert_allclose(Tm, -T)
    np.testing.assert_allclose(Gm, G)
