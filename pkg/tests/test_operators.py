import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import negated, random_field_pair, shifted
from pmvlab import (
    CSearchConfig,
    DomainError,
    OperatorVariant,
    SingularGradientError,
    a_minus,
    a_minus_many,
    a_plus,
    a_plus_many,
    a_select,
    derive_params,
    kappa,
    l_r,
    m_r,
    p_laplacian_exact,
    p_laplacian_normalized_exact,
    truncation_bounds,
)
from pmvlab.expansion import affine_field, quadratic_field, radial_power_field
from pmvlab.operators import (
    c_candidates,
    operator_reach,
    sphere_moment,
    sphere_moment_closed_form,
)

LOW = "low"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.sampled_from([2.0, 2.5, 3.0, 4.0]))
def test_algebra_properties(seed, d, p):
    rng = np.random.default_rng(seed)
    eps = 0.2
    params, x, phi, psi = random_field_pair(rng, d, p, eps)
    for op in (a_plus, a_minus):
        a_phi = op(phi, x, eps, params, quality=LOW)[0]
        a_psi = op(psi, x, eps, params, quality=LOW)[0]
        assert a_phi <= a_psi
        assert abs(a_psi - a_phi) <= np.max(np.abs(psi.values - phi.values)) * (1 + 1e-12)
        s = float(rng.uniform(-3, 3))
        assert op(shifted(phi, s), x, eps, params, quality=LOW)[0] == pytest.approx(
            a_phi + s, abs=1e-12)
    assert a_minus(phi, x, eps, params, quality=LOW)[0] == \
        -a_plus(negated(phi), x, eps, params, quality=LOW)[0]


def test_c_candidates_endpoints_and_degenerate_case():
    cs = c_candidates(0.1, 0.5, CSearchConfig())
    tb = truncation_bounds(0.1, 0.5)
    assert cs.size == 64 and cs[0] == tb.m and cs[-1] == tb.M
    assert np.all(np.diff(cs) > 0)
    assert np.array_equal(c_candidates(0.1, 0.0, CSearchConfig()), [0.1])
    with pytest.raises(DomainError):
        CSearchConfig(n_coarse=4)


def test_operator_reach_covers_every_ball():
    params = derive_params(3, 2)
    eps = 0.1
    cs = c_candidates(eps, params.alpha, CSearchConfig())
    small = eps ** 2 * cs ** (1 - params.alpha)
    noise = params.gamma * eps * cs ** (-params.alpha / 2)
    assert max(small.max(), noise.max()) == pytest.approx(operator_reach(eps, params), rel=1e-15)


@pytest.mark.parametrize("d", [1, 2])
def test_affine_fields_pay_only_the_gradient_term(d):
    # the noise statistics of an affine map return phi(x); the small ball adds
    # alpha |a| eps^2 c^(1-alpha), which is smallest at c = m
    params = derive_params(3, d)
    a = np.arange(1.0, d + 1)
    phi = affine_field(d, a, 0.5)
    x = np.full(d, 0.1)
    eps = 0.1
    val = float(phi(x[None])[0])
    tb = truncation_bounds(eps, params.alpha)
    gain = params.alpha * np.linalg.norm(a) * eps ** 2 * tb.m ** (1 - params.alpha)
    plus, c = a_plus(phi, x, eps, params)
    assert c == tb.m
    assert plus - val == pytest.approx(gain, rel=1e-3)
    assert a_minus(phi, x, eps, params)[0] - val == pytest.approx(-gain, rel=1e-3)
    assert m_r(phi, x, 0.1, params) == pytest.approx(val, abs=1e-12)


def test_p2_operators_coincide_with_ball_average():
    params = derive_params(2, 1)
    phi = quadratic_field(1)
    x = np.array([0.3])
    eps = 0.1
    # the noise ball has radius sqrt(6) eps and the mean of y^2 over the
    # sampled unit ball is 1/3, so the average of x^2 + 2x gains 6 eps^2 / 3
    expected = 0.09 + 0.6 + 2 * eps ** 2
    assert a_plus(phi, x, eps, params)[0] == pytest.approx(expected, rel=1e-12)
    assert a_minus(phi, x, eps, params)[0] == pytest.approx(expected, rel=1e-12)


def test_optimal_c_within_truncation_and_convex_gain():
    # the field is convex with positive p-Laplacian, so both operators lift it
    params = derive_params(3, 2)
    phi = quadratic_field(2)
    x = np.array([0.3, 0.3])
    plus, c_plus = a_plus(phi, x, 0.1, params)
    minus, c_minus = a_minus(phi, x, 0.1, params)
    tb = truncation_bounds(0.1, params.alpha)
    assert tb.m <= c_plus <= tb.M and tb.m <= c_minus <= tb.M
    assert plus > float(phi(x[None])[0]) and minus > float(phi(x[None])[0])


def test_refinement_never_worse_than_grid():
    params = derive_params(3, 1)
    phi = radial_power_field(1, 3)
    x = np.array([0.5])
    coarse = a_plus(phi, x, 0.1, params)[0]
    fine = a_plus(phi, x, 0.1, params, CSearchConfig(refine=True, refine_tol=1e-8))[0]
    assert fine <= coarse
    coarse = a_minus(phi, x, 0.1, params)[0]
    fine = a_minus(phi, x, 0.1, params, CSearchConfig(refine=True, refine_tol=1e-8))[0]
    assert fine >= coarse


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("p", [2.0, 3.0])
def test_batched_operators_match_pointwise(d, p):
    rng = np.random.default_rng(7)
    params, x, phi, _ = random_field_pair(rng, d, p, 0.2)
    X = x + rng.uniform(-0.01, 0.01, (6, d))
    vp, cp = a_plus_many(phi, X, 0.2, params, quality=LOW)
    vm, cm = a_minus_many(phi, X, 0.2, params, quality=LOW)
    for i in range(X.shape[0]):
        assert (vp[i], cp[i]) == a_plus(phi, X[i], 0.2, params, quality=LOW)
        assert (vm[i], cm[i]) == a_minus(phi, X[i], 0.2, params, quality=LOW)


def test_a_select_sign_rule():
    params = derive_params(3, 1)
    phi = quadratic_field(1)
    x = np.array([0.3])
    plus = a_plus(phi, x, 0.1, params)[0]
    minus = a_minus(phi, x, 0.1, params)[0]
    assert a_select(phi, x, 0.1, 0.0, "overline", params) == plus
    assert a_select(phi, x, 0.1, 0.0, OperatorVariant.UNDERLINE, params) == minus
    assert a_select(phi, x, 0.1, 1.0, "underline", params) == plus
    assert a_select(phi, x, 0.1, -1.0, "overline", params) == minus


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
def test_operators_reject_bad_eps(eps):
    params = derive_params(3, 1)
    with pytest.raises(DomainError):
        a_plus(quadratic_field(1), [0.0], eps, params)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("p", [2.0, 2.5, 3.0, 4.0])
def test_sphere_moment_quadrature_matches_gamma_formula(d, p):
    assert sphere_moment(d, p) == pytest.approx(sphere_moment_closed_form(d, p), rel=1e-6)


def test_kappa_special_values():
    # in 1-d the sphere is {-1, 1}, so kappa = 2 (p + 1)
    assert kappa(1, 3.0) == pytest.approx(8.0)
    # p = 2 in d dimensions: avg of y_1^2 on the sphere is 1/d
    assert kappa(3, 2.0) == pytest.approx(2.0 * 5 / 3 * 3)


def test_m_r_and_l_r_on_quadratic():
    params = derive_params(2, 1)
    phi = quadratic_field(1)
    x = np.array([0.3])
    r = 0.05
    # p = 2: M_r is the ball mean over radius sqrt(6) r
    assert m_r(phi, x, r, params) == pytest.approx(0.69 + 2 * r ** 2, rel=1e-12)
    # L_r of a quadratic at p = 2 is the Laplacian exactly
    assert l_r(phi, x, r, params) == pytest.approx(2.0, rel=1e-10)


def test_exact_p_laplacian_of_radial_power():
    for d in (1, 2, 3):
        for p in (2.5, 3.0, 4.0):
            phi = radial_power_field(d, p)
            x = np.full(d, 0.4)
            expected = d * (p / (p - 1)) ** (p - 1)
            assert p_laplacian_exact(phi, x, p) == pytest.approx(expected, rel=1e-12)


def test_normalized_p_laplacian_and_singular_gradient():
    from pmvlab.expansion import critical_quadratic_field

    phi = critical_quadratic_field(2)
    assert p_laplacian_normalized_exact(phi, [0.5, 0.0], 3.0) == pytest.approx(6.0)
    assert p_laplacian_exact(phi, [0.0, 0.0], 3.0) == 0.0
    assert p_laplacian_exact(phi, [0.0, 0.0], 2.0) == 4.0
    with pytest.raises(SingularGradientError):
        p_laplacian_normalized_exact(phi, [0.0, 0.0], 3.0)


def test_a_plus_expansion_on_quadratic_is_small():
    params = derive_params(3, 2)
    phi = quadratic_field(2)
    x = np.array([0.3, 0.3])
    eps = 1 / 64
    val = a_plus(phi, x, eps, params, CSearchConfig(refine=True, refine_tol=1e-9))[0]
    target = math.sqrt(p_laplacian_exact(phi, x, 3.0))
    rem = (val - float(phi(x[None])[0])) / eps ** 2
    assert abs(rem - target) < 0.1 * target
