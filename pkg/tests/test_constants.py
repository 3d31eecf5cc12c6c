import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmvlab.constants import (
    DomainError,
    derive_params,
    gm_identity_sweep,
    gm_objective,
    gm_truncation_error_bound,
    jp,
    truncated_weighted_gm,
    truncation_bounds,
)


def test_derive_params_p3_d2():
    P = derive_params(3, 2)
    assert P.alpha == 0.5
    assert P.beta == 0.2
    assert P.gamma == math.sqrt(10.0)


def test_derive_params_p2_is_degenerate():
    P = derive_params(2, 2)
    assert P.alpha == 0.0 and P.beta == 0.0
    assert P.gamma == math.sqrt(8.0)


@pytest.mark.parametrize("p,d", [(1.5, 2), (1.0, 1), (float("nan"), 1), (3, 0), (3, 1.5)])
def test_derive_params_rejects(p, d):
    with pytest.raises(DomainError):
        derive_params(p, d)


def test_params_recompute_bit_exact():
    for p in (2.0, 2.5, 3.0, 4.0, 7.3):
        for d in (1, 2, 3):
            P = derive_params(p, d)
            P.check()
            assert derive_params(P.p, P.d) == P


def test_jp_examples():
    assert jp(0.0, 3) == 0.0
    assert jp(4.0, 3) == 2.0
    assert jp(-8.0, 3) == pytest.approx(-2.8284271247461903, rel=1e-15)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(2.0, 10.0))
def test_jp_is_exactly_odd(xi, p):
    assert jp(-xi, p) == -jp(xi, p)


@given(st.floats(1e-30, 1e3) | st.just(0.0), st.floats(2.0, 10.0))
def test_jp_inverts_power(xi, p):
    assert jp(xi ** (p - 1.0), p) == pytest.approx(xi, rel=1e-12, abs=1e-300)


def test_jp_arrays():
    out = jp(np.array([-4.0, 0.0, 9.0]), 3)
    np.testing.assert_allclose(out, [-2.0, 0.0, 3.0])


def test_truncation_examples():
    tb = truncation_bounds(0.1, 0.5)
    assert tb.m == pytest.approx(0.1 ** 0.8, rel=1e-15)
    assert tb.m == pytest.approx(0.158489, rel=1e-5)
    assert tb.M == pytest.approx(21.5443, rel=1e-5)
    tb = truncation_bounds(0.01, 0.0)
    assert tb.m == pytest.approx(0.01) and tb.M == pytest.approx(100.0)


def test_truncation_noise_scale_decreases():
    vals = [e * truncation_bounds(e, 0.5).m ** (-0.25) for e in (0.2, 0.1, 0.05)]
    assert vals[0] > vals[1] > vals[2]


@given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999), st.floats(0.0, 0.99))
def test_truncation_monotone_in_eps(e1, e2, alpha):
    lo, hi = sorted((e1, e2))
    a, b = truncation_bounds(lo, alpha), truncation_bounds(hi, alpha)
    assert a.m < 1.0 < a.M
    assert a.m <= b.m and a.M >= b.M


@pytest.mark.parametrize("eps,alpha", [(0.0, 0.5), (1.0, 0.5), (0.1, 1.0), (0.1, -0.1)])
def test_truncation_rejects(eps, alpha):
    with pytest.raises(DomainError):
        truncation_bounds(eps, alpha)


def test_gm_interior_minimizer():
    assert truncated_weighted_gm(4, 9, 0.5, 0.1, 100) == pytest.approx(6.0, rel=1e-14)


def test_gm_b_zero_branch():
    assert truncated_weighted_gm(1, 0, 0.5, 0.25, 4) == pytest.approx(0.25, rel=1e-14)


def test_gm_clamped_at_M_against_brute_force():
    val = truncated_weighted_gm(1, 9, 0.5, 0.1, 2)
    assert val == pytest.approx(0.5 * math.sqrt(2) + 0.5 * 9 / math.sqrt(2), rel=1e-14)
    assert val == pytest.approx(3.8891, abs=1e-4)
    cs = np.geomspace(0.1, 2, 10_000)
    assert val == pytest.approx(float(np.min(gm_objective(cs, 1, 9, 0.5))), rel=1e-6)
    # the minimizer is clamped at M, so the b-term of the bound is the relevant one
    b_term = 0.5 * 9 * 2 ** -0.5
    assert b_term == pytest.approx(3.1820, abs=1e-4)
    assert abs(val - 3.0) <= b_term
    assert abs(val - 3.0) <= gm_truncation_error_bound(1, 9, 0.5, 0.1, 2)


def test_gm_bound_examples():
    assert gm_truncation_error_bound(0, 0, 0.3, 0.1, 10) == 0.0
    assert gm_truncation_error_bound(4, 9, 0.5, 0.1, 100) == pytest.approx(1.0825, abs=1e-4)


@pytest.mark.parametrize("args", [(-1, 1, 0.5, 0.1, 10), (1, 1, 0.0, 0.1, 10),
                                  (1, 1, 1.0, 0.1, 10), (1, 1, 0.5, 10, 0.1)])
def test_gm_rejects(args):
    with pytest.raises(DomainError):
        truncated_weighted_gm(*args)


@given(st.floats(1e-2, 1e2), st.floats(1e-2, 1e2), st.floats(0.01, 0.99))
def test_gm_full_range_identity(a, b, alpha):
    val = truncated_weighted_gm(a, b, alpha, 1e-8, 1e8)
    assert val == pytest.approx(a ** alpha * b ** (1 - alpha), rel=1e-6)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 0.99))
def test_gm_monotone(a, b, extra, alpha):
    base = truncated_weighted_gm(a, b, alpha, 0.05, 20)
    assert truncated_weighted_gm(a + extra, b, alpha, 0.05, 20) >= base * (1 - 1e-15)
    assert truncated_weighted_gm(a, b + extra, alpha, 0.05, 20) >= base * (1 - 1e-15)


def test_identity_sweep_small():
    sweep = gm_identity_sweep(300, seed=1, n_grid=5000)
    assert sweep.n_violations == 0
    assert np.all(sweep.gap <= sweep.bound + 1e-12)
    rows = list(sweep.rows())
    assert len(rows) == 301 and rows[0][0] == "a"


def test_identity_sweep_fixed_alpha_and_rejection():
    sweep = gm_identity_sweep(50, seed=2, n_grid=2000, alpha=0.3)
    assert np.all(sweep.alpha == 0.3)
    with pytest.raises(DomainError):
        gm_identity_sweep(10, alpha=0.0)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_identity_sweep_deterministic(seed):
    a = gm_identity_sweep(20, seed=seed, n_grid=500)
    b = gm_identity_sweep(20, seed=seed, n_grid=500)
    assert np.array_equal(a.brute, b.brute) and np.array_equal(a.closed, b.closed)
