"""Averaging operators for the p-Laplacian and exact differential operators.

The gambling operators are

    A+[phi](x) = inf_{c in [m, M]} { alpha * sup_{B(x, eps^2 c^(1-alpha))} phi
                                     + (1 - alpha) * M_{eps c^(-alpha/2)}[phi](x) }

and ``A-`` with ``sup``/``inf`` exchanged. ``M_r`` takes its statistics over
the ball of radius ``gamma * r``, so the noise ball of ``A+`` has radius
``gamma * eps * c^(-alpha/2)``.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from pmvlab.constants import DomainError, Params, jp, truncation_bounds
from pmvlab.fields import (AnalyticField, BallSampler, ball_points, ball_stats_many, get_sampler,
                           sample_mean)


class SingularGradientError(DomainError):
    """The operator needs a nonvanishing gradient at the evaluation point."""


class OperatorVariant(enum.Enum):
    """Selector between ``A+`` and ``A-`` from the sign of ``f(x)``.

    ``OVERLINE`` uses ``A+`` when ``f >= 0``; ``UNDERLINE`` only when ``f > 0``.
    """

    OVERLINE = "overline"
    UNDERLINE = "underline"

    def uses_plus(self, f_at_x: float) -> bool:
        if self is OperatorVariant.OVERLINE:
            return f_at_x >= 0.0
        return f_at_x > 0.0

    @classmethod
    def parse(cls, value) -> "OperatorVariant":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class CSearchConfig:
    """Discretization of the outer optimization over ``c``.

    ``refine`` adds a golden-section search on the coarse bracket. The coarse
    grid alone keeps the operators exactly monotone, so solvers leave it off.
    """

    n_coarse: int = 64
    refine: bool = False
    refine_tol: float = 1e-6

    def __post_init__(self):
        if self.n_coarse < 8:
            raise DomainError("n_coarse must be at least 8")


def c_candidates(epsilon: float, alpha: float, csearch: CSearchConfig) -> np.ndarray:
    """Log-spaced candidates in ``[m(eps), M(eps)]`` including both endpoints exactly.

    For ``alpha = 0`` the objective does not depend on ``c`` (the small ball
    has weight 0 and the noise radius is ``gamma * eps``), so only ``m`` is
    returned; the first minimizer of the full grid would be ``m`` as well.
    """
    tb = truncation_bounds(epsilon, alpha)
    if alpha == 0.0:
        return np.array([tb.m])
    cs = np.geomspace(tb.m, tb.M, csearch.n_coarse)
    cs[0], cs[-1] = tb.m, tb.M
    return cs


def ball_radii(epsilon: float, cs, params: Params) -> tuple[np.ndarray, np.ndarray]:
    """Free-move radius ``eps^2 c^(1-alpha)`` and noise radius ``gamma eps c^(-alpha/2)``."""
    cs = np.asarray(cs, dtype=float)
    small = epsilon ** 2 * cs ** (1.0 - params.alpha)
    noise = params.gamma * epsilon * cs ** (-params.alpha / 2.0)
    return small, noise


def operator_reach(epsilon: float, params: Params) -> float:
    """Largest radius any gambling-operator ball can reach at ``epsilon``."""
    tb = truncation_bounds(epsilon, params.alpha)
    return max(epsilon ** 2 * tb.M ** (1.0 - params.alpha),
               params.gamma * epsilon * tb.m ** (-params.alpha / 2.0))


def combine(small_extreme, noise_sup, noise_inf, noise_mean, params: Params):
    """``alpha * small + (1-alpha) * (beta * midrange + (1-beta) * mean)``."""
    midrange = 0.5 * noise_sup + 0.5 * noise_inf
    mr = params.beta * midrange + (1.0 - params.beta) * noise_mean
    return params.alpha * small_extreme + (1.0 - params.alpha) * mr


def reduce_objectives(small_vals, noise_vals, params: Params, sense: int,
                      sampler: BallSampler):
    """Objective per ``c`` from sampled values, last axis = samples.

    ``sense = +1`` gives the ``A+`` objective (sup on the small ball),
    ``sense = -1`` the ``A-`` objective (inf on the small ball).
    """
    small = np.max(small_vals, axis=-1) if sense > 0 else np.min(small_vals, axis=-1)
    return combine(small, np.max(noise_vals, axis=-1), np.min(noise_vals, axis=-1),
                   sample_mean(noise_vals, sampler), params)


def _objectives_many(field, X, epsilon, cs, params: Params, sampler: BallSampler, sense: int):
    small_r, noise_r = ball_radii(epsilon, cs, params)
    smax, smin, smean = ball_stats_many(field, X, np.concatenate([small_r, noise_r]), sampler)
    nc = cs.size
    small = smax[:, :nc] if sense > 0 else smin[:, :nc]
    return combine(small, smax[:, nc:], smin[:, nc:], smean[:, nc:], params)


def _objectives(field, x, epsilon, cs, params: Params, sampler: BallSampler, sense: int):
    return _objectives_many(field, np.asarray(x, dtype=float).reshape(1, -1), epsilon, cs,
                            params, sampler, sense)[0]


def _check_eps(epsilon: float) -> None:
    if not (0.0 < epsilon < 1.0):
        raise DomainError(f"epsilon must lie in (0, 1) for the truncation schedule, got {epsilon}")


def _golden_refine(obj, lo: float, hi: float, tol: float, sense: int):
    """Golden-section search of ``sense``-optimum of ``obj`` on ``[lo, hi]`` in log c."""
    a, b = math.log(lo), math.log(hi)
    inv = GOLDEN_INV
    x1, x2 = b - inv * (b - a), a + inv * (b - a)
    f1, f2 = sense * obj(math.exp(x1)), sense * obj(math.exp(x2))
    while (b - a) > tol:
        if f1 < f2:  # sense-scaled values: smaller is better
            b, x2, f2 = x2, x1, f1
            x1 = b - inv * (b - a)
            f1 = sense * obj(math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv * (b - a)
            f2 = sense * obj(math.exp(x2))
    if f1 < f2:
        return math.exp(x1), sense * f1
    return math.exp(x2), sense * f2


GOLDEN_INV = (math.sqrt(5.0) - 1.0) / 2.0


def _a_operator(field, x, epsilon, params, csearch, quality, sense):
    _check_eps(epsilon)
    csearch = csearch or CSearchConfig()
    sampler = get_sampler(params.d, quality)
    cs = c_candidates(epsilon, params.alpha, csearch)
    obj = _objectives(field, x, epsilon, cs, params, sampler, sense)
    k = int(np.argmin(obj)) if sense > 0 else int(np.argmax(obj))
    best_c, best = float(cs[k]), float(obj[k])
    if csearch.refine and cs.size > 1:
        lo, hi = cs[max(k - 1, 0)], cs[min(k + 1, cs.size - 1)]

        def single(c):
            return float(_objectives(field, x, epsilon, np.array([c]), params, sampler, sense)[0])

        c_ref, val = _golden_refine(single, lo, hi, csearch.refine_tol, sense)
        if (sense > 0 and val < best) or (sense < 0 and val > best):
            best_c, best = c_ref, val
    return best, best_c


def a_plus(field, x, epsilon, params: Params, csearch: CSearchConfig | None = None,
           quality="default") -> tuple[float, float]:
    """``A+[field](x)`` and the minimizing ``c``."""
    return _a_operator(field, x, epsilon, params, csearch, quality, +1)


def a_minus(field, x, epsilon, params: Params, csearch: CSearchConfig | None = None,
            quality="default") -> tuple[float, float]:
    """``A-[field](x)`` and the maximizing ``c``."""
    return _a_operator(field, x, epsilon, params, csearch, quality, -1)


def _a_operator_many(field, X, epsilon, params, csearch, quality, sense):
    _check_eps(epsilon)
    csearch = csearch or CSearchConfig()
    sampler = get_sampler(params.d, quality)
    X = np.asarray(X, dtype=float).reshape(-1, params.d)
    cs = c_candidates(epsilon, params.alpha, csearch)
    obj = _objectives_many(field, X, epsilon, cs, params, sampler, sense)
    k = np.argmin(obj, axis=-1) if sense > 0 else np.argmax(obj, axis=-1)
    values = obj[np.arange(X.shape[0]), k]
    best_c = cs[k]
    if csearch.refine and cs.size > 1:
        for i in range(X.shape[0]):
            values[i], best_c[i] = _a_operator(field, X[i], epsilon, params, csearch, quality, sense)
    return values, best_c


def a_plus_many(field, X, epsilon, params: Params, csearch: CSearchConfig | None = None,
                quality="default") -> tuple[np.ndarray, np.ndarray]:
    """:func:`a_plus` at every row of ``X``; one field call per chunk of rows."""
    return _a_operator_many(field, X, epsilon, params, csearch, quality, +1)


def a_minus_many(field, X, epsilon, params: Params, csearch: CSearchConfig | None = None,
                 quality="default") -> tuple[np.ndarray, np.ndarray]:
    """:func:`a_minus` at every row of ``X``."""
    return _a_operator_many(field, X, epsilon, params, csearch, quality, -1)


def a_select(field, x, epsilon, f_at_x: float, variant, params: Params,
             csearch: CSearchConfig | None = None, quality="default") -> float:
    """``A+`` or ``A-`` according to the sign rule of ``variant``."""
    variant = OperatorVariant.parse(variant)
    if variant.uses_plus(f_at_x):
        return a_plus(field, x, epsilon, params, csearch, quality)[0]
    return a_minus(field, x, epsilon, params, csearch, quality)[0]


def m_r(field, x, r: float, params: Params, quality="default") -> float:
    """Tug-of-war-with-noise average over the ball of radius ``gamma * r``."""
    if not r > 0:
        raise DomainError(f"r must be positive, got {r}")
    sampler = get_sampler(params.d, quality)
    vals = field(ball_points(x, params.gamma * r, sampler))
    mid = 0.5 * np.max(vals) + 0.5 * np.min(vals)
    return float(params.beta * mid + (1.0 - params.beta) * sample_mean(vals, sampler))


@functools.lru_cache(maxsize=None)
def sphere_moment(d: int, p: float, n: int = 4096) -> float:
    """Average of ``|y_1|^p`` over the unit sphere, by quadrature."""
    if d == 1:
        return 1.0
    if d == 2:
        theta = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return float(np.mean(np.abs(np.cos(theta)) ** p))
    if d == 3:
        # product rule: Gauss-Legendre in t = y_1 on each half, trapezoid in azimuth
        t, wt = np.polynomial.legendre.leggauss(64)
        half = 0.5 * (t + 1.0)
        integrand = np.abs(half) ** p
        az = np.full(n, 1.0 / n)
        total = 2.0 * np.sum(0.5 * wt * integrand) * np.sum(az)
        return float(0.5 * total)
    raise DomainError(f"sphere_moment supports d <= 3, got {d}")


def sphere_moment_closed_form(d: int, p: float) -> float:
    """``Gamma(d/2) Gamma((p+1)/2) / (sqrt(pi) Gamma((p+d)/2))``."""
    return float(special.gamma(d / 2) * special.gamma((p + 1) / 2)
                 / (math.sqrt(math.pi) * special.gamma((p + d) / 2)))


def kappa(d: int, p: float) -> float:
    """Normalization ``2 (p + d) / (d * avg_sphere |y_1|^p)`` of ``L_r``."""
    return 2.0 * (p + d) / (d * sphere_moment(d, float(p)))


def l_r(field, x, r: float, params: Params, quality="default") -> float:
    """Nonlinear average ``kappa / r^p * mean_{B_r} |dphi|^(p-2) dphi``."""
    if not r > 0:
        raise DomainError(f"r must be positive, got {r}")
    sampler = get_sampler(params.d, quality)
    x = np.asarray(x, dtype=float).reshape(params.d)
    vals = field(ball_points(x, r, sampler))
    center = float(field(x.reshape(1, -1))[0])
    diff = vals - center
    integrand = np.abs(diff) ** (params.p - 2.0) * diff
    return float(kappa(params.d, params.p) / r ** params.p * sample_mean(integrand, sampler))


def _grad_hess(field: AnalyticField, x):
    if not isinstance(field, AnalyticField) or not field.has_derivatives:
        raise DomainError("exact operators need an analytic field with gradient and hessian")
    return field.gradient(x), field.hessian(x)


def p_laplacian_exact(field: AnalyticField, x, p: float) -> float:
    """``|grad|^(p-2) (lap + (p-2) <H nu, nu>)``; at critical points 0 for
    ``p > 2`` and the plain Laplacian for ``p = 2``."""
    g, h = _grad_hess(field, x)
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return float(np.trace(h)) if p == 2.0 else 0.0
    nu = g / norm
    return norm ** (p - 2.0) * (float(np.trace(h)) + (p - 2.0) * float(nu @ h @ nu))


def p_laplacian_normalized_exact(field: AnalyticField, x, p: float) -> float:
    g, h = _grad_hess(field, x)
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        raise SingularGradientError("normalized p-Laplacian is undefined where the gradient vanishes")
    nu = g / norm
    return float(np.trace(h)) + (p - 2.0) * float(nu @ h @ nu)


def a_by_laplacian_sign(field: AnalyticField, x, epsilon, params: Params,
                        csearch: CSearchConfig | None = None, quality="default") -> float:
    """``A+`` where the exact ``Δ_p`` is >= 0, else ``A-``."""
    lap = p_laplacian_exact(field, x, params.p)
    if lap >= 0.0:
        return a_plus(field, x, epsilon, params, csearch, quality)[0]
    return a_minus(field, x, epsilon, params, csearch, quality)[0]


__all__ = [
    "CSearchConfig",
    "OperatorVariant",
    "SingularGradientError",
    "a_by_laplacian_sign",
    "a_minus",
    "a_plus",
    "a_select",
    "ball_radii",
    "c_candidates",
    "combine",
    "jp",
    "kappa",
    "l_r",
    "m_r",
    "operator_reach",
    "p_laplacian_exact",
    "p_laplacian_normalized_exact",
    "reduce_objectives",
    "sphere_moment",
    "sphere_moment_closed_form",
]
