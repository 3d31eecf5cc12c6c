"""Parameters, the signed power J_p, the truncation schedule for the gambling
constant ``c``, and the geometric-mean-as-infimum identities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the admissible range."""


@dataclass(frozen=True)
class Params:
    """Exponent ``p``, dimension ``d`` and the constants derived from them.

    ``alpha`` is the heads probability of the gambling coin, ``beta`` the
    tug-of-war probability and ``gamma`` the dilation of the noise ball.
    """

    p: float
    d: int
    alpha: float
    beta: float
    gamma: float

    @staticmethod
    def _derived(p: float, d: int) -> tuple[float, float, float]:
        alpha = (p - 2.0) / (p - 1.0)
        beta = (p - 2.0) / (p + d)
        gamma = math.sqrt(2.0 * (p + d))
        return alpha, beta, gamma

    def check(self) -> None:
        """Assert the stored constants match a recomputation from ``(p, d)``."""
        if (self.alpha, self.beta, self.gamma) != self._derived(self.p, self.d):
            raise DomainError("stored constants do not match (p, d)")


def derive_params(p: float, d: int) -> Params:
    """Build :class:`Params` for ``p >= 2`` and ``d >= 1``.

    ``p = 2`` is admitted; there ``alpha = beta = 0`` and every operator
    degenerates to a plain ball average.
    """
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise DomainError(f"dimension must be a positive integer, got {d!r}")
    p = float(p)
    if not math.isfinite(p) or p < 2.0:
        raise DomainError(
            f"p must be >= 2 (for p < 2 the exponent (p-2)/(p-1) is negative), got {p}"
        )
    alpha, beta, gamma = Params._derived(p, int(d))
    return Params(p=p, d=int(d), alpha=alpha, beta=beta, gamma=gamma)


def jp(xi, p: float):
    """Signed ``1/(p-1)`` power ``sign(xi) |xi|^(1/(p-1))``.

    Works on scalars and arrays. The power is taken on ``|xi|`` so that the
    result is exactly odd in floating point.
    """
    if p <= 1.0:
        raise DomainError(f"J_p needs p > 1, got {p}")
    xi_arr = np.asarray(xi, dtype=float)
    out = np.sign(xi_arr) * np.power(np.abs(xi_arr), 1.0 / (p - 1.0))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class TruncationBounds:
    """The compact interval ``[m, M]`` for the gambling constant at ``epsilon``."""

    m: float
    M: float
    epsilon: float


def truncation_bounds(epsilon: float, alpha: float) -> TruncationBounds:
    """``m = eps^(2/(2+alpha))`` and ``M = eps^(-2/(2-alpha))``."""
    if not (0.0 < epsilon < 1.0):
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not (0.0 <= alpha < 1.0):
        raise DomainError(f"alpha must lie in [0, 1), got {alpha}")
    m = epsilon ** (2.0 / (2.0 + alpha))
    M = epsilon ** (-2.0 / (2.0 - alpha))
    return TruncationBounds(m=m, M=M, epsilon=epsilon)


def _check_gm_args(a: float, b: float, alpha: float, m: float, M: float) -> None:
    if a < 0 or b < 0:
        raise DomainError(f"a and b must be nonnegative, got a={a}, b={b}")
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    if not (0.0 < m < M):
        raise DomainError(f"need 0 < m < M, got m={m}, M={M}")


def gm_objective(c, a: float, b: float, alpha: float):
    """``alpha c^(1-alpha) a + (1-alpha) c^(-alpha) b``."""
    c = np.asarray(c, dtype=float)
    return alpha * c ** (1.0 - alpha) * a + (1.0 - alpha) * c ** (-alpha) * b


def truncated_weighted_gm(a: float, b: float, alpha: float, m: float, M: float) -> float:
    """Infimum of :func:`gm_objective` over ``c in [m, M]`` in closed form.

    The objective has its unique stationary point at ``c* = b/a``; the
    truncated infimum is the objective at ``c*`` clamped to ``[m, M]``.
    ``a = 0`` sends ``c*`` to ``M`` and ``b = 0`` sends it to ``m``.
    """
    _check_gm_args(a, b, alpha, m, M)
    if a == 0.0 and b == 0.0:
        return 0.0
    if a == 0.0:
        c = M
    elif b == 0.0:
        c = m
    else:
        c = min(max(b / a, m), M)
    return float(gm_objective(c, a, b, alpha))


def gm_truncation_error_bound(a: float, b: float, alpha: float, m: float, M: float) -> float:
    """Upper bound ``alpha a m^(1-alpha) + (1-alpha) b M^(-alpha)`` on the
    gap between ``a^alpha b^(1-alpha)`` and the truncated infimum."""
    _check_gm_args(a, b, alpha, m, M)
    return alpha * a * m ** (1.0 - alpha) + (1.0 - alpha) * b * M ** (-alpha)


@dataclass
class IdentitySweep:
    """Per-case columns of :func:`gm_identity_sweep`."""

    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    epsilon: np.ndarray
    m: np.ndarray
    M: np.ndarray
    closed: np.ndarray
    brute: np.ndarray
    gap: np.ndarray
    bound: np.ndarray
    rel_tol: float

    @property
    def rel_err(self) -> np.ndarray:
        return np.abs(self.brute - self.closed) / np.maximum(np.abs(self.closed), 1e-300)

    @property
    def match(self) -> np.ndarray:
        # the grid contains both endpoints, so it can never undercut the true infimum
        below = self.brute < self.closed * (1.0 - 1e-12)
        return (self.rel_err <= self.rel_tol) & ~below

    @property
    def bound_ok(self) -> np.ndarray:
        return self.gap <= self.bound * (1.0 + 1e-12) + 1e-15

    @property
    def n_violations(self) -> int:
        return int(np.sum(~self.match) + np.sum(~self.bound_ok))

    def rows(self):
        cols = ("a", "b", "alpha", "epsilon", "m", "M", "closed", "brute", "gap", "bound")
        yield cols + ("rel_err", "match", "bound_ok")
        data = [getattr(self, c) for c in cols] + [self.rel_err, self.match, self.bound_ok]
        for row in zip(*data):
            yield row


def gm_identity_sweep(n_cases: int = 10_000, seed: int = 0, n_grid: int = 10_000,
                      rel_tol: float = 1e-6, eps_range=(1e-3, 0.99),
                      alpha: float | None = None) -> IdentitySweep:
    """Randomized check of the truncated geometric-mean identity and its error bound.

    Cases draw ``(a, b)`` uniform in ``[0, 10]^2``, ``alpha`` uniform in
    ``(0, 1)`` (or fixed to ``alpha``) and ``eps`` log-uniform in ``eps_range``; ``m, M`` follow the
    truncation schedule. The closed form is compared with the minimum of the
    objective over ``n_grid`` log-spaced ``c`` (endpoints included), and the
    gap to ``a^alpha b^(1-alpha)`` with :func:`gm_truncation_error_bound`.
    """
    if n_cases < 1 or n_grid < 2:
        raise DomainError("need n_cases >= 1 and n_grid >= 2")
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    if not 0.0 < eps_range[0] <= eps_range[1] < 1.0:
        raise DomainError(f"eps_range must lie in (0, 1), got {eps_range}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 10.0, n_cases)
    b = rng.uniform(0.0, 10.0, n_cases)
    drawn = rng.uniform(0.0, 1.0, n_cases)
    if alpha is None:
        alpha = np.where(drawn == 0.0, 0.5, drawn)
    else:
        alpha = np.full(n_cases, float(alpha))
    eps = np.exp(rng.uniform(math.log(eps_range[0]), math.log(eps_range[1]), n_cases))
    m = eps ** (2.0 / (2.0 + alpha))
    M = eps ** (-2.0 / (2.0 - alpha))
    closed = np.array([truncated_weighted_gm(*args) for args in zip(a, b, alpha, m, M)])
    bound = np.array([gm_truncation_error_bound(*args) for args in zip(a, b, alpha, m, M)])
    gap = np.abs(a ** alpha * b ** (1.0 - alpha) - closed)
    brute = np.empty(n_cases)
    u = np.linspace(0.0, 1.0, n_grid)
    chunk = max(1, (1 << 22) // n_grid)
    for lo in range(0, n_cases, chunk):
        sl = slice(lo, lo + chunk)
        logc = np.log(m[sl])[:, None] + u[None, :] * np.log(M[sl] / m[sl])[:, None]
        c = np.exp(logc)
        c[:, 0], c[:, -1] = m[sl], M[sl]
        al = alpha[sl][:, None]
        vals = al * c ** (1.0 - al) * a[sl][:, None] + (1.0 - al) * c ** (-al) * b[sl][:, None]
        brute[sl] = vals.min(axis=1)
    return IdentitySweep(a, b, alpha, eps, m, M, closed, brute, gap, bound, rel_tol)
