"""Expansion error measurements for the averaging operators.

Every measurement is a normalized remainder, for instance
``(A_eps[phi](x) - phi(x)) / eps^2 - J_p(Δ_p phi(x))``, evaluated along a
ladder of decreasing scales. A reference evaluation at a finer sampling
quality estimates the sampling noise of each point; points whose error is
below ``FLOOR_FACTOR`` times that noise are reported but not fitted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from pmvlab.constants import DomainError, Params, jp
from pmvlab.fields import AnalyticField, ball_points, get_sampler
from pmvlab.operators import (
    CSearchConfig,
    SingularGradientError,
    a_minus,
    a_plus,
    l_r,
    m_r,
    p_laplacian_exact,
    p_laplacian_normalized_exact,
)

FLOOR_FACTOR = 10.0
ROUNDING = 1e-14
DEFAULT_LADDER = tuple(2.0 ** -k for k in range(3, 10))
REFINED = CSearchConfig(n_coarse=64, refine=True, refine_tol=1e-9)


class DegenerateFitError(DomainError):
    """A rate fit was requested on data containing exact zeros."""


# ---------------------------------------------------------------------------
# Test battery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatteryCase:
    name: str
    field: AnalyticField
    x: np.ndarray
    note: str = ""


def quadratic_field(d: int) -> AnalyticField:
    """``y_1^2 + 2 y_d`` (``y_1^2 + 2 y_1`` when d = 1)."""
    def value(y):
        return y[..., 0] ** 2 + 2.0 * y[..., d - 1]

    def gradient(x):
        g = np.zeros(d)
        g[0] = 2.0 * x[0]
        g[d - 1] += 2.0
        return g

    def hessian(x):
        h = np.zeros((d, d))
        h[0, 0] = 2.0
        return h

    return AnalyticField(value, d, gradient, hessian, name="quadratic")


def exponential_field(d: int) -> AnalyticField:
    def gradient(x):
        g = np.zeros(d)
        g[0] = math.exp(x[0])
        return g

    def hessian(x):
        h = np.zeros((d, d))
        h[0, 0] = math.exp(x[0])
        return h

    return AnalyticField(lambda y: np.exp(y[..., 0]), d, gradient, hessian, name="exponential")


def radial_power_field(d: int, p: float, c: float = 1.0) -> AnalyticField:
    """``c |y|^(p/(p-1))``, whose p-Laplacian is the constant ``d (c p/(p-1))^(p-1)``."""
    q = p / (p - 1.0)

    def value(y):
        return c * np.linalg.norm(y, axis=-1) ** q

    def gradient(x):
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        return c * q * r ** (q - 2.0) * x

    def hessian(x):
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        return c * q * (r ** (q - 2.0) * np.eye(d) + (q - 2.0) * r ** (q - 4.0) * np.outer(x, x))

    return AnalyticField(value, d, gradient, hessian, name="radial")


def affine_field(d: int, a=None, b: float = 0.0) -> AnalyticField:
    a = np.ones(d) if a is None else np.asarray(a, dtype=float).reshape(d)
    return AnalyticField(lambda y: y @ a + b, d, lambda x: a.copy(), lambda x: np.zeros((d, d)),
                         name="affine")


def constant_field(d: int, value: float = 1.0) -> AnalyticField:
    return AnalyticField(lambda y: np.full(y.shape[:-1], value), d, lambda x: np.zeros(d),
                         lambda x: np.zeros((d, d)), name="constant")


def critical_quadratic_field(d: int) -> AnalyticField:
    """``|y|^2``: critical point at 0 where only ``L_r`` has an expansion."""
    return AnalyticField(lambda y: np.sum(y * y, axis=-1), d, lambda x: 2.0 * np.asarray(x, float),
                         lambda x: 2.0 * np.eye(d), name="critical")


def battery(d: int, p: float) -> list[BatteryCase]:
    """The fixed test battery: each entry covers one hypothesis branch."""
    return [
        BatteryCase("quadratic", quadratic_field(d), np.full(d, 0.3), "positive p-Laplacian"),
        BatteryCase("exponential", exponential_field(d), np.zeros(d), "positive p-Laplacian"),
        BatteryCase("neg_exponential", -exponential_field(d), np.zeros(d), "negative p-Laplacian"),
        BatteryCase("radial", radial_power_field(d, p), np.full(d, 0.5), "constant p-Laplacian"),
        BatteryCase("affine", affine_field(d), np.zeros(d), "zero p-Laplacian, nonzero gradient"),
        BatteryCase("critical", critical_quadratic_field(d), np.zeros(d),
                    "vanishing gradient, nonzero hessian"),
        BatteryCase("constant", constant_field(d), np.zeros(d), "vanishing gradient"),
    ]


def find_case(d: int, p: float, name: str) -> BatteryCase:
    for case in battery(d, p):
        if case.name == name:
            return case
    raise DomainError(f"unknown battery field {name!r}")


# ---------------------------------------------------------------------------
# Single measurements
# ---------------------------------------------------------------------------


def _value_at(field, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(field(x.reshape(1, -1))[0])


def _require_gradient(field: AnalyticField, x) -> None:
    if float(np.linalg.norm(field.gradient(x))) == 0.0:
        raise SingularGradientError(
            "the expansion of the gambling operators needs a nonvanishing gradient at x")


def a_expansion_error(field: AnalyticField, x, epsilon: float, params: Params,
                      csearch: CSearchConfig = REFINED, quality="default",
                      branch: Optional[str] = None) -> float:
    """``(A_eps[phi](x) - phi(x)) / eps^2 - J_p(Δ_p phi(x))``.

    ``A_eps`` is ``A+`` where the exact p-Laplacian is >= 0 and ``A-``
    otherwise, unless ``branch`` ("plus" or "minus") forces one.
    """
    _require_gradient(field, x)
    lap = p_laplacian_exact(field, x, params.p)
    if branch is None:
        branch = "plus" if lap >= 0.0 else "minus"
    op = {"plus": a_plus, "minus": a_minus}[branch]
    val, _ = op(field, x, epsilon, params, csearch, quality)
    return (val - _value_at(field, x)) / epsilon ** 2 - float(jp(lap, params.p))


def mr_expansion_error(field: AnalyticField, x, r: float, params: Params, quality="default") -> float:
    """``(M_r[phi](x) - phi(x)) / r^2 - Δ_p^N phi(x)``."""
    norm_lap = p_laplacian_normalized_exact(field, x, params.p)
    return (m_r(field, x, r, params, quality) - _value_at(field, x)) / r ** 2 - norm_lap


def lr_expansion_error(field: AnalyticField, x, r: float, params: Params, quality="default") -> float:
    """``L_r[phi](x) - Δ_p phi(x)``; defined also where the gradient vanishes."""
    return l_r(field, x, r, params, quality) - p_laplacian_exact(field, x, params.p)


def sup_gradient_error(field: AnalyticField, x, r: float, quality="default") -> float:
    """``(sup_{B_r(x)} phi - phi(x)) / r - |grad phi(x)|``."""
    if not r > 0:
        raise DomainError(f"r must be positive, got {r}")
    sampler = get_sampler(field.d, quality)
    sup = float(np.max(field(ball_points(x, r, sampler))))
    return (sup - _value_at(field, x)) / r - float(np.linalg.norm(field.gradient(x)))


def fit_rate(epsilons: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log|error|`` against ``log eps``."""
    eps = np.asarray(epsilons, dtype=float)
    err = np.abs(np.asarray(errors, dtype=float))
    if eps.size < 3 or eps.size != err.size:
        raise DomainError("fit_rate needs at least 3 paired points")
    if np.any(err == 0.0):
        raise DegenerateFitError("an error is exactly zero; report it as below floor instead")
    slope, intercept = np.polyfit(np.log(eps), np.log(err), 1)
    return float(slope), float(intercept)


# ---------------------------------------------------------------------------
# Ladders
# ---------------------------------------------------------------------------


@dataclass
class ExpansionReport:
    operator: str
    field_name: str
    epsilons: np.ndarray
    errors: np.ndarray
    target: float
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fitted_rate: float = math.nan
    fitted_constant: float = math.nan

    def __post_init__(self):
        self.epsilons = np.asarray(self.epsilons, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        if self.noise.size == 0:
            self.noise = np.zeros_like(self.errors)
        if self.epsilons.size < 3 or self.epsilons.size != self.errors.size:
            raise DomainError("a report needs at least 3 paired points")
        if np.any(np.diff(self.epsilons) >= 0):
            raise DomainError("epsilons must be strictly decreasing")

    @property
    def above_floor(self) -> np.ndarray:
        return np.abs(self.errors) > FLOOR_FACTOR * self.noise

    def fit(self) -> "ExpansionReport":
        mask = self.above_floor & (self.errors != 0.0)
        if mask.sum() >= 3:
            self.fitted_rate, self.fitted_constant = fit_rate(self.epsilons[mask], self.errors[mask])
        return self

    def decreasing(self) -> bool:
        """Magnitudes of the above-floor errors are nonincreasing along the ladder."""
        mags = np.abs(self.errors[self.above_floor])
        return bool(np.all(np.diff(mags) <= 0.0))

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "error", "target", "rate_fit"])
            for e, err in zip(self.epsilons, self.errors):
                w.writerow([repr(float(e)), repr(float(err)), repr(float(self.target)),
                            repr(float(self.fitted_rate))])
        return path


def run_ladder(operator: str, case: BatteryCase, params: Params,
               epsilons: Sequence[float] = DEFAULT_LADDER, quality="default",
               reference_quality="high") -> ExpansionReport:
    """Measure one operator on one battery case along a scale ladder.

    ``operator`` is ``"A"``, ``"M"`` or ``"L"``. The difference to a
    ``reference_quality`` evaluation serves as the noise estimate.
    """
    f, x = case.field, case.x
    measure: Callable[[float, object], float]
    if operator == "A":
        target = float(jp(p_laplacian_exact(f, x, params.p), params.p))
        measure = lambda e, q: a_expansion_error(f, x, e, params, REFINED, q)  # noqa: E731
    elif operator == "M":
        target = p_laplacian_normalized_exact(f, x, params.p)
        measure = lambda e, q: mr_expansion_error(f, x, e, params, q)  # noqa: E731
    elif operator == "L":
        target = p_laplacian_exact(f, x, params.p)
        measure = lambda e, q: lr_expansion_error(f, x, e, params, q)  # noqa: E731
    else:
        raise DomainError(f"unknown operator {operator!r}")
    errs = np.array([measure(e, quality) for e in epsilons])
    # rounding in phi(x + y) - phi(x) is amplified by the normalization
    scale = ROUNDING * (1.0 + abs(_value_at(f, x)))
    power = {"A": 2.0, "M": 2.0, "L": params.p}[operator]
    noise = np.array([scale / e ** power for e in epsilons])
    if reference_quality is not None:
        ref = np.array([measure(e, reference_quality) for e in epsilons])
        noise = np.maximum(noise, np.abs(errs - ref))
    rep = ExpansionReport(operator, case.name, np.asarray(epsilons), errs, target, noise)
    return rep.fit()
