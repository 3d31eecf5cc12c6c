"""Scalar fields, domains and the ball-statistics primitive.

Every averaging operator in :mod:`pmvlab.operators` is assembled from three
numbers computed over a ball: the supremum, the infimum and the mean. Balls are
discretized by a fixed, deterministic sample set in the unit ball that

* contains the center,
* is invariant under a finite rotation group containing ``-I`` (so odd
  functions average exactly to their center value), and
* has exactly the second moment of the uniform measure on the ball (so the
  mean of any quadratic is reproduced up to rounding).

Grid-backed fields are evaluated at sample points by multilinear
interpolation; this keeps operators well defined for radii far below the grid
spacing.
"""

from __future__ import annotations

import csv
import functools
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from pmvlab import _kernels
from pmvlab.constants import DomainError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# Number of base points per quality level; the full set is the orbit of the
# base points under the symmetry group of the dimension plus the center.
_BASE_COUNTS = {
    1: {"low": 16, "default": 64, "high": 256},
    2: {"low": 16, "default": 128, "high": 512},
    3: {"low": 4, "default": 32, "high": 128},
}


class OutOfHullError(DomainError):
    """A point fell outside the region where a field is defined."""


# ---------------------------------------------------------------------------
# Ball sampling
# ---------------------------------------------------------------------------


def _symmetry_group(d: int) -> list[np.ndarray]:
    if d == 1:
        return [np.array([[1.0]]), np.array([[-1.0]])]
    if d == 2:
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        return [np.linalg.matrix_power(rot, k) for k in range(4)]
    if d == 3:
        mats = []
        perms = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
        for perm in perms:
            for signs in itertools.product((1.0, -1.0), repeat=3):
                m = np.zeros((3, 3))
                for row, col in enumerate(perm):
                    m[row, col] = signs[row]
                mats.append(m)
        return mats
    raise DomainError(f"ball sampling supports d in {{1, 2, 3}}, got {d}")


def _base_points(d: int, k: int) -> np.ndarray:
    j = np.arange(1, k + 1, dtype=float)
    if d == 1:
        return ((j - 0.5) / k)[:, None]
    if d == 2:
        r = np.sqrt((j - 0.5) / k)
        theta = 0.5 * np.pi * np.mod(j * GOLDEN, 1.0)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    # d == 3: van der Corput radii, Fibonacci-sphere directions
    vdc = np.array([_van_der_corput(int(i)) for i in j])
    r = np.cbrt((np.floor(vdc * k) + 0.5) / k)
    z = 1.0 - 2.0 * (j - 0.5) / k
    phi = 2.0 * np.pi * np.mod(j * GOLDEN, 1.0)
    s = np.sqrt(1.0 - z * z)
    return r[:, None] * np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def _van_der_corput(n: int, base: int = 2) -> float:
    out, denom = 0.0, 1.0
    while n:
        n, rem = divmod(n, base)
        denom *= base
        out += rem / denom
    return out


def _shell_directions(d: int, k: int) -> np.ndarray:
    """Unit vectors whose group orbit covers the sphere (used for sup/inf only)."""
    if d == 1:
        return np.array([[1.0]])
    j = np.arange(1, k + 1, dtype=float)
    if d == 2:
        theta = 0.5 * np.pi * (j - 0.5) / k
        return np.column_stack([np.cos(theta), np.sin(theta)])
    z = 1.0 - 2.0 * (j - 0.5) / k
    phi = 2.0 * np.pi * np.mod(j * GOLDEN, 1.0)
    s = np.sqrt(1.0 - z * z)
    dirs = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    return np.concatenate([dirs, np.eye(3)], axis=0)


@dataclass(frozen=True)
class BallSampler:
    """Deterministic, center-symmetric sample set in the unit ball.

    ``points[0]`` is the center. The first ``mean_count`` rows form an
    equal-weight quadrature whose second moment matches the uniform law; the
    remaining rows lie on the unit sphere and only enter suprema and infima.
    Construct through :func:`get_sampler`.
    """

    d: int
    points: np.ndarray = field(repr=False)
    label: str = ""
    mean_count: Optional[int] = None

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def n_mean(self) -> int:
        return self.size if self.mean_count is None else self.mean_count

    @functools.cached_property
    def extent(self) -> float:
        """Largest sample norm (1 up to rounding)."""
        return float(np.max(np.linalg.norm(self.points, axis=1)))


def sample_mean(values: np.ndarray, sampler: BallSampler) -> np.ndarray:
    """Quadrature mean over the last axis of values sampled with ``sampler``.

    The sum runs strictly left to right so compiled sweeps can reproduce it
    bit for bit.
    """
    n = sampler.n_mean
    return np.cumsum(values[..., :n], axis=-1)[..., -1] / n


@functools.lru_cache(maxsize=None)
def _build_sampler(d: int, base_count: int) -> BallSampler:
    base = _base_points(d, base_count)
    orbit = np.concatenate([base @ g.T for g in _symmetry_group(d)], axis=0)
    pts = np.concatenate([np.zeros((1, d)), orbit], axis=0)
    # match the second moment of the uniform law on the unit ball, d/(d+2)
    target = d / (d + 2.0)
    scale = math.sqrt(target * pts.shape[0] / float(np.sum(pts * pts)))
    pts = pts * scale
    if np.max(np.linalg.norm(pts, axis=1)) > 1.0:
        raise DomainError("moment-matched sample set leaves the unit ball")
    n_mean = pts.shape[0]
    shell_k = {1: 1, 2: max(base_count // 2, 1), 3: base_count}[d]
    dirs = _shell_directions(d, shell_k)
    shell = np.concatenate([dirs @ g.T for g in _symmetry_group(d)], axis=0)
    shell = np.unique(np.round(shell, 15), axis=0)
    shell /= np.linalg.norm(shell, axis=1, keepdims=True)
    pts = np.concatenate([pts, shell], axis=0)
    pts.setflags(write=False)
    return BallSampler(d=d, points=pts, label=f"d{d}-n{n_mean}+{shell.shape[0]}", mean_count=n_mean)


def get_sampler(d: int, quality="default") -> BallSampler:
    """Sampler for dimension ``d``.

    ``quality`` is ``"low"``, ``"default"``, ``"high"``, an integer number of
    base points, or an existing :class:`BallSampler` (returned unchanged).
    """
    if isinstance(quality, BallSampler):
        if quality.d != d:
            raise DomainError(f"sampler is for d={quality.d}, needed d={d}")
        return quality
    if d not in _BASE_COUNTS:
        raise DomainError(f"ball sampling supports d in {{1, 2, 3}}, got {d}")
    if isinstance(quality, str):
        try:
            k = _BASE_COUNTS[d][quality]
        except KeyError:
            raise DomainError(f"unknown quality {quality!r}") from None
    else:
        k = int(quality)
        if k < 1:
            raise DomainError("number of base points must be positive")
    return _build_sampler(d, k)


def sampler_from_points(points: np.ndarray, label: str = "custom",
                        mean_count: Optional[int] = None) -> BallSampler:
    """Wrap an explicit unit-ball point set (first row must be the center).

    By default every point enters the mean; pass ``mean_count`` to restrict
    the mean to the leading rows.
    """
    pts = np.array(points, dtype=float, ndmin=2)
    if not np.all(pts[0] == 0.0):
        raise DomainError("first sample point must be the center")
    if np.max(np.linalg.norm(pts, axis=1)) > 1.0 + 1e-12:
        raise DomainError("sample points must lie in the closed unit ball")
    if mean_count is not None and not 1 <= mean_count <= pts.shape[0]:
        raise DomainError("mean_count must be between 1 and the number of points")
    pts.setflags(write=False)
    return BallSampler(d=pts.shape[1], points=pts, label=label, mean_count=mean_count)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


def _as_points(points, d: int) -> tuple[np.ndarray, tuple[int, ...]]:
    pts = np.asarray(points, dtype=float)
    if d == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
        pts = pts[..., None]
    if pts.shape[-1] != d:
        raise DomainError(f"expected points with last axis {d}, got shape {pts.shape}")
    lead = pts.shape[:-1]
    return pts.reshape(-1, d), lead


class AnalyticField:
    """A field given by callbacks.

    ``value`` maps an ``(N, d)`` array to ``(N,)``; ``gradient`` and
    ``hessian`` take a single point of shape ``(d,)``.
    """

    def __init__(
        self,
        value: Callable[[np.ndarray], np.ndarray],
        d: int,
        gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        name: str = "analytic",
    ):
        self._value = value
        self.d = d
        self._gradient = gradient
        self._hessian = hessian
        self.name = name

    def __call__(self, points) -> np.ndarray:
        pts, lead = _as_points(points, self.d)
        return np.asarray(self._value(pts), dtype=float).reshape(lead)

    @property
    def has_derivatives(self) -> bool:
        return self._gradient is not None and self._hessian is not None

    def gradient(self, x) -> np.ndarray:
        if self._gradient is None:
            raise DomainError(f"field {self.name!r} has no gradient callback")
        return np.asarray(self._gradient(np.asarray(x, dtype=float).reshape(self.d)), dtype=float)

    def hessian(self, x) -> np.ndarray:
        if self._hessian is None:
            raise DomainError(f"field {self.name!r} has no hessian callback")
        h = np.asarray(self._hessian(np.asarray(x, dtype=float).reshape(self.d)), dtype=float)
        return h.reshape(self.d, self.d)

    def __neg__(self) -> "AnalyticField":
        grad = None if self._gradient is None else (lambda x: -self._gradient(x))
        hess = None if self._hessian is None else (lambda x: -self._hessian(x))
        return AnalyticField(lambda y: -self._value(y), self.d, grad, hess, name=f"-{self.name}")

    def shifted(self, s: float) -> "AnalyticField":
        return AnalyticField(
            lambda y: self._value(y) + s, self.d, self._gradient, self._hessian,
            name=f"{self.name}+{s}",
        )


@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian grid; ``node(i) = lower + h * i``."""

    lower: tuple[float, ...]
    h: float
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.h <= 0:
            raise DomainError("grid spacing must be positive")
        if len(self.lower) != len(self.counts):
            raise DomainError("lower corner and counts disagree in dimension")
        if any(n < 2 for n in self.counts):
            raise DomainError("every axis needs at least two nodes")

    @property
    def d(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.lower) + self.h * (np.asarray(self.counts) - 1)

    def multi_indices(self) -> np.ndarray:
        """All node indices in row-major order, shape ``(size, d)``."""
        axes = [np.arange(n) for n in self.counts]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nodes(self) -> np.ndarray:
        return np.asarray(self.lower) + self.h * self.multi_indices()

    def node(self, index) -> np.ndarray:
        return np.asarray(self.lower) + self.h * np.asarray(index, dtype=float)

    @classmethod
    def covering(cls, lower, upper, h: float) -> "Grid":
        """Smallest grid with spacing ``h`` and lower corner ``lower`` that reaches ``upper``."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        counts = np.ceil((upper - lower) / h - 1e-9).astype(int) + 1
        return cls(tuple(float(v) for v in lower), float(h), tuple(int(max(c, 2)) for c in counts))


_CORNERS = {d: np.array(list(itertools.product((0, 1), repeat=d)), dtype=int) for d in (1, 2, 3)}


def _compiled_eval(grid: Grid, values, pts, ins, gvals, add_const) -> np.ndarray:
    """Compiled equivalent of ``apply_weights(values, *interpolation_weights(...))``."""
    counts = np.asarray(grid.counts, dtype=np.int64)
    strides = np.array([int(np.prod(counts[k + 1:])) for k in range(grid.d)], dtype=np.int64)
    out = np.empty(pts.shape[0])
    bad = _kernels.interp_kernel(np.ascontiguousarray(values, dtype=float),
                                 np.asarray(grid.lower, dtype=float), float(grid.h), counts,
                                 strides, np.ascontiguousarray(pts), ins, gvals, add_const, out)
    if bad >= 0:
        raise OutOfHullError(f"point {pts[bad]} outside the grid hull "
                             f"[{np.asarray(grid.lower)}, {grid.upper}]")
    return out


def interpolation_weights(grid: Grid, points) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation stencil of ``points`` (shape ``(N, d)``).

    Returns flat node indices and nonnegative weights, both ``(N, 2^d)``.
    """
    pts = np.asarray(points, dtype=float)
    d = grid.d
    lower = np.asarray(grid.lower)
    counts = np.asarray(grid.counts)
    s = (pts - lower) / grid.h
    snapped = np.rint(s)
    s = np.where(np.abs(s - snapped) < 1e-10, snapped, s)
    if np.any(s < 0.0) or np.any(s > counts - 1):
        bad = pts[np.any((s < 0.0) | (s > counts - 1), axis=1)][0]
        raise OutOfHullError(f"point {bad} outside the grid hull [{lower}, {grid.upper}]")
    base = np.minimum(np.floor(s).astype(int), counts - 2)
    t = s - base
    corners = _CORNERS[d]
    strides = np.array([int(np.prod(counts[k + 1:])) for k in range(d)], dtype=int)
    idx = (base @ strides)[:, None] + (corners @ strides)[None, :]
    w = np.ones((pts.shape[0], corners.shape[0]))
    for k in range(d):
        tk = t[:, k][:, None]
        w = w * np.where(corners[None, :, k] == 1, tk, 1.0 - tk)
    return idx, w


def apply_weights(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted stencil sum with a fixed summation order."""
    acc = w[..., 0] * values[idx[..., 0]]
    for k in range(1, idx.shape[-1]):
        acc = acc + w[..., k] * values[idx[..., k]]
    return acc


@dataclass(frozen=True)
class GridField:
    """Nodal values on a :class:`Grid`, evaluated by multilinear interpolation."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.shape[0] != self.grid.size:
            raise DomainError(f"expected {self.grid.size} values, got {vals.shape[0]}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("grid values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return self.grid.d

    def __call__(self, points) -> np.ndarray:
        pts, lead = _as_points(points, self.d)
        if _kernels.interp_kernel is not None:
            n = pts.shape[0]
            return _compiled_eval(self.grid, self.values, pts, np.ones(n, dtype=bool),
                                  np.zeros(n), False).reshape(lead)
        idx, w = interpolation_weights(self.grid, pts)
        return apply_weights(self.values, idx, w).reshape(lead)

    def with_values(self, values) -> "GridField":
        return GridField(self.grid, np.asarray(values, dtype=float))


def interpolate(gridfield: GridField, point) -> float:
    """Multilinear interpolation of ``gridfield`` at a single point."""
    return float(gridfield(np.asarray(point, dtype=float).reshape(1, gridfield.d))[0])


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Open set Omega with a bounding box and an exterior band of width ``r_out``.

    ``inside`` maps ``(N, d)`` points to booleans. ``exterior_ball`` maps a
    boundary point to ``(z0, R)`` with the closed ball ``B_R(z0)`` touching
    the closure of Omega only at that point. ``clearance``, when given, maps
    points to a lower bound of their distance to the complement of Omega
    (nonpositive outside); operators use it to skip the exterior datum on
    balls that stay inside.
    """

    inside: Callable[[np.ndarray], np.ndarray]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    r_out: float
    kind: str = "custom"
    geometry: dict = field(default_factory=dict)
    exterior_ball: Optional[Callable[[np.ndarray], tuple[np.ndarray, float]]] = None
    clearance: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def d(self) -> int:
        return len(self.lower)

    def contains(self, points) -> np.ndarray:
        pts, lead = _as_points(points, self.d)
        return np.asarray(self.inside(pts), dtype=bool).reshape(lead)

    def with_r_out(self, r_out: float) -> "Domain":
        return Domain(self.inside, self.lower, self.upper, r_out, self.kind, self.geometry,
                      self.exterior_ball, self.clearance)

    def band_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.lower) - self.r_out
        hi = np.asarray(self.upper) + self.r_out
        return lo, hi

    @classmethod
    def box(cls, lower, upper, r_out: float = 1.0, ball_radius: float = 1.0) -> "Domain":
        lo = np.asarray(lower, dtype=float).reshape(-1)
        hi = np.asarray(upper, dtype=float).reshape(-1)
        if np.any(hi <= lo):
            raise DomainError("box needs upper > lower in every axis")

        def inside(pts):
            return np.all((pts > lo) & (pts < hi), axis=1)

        def ext_ball(x0):
            x0 = np.asarray(x0, dtype=float).reshape(-1)
            normal = np.where(np.isclose(x0, hi), 1.0, 0.0) - np.where(np.isclose(x0, lo), 1.0, 0.0)
            if not np.any(normal):
                raise DomainError(f"{x0} is not on the boundary of the box")
            normal = normal / np.linalg.norm(normal)
            return x0 + ball_radius * normal, ball_radius

        def clearance(pts):
            return np.min(np.minimum(pts - lo, hi - pts), axis=1)

        return cls(inside, tuple(lo), tuple(hi), r_out, "box",
                   {"lower": lo.tolist(), "upper": hi.tolist()}, ext_ball, clearance)

    @classmethod
    def ball(cls, center, radius: float, r_out: float = 1.0, ball_radius: float = 1.0) -> "Domain":
        c = np.asarray(center, dtype=float).reshape(-1)

        def inside(pts):
            return np.linalg.norm(pts - c, axis=1) < radius

        def ext_ball(x0):
            x0 = np.asarray(x0, dtype=float).reshape(-1)
            off = x0 - c
            dist = np.linalg.norm(off)
            if not np.isclose(dist, radius):
                raise DomainError(f"{x0} is not on the sphere of radius {radius}")
            return x0 + ball_radius * off / dist, ball_radius

        def clearance(pts):
            return radius - np.linalg.norm(pts - c, axis=1)

        return cls(inside, tuple(c - radius), tuple(c + radius), r_out, "ball",
                   {"center": c.tolist(), "radius": radius}, ext_ball, clearance)

    @classmethod
    def annulus(cls, center, r_in: float, r_outer: float, r_out: float = 1.0) -> "Domain":
        c = np.asarray(center, dtype=float).reshape(-1)

        def inside(pts):
            rr = np.linalg.norm(pts - c, axis=1)
            return (rr > r_in) & (rr < r_outer)

        def clearance(pts):
            rr = np.linalg.norm(pts - c, axis=1)
            return np.minimum(rr - r_in, r_outer - rr)

        return cls(inside, tuple(c - r_outer), tuple(c + r_outer), r_out, "annulus",
                   {"center": c.tolist(), "r_in": r_in, "r_outer": r_outer}, clearance=clearance)


class CompositeField:
    """Grid values inside Omega and the exterior datum ``g`` outside.

    This is the object the dynamic programming operator acts on: ``g`` is a
    callback on the complement of Omega and is evaluated directly there.
    """

    def __init__(self, gridfield: GridField, domain: Domain, g: Callable[[np.ndarray], np.ndarray]):
        self.gridfield = gridfield
        self.domain = domain
        self.g = g
        self.d = gridfield.d

    def stencil(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolation stencil plus the constant contributed by ``g``.

        Rows for exterior points carry zero weights and the value of ``g``.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        ins = self.domain.contains(pts)
        idx = np.zeros((pts.shape[0], 2 ** self.d), dtype=int)
        w = np.zeros((pts.shape[0], 2 ** self.d))
        const = np.zeros(pts.shape[0])
        if np.any(ins):
            idx[ins], w[ins] = interpolation_weights(self.gridfield.grid, pts[ins])
        out = ~ins
        if np.any(out):
            const[out] = np.asarray(self.g(pts[out]), dtype=float)
        return idx, w, const

    def __call__(self, points) -> np.ndarray:
        pts, lead = _as_points(points, self.d)
        if _kernels.interp_kernel is not None:
            ins = self.domain.contains(pts)
            gv = np.zeros(pts.shape[0])
            out = ~ins
            if np.any(out):
                gv[out] = np.asarray(self.g(pts[out]), dtype=float)
            return _compiled_eval(self.gridfield.grid, self.gridfield.values, pts, ins, gv,
                                  True).reshape(lead)
        idx, w, const = self.stencil(pts)
        return (apply_weights(self.gridfield.values, idx, w) + const).reshape(lead)

    def with_values(self, values) -> "CompositeField":
        return CompositeField(self.gridfield.with_values(values), self.domain, self.g)


# ---------------------------------------------------------------------------
# Ball statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BallStats:
    sup: float
    inf: float
    mean: float
    sample_count: int


def ball_points(center, radius, sampler: BallSampler) -> np.ndarray:
    """Sample points of the ball(s) ``B_radius(center)``.

    ``radius`` may be an array; the output has shape ``radius.shape + (N_s, d)``.
    """
    c = np.asarray(center, dtype=float).reshape(sampler.d)
    r = np.asarray(radius, dtype=float)
    return c + r[..., None, None] * sampler.points


def ball_stats(field, center, radius: float, quality="default") -> BallStats:
    """Supremum, infimum and equal-weight mean of ``field`` over the sampled ball."""
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    d = getattr(field, "d", None) or np.asarray(center).size
    sampler = get_sampler(d, quality)
    vals = field(ball_points(center, radius, sampler))
    return BallStats(float(np.max(vals)), float(np.min(vals)), float(sample_mean(vals, sampler)),
                     sampler.size)


CLEARANCE_MARGIN = 1e-9
CHUNK_POINTS = 1 << 21


def _materialized_stats(field, X, radii, sampler):
    pts = X[:, None, :] + radii[:, None, None] * sampler.points
    vals = field(pts)
    return np.max(vals, axis=-1), np.min(vals, axis=-1), sample_mean(vals, sampler)


def ball_stats_many(field, X, radii, sampler: BallSampler):
    """Sampled sup, inf and mean of ``field`` over ``B(X[i], radii[j])``; arrays ``(n, n_balls)``.

    Points are ``X[i] + radii[j] * sampler.points`` exactly as in
    :func:`ball_points`. On a :class:`CompositeField` whose domain reports a
    clearance, balls that stay inside Omega are reduced by a compiled kernel
    without materializing their points; the results are bitwise the same.
    """
    X = np.asarray(X, dtype=float).reshape(-1, sampler.d)
    radii = np.asarray(radii, dtype=float).reshape(-1)
    n, nb = X.shape[0], radii.size
    smax, smin, smean = (np.empty((n, nb)) for _ in range(3))
    inner = np.zeros((n, nb), dtype=bool)
    fast = (isinstance(field, CompositeField) and field.domain.clearance is not None
            and _kernels.ball_stats_kernel is not None)
    if fast:
        cl = np.asarray(field.domain.clearance(X), dtype=float).reshape(n)
        slack = CLEARANCE_MARGIN * (1.0 + np.max(np.abs(X), axis=1))
        inner = radii[None, :] * sampler.extent < (cl - slack)[:, None]
        grid = field.gridfield.grid
        counts = np.asarray(grid.counts, dtype=np.int64)
        strides = np.array([int(np.prod(counts[k + 1:])) for k in range(grid.d)], dtype=np.int64)
        bad = _kernels.ball_stats_kernel(field.gridfield.values, np.asarray(grid.lower, dtype=float),
                                         float(grid.h), counts, strides, X, radii, sampler.points,
                                         sampler.n_mean, inner, smax, smin, smean)
        if bad >= 0:
            raise OutOfHullError(f"ball around {X[bad // nb]} of radius {radii[bad % nb]} "
                                 "leaves the grid hull")
    rows, cols = np.nonzero(~inner)
    step = max(1, CHUNK_POINTS // sampler.size)
    for lo in range(0, rows.size, step):
        i, j = rows[lo:lo + step], cols[lo:lo + step]
        smax[i, j], smin[i, j], smean[i, j] = _materialized_stats(field, X[i], radii[j], sampler)
    return smax, smin, smean


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------


def write_gridfield_csv(gridfield: GridField, path) -> Path:
    """Header ``i0..,x0..,value``; row-major node order; 17 significant digits."""
    path = Path(path)
    grid = gridfield.grid
    d = grid.d
    idx = grid.multi_indices()
    xs = grid.nodes()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{k}" for k in range(d)] + [f"x{k}" for k in range(d)] + ["value"])
        for i, x, v in zip(idx, xs, gridfield.values):
            writer.writerow([str(int(j)) for j in i] + [f"{c:.17g}" for c in x] + [f"{v:.17g}"])
    return path


def read_gridfield_csv(path, grid: Optional[Grid] = None) -> GridField:
    """Inverse of :func:`write_gridfield_csv`.

    Without ``grid``, the grid is reconstructed from the first and last rows.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("i"))
        rows = [row for row in reader if row]
    idx = np.array([[int(v) for v in row[:d]] for row in rows], dtype=int)
    xs = np.array([[float(v) for v in row[d:2 * d]] for row in rows])
    vals = np.array([float(row[2 * d]) for row in rows])
    if grid is None:
        counts = tuple(int(c) for c in idx.max(axis=0) + 1)
        span = xs[-1] - xs[0]
        h = float(span[0] / (counts[0] - 1))
        grid = Grid(tuple(float(v) for v in xs[0]), h, counts)
    expected = grid.multi_indices()
    if idx.shape != expected.shape or np.any(idx != expected):
        raise DomainError("CSV rows are not in row-major order for the grid")
    return GridField(grid, vals)
