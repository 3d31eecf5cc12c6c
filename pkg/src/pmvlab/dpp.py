"""Monotone fixed-point solver for the dynamic programming principle

    u(x) = A_eps[u; f](x) - eps^2 J_p(f(x))   for x in Omega,
    u(x) = g(x)                               outside Omega.

The unknown lives on the nodes of a uniform grid covering the closure of
Omega; nodes outside Omega (the band) always carry ``g``. Sample points of
the operator balls that fall outside Omega use ``g`` directly, points inside
use multilinear interpolation of the nodal values.

By default all interpolation stencils are computed once per problem, so one
sweep is a gather, a few reductions and a min/max over the ``c`` candidates.
When the stencils would exceed ``STENCIL_BUDGET`` bytes the operator is
applied matrix-free instead. Either way the sweep reproduces :func:`pmvlab.operators.a_select` on the corresponding
:class:`~pmvlab.fields.CompositeField` exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from pmvlab import _kernels
from pmvlab.constants import DomainError, Params, jp, truncation_bounds
from pmvlab.fields import (
    AnalyticField,
    CompositeField,
    Domain,
    Grid,
    GridField,
    apply_weights,
    ball_stats_many,
    get_sampler,
    sample_mean,
)
from pmvlab.operators import (
    CSearchConfig,
    OperatorVariant,
    ball_radii,
    c_candidates,
    combine,
    operator_reach,
    p_laplacian_exact,
)

log = logging.getLogger(__name__)

ULP_SLACK = 4.0
# sample entries per chunk when precomputing or sweeping
_CHUNK_ENTRIES = 1 << 21
STENCIL_BUDGET = 3 << 29  # 1.5 GiB


class NonConvergenceError(RuntimeError):
    """Raised when the iteration hits ``max_iter``; carries the residual history."""

    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = list(history)


class MonotonicityError(RuntimeError):
    """Iterates started from a subsolution decreased beyond the rounding slack."""


class CalibrationError(RuntimeError):
    """No barrier parameter up to the search limit passed the certificate."""


class BracketViolationError(RuntimeError):
    """The run from below exceeded the run from above."""


def default_h(epsilon: float, params: Params) -> float:
    """An eighth of the smallest noise-ball parameter ``eps * m^(-alpha/2)``."""
    tb = truncation_bounds(epsilon, params.alpha)
    return epsilon * tb.m ** (-params.alpha / 2.0) / 8.0


def default_tol(problem: "DPPProblem") -> float:
    return 1e-8 * (1.0 + problem.g_sup())


@dataclass
class DPPProblem:
    domain: Domain
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    epsilon: float
    params: Params
    variant: OperatorVariant = OperatorVariant.OVERLINE
    csearch: CSearchConfig = field(default_factory=CSearchConfig)
    quality: object = "default"
    h: Optional[float] = None
    name: str = "problem"

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise DomainError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.domain.d != self.params.d:
            raise DomainError("domain dimension differs from params.d")
        self.variant = OperatorVariant.parse(self.variant)
        reach = operator_reach(self.epsilon, self.params)
        if self.domain.r_out < reach:
            raise DomainError(
                f"exterior band {self.domain.r_out} is thinner than the operator reach {reach}")
        if self.h is not None and not self.h > 0:
            raise DomainError("grid spacing must be positive")

    @property
    def reach(self) -> float:
        return operator_reach(self.epsilon, self.params)

    @property
    def spacing(self) -> float:
        return self.h if self.h is not None else default_h(self.epsilon, self.params)

    def grid(self) -> Grid:
        """Grid on the bounding box of Omega whose corners are nodes."""
        lo = np.asarray(self.domain.lower, dtype=float)
        hi = np.asarray(self.domain.upper, dtype=float)
        ext = hi - lo
        n = int(math.ceil(float(np.max(ext)) / self.spacing - 1e-9))
        h = float(np.max(ext)) / max(n, 1)
        counts = tuple(int(math.ceil(e / h - 1e-9)) + 1 for e in ext)
        return Grid(tuple(lo), h, tuple(max(c, 2) for c in counts))

    def negated(self) -> "DPPProblem":
        """Problem solved by ``-u``: data negated and the selector mirrored."""
        f, g = self.f, self.g
        flipped = (OperatorVariant.UNDERLINE if self.variant is OperatorVariant.OVERLINE
                   else OperatorVariant.OVERLINE)
        return replace(self, f=lambda x: -np.asarray(f(x)), g=lambda x: -np.asarray(g(x)),
                       variant=flipped, name=f"-{self.name}")

    def g_sup(self) -> float:
        grid = self.grid()
        nodes = grid.nodes()
        band = ~self.domain.contains(nodes)
        vals = np.asarray(self.g(nodes[band]), dtype=float)
        return float(np.max(np.abs(vals))) if vals.size else 0.0


@dataclass
class DPPSolution:
    u: GridField
    iterations: int
    final_residual: float
    residual_history: list = field(default_factory=list)
    bracket_gap: Optional[float] = None
    contraction_ratio: float = math.nan
    interior: Optional[np.ndarray] = None
    wall_time: float = 0.0
    problem: Optional[DPPProblem] = None

    def composite(self) -> CompositeField:
        return CompositeField(self.u, self.problem.domain, self.problem.g)

    def __call__(self, points):
        return self.composite()(points)


def stencil_bytes(n_nodes: int, n_c: int, n_s: int, d: int) -> int:
    """Memory of the precomputed stencils (int32 indices, float64 weights and constants)."""
    entries = n_nodes * 2 * n_c * n_s
    return entries * (2 ** d * 12 + 8)


class SweepOperator:
    """Discrete DPP operator for one problem.

    Backends: ``"numba"`` (precomputed stencils, compiled sweep), ``"numpy"``
    (precomputed stencils, vectorized sweep) and ``"fused"`` (no stencils;
    balls inside Omega are reduced on the fly). All three agree bit for bit.
    """

    def __init__(self, problem: DPPProblem, backend: Optional[str] = None, workers: int = 1):
        self.problem = problem
        if backend not in (None, "numba", "numpy", "fused"):
            raise DomainError(f"unknown backend {backend!r}")
        self.workers = max(1, int(workers))
        p = problem.params
        self.grid = grid = problem.grid()
        nodes = grid.nodes()
        inside = problem.domain.contains(nodes)
        self.interior = np.flatnonzero(inside)
        self.band = np.flatnonzero(~inside)
        if self.interior.size == 0:
            raise DomainError("the grid has no interior nodes; reduce the spacing")
        self.nodes = nodes
        self.g_band = np.asarray(problem.g(nodes[self.band]), dtype=float).reshape(-1)
        fx = np.asarray(problem.f(nodes[self.interior]), dtype=float).reshape(-1)
        self.f_interior = fx
        self.shift = problem.epsilon ** 2 * np.asarray(jp(fx, p.p), dtype=float).reshape(-1)
        self.plus = np.array([problem.variant.uses_plus(v) for v in fx], dtype=bool)
        self.sampler = get_sampler(p.d, problem.quality)
        self.cs = c_candidates(problem.epsilon, p.alpha, problem.csearch)
        small_r, noise_r = ball_radii(problem.epsilon, self.cs, p)
        self.radii = np.stack([small_r, noise_r])  # (2, n_c)
        if backend is None:
            need = stencil_bytes(self.interior.size, self.cs.size, self.sampler.size, p.d)
            if need > STENCIL_BUDGET:
                backend = "fused"
                log.info("stencils would take %.1f GiB; applying the operator matrix-free",
                         need / 2 ** 30)
            else:
                backend = "numba" if _kernels.sweep_kernel is not None else "numpy"
        self.backend = backend
        if backend == "fused":
            self.idx = self.w = self.const = np.zeros(0)
            self._chunk = max(1, _CHUNK_ENTRIES // (2 * self.cs.size * self.sampler.size))
        else:
            self._build_stencils()

    # -- precomputation -------------------------------------------------
    def _build_stencils(self):
        p = self.problem
        S = self.sampler.points
        n_c, n_s, d = self.cs.size, S.shape[0], p.params.d
        per_node = 2 * n_c * n_s
        chunk = max(1, _CHUNK_ENTRIES // per_node)
        n = self.interior.size
        self.idx = np.empty((n, 2, n_c, n_s, 2 ** d), dtype=np.int32)
        self.w = np.empty((n, 2, n_c, n_s, 2 ** d))
        self.const = np.empty((n, 2, n_c, n_s))
        stub = CompositeField(GridField(self.grid, np.zeros(self.grid.size)), p.domain, p.g)
        offsets = self.radii[..., None, None] * S  # (2, n_c, n_s, d)
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            x = self.nodes[self.interior[sl]]
            pts = x[:, None, None, None, :] + offsets[None]
            idx, w, const = stub.stencil(pts.reshape(-1, d))
            m = x.shape[0]
            self.idx[sl] = idx.reshape(m, 2, n_c, n_s, 2 ** d)
            self.w[sl] = w.reshape(m, 2, n_c, n_s, 2 ** d)
            self.const[sl] = const.reshape(m, 2, n_c, n_s)
        self._chunk = chunk

    @property
    def nbytes(self) -> int:
        return self.idx.nbytes + self.w.nbytes + self.const.nbytes

    # -- application ----------------------------------------------------
    def with_band(self, values) -> np.ndarray:
        """Copy of nodal ``values`` with the band reset to ``g``."""
        u = np.array(values, dtype=float, copy=True).reshape(-1)
        u[self.band] = self.g_band
        return u

    def operator_values(self, u: np.ndarray, nodes: Optional[np.ndarray] = None,
                        return_c: bool = False):
        """``A_eps[u; f]`` at interior nodes (positions into ``self.interior``)."""
        params = self.problem.params
        sel = np.arange(self.interior.size) if nodes is None else np.asarray(nodes)
        if self.backend == "numba":
            out, kbest = self._kernel_values(u, sel)
            return (out, self.cs[kbest]) if return_c else out
        if self.backend == "fused":
            out, cbest = self._fused_values(u, sel)
            return (out, cbest) if return_c else out
        out = np.empty(sel.size)
        cbest = np.empty(sel.size)
        for start in range(0, sel.size, self._chunk):
            part = sel[start:start + self._chunk]
            vals = apply_weights(u, self.idx[part], self.w[part]) + self.const[part]
            small, noise = vals[:, 0], vals[:, 1]
            nsup, ninf = np.max(noise, axis=-1), np.min(noise, axis=-1)
            nmean = sample_mean(noise, self.sampler)
            plus = self.plus[part]
            obj_plus = combine(np.max(small, axis=-1), nsup, ninf, nmean, params)
            obj_minus = combine(np.min(small, axis=-1), nsup, ninf, nmean, params)
            kp = np.argmin(obj_plus, axis=-1)
            km = np.argmax(obj_minus, axis=-1)
            rows = np.arange(part.size)
            vp, vm = obj_plus[rows, kp], obj_minus[rows, km]
            out[start:start + part.size] = np.where(plus, vp, vm)
            cbest[start:start + part.size] = np.where(plus, self.cs[kp], self.cs[km])
        return (out, cbest) if return_c else out

    def _fused_values(self, u: np.ndarray, sel: np.ndarray):
        params, n_c = self.problem.params, self.cs.size
        U = CompositeField(GridField(self.grid, u), self.problem.domain, self.problem.g)
        X = self.nodes[self.interior[sel]]
        smax, smin, smean = ball_stats_many(U, X, self.radii.reshape(-1), self.sampler)
        nsup, ninf, nmean = smax[:, n_c:], smin[:, n_c:], smean[:, n_c:]
        obj_plus = combine(smax[:, :n_c], nsup, ninf, nmean, params)
        obj_minus = combine(smin[:, :n_c], nsup, ninf, nmean, params)
        kp = np.argmin(obj_plus, axis=-1)
        km = np.argmax(obj_minus, axis=-1)
        rows = np.arange(sel.size)
        plus = self.plus[sel]
        out = np.where(plus, obj_plus[rows, kp], obj_minus[rows, km])
        return out, np.where(plus, self.cs[kp], self.cs[km])

    def _kernel_values(self, u: np.ndarray, sel: np.ndarray):
        params = self.problem.params
        u = np.ascontiguousarray(u, dtype=float)
        out = np.empty(sel.size)
        kbest = np.empty(sel.size, dtype=np.int64)
        whole = sel.size == self.interior.size and np.array_equal(sel, np.arange(sel.size))

        def run(part):
            rows = part if not whole else slice(part[0], part[-1] + 1)
            o = np.empty(len(part))
            kb = np.empty(len(part), dtype=np.int64)
            take = (lambda a: a[rows]) if whole else (lambda a: a[sel[part]])
            _kernels.sweep_kernel(u, take(self.idx), take(self.w), take(self.const),
                                  take(self.plus), params.alpha, params.beta,
                                  self.sampler.n_mean, o, kb)
            out[part], kbest[part] = o, kb

        parts = [p for p in np.array_split(np.arange(sel.size), self.workers) if p.size]
        if len(parts) == 1:
            run(parts[0])
        else:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(len(parts)) as pool:
                list(pool.map(run, parts))
        return out, kbest

    def apply(self, u: np.ndarray) -> np.ndarray:
        """One Jacobi sweep on nodal values; returns a new nodal vector."""
        u = self.with_band(u)
        new = u.copy()
        new[self.interior] = self.operator_values(u) - self.shift
        return new

    def residual(self, u: np.ndarray) -> float:
        u = self.with_band(u)
        return float(np.max(np.abs(self.apply(u)[self.interior] - u[self.interior])))


_OPERATOR_CACHE: dict = {}


def sweep_operator(problem: DPPProblem, backend: Optional[str] = None) -> SweepOperator:
    """Sweep operator for ``problem``, cached on the problem object identity."""
    key = (id(problem), backend)
    hit = _OPERATOR_CACHE.get(key)
    if hit is not None and hit[0] is problem:
        return hit[1]
    op = SweepOperator(problem, backend)
    _OPERATOR_CACHE.clear()  # keep at most one large stencil set alive
    _OPERATOR_CACHE[key] = (problem, op)
    return op


def _as_values(u, grid: Grid) -> np.ndarray:
    if isinstance(u, GridField):
        return u.values
    vals = np.asarray(u, dtype=float).reshape(-1)
    if vals.size != grid.size:
        raise DomainError(f"expected {grid.size} nodal values, got {vals.size}")
    return vals


def dpp_apply(u, problem: DPPProblem) -> GridField:
    """Full Jacobi sweep; band nodes are reset to ``g`` before and after."""
    op = sweep_operator(problem)
    return GridField(op.grid, op.apply(_as_values(u, op.grid)))


# ---------------------------------------------------------------------------
# Barriers
# ---------------------------------------------------------------------------


def barrier_sub(problem: DPPProblem, auto_calibrate: bool = True, L: float = 1.0,
                L_max: float = 2.0 ** 20) -> GridField:
    """Certified discrete subsolution ``exp(L (x_1 - a)) - T``.

    ``a`` is the smallest first coordinate of Omega, so the exponential is at
    least 1 on Omega. ``T`` makes the barrier lie below ``g`` at every band
    node and at every exterior sample point. ``L`` doubles until the sweep
    satisfies ``apply(u0) >= u0`` at every interior node.
    """
    op = sweep_operator(problem)
    a = float(problem.domain.lower[0])
    x1 = op.nodes[:, 0]
    ext_mask = op.w.sum(axis=-1) == 0.0  # exterior samples carry zero weight
    ext_x1 = _exterior_first_coordinates(op, ext_mask)
    ext_g = op.const[ext_mask]
    last_bad = None
    while L <= L_max:
        with np.errstate(over="raise"):
            try:
                base = np.exp(L * (x1 - a))
                ext = np.exp(L * (ext_x1 - a))
            except FloatingPointError:
                break
        T = float(np.max(base[op.band] - op.g_band))
        if ext.size:
            T = max(T, float(np.max(ext - ext_g)))
        u0 = base - T
        u0[op.band] = np.minimum(u0[op.band], op.g_band)
        lhs = op.apply(u0)
        gap = lhs[op.interior] - u0[op.interior]
        if np.all(gap >= 0.0):
            log.info("barrier certified with L=%g, T=%g", L, T)
            return GridField(op.grid, u0)
        last_bad = int(op.interior[int(np.argmin(gap))])
        if not auto_calibrate:
            break
        L *= 2.0
    where = None if last_bad is None else op.nodes[last_bad].tolist()
    raise CalibrationError(f"no barrier certified up to L={L_max}; worst node at {where}")


def _exterior_first_coordinates(op: SweepOperator, mask: np.ndarray) -> np.ndarray:
    """First coordinate of every exterior sample point, in ``mask`` order."""
    S = op.sampler.points
    x1 = op.nodes[op.interior, 0]
    pts = x1[:, None, None, None] + op.radii[None, :, :, None] * S[None, None, None, :, 0]
    return pts[mask]


def barrier_super(problem: DPPProblem, auto_calibrate: bool = True) -> GridField:
    """Certified supersolution: minus the subsolution of the negated problem."""
    neg = problem.negated()
    sub = barrier_sub(neg, auto_calibrate)
    return GridField(sub.grid, -sub.values)


# ---------------------------------------------------------------------------
# Iteration
# ---------------------------------------------------------------------------


def solve(problem: DPPProblem, init="barrier", tol: Optional[float] = None,
          max_iter: int = 100000, direction: str = "up", method: str = "jacobi",
          blocks: int = 8, check_monotone: bool = True) -> DPPSolution:
    """Iterate the sweep until the DPP residual drops below ``tol``.

    ``init`` is ``"barrier"`` (certified subsolution, or supersolution when
    ``direction="down"``), a :class:`GridField`, or nodal values. With a
    barrier start the iterates are monotone; this is checked every sweep
    against a slack of ``ULP_SLACK`` ulps of the sup norm. ``method="gauss-seidel"``
    updates ``blocks`` node blocks in turn and carries no monotonicity check.
    """
    t0 = time.perf_counter()
    op = sweep_operator(problem)
    tol = default_tol(problem) if tol is None else tol
    if not tol > 0:
        raise DomainError("tol must be positive")
    monotone = False
    if isinstance(init, str):
        if init != "barrier":
            raise DomainError(f"unknown init {init!r}")
        start = barrier_sub(problem) if direction == "up" else barrier_super(problem)
        u = start.values.copy()
        monotone = check_monotone and method == "jacobi"
    else:
        u = _as_values(init, op.grid).copy()
    sign = 1.0 if direction == "up" else -1.0
    u = op.with_band(u) if not monotone else u
    history: list[float] = []
    ratios: list[float] = []
    interior = op.interior
    for k in range(max_iter):
        if method == "jacobi":
            new = op.apply(u)
        elif method == "gauss-seidel":
            new = op.with_band(u)
            for part in np.array_split(np.arange(interior.size), blocks):
                new[interior[part]] = op.operator_values(new, part) - op.shift[part]
        else:
            raise DomainError(f"unknown method {method!r}")
        diff = new[interior] - u[interior]
        res = float(np.max(np.abs(diff)))
        if monotone:
            _check_monotone(op, diff, new, sign, k)
        if history and history[-1] > 0:
            ratios.append(res / history[-1])
        history.append(res)
        if res <= tol:
            sol = DPPSolution(GridField(op.grid, op.with_band(u)), k, res, history,
                              interior=interior, problem=problem)
            sol.contraction_ratio = _tail_ratio(ratios)
            sol.wall_time = time.perf_counter() - t0
            return sol
        u = new
    raise NonConvergenceError(
        f"no convergence after {max_iter} sweeps; last residual {history[-1]:.3e}", history)


def _tail_ratio(ratios: list[float], tail: int = 20) -> float:
    if not ratios:
        return math.nan
    return float(np.median(ratios[-tail:]))


def _check_monotone(op: SweepOperator, diff: np.ndarray, new: np.ndarray, sign: float,
                    k: int) -> None:
    slack = ULP_SLACK * np.spacing(max(float(np.max(np.abs(new))), 1.0))
    if np.any(sign * diff < -slack):
        bad = int(op.interior[int(np.argmin(sign * diff))])
        raise MonotonicityError(
            f"sweep {k}: iterate moved against the monotone direction by "
            f"{float(np.min(sign * diff)):.3e} at node {op.nodes[bad].tolist()}")


def solve_bracketed(problem: DPPProblem, tol: Optional[float] = None,
                    max_iter: int = 100000) -> DPPSolution:
    """Iterate from the subsolution and from the supersolution in lockstep.

    Both runs are monotone, so they enclose the fixed point. The iteration
    stops once both residuals are below ``tol`` and the enclosure is at most
    ``2 tol`` wide. The reported solution is the run from below;
    ``bracket_gap`` is the final width and ``iterations`` counts the sweeps
    of both runs.
    """
    t0 = time.perf_counter()
    op = sweep_operator(problem)
    tol = default_tol(problem) if tol is None else tol
    if not tol > 0:
        raise DomainError("tol must be positive")
    lo = barrier_sub(problem).values.copy()
    hi = barrier_super(problem).values.copy()
    interior = op.interior
    history: list[float] = []
    ratios: list[float] = []
    for k in range(max_iter):
        new_lo, new_hi = op.apply(lo), op.apply(hi)
        d_lo = new_lo[interior] - lo[interior]
        d_hi = new_hi[interior] - hi[interior]
        _check_monotone(op, d_lo, new_lo, 1.0, k)
        _check_monotone(op, d_hi, new_hi, -1.0, k)
        res_lo = float(np.max(np.abs(d_lo)))
        res = max(res_lo, float(np.max(np.abs(d_hi))))
        width = lo[interior] - hi[interior]
        if history and history[-1] > 0:
            ratios.append(res / history[-1])
        history.append(res)
        gap = float(np.max(np.abs(width)))
        if res <= tol and gap <= 2.0 * tol:
            slack = max(ULP_SLACK * np.spacing(float(np.max(np.abs(hi))) + 1.0), 2.0 * tol)
            if np.any(width > slack):
                raise BracketViolationError(
                    f"run from below exceeds run from above by {float(np.max(width)):.3e}")
            sol = DPPSolution(GridField(op.grid, op.with_band(lo)), 2 * k, res_lo, history,
                              bracket_gap=gap, interior=interior, problem=problem)
            sol.contraction_ratio = _tail_ratio(ratios)
            sol.wall_time = time.perf_counter() - t0
            return sol
        lo, hi = new_lo, new_hi
    raise NonConvergenceError(
        f"bracket did not close after {max_iter} sweeps; last residual {history[-1]:.3e}",
        history)


# ---------------------------------------------------------------------------
# Exterior ball barrier
# ---------------------------------------------------------------------------


def exterior_ball_barrier(problem: DPPProblem, boundary_point, eta: float,
                          n_check: int = 2000) -> AnalyticField:
    """Radial barrier ``K (|x - z0|^-a - R^-a) + g(x0) - eta`` with ``a = (p+d-2)/(p-1)``.

    ``K`` is scaled so that the exact p-Laplacian of the barrier is at least
    ``sup|f| + 1`` on Omega, checked on interior nodes.
    """
    dom = problem.domain
    if dom.exterior_ball is None:
        raise DomainError(f"domain kind {dom.kind!r} has no exterior-ball description")
    x0 = np.asarray(boundary_point, dtype=float).reshape(dom.d)
    z0, R = dom.exterior_ball(x0)
    z0 = np.asarray(z0, dtype=float)
    p, d = problem.params.p, problem.params.d
    a = (p + d - 2.0) / (p - 1.0)
    g0 = float(np.asarray(problem.g(x0.reshape(1, -1))).reshape(-1)[0])
    nodes = problem.grid().nodes()
    nodes = nodes[dom.contains(nodes)]
    if nodes.shape[0] > n_check:
        nodes = nodes[np.linspace(0, nodes.shape[0] - 1, n_check).astype(int)]
    f_sup = float(np.max(np.abs(problem.f(nodes)))) if nodes.size else 0.0

    def make(K):
        def value(y):
            r = np.linalg.norm(y - z0, axis=-1)
            return K * (r ** (-a) - R ** (-a)) + g0 - eta

        def gradient(x):
            v = np.asarray(x, dtype=float) - z0
            r = float(np.linalg.norm(v))
            return -K * a * r ** (-a - 2.0) * v

        def hessian(x):
            v = np.asarray(x, dtype=float) - z0
            r = float(np.linalg.norm(v))
            return -K * a * (r ** (-a - 2.0) * np.eye(d) - (a + 2.0) * r ** (-a - 4.0) * np.outer(v, v))

        return AnalyticField(value, d, gradient, hessian, name="exterior_ball_barrier")

    unit = make(1.0)
    lap = np.array([p_laplacian_exact(unit, x, p) for x in nodes])
    if np.any(lap <= 0.0):
        raise CalibrationError("radial power has a nonpositive p-Laplacian on Omega")
    K = ((f_sup + 1.0) / float(np.min(lap))) ** (1.0 / (p - 1.0))
    for _ in range(60):
        bar = make(K)
        if all(p_laplacian_exact(bar, x, p) >= f_sup + 1.0 for x in nodes):
            return bar
        K *= 2.0
    raise CalibrationError("could not scale the exterior-ball barrier")


def uniform_bound(problem: DPPProblem, boundary_point, eta: float = 0.0) -> float:
    """Bound on ``sup|u_eps|`` from the exterior-ball barrier at ``boundary_point``.

    The barrier's drop across Omega plus the boundary data bounds the solution
    from both sides, independently of ``eps``.
    """
    bar = exterior_ball_barrier(problem, boundary_point, eta)
    dom = problem.domain
    z0, R = dom.exterior_ball(np.asarray(boundary_point, dtype=float))
    nodes = problem.grid().nodes()
    far = float(np.max(np.linalg.norm(nodes - np.asarray(z0), axis=1)))
    x0 = np.asarray(boundary_point, dtype=float).reshape(1, -1)
    drop = float(bar(x0)[0] - bar(np.asarray(z0) + far * np.eye(dom.d)[:1])[0])
    return problem.g_sup() + eta + drop


# ---------------------------------------------------------------------------
# Reference solutions of the limit problem
# ---------------------------------------------------------------------------


def radial_solution(p: float, d: int, f_const: float, radius: float, g_const: float = 0.0,
                    center=None) -> Callable[[np.ndarray], np.ndarray]:
    """Solution of ``Δ_p u = f_const`` in ``B_radius(center)`` with ``u = g_const`` on the sphere.

    Radial integration gives ``|u'|^(p-2) u' = f r / d``, hence
    ``u = g + (p-1)/p J_p(f/d) (|x - center|^q - radius^q)`` with ``q = p/(p-1)``.
    """
    q = p / (p - 1.0)
    k = (p - 1.0) / p * float(jp(f_const / d, p))
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)

    def u(x):
        x = np.asarray(x, dtype=float).reshape(-1, d)
        r = np.linalg.norm(x - c, axis=1)
        return g_const + k * (r ** q - radius ** q)

    return u


def poisson_fd_1d(f: Callable, g: Callable, a: float, b: float, n: int = 4001):
    """Second-order finite differences for ``u'' = f`` on ``(a, b)``, ``u = g`` at the ends.

    Returns ``(nodes, values)`` on ``n`` equispaced nodes.
    """
    if n < 3 or not b > a:
        raise DomainError("need n >= 3 and b > a")
    x = np.linspace(a, b, n)
    hh = (b - a) / (n - 1)
    ga = float(np.asarray(g(np.array([[a]]))).reshape(-1)[0])
    gb = float(np.asarray(g(np.array([[b]]))).reshape(-1)[0])
    rhs = hh ** 2 * np.asarray(f(x[1:-1, None]), dtype=float).reshape(-1)
    rhs[0] -= ga
    rhs[-1] -= gb
    m = n - 2
    bands = np.zeros((3, m))
    bands[0, 1:] = 1.0
    bands[1, :] = -2.0
    bands[2, :-1] = 1.0
    inner = linalg.solve_banded((1, 1), bands, rhs)
    return x, np.concatenate([[ga], inner, [gb]])
