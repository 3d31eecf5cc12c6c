"""The gambling-house tug-of-war game and Monte Carlo value estimation.

One turn at position ``x``:

* The c-chooser picks ``c`` in ``[m(eps), M(eps)]``. This is Player II when
  the problem's selector uses ``A+`` at ``x`` (``f(x) >= 0`` for the overline
  selector), Player I otherwise.
* Heads (probability ``alpha``): the other player moves anywhere in
  ``B(x, eps^2 c^(1-alpha))``.
* Tails: tug-of-war with noise in ``B(x, gamma eps c^(-alpha/2))``. With
  probability ``beta`` a fair coin decides who moves, otherwise the next
  position is uniform in the ball.

Player I collects ``-eps^2 J_p(f(x))`` per turn and ``g`` at the exit point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from pmvlab.constants import DomainError, jp, truncation_bounds
from pmvlab.dpp import DPPProblem, DPPSolution
from pmvlab.fields import get_sampler
from pmvlab.operators import a_minus_many, a_plus_many

MAXIMIZER = "maximizer"
MINIMIZER = "minimizer"
LEGALITY_SLACK = 1e-12


class StrategyViolation(RuntimeError):
    """A strategy returned a ``c`` or a point outside the allowed set."""


class AllCappedError(RuntimeError):
    """No rollout terminated within ``max_steps``."""


@dataclass(frozen=True)
class GameConfig:
    problem: DPPProblem
    max_steps: int = 10 ** 6
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise DomainError("max_steps must be at least 1")


@dataclass
class GameState:
    position: np.ndarray
    step: int = 0
    accrued_payoff: float = 0.0


@dataclass
class Strategy:
    """``choose_c(state, rng)`` and ``choose_point(state, center, radius, role, rng)``.

    Strategies that never draw random numbers may also provide
    ``choose_c_many(positions)`` and ``choose_point_many(centers, radii, role)``
    acting on stacked rows; the Monte Carlo driver then makes one call per
    turn for all rollouts. The batched hooks must agree with the scalar ones.
    """

    choose_c: Callable
    choose_point: Callable
    name: str = "strategy"
    choose_c_many: Optional[Callable] = None
    choose_point_many: Optional[Callable] = None


@dataclass
class GameTranscript:
    positions: list
    c_choices: list
    coin_outcomes: list
    final_payoff: float
    terminated: bool
    accrued: float = 0.0

    def to_record(self, elide_above: Optional[int] = 1000) -> dict:
        rec = {
            "steps": len(self.c_choices),
            "terminated": self.terminated,
            "final_payoff": self.final_payoff,
            "accrued": self.accrued,
            "coins": self.coin_outcomes,
            "c": self.c_choices,
        }
        if elide_above is None or len(self.positions) <= elide_above:
            rec["positions"] = [list(map(float, p)) for p in self.positions]
        else:
            rec["positions_elided"] = len(self.positions)
        return rec


def _check_c(c: float, tb) -> float:
    c = float(c)
    if not (tb.m * (1 - LEGALITY_SLACK) <= c <= tb.M * (1 + LEGALITY_SLACK)):
        raise StrategyViolation(f"c={c} outside [{tb.m}, {tb.M}]")
    return c


def _check_point(point, center, radius) -> np.ndarray:
    point = np.asarray(point, dtype=float).reshape(center.shape)
    if float(np.linalg.norm(point - center)) > radius * (1 + LEGALITY_SLACK):
        raise StrategyViolation(f"point {point.tolist()} outside the ball of radius {radius} "
                                f"around {center.tolist()}")
    return point


def uniform_in_ball(center, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly uniform point in the ball, by rejection from the bounding cube."""
    d = center.shape[0]
    while True:
        y = rng.uniform(-1.0, 1.0, size=d)
        if float(y @ y) <= 1.0:
            return center + radius * y


def play_round(state: GameState, strategy_I: Strategy, strategy_II: Strategy,
               rng: np.random.Generator, config: GameConfig,
               strategy_rng: Optional[np.random.Generator] = None, record=None) -> GameState:
    """One turn of the game; returns the successor state."""
    pr = config.problem
    params, eps = pr.params, pr.epsilon
    x = np.asarray(state.position, dtype=float)
    if not bool(pr.domain.contains(x.reshape(1, -1))[0]):
        raise DomainError("play_round needs a position inside the domain")
    srng = rng if strategy_rng is None else strategy_rng
    fx = float(np.asarray(pr.f(x.reshape(1, -1))).reshape(-1)[0])
    plus = pr.variant.uses_plus(fx)
    chooser, mover = (strategy_II, strategy_I) if plus else (strategy_I, strategy_II)
    free_role = MAXIMIZER if plus else MINIMIZER
    tb = truncation_bounds(eps, params.alpha)
    c = _check_c(chooser.choose_c(state, srng), tb)
    if rng.random() < params.alpha:
        radius = eps ** 2 * c ** (1.0 - params.alpha)
        nxt = _check_point(mover.choose_point(state, x, radius, free_role, srng), x, radius)
        coin = "heads"
    else:
        radius = params.gamma * eps * c ** (-params.alpha / 2.0)
        if rng.random() < params.beta:
            if rng.random() < 0.5:
                nxt = _check_point(strategy_I.choose_point(state, x, radius, MAXIMIZER, srng),
                                   x, radius)
                coin = "tug:I"
            else:
                nxt = _check_point(strategy_II.choose_point(state, x, radius, MINIMIZER, srng),
                                   x, radius)
                coin = "tug:II"
        else:
            nxt = uniform_in_ball(x, radius, rng)
            coin = "noise"
    if record is not None:
        record["c"].append(c)
        record["coins"].append(coin)
    payoff = state.accrued_payoff - eps ** 2 * float(jp(fx, params.p))
    return GameState(nxt, state.step + 1, payoff)


def play_game(x0, strategy_I: Strategy, strategy_II: Strategy, config: GameConfig,
              rng: np.random.Generator, strategy_rng: Optional[np.random.Generator] = None,
              keep_positions: bool = True) -> GameTranscript:
    """Play until the position leaves the domain or ``max_steps`` turns were played."""
    pr = config.problem
    state = GameState(np.asarray(x0, dtype=float).reshape(pr.params.d))
    if not bool(pr.domain.contains(state.position.reshape(1, -1))[0]):
        raise DomainError("the starting point must lie in the domain")
    record = {"c": [], "coins": []}
    positions = [state.position.copy()] if keep_positions else []
    terminated = False
    while state.step < config.max_steps:
        state = play_round(state, strategy_I, strategy_II, rng, config, strategy_rng, record)
        if keep_positions:
            positions.append(state.position.copy())
        if not bool(pr.domain.contains(state.position.reshape(1, -1))[0]):
            terminated = True
            break
    if terminated:
        gval = float(np.asarray(pr.g(state.position.reshape(1, -1))).reshape(-1)[0])
        final = state.accrued_payoff + gval
    else:
        final = state.accrued_payoff
    return GameTranscript(positions, record["c"], record["coins"], final, terminated,
                          state.accrued_payoff)


def replay_payoff(transcript: GameTranscript, problem: DPPProblem) -> float:
    """Recompute the payoff of a terminated transcript from its positions."""
    eps, p = problem.epsilon, problem.params.p
    acc = 0.0
    for pos in transcript.positions[:-1]:
        fx = float(np.asarray(problem.f(np.asarray(pos).reshape(1, -1))).reshape(-1)[0])
        acc = acc - eps ** 2 * float(jp(fx, p))
    if not transcript.terminated:
        return acc
    last = np.asarray(transcript.positions[-1]).reshape(1, -1)
    return acc + float(np.asarray(problem.g(last)).reshape(-1)[0])


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def quasi_optimal_strategies(solution: DPPSolution, quality=None) -> tuple[Strategy, Strategy]:
    """Strategies read off the DPP solution.

    The c-chooser takes the optimal ``c`` of ``A+`` (Player II) or ``A-``
    (Player I) evaluated on the solution at the current position. Point
    choices are the best sample of the interpolated solution in the ball.
    """
    pr = solution.problem
    U = solution.composite()
    quality = pr.quality if quality is None else quality
    sampler = get_sampler(pr.params.d, quality)

    def best_points(centers, radii, maximize: bool):
        pts = centers[:, None, :] + np.asarray(radii, dtype=float)[:, None, None] * sampler.points
        vals = U(pts)
        k = np.argmax(vals, axis=1) if maximize else np.argmin(vals, axis=1)
        return pts[np.arange(pts.shape[0]), k]

    def many_c(op):
        def choose(positions):
            return op(U, positions, pr.epsilon, pr.params, pr.csearch, pr.quality)[1]
        return choose

    c_I_many, c_II_many = many_c(a_minus_many), many_c(a_plus_many)

    def point_I_many(centers, radii, role):
        return best_points(centers, radii, True)

    def point_II_many(centers, radii, role):
        return best_points(centers, radii, False)

    def one_c(many):
        return lambda state, rng: float(many(np.asarray(state.position, float).reshape(1, -1))[0])

    def one_point(many):
        def choose(state, center, radius, role, rng):
            return many(np.asarray(center, float).reshape(1, -1), np.array([radius]), role)[0]
        return choose

    I = Strategy(one_c(c_I_many), one_point(point_I_many), "quasi-I", c_I_many, point_I_many)
    II = Strategy(one_c(c_II_many), one_point(point_II_many), "quasi-II", c_II_many,
                  point_II_many)
    return I, II


def random_strategy(problem: DPPProblem, name: str = "random") -> Strategy:
    """Log-uniform ``c`` and uniform points in the ball."""
    tb = truncation_bounds(problem.epsilon, problem.params.alpha)
    lo, hi = math.log(tb.m), math.log(tb.M)

    def choose_c(state, rng):
        return min(max(math.exp(rng.uniform(lo, hi)), tb.m), tb.M)

    def choose_point(state, center, radius, role, rng):
        return uniform_in_ball(np.asarray(center, float), radius, rng)

    return Strategy(choose_c, choose_point, name)


def push_strategy(direction, c: Optional[float] = None, problem: Optional[DPPProblem] = None,
                  name: str = "push") -> Strategy:
    """Always move to the ball point furthest along ``direction``."""
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    if c is None:
        if problem is None:
            raise DomainError("push_strategy needs c or a problem")
        c = truncation_bounds(problem.epsilon, problem.params.alpha).m

    def choose_c(state, rng):
        return c

    def choose_point(state, center, radius, role, rng):
        return np.asarray(center, float) + radius * u

    def choose_c_many(positions):
        return np.full(len(positions), float(c))

    def choose_point_many(centers, radii, role):
        return centers + np.asarray(radii, dtype=float)[:, None] * u

    return Strategy(choose_c, choose_point, name, choose_c_many, choose_point_many)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class ValueEstimate:
    mean: float
    stderr: float
    cap_fraction: float
    n: int
    n_terminated: int
    seed: int
    payoffs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    transcripts: list = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n,
                "n_terminated": self.n_terminated, "cap_fraction": self.cap_fraction,
                "seed": self.seed}


def rollout_rngs(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent game and strategy streams of rollout ``index``."""
    ss = np.random.SeedSequence(seed, spawn_key=(index,))
    game_ss, strat_ss = ss.spawn(2)
    return np.random.default_rng(game_ss), np.random.default_rng(strat_ss)


def _scalar(fn, x) -> float:
    return float(np.asarray(fn(x.reshape(1, -1)), dtype=float).reshape(-1)[0])


class _Lockstep:
    """Rollouts advanced turn by turn together.

    Each rollout owns its game and strategy streams and draws from them in
    the order :func:`play_round` does, so a rollout's transcript does not
    depend on which other rollouts share the batch.
    """

    def __init__(self, x0, strategy_I, strategy_II, config: GameConfig, indices, keep_positions):
        pr = config.problem
        self.pr, self.config = pr, config
        self.I, self.II = strategy_I, strategy_II
        self.indices = list(indices)
        k = len(self.indices)
        self.rngs = [rollout_rngs(config.rng_seed, i) for i in self.indices]
        self.pos = np.tile(np.asarray(x0, dtype=float).reshape(1, pr.params.d), (k, 1))
        self.steps = np.zeros(k, dtype=np.int64)
        self.accrued = [0.0] * k
        self.records = [{"c": [], "coins": []} for _ in range(k)]
        self.keep_positions = keep_positions
        self.positions = [[self.pos[j].copy()] if keep_positions else [] for j in range(k)]
        self.done = [False] * k
        self.final = [0.0] * k

    def _choose_c(self, strategy, rows, tb):
        if strategy.choose_c_many is not None:
            cs = np.asarray(strategy.choose_c_many(self.pos[rows]), dtype=float).reshape(-1)
        else:
            cs = [strategy.choose_c(GameState(self.pos[j].copy(), int(self.steps[j]),
                                              self.accrued[j]), self.rngs[j][1]) for j in rows]
        return [_check_c(c, tb) for c in cs]

    def _choose_points(self, strategy, role, rows, radii, out):
        if not rows:
            return
        centers = self.pos[rows]
        if strategy.choose_point_many is not None:
            pts = np.asarray(strategy.choose_point_many(centers, np.asarray(radii), role),
                             dtype=float).reshape(len(rows), -1)
        else:
            pts = [strategy.choose_point(GameState(self.pos[j].copy(), int(self.steps[j]),
                                                   self.accrued[j]),
                                         self.pos[j].copy(), rad, role, self.rngs[j][1])
                   for j, rad in zip(rows, radii)]
        for j, rad, pt in zip(rows, radii, pts):
            out[j] = _check_point(pt, self.pos[j], rad)

    def turn(self, active):
        pr, params, eps = self.pr, self.pr.params, self.pr.epsilon
        tb = truncation_bounds(eps, params.alpha)
        fx = {j: _scalar(pr.f, self.pos[j]) for j in active}
        plus = {j: pr.variant.uses_plus(fx[j]) for j in active}
        c = {}
        for strategy, rows in ((self.II, [j for j in active if plus[j]]),
                               (self.I, [j for j in active if not plus[j]])):
            if rows:
                c.update(zip(rows, self._choose_c(strategy, rows, tb)))
        requests = {}
        nxt = {}
        for j in active:
            rng = self.rngs[j][0]
            if rng.random() < params.alpha:
                radius = eps ** 2 * c[j] ** (1.0 - params.alpha)
                mover = (self.I, MAXIMIZER) if plus[j] else (self.II, MINIMIZER)
                coin = "heads"
            else:
                radius = params.gamma * eps * c[j] ** (-params.alpha / 2.0)
                if rng.random() < params.beta:
                    if rng.random() < 0.5:
                        mover, coin = (self.I, MAXIMIZER), "tug:I"
                    else:
                        mover, coin = (self.II, MINIMIZER), "tug:II"
                else:
                    mover, coin = None, "noise"
                    nxt[j] = uniform_in_ball(self.pos[j], radius, rng)
            if mover is not None:
                key = (id(mover[0]), mover[1])
                requests.setdefault(key, (mover[0], mover[1], [], []))
                requests[key][2].append(j)
                requests[key][3].append(radius)
            self.records[j]["c"].append(c[j])
            self.records[j]["coins"].append(coin)
        for strategy, role, rows, radii in requests.values():
            self._choose_points(strategy, role, rows, radii, nxt)
        for j in active:
            self.accrued[j] = self.accrued[j] - eps ** 2 * float(jp(fx[j], params.p))
            self.pos[j] = nxt[j]
            self.steps[j] += 1
            if self.keep_positions:
                self.positions[j].append(self.pos[j].copy())
        inside = pr.domain.contains(self.pos[active])
        still = []
        for j, ins in zip(active, inside):
            if not ins:
                self.done[j] = True
                self.final[j] = self.accrued[j] + _scalar(pr.g, self.pos[j])
            elif self.steps[j] < self.config.max_steps:
                still.append(j)
            else:
                self.final[j] = self.accrued[j]
        return still

    def run(self) -> list:
        if not bool(self.pr.domain.contains(self.pos[:1])[0]):
            raise DomainError("the starting point must lie in the domain")
        active = list(range(len(self.indices)))
        while active:
            active = self.turn(active)
        return [GameTranscript(self.positions[j], self.records[j]["c"], self.records[j]["coins"],
                               self.final[j], self.done[j], self.accrued[j])
                for j in range(len(self.indices))]


def estimate_value(x0, strategy_I: Strategy, strategy_II: Strategy, n_rollouts: int,
                   config: GameConfig, workers: int = 1, keep_transcripts: bool = False,
                   keep_positions: bool = False) -> ValueEstimate:
    """Mean payoff over terminated rollouts, its standard error and the cap fraction.

    Rollout ``i`` uses the substreams of ``(config.rng_seed, i)`` and its
    transcript equals ``play_game`` with those streams, so the result depends
    only on the seed and ``n_rollouts``. Rollouts are split into ``workers``
    contiguous groups, each advanced in lockstep.
    """
    if n_rollouts < 2:
        raise DomainError("n_rollouts must be at least 2")
    keep = keep_positions or keep_transcripts
    workers = max(1, min(int(workers), n_rollouts))
    bounds = np.linspace(0, n_rollouts, workers + 1).astype(int)
    groups = [range(bounds[w], bounds[w + 1]) for w in range(workers)]

    def run(group):
        return _Lockstep(x0, strategy_I, strategy_II, config, group, keep).run()

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, groups))
    else:
        parts = [run(g) for g in groups]
    transcripts = [t for part in parts for t in part]
    done = np.array([t.terminated for t in transcripts])
    payoffs = np.array([t.final_payoff for t in transcripts])[done]
    if payoffs.size == 0:
        raise AllCappedError(f"none of {n_rollouts} rollouts terminated")
    mean = float(_pairwise_sum(payoffs) / payoffs.size)
    if payoffs.size > 1:
        var = float(_pairwise_sum((payoffs - mean) ** 2) / (payoffs.size - 1))
        stderr = math.sqrt(var / payoffs.size)
    else:
        stderr = math.inf
    return ValueEstimate(mean, stderr, 1.0 - payoffs.size / n_rollouts, n_rollouts,
                         int(payoffs.size), config.rng_seed, payoffs,
                         transcripts if keep_transcripts else [])


def _pairwise_sum(x: np.ndarray) -> float:
    """Order-fixed pairwise reduction (independent of worker scheduling)."""
    x = np.asarray(x, dtype=float)
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0]) if x.size else 0.0


def write_transcripts_jsonl(estimate: ValueEstimate, path, elide_above: Optional[int] = 1000) -> Path:
    """One JSON record per rollout followed by a summary record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, t in enumerate(estimate.transcripts):
            rec = {"rollout": i, **t.to_record(elide_above)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": estimate.summary()}, sort_keys=True) + "\n")
    return path


def submartingale_increments(transcript: GameTranscript, solution: DPPSolution) -> np.ndarray:
    """``u(x_{k+1}) + accrued_{k+1} - u(x_k) - accrued_k`` along a transcript."""
    pr = solution.problem
    U = solution.composite()
    pos = np.asarray(transcript.positions, dtype=float).reshape(-1, pr.params.d)
    vals = U(pos)
    fx = np.asarray(pr.f(pos[:-1]), dtype=float).reshape(-1)
    step_pay = -pr.epsilon ** 2 * np.asarray(jp(fx, pr.params.p), dtype=float).reshape(-1)
    return vals[1:] - vals[:-1] + step_pay
