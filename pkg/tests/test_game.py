import json

import numpy as np
import pytest

from oracles import interval_problem
from pmvlab import (
    AllCappedError,
    DomainError,
    GameConfig,
    GameState,
    Strategy,
    StrategyViolation,
    estimate_value,
    play_game,
    play_round,
    push_strategy,
    quasi_optimal_strategies,
    random_strategy,
    replay_payoff,
    solve,
    submartingale_increments,
    write_transcripts_jsonl,
)
from pmvlab.game import rollout_rngs, uniform_in_ball


@pytest.fixture(scope="module")
def solved():
    prob = interval_problem(3.0, 0.2)
    return solve(prob)


def test_uniform_in_ball_stays_inside():
    rng = np.random.default_rng(0)
    c = np.array([0.5, -0.5])
    pts = np.array([uniform_in_ball(c, 0.3, rng) for _ in range(2000)])
    assert np.all(np.linalg.norm(pts - c, axis=1) <= 0.3)
    # the radial law of a uniform point in a disc has E|y|^2 = r^2 / 2
    assert np.mean(np.sum((pts - c) ** 2, axis=1)) == pytest.approx(0.045, rel=0.05)


def test_play_round_rejects_outside_and_illegal_moves(solved):
    prob = solved.problem
    cfg = GameConfig(prob)
    rng = np.random.default_rng(0)
    I, II = quasi_optimal_strategies(solved)
    with pytest.raises(DomainError):
        play_round(GameState(np.array([2.0])), I, II, rng, cfg)
    bad_c = Strategy(lambda s, r: 1e9, I.choose_point)
    with pytest.raises(StrategyViolation):
        play_round(GameState(np.array([0.0])), bad_c, bad_c, rng, cfg)
    far = Strategy(II.choose_c, lambda s, c, r, role, rng: c + 10 * r)
    with pytest.raises(StrategyViolation):
        for _ in range(50):
            play_round(GameState(np.array([0.0])), far, far, rng, cfg)


def test_payoff_replays_from_positions(solved):
    cfg = GameConfig(solved.problem)
    I, II = quasi_optimal_strategies(solved)
    game_rng, strat_rng = rollout_rngs(3, 0)
    t = play_game([0.1], I, II, cfg, game_rng, strat_rng)
    assert t.terminated
    assert replay_payoff(t, solved.problem) == pytest.approx(t.final_payoff, abs=1e-14)
    assert len(t.positions) == len(t.c_choices) + 1 == len(t.coin_outcomes) + 1
    incs = submartingale_increments(t, solved)
    assert incs.shape == (len(t.c_choices),)


def test_lockstep_matches_sequential_play(solved):
    prob = solved.problem
    cfg = GameConfig(prob, rng_seed=11)
    I, II = quasi_optimal_strategies(solved)
    R = random_strategy(prob)
    for a, b in ((I, II), (R, II), (I, R), (push_strategy([1.0], problem=prob), II)):
        est = estimate_value([0.0], a, b, 12, cfg, keep_transcripts=True, keep_positions=True)
        for i, t in enumerate(est.transcripts):
            g, s = rollout_rngs(11, i)
            ref = play_game([0.0], a, b, cfg, g, s)
            assert t.final_payoff == ref.final_payoff
            assert t.coin_outcomes == ref.coin_outcomes
            assert np.array_equal(np.asarray(t.positions), np.asarray(ref.positions))


def test_estimate_is_independent_of_workers(solved):
    cfg = GameConfig(solved.problem, rng_seed=5)
    I, II = quasi_optimal_strategies(solved)
    one = estimate_value([0.0], I, II, 40, cfg, workers=1)
    three = estimate_value([0.0], I, II, 40, cfg, workers=3)
    assert np.array_equal(one.payoffs, three.payoffs)
    assert one.mean == three.mean and one.stderr == three.stderr


def test_quasi_optimal_play_estimates_solution(solved):
    cfg = GameConfig(solved.problem, rng_seed=1)
    I, II = quasi_optimal_strategies(solved)
    est = estimate_value([0.0], I, II, 400, cfg)
    u0 = float(solved(np.array([[0.0]]))[0])
    assert est.cap_fraction == 0.0
    assert abs(est.mean - u0) <= max(4 * est.stderr, 0.03)


def test_noise_only_game_is_a_martingale():
    # p = 2, f = 0: the position is a random walk, so E[g(exit)] = g(x0) for affine g
    prob = interval_problem(2.0, 0.2, f=0.0, g=lambda x: x[:, 0])
    R = random_strategy(prob)
    est = estimate_value([0.3], R, R, 4000, GameConfig(prob, rng_seed=2))
    assert abs(est.mean - 0.3) <= 4 * est.stderr


def test_step_cap_is_reported():
    prob = interval_problem(3.0, 0.2)
    R = random_strategy(prob)
    with pytest.raises(AllCappedError):
        estimate_value([0.0], R, R, 5, GameConfig(prob, max_steps=1))
    with pytest.raises(DomainError):
        GameConfig(prob, max_steps=0)


def test_transcripts_jsonl(solved, tmp_path):
    cfg = GameConfig(solved.problem)
    I, II = quasi_optimal_strategies(solved)
    est = estimate_value([0.0], I, II, 3, cfg, keep_transcripts=True, keep_positions=True)
    path = write_transcripts_jsonl(est, tmp_path / "t.jsonl", elide_above=2)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 4
    assert "summary" in lines[-1]
    assert all("positions_elided" in rec or len(rec["positions"]) <= 2 for rec in lines[:-1])


def test_push_strategy_moves_to_boundary_of_ball():
    P = push_strategy([0.0, 2.0], c=1.0)
    pt = P.choose_point(None, np.array([0.1, 0.1]), 0.5, "maximizer", None)
    np.testing.assert_allclose(pt, [0.1, 0.6])
    with pytest.raises(DomainError):
        push_strategy([1.0])
