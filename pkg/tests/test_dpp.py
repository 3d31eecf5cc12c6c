import numpy as np
import pytest

from oracles import interval_problem
from pmvlab import (
    BracketViolationError,
    DomainError,
    NonConvergenceError,
    barrier_sub,
    barrier_super,
    derive_params,
    dpp_apply,
    poisson_fd_1d,
    radial_solution,
    solve,
    solve_bracketed,
    uniform_bound,
)
from pmvlab.dpp import SweepOperator, default_h, stencil_bytes


def test_radial_solution_matches_interval_oracle():
    # u = (2/3)(|x|^(3/2) - 1) solves (|u'| u')' = 1 on (-1, 1) with zero data:
    # u' = sign(x) |x|^(1/2), so |u'| u' = x
    u = radial_solution(3.0, 1, 1.0, 1.0)
    x = np.linspace(-1, 1, 41)
    np.testing.assert_allclose(u(x), (2 / 3) * (np.abs(x) ** 1.5 - 1), rtol=0, atol=1e-15)


def test_radial_solution_satisfies_equation_in_2d():
    from pmvlab.expansion import radial_power_field
    from pmvlab.operators import p_laplacian_exact

    # the radial solution is a shifted multiple of |x|^(p/(p-1))
    p, d, f = 4.0, 2, 2.5
    u = radial_solution(p, d, f, 1.0)
    k = (p - 1) / p * (f / d) ** (1 / (p - 1))
    field = radial_power_field(d, p, c=k)
    x = np.array([[0.3, -0.4]])
    assert u(x)[0] == pytest.approx(field(x)[0] - k, rel=1e-14)
    assert p_laplacian_exact(field, x[0], p) == pytest.approx(f, rel=1e-12)


def test_poisson_fd_is_exact_for_quadratics():
    x, v = poisson_fd_1d(lambda y: np.full(len(y), 2.0), lambda y: y[:, 0] ** 2, -1.0, 1.0, n=101)
    np.testing.assert_allclose(v, x ** 2, atol=1e-12)
    with pytest.raises(DomainError):
        poisson_fd_1d(lambda y: y, lambda y: y, 1.0, 0.0)


def test_problem_validation():
    from pmvlab import DPPProblem, Domain

    params = derive_params(3, 1)
    thin = Domain.box([-1.0], [1.0], r_out=0.01)
    with pytest.raises(DomainError):
        DPPProblem(thin, lambda x: x[:, 0], lambda x: x[:, 0], 0.2, params)
    with pytest.raises(DomainError):
        interval_problem(3.0, 1.0)


def test_default_spacing_and_stencil_memory():
    params = derive_params(3, 1)
    assert default_h(0.1, params) == pytest.approx(0.1 * 0.1 ** (-0.2) / 8, rel=1e-14)
    assert stencil_bytes(10, 4, 5, 2) == 10 * 2 * 4 * 5 * (4 * 12 + 8)


def test_barriers_are_certified():
    prob = interval_problem(3.0, 0.2)
    sub = barrier_sub(prob)
    new = dpp_apply(sub, prob).values
    assert np.all(new >= sub.values)
    sup = barrier_super(prob)
    assert np.all(dpp_apply(sup, prob).values <= sup.values)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_backends_agree_bit_for_bit(p):
    prob = interval_problem(p, 0.2, f=lambda x: np.cos(3 * x[:, 0]), g=lambda x: x[:, 0])
    rng = np.random.default_rng(0)
    ops = [SweepOperator(prob, b) for b in ("numpy", "numba", "fused")]
    u = rng.standard_normal(ops[0].grid.size)
    out = [op.apply(u) for op in ops]
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[0], out[2])


def test_solve_interval_problem_close_to_limit():
    prob = interval_problem(3.0, 0.2, quality="default")
    sol = solve(prob)
    assert sol.final_residual <= 1e-8
    op_nodes = prob.grid().nodes()
    exact = radial_solution(3.0, 1, 1.0, 1.0)(op_nodes)
    err = np.max(np.abs(sol.u.values[sol.interior] - exact[sol.interior]))
    assert err < 0.5
    # the solution is a fixed point of the sweep
    again = dpp_apply(sol.u, prob).values
    assert np.max(np.abs(again - sol.u.values)) <= 1e-8
    assert np.all(sol.u.values[sol.interior] < 0)
    assert 0.0 < sol.contraction_ratio < 1.0


def test_bracketed_solve_and_uniform_bound():
    prob = interval_problem(3.0, 0.2)
    tol = 1e-9
    sol = solve_bracketed(prob, tol=tol)
    assert sol.bracket_gap <= 2 * tol
    assert sol.final_residual <= tol
    # the enclosure contains the fixed point reached by the plain solve
    ref = solve(prob, tol=1e-12)
    assert np.max(np.abs(ref.u.values - sol.u.values)) <= 2 * tol + 1e-11
    bound = uniform_bound(prob, [1.0])
    assert np.max(np.abs(sol.u.values)) <= bound


def test_comparison_of_ordered_data():
    tol = 1e-9
    lo = interval_problem(3.0, 0.2, f=lambda x: 1.0 + 0 * x[:, 0], g=lambda x: 0.2 + 0 * x[:, 0])
    hi = interval_problem(3.0, 0.2, f=lambda x: 2.0 + x[:, 0] ** 2, g=lambda x: 0.0 * x[:, 0])
    u1, u2 = solve(lo, tol=tol), solve(hi, tol=tol)
    assert np.all(u1.u.values - u2.u.values >= -10 * tol)


def test_negated_problem_gives_negated_solution():
    prob = interval_problem(3.0, 0.2, f=lambda x: x[:, 0], g=lambda x: 0.5 * x[:, 0])
    a = solve(prob, tol=1e-10)
    b = solve(prob.negated(), tol=1e-10)
    np.testing.assert_allclose(a.u.values, -b.u.values, atol=1e-8)


def test_gauss_seidel_reaches_same_fixed_point():
    prob = interval_problem(3.0, 0.2)
    a = solve(prob, tol=1e-10)
    b = solve(prob, init=np.zeros(prob.grid().size), tol=1e-10, method="gauss-seidel")
    np.testing.assert_allclose(a.u.values, b.u.values, atol=1e-8)


def test_non_convergence_reports_history():
    prob = interval_problem(3.0, 0.2)
    with pytest.raises(NonConvergenceError) as info:
        solve(prob, tol=1e-14, max_iter=3)
    assert len(info.value.history) == 3


def test_solve_rejects_bad_arguments():
    prob = interval_problem(3.0, 0.2)
    with pytest.raises(DomainError):
        solve(prob, init="zeros")
    with pytest.raises(DomainError):
        solve(prob, tol=0.0)
    with pytest.raises(DomainError):
        SweepOperator(prob, "cuda")


def test_p2_solution_tracks_finite_differences():
    # g is the smooth solution itself, so the exterior band carries no
    # boundary-layer mismatch
    f = lambda x: np.cos(x[:, 0])  # noqa: E731
    g = lambda x: -np.cos(x[:, 0])  # noqa: E731
    prob = interval_problem(2.0, 0.2, f=f, g=g, quality="default")
    sol = solve(prob)
    x, ref = poisson_fd_1d(f, g, -1.0, 1.0)
    nodes = prob.grid().nodes()[sol.interior, 0]
    err = np.max(np.abs(sol.u.values[sol.interior] - np.interp(nodes, x, ref)))
    assert err < 0.01


def test_constant_data_closes_bracket_at_once():
    prob = interval_problem(3.0, 0.2, f=0.0, g=0.7)
    sol = solve_bracketed(prob, tol=1e-9)
    np.testing.assert_allclose(sol.u.values, 0.7, atol=2e-9)
    assert issubclass(BracketViolationError, RuntimeError)
