import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairtradeoff.decorrelate import (
    DecorrelationConfig,
    DecorrelationError,
    _minimize_block,
    _Problem,
    _unaware_blocks,
    accuracy_term,
    budget_vector,
    correlation_term,
    evaluate_transfer,
    expand_transform,
    fairness_rows,
    fairness_violation,
    identity_transform,
    is_column_stochastic,
    lagrangian,
    project_simplex,
    solve_decorrelation_aware,
    solve_decorrelation_unaware,
)
from fairtradeoff.fairlp import FairnessBudget, NeighborMatrix, fair_solution, neighbor_matrix_from_pairs
from fairtradeoff.quantizer import DiscreteJoint, views

import oracles


def joint_views(J):
    return views(DiscreteJoint(J))


def random_stochastic(rng, rows, cols, sharp=1.0):
    T = rng.gamma(sharp, size=(rows, cols))
    return T / T.sum(axis=0)


def random_neighbors(rng, n, k=3):
    pairs = []
    for _ in range(k):
        i, j = sorted(rng.choice(n, 2, replace=False))
        pairs.append((int(i), int(j), float(rng.uniform(0.1, 1.0))))
    return neighbor_matrix_from_pairs(pairs, n, 1.0, 1.0)


# ---------------------------------------------------------------------------
# simplex projection


def test_projection_examples():
    assert project_simplex(np.array([0.5, 0.5, 0.5])) == pytest.approx([1 / 3] * 3, abs=1e-15)
    assert project_simplex(np.array([2.0, 0.0, 0.0])).tolist() == [1.0, 0.0, 0.0]
    w = np.array([0.2, 0.3, 0.5])
    assert project_simplex(w) == pytest.approx(w, abs=1e-15)
    with pytest.raises(ValueError):
        project_simplex(np.array([np.nan, 1.0]))


def test_projection_columnwise():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 4)) * 3
    P = project_simplex(M)
    for k in range(4):
        assert P[:, k] == pytest.approx(project_simplex(M[:, k]), abs=1e-15)
    assert is_column_stochastic(P)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.floats(0.01, 100))
def test_projection_properties(seed, n, scale):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n) * scale
    p = project_simplex(v)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
    assert np.max(np.abs(project_simplex(p) - p)) <= 1e-9
    assert p == pytest.approx(oracles.simplex_projection_bisect(v), abs=1e-9)
    w = rng.dirichlet(np.ones(n))
    assert np.linalg.norm(p - v) <= np.linalg.norm(w - v) + 1e-9


# ---------------------------------------------------------------------------
# objective pieces


def test_accuracy_identity_equals_fair_accuracy():
    rng = np.random.default_rng(1)
    J = oracles.random_joint(rng, 6)
    v = joint_views(J)
    res = fair_solution(v, FairnessBudget(dp=0.02))
    assert accuracy_term(np.eye(6), res.s_fair, v) == pytest.approx(res.acc_fair, abs=1e-12)
    ra = fair_solution(v, FairnessBudget(dp=0.02), aware=True)
    assert accuracy_term(identity_transform(6, True), ra.s_fair, v) == pytest.approx(ra.acc_fair, abs=1e-12)


def test_accuracy_column_collapse():
    rng = np.random.default_rng(2)
    v = joint_views(oracles.random_joint(rng, 5))
    s = rng.uniform(size=5)
    T = np.zeros((5, 5))
    T[3] = 1.0
    expected = s[3] * v.p1.sum() + (1 - s[3]) * v.p0.sum()
    assert accuracy_term(T, s, v) == pytest.approx(expected, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_accuracy_matches_pushforward(seed, n):
    rng = np.random.default_rng(seed)
    J = oracles.random_joint(rng, n)
    v = joint_views(J)
    T = random_stochastic(rng, n, n)
    s = rng.uniform(size=n)
    acc = accuracy_term(T, s, v)
    assert 0 <= acc <= 1
    assert acc == pytest.approx(oracles.transformed_accuracy(oracles.pushforward(J, T), s), abs=1e-12)


def test_correlation_examples():
    J = np.zeros((2, 2, 2))
    J[0, 0, :] = 0.25
    J[1, 1, :] = 0.25
    v = joint_views(J)
    assert correlation_term(np.eye(2), v) == pytest.approx(2.0)
    assert correlation_term(np.full((2, 2), 0.5), v) == pytest.approx(0.0)
    rng = np.random.default_rng(3)
    v = joint_views(oracles.random_joint(rng, 7))
    assert correlation_term(np.eye(7), v) == pytest.approx(np.abs(v.pa - v.pb).sum())
    col = rng.dirichlet(np.ones(7))
    assert correlation_term(np.tile(col[:, None], 7), v) == pytest.approx(0.0, abs=1e-15)


def test_dimension_mismatch():
    v = joint_views(oracles.random_joint(np.random.default_rng(0), 3))
    with pytest.raises(DecorrelationError):
        accuracy_term(np.eye(4), np.zeros(3), v)
    with pytest.raises(DecorrelationError):
        accuracy_term((np.eye(3), np.eye(3)), np.zeros(6), v)


# ---------------------------------------------------------------------------
# fairness rows


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_rows_match_pushforward_oracle(seed, n):
    rng = np.random.default_rng(seed)
    J = oracles.random_joint(rng, n)
    v = joint_views(J)
    W = random_neighbors(rng, n)
    T = random_stochastic(rng, n, n)
    s = rng.uniform(size=n)
    got = fairness_rows(T, s, v, W)
    expected = oracles.transformed_rows(J, s, oracles.pushforward(J, T), W.W @ (T.T @ s))
    assert got == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_aware_rows_match_pushforward_oracle(seed, n):
    rng = np.random.default_rng(seed)
    J = oracles.random_joint(rng, n)
    v = joint_views(J)
    W = random_neighbors(rng, n)
    Ta, Tb = random_stochastic(rng, 2 * n, n), random_stochastic(rng, 2 * n, n)
    s = rng.uniform(size=2 * n)
    got = fairness_rows((Ta, Tb), s, v, W)
    eff = W.W @ (v.pa * (Ta.T @ s) + v.pb * (Tb.T @ s))
    expected = oracles.transformed_rows(J, s, oracles.pushforward_aware(J, Ta, Tb), eff)
    assert got == pytest.approx(expected, abs=1e-12)
    Jt = oracles.pushforward_aware(J, Ta, Tb)
    assert correlation_term((Ta, Tb), v) == pytest.approx(oracles.transformed_correlation(Jt), abs=1e-12)
    assert accuracy_term((Ta, Tb), s, v) == pytest.approx(oracles.transformed_accuracy(Jt, s), abs=1e-12)


def test_identity_rows_equal_lp_residuals():
    rng = np.random.default_rng(4)
    J = oracles.random_joint(rng, 6)
    v = joint_views(J)
    s = rng.uniform(size=6)
    rows = fairness_rows(np.eye(6), s, v)
    gaps = oracles.group_gaps(J, s)
    assert rows == pytest.approx([gaps["dp"], gaps["eop"], -gaps["pe"], gaps["ea"]], abs=1e-12)


def test_expansion_identity():
    rng = np.random.default_rng(5)
    n = 5
    v = joint_views(oracles.random_joint(rng, n))
    W = random_neighbors(rng, n)
    (block,) = _unaware_blocks(v, W)
    T = random_stochastic(rng, n, n)
    s = rng.uniform(size=n)
    Tt = expand_transform(T)
    assert Tt == pytest.approx(np.block([[T, np.zeros((n, n))], [np.zeros((n, n)), T]]))
    s_tilde = np.r_[s, 1 - s]
    P = np.vstack([block.alpha, block.beta])
    assert s_tilde @ Tt @ P == pytest.approx(fairness_rows(T, s, v, W), abs=1e-13)


def test_violation_inherited_at_identity():
    rng = np.random.default_rng(6)
    v = joint_views(oracles.random_joint(rng, 6))
    W = random_neighbors(rng, 6)
    s = rng.uniform(size=6)
    f = np.abs(fairness_rows(np.eye(6), s, v, W))
    g = fairness_violation(np.eye(6), s, v, W, f)
    assert len(g) == 2 * W.n_rows + 8
    assert np.all(g == 0)


def test_violation_large_budget():
    rng = np.random.default_rng(7)
    v = joint_views(oracles.random_joint(rng, 5))
    W = random_neighbors(rng, 5)
    for _ in range(20):
        T = random_stochastic(rng, 5, 5)
        assert np.all(fairness_violation(T, rng.uniform(size=5), v, W, np.full(4 + W.n_rows, 10.0)) == 0)


def test_violation_hand_case(hand_views):
    T = np.array([[0.7, 0.2], [0.3, 0.8]])
    s = np.array([0.9, 0.4])
    g = fairness_violation(T, s, hand_views, None, np.zeros(4))
    eff = T.T @ s
    dp = (hand_views.pa - hand_views.pb) @ eff
    eop = (hand_views.pa1 - hand_views.pb1) @ eff
    pe = (hand_views.pa0 - hand_views.pb0) @ (1 - eff)
    ea = (hand_views.pa_1 - hand_views.pb_1) @ eff + (hand_views.pa_0 - hand_views.pb_0) @ (1 - eff)
    r = np.array([dp, eop, pe, ea])
    assert g == pytest.approx(np.maximum(np.r_[-r, r], 0), abs=1e-14)


def test_budget_vector_order():
    b = FairnessBudget(dp=0.1, eop=0.2, pe=0.3, ea=0.4, ind=0.5)
    assert budget_vector(b, 2).tolist() == [0.1, 0.2, 0.3, 0.4, 0.5, 0.5]
    assert budget_vector(FairnessBudget(dp=0.1), 1)[1:].tolist() == [math.inf] * 4


# ---------------------------------------------------------------------------
# Lagrangian


def _setup(seed, n=8, aware=False):
    rng = np.random.default_rng(seed)
    J = oracles.random_joint(rng, n)
    v = joint_views(J)
    W = random_neighbors(rng, n)
    s = rng.uniform(size=2 * n if aware else n)
    f = rng.uniform(0, 0.05, size=4 + W.n_rows)
    rho = rng.uniform(0, 5, size=2 * len(f))
    return rng, v, W, s, f, rho


def test_penalty_free_reduction():
    rng, v, W, s, f, _ = _setup(0)
    cfg = DecorrelationConfig(lam=3.0, beta=2.0, tau=1e-12)
    T = random_stochastic(rng, 8, 8)
    big = np.full_like(f, 10.0)
    expected = -3.0 * accuracy_term(T, s, v) + 2.0 * correlation_term(T, v)
    assert lagrangian(T, np.zeros(2 * len(f)), cfg, s, v, W, big) == pytest.approx(expected, abs=1e-12)


def test_lagrangian_rejects_bad_rho():
    rng, v, W, s, f, rho = _setup(1)
    with pytest.raises(DecorrelationError):
        lagrangian(np.eye(8), -rho, DecorrelationConfig(), s, v, W, f)
    with pytest.raises(DecorrelationError):
        lagrangian(np.eye(8), rho[:-1], DecorrelationConfig(), s, v, W, f)


def test_penalty_monotone_in_violation():
    rng, v, W, s, f, rho = _setup(2)
    cfg = DecorrelationConfig()
    T = random_stochastic(rng, 8, 8)
    g = fairness_violation(T, s, v, W, f)
    base = lagrangian(T, rho, cfg, s, v, W, f)
    active = np.flatnonzero(g > 0)
    assert len(active) > 0
    # shrinking the budget on a violated row raises that row's violation
    k = active[0] % len(f)
    tighter = f.copy()
    tighter[k] = max(0.0, f[k] - 0.01)
    if tighter[k] < f[k]:
        assert lagrangian(T, rho, cfg, s, v, W, tighter) > base


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_convexity_unaware(seed):
    rng, v, W, s, f, rho = _setup(seed)
    cfg = DecorrelationConfig()
    for _ in range(20):
        T1, T2 = random_stochastic(rng, 8, 8, 0.3), random_stochastic(rng, 8, 8, 0.3)
        th = rng.uniform()
        mid = lagrangian(th * T1 + (1 - th) * T2, rho, cfg, s, v, W, f)
        ends = th * lagrangian(T1, rho, cfg, s, v, W, f) + (1 - th) * lagrangian(T2, rho, cfg, s, v, W, f)
        assert mid <= ends + 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_convexity_aware(seed):
    rng, v, W, s, f, rho = _setup(seed, aware=True)
    cfg = DecorrelationConfig()
    for _ in range(20):
        A = [random_stochastic(rng, 16, 8, 0.3) for _ in range(4)]
        th = rng.uniform()
        pair = (th * A[0] + (1 - th) * A[2], th * A[1] + (1 - th) * A[3])
        mid = lagrangian(pair, rho, cfg, s, v, W, f)
        ends = th * lagrangian((A[0], A[1]), rho, cfg, s, v, W, f) + (1 - th) * lagrangian((A[2], A[3]), rho, cfg, s, v, W, f)
        assert mid <= ends + 1e-9


@pytest.mark.parametrize("aware", [False, True])
def test_gradient_matches_finite_differences(aware):
    rng, v, W, s, f, rho = _setup(3, n=5, aware=aware)
    from fairtradeoff.decorrelate import _aware_blocks

    blocks = _aware_blocks(v, W) if aware else _unaware_blocks(v, W)
    cfg = DecorrelationConfig(lam=2.0, beta=3.0, tau=4.0)
    problem = _Problem(blocks, s, f, cfg)
    rows = 10 if aware else 5
    Ts = [random_stochastic(rng, rows, 5) for _ in blocks]
    for k in range(len(Ts)):
        _, grad = problem.grad(Ts, k, rho)
        h = 1e-7
        for i, j in [(0, 0), (2, 3), (rows - 1, 4)]:
            up = [T.copy() for T in Ts]
            dn = [T.copy() for T in Ts]
            up[k][i, j] += h
            dn[k][i, j] -= h
            fd = (problem.value(up, rho) - problem.value(dn, rho)) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_inner_loop_best_so_far_monotone_and_stochastic():
    rng, v, W, s, f, rho = _setup(4)
    problem = _Problem(_unaware_blocks(v, W), s, f, DecorrelationConfig(max_inner=300))
    T, trace = _minimize_block(problem, [np.eye(8)], 0, rho)
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert is_column_stochastic(T)
    assert problem.value([T], rho) == pytest.approx(trace[-1])


# ---------------------------------------------------------------------------
# solvers


def test_solver_nothing_to_decorrelate():
    rng = np.random.default_rng(9)
    half = oracles.random_joint(rng, 6)[:, 0, :]
    J = np.stack([half, half], axis=1) / (2 * half.sum())
    v = joint_views(J)
    budget = FairnessBudget(dp=0.0)
    res = fair_solution(v, budget)
    T, state, rep = solve_decorrelation_unaware(res.s_fair, v, budget=budget)
    assert is_column_stochastic(T)
    assert rep.final_correlation == pytest.approx(0.0, abs=1e-12)
    assert rep.baseline_correlation == pytest.approx(0.0, abs=1e-12)
    assert rep.acc_after == pytest.approx(res.acc_fair, abs=1e-3)
    assert np.all(state.rho >= 0)


def test_solver_collapses_when_correlation_dominates():
    rng = np.random.default_rng(10)
    J = oracles.correlated_joint(rng, 8)
    v = joint_views(J)
    res = fair_solution(v, FairnessBudget(dp=0.05))
    cfg = DecorrelationConfig(lam=1.0, beta=100.0)
    T, _, rep = solve_decorrelation_unaware(res.s_fair, v, config=cfg, f=np.full(4, 10.0))
    assert rep.final_correlation <= 1e-2
    assert is_column_stochastic(T)


def test_solver_dp_budget_n8():
    rng = np.random.default_rng(11)
    v = joint_views(oracles.correlated_joint(rng, 8))
    budget = FairnessBudget(dp=0.03)
    res = fair_solution(v, budget)
    T, state, rep = solve_decorrelation_unaware(res.s_fair, v, budget=budget)
    assert rep.max_violation <= 1e-3
    assert rep.final_correlation < rep.baseline_correlation
    assert rep.converged
    assert state.outer_iterations == len(state.residual_history)


def test_solver_beats_random_search_n2():
    """At N=2 the penalty-free objective is compared against dense random sampling of the feasible set."""
    rng = np.random.default_rng(12)
    J = oracles.correlated_joint(rng, 2)
    v = joint_views(J)
    s = fair_solution(v, FairnessBudget()).s_fair
    cfg = DecorrelationConfig()
    T, _, _ = solve_decorrelation_unaware(s, v, config=cfg)
    big = np.full(4, math.inf)
    zero = np.zeros(8)
    solved = lagrangian(T, zero, cfg, s, v, None, big)
    grid = np.linspace(0, 1, 201)
    best = min(
        lagrangian(np.array([[a, b], [1 - a, 1 - b]]), zero, cfg, s, v, None, big) for a in grid for b in grid
    )
    assert solved <= best + 1e-3


def test_aware_symmetric_groups():
    rng = np.random.default_rng(13)
    half = oracles.random_joint(rng, 5)[:, 0, :]
    v = joint_views(np.stack([half, half], axis=1) / (2 * half.sum()))
    budget = FairnessBudget(dp=0.0)
    res = fair_solution(v, budget, aware=True)
    Ta, Tb, _, rep = solve_decorrelation_aware(res.s_fair, v, budget=budget)
    assert is_column_stochastic(Ta) and is_column_stochastic(Tb)
    assert correlation_term((np.vstack([np.eye(5), np.zeros((5, 5))]),) * 2, v) == pytest.approx(0.0)
    assert rep.final_correlation <= 1e-2
    assert rep.max_violation <= 1e-3


def test_aware_disjoint_supports():
    J = np.zeros((4, 2, 2))
    J[:2, 0, :] = 0.125
    J[2:, 1, :] = 0.125
    J[0, 0] = [0.05, 0.2]
    J[3, 1] = [0.2, 0.05]
    J /= J.sum()
    v = joint_views(J)
    res = fair_solution(v, FairnessBudget(), aware=True)
    Ta, Tb, _, rep = solve_decorrelation_aware(res.s_fair, v, f=np.full(4, 10.0))
    assert rep.baseline_correlation == pytest.approx(2.0)
    assert rep.final_correlation <= 1e-2


def test_solver_length_checks():
    v = joint_views(oracles.random_joint(np.random.default_rng(0), 3))
    with pytest.raises(DecorrelationError):
        solve_decorrelation_unaware(np.zeros(6), v)
    with pytest.raises(DecorrelationError):
        solve_decorrelation_aware(np.zeros(3), v)
    with pytest.raises(DecorrelationError):
        solve_decorrelation_unaware(np.zeros(3), v, f=np.zeros(4), budget=FairnessBudget())


def test_config_validation():
    with pytest.raises(ValueError):
        DecorrelationConfig(lam=0)
    with pytest.raises(ValueError):
        DecorrelationConfig(lr_initial=1e-12, lr_final=1e-2)
    cfg = DecorrelationConfig(max_inner=5)
    rates = cfg.learning_rates()
    assert rates[0] == pytest.approx(1e-2) and rates[-1] == pytest.approx(1e-12)
    assert DecorrelationConfig.from_dict(cfg.to_dict()) == cfg


def test_iteration_cap_reports_not_converged():
    rng = np.random.default_rng(14)
    v = joint_views(oracles.correlated_joint(rng, 6))
    s = fair_solution(v, FairnessBudget(dp=0.0)).s_fair
    cfg = DecorrelationConfig(max_outer=1, max_inner=3)
    T, state, rep = solve_decorrelation_unaware(s, v, config=cfg, budget=FairnessBudget(dp=0.0))
    assert not rep.converged
    assert state.outer_iterations == 1
    assert is_column_stochastic(T)


# ---------------------------------------------------------------------------
# transfer report


def test_report_identity_and_collapse():
    rng = np.random.default_rng(15)
    v = joint_views(oracles.random_joint(rng, 5))
    s = rng.uniform(size=5)
    rep = evaluate_transfer(np.eye(5), s, v, None, np.full(4, 1.0))
    assert rep.correlation_reduction == 0.0 and rep.acc_reduction == 0.0
    col = rng.dirichlet(np.ones(5))
    rep = evaluate_transfer(np.tile(col[:, None], 5), s, v, None, np.full(4, 1.0))
    assert rep.correlation_reduction == pytest.approx(rep.baseline_correlation, abs=1e-12)
    doc = rep.to_dict()
    assert doc["correlation_reduction"] == rep.correlation_reduction


def test_report_aware_identity_baseline_is_two():
    v = joint_views(oracles.hand_joint())
    s = np.array([1.0, 0.0, 0.0, 1.0])
    rep = evaluate_transfer(identity_transform(2, aware=True), s, v, None, np.full(4, 1.0))
    assert rep.baseline_correlation == pytest.approx(2.0)
    assert rep.correlation_reduction == pytest.approx(0.0)
