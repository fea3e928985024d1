"""Column-stochastic decorrelation of the cell distribution from the group.

A transform ``T`` maps original cells (columns) to transformed cells (rows);
every column is a pmf. The fair scores ``s`` live on the transformed cells, so
the effective score of original cell ``i`` is ``(T^T s)[i]``.

The optimization trades accuracy (weight ``lam``) against the L1 group
correlation ``||T (p_a - p_b)||_1`` (weight ``beta``) while keeping every
fairness gap inside its budget through an augmented Lagrangian. The aware
variant has one ``2N x N`` matrix per group and is solved by alternating
block updates (ADMM).

Fairness rows, in order: DP, EOp (Y=1 rate), PE (Y=0 rate), EA, then one row
per neighbour pair. Each row is ``r_j = s^T T alpha_j + (1-s)^T T beta_j``
with ``alpha_j`` / ``beta_j`` columns of the stacked difference matrices.
The PE row weights negative predictions, so it carries the true-negative
rate gap: the negated false-positive gap, equal in magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fairlp import FairnessBudget, NeighborMatrix, ScoreVector
from .quantizer import ProbabilityViews, ZeroMassError

N_GROUP_ROWS = 4


class DecorrelationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# simplex projection


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1}.

    A 2-D input is projected column by column.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("project_simplex needs finite entries")
    if v.ndim == 1:
        return project_columns(v[:, None])[:, 0]
    if v.ndim != 2:
        raise ValueError("project_simplex takes a vector or a matrix")
    return project_columns(v)


def project_columns(M: np.ndarray) -> np.ndarray:
    n, k = M.shape
    u = -np.sort(-M, axis=0)
    css = np.cumsum(u, axis=0) - 1.0
    ks = np.arange(1, n + 1, dtype=float)[:, None]
    support = u - css / ks > 0
    # last index where the condition holds (it always holds at index 0)
    last = n - 1 - np.argmax(support[::-1], axis=0)
    theta = css[last, np.arange(k)] / (last + 1)
    return np.maximum(M - theta, 0.0)


def is_column_stochastic(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T)
    return bool(np.all(T >= 0) and np.all(np.abs(T.sum(axis=0) - 1.0) <= tol))


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class DecorrelationConfig:
    lam: float = 15.0
    beta: float = 25.0
    tau: float = 10.0
    lr_initial: float = 1e-2
    lr_final: float = 1e-12
    momentum: float = 0.9
    tol: float = 1e-4
    max_outer: int = 200
    max_inner: int = 2000

    def __post_init__(self) -> None:
        for name in ("lam", "beta", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr_initial > self.lr_final > 0:
            raise ValueError("learning rates need initial > final > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("tolerance and iteration caps must be positive")

    def learning_rates(self) -> np.ndarray:
        """Geometric decay from ``lr_initial`` to ``lr_final`` over the inner budget."""
        if self.max_inner == 1:
            return np.array([self.lr_initial])
        return np.geomspace(self.lr_initial, self.lr_final, self.max_inner)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> "DecorrelationConfig":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


@dataclass
class MultiplierState:
    rho: np.ndarray
    outer_iterations: int = 0
    residual_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rho": self.rho.tolist(), "outer_iterations": self.outer_iterations, "residual_history": self.residual_history}


@dataclass(frozen=True)
class TransferReport:
    baseline_correlation: float
    final_correlation: float
    acc_before: float
    acc_after: float
    max_violation: float
    converged: bool

    @property
    def correlation_reduction(self) -> float:
        return self.baseline_correlation - self.final_correlation

    @property
    def acc_reduction(self) -> float:
        return self.acc_before - self.acc_after

    def to_dict(self) -> dict:
        return {
            "baseline_correlation": self.baseline_correlation,
            "final_correlation": self.final_correlation,
            "correlation_reduction": self.correlation_reduction,
            "acc_before": self.acc_before,
            "acc_after": self.acc_after,
            "acc_reduction": self.acc_reduction,
            "max_violation": self.max_violation,
            "converged": self.converged,
        }


def budget_vector(budget: FairnessBudget, n_pairs: int) -> np.ndarray:
    """Budgets in row order [DP, EOp, PE, EA, IF x B]; inactive rows get inf."""

    def val(x):
        return math.inf if x is None else float(x)

    return np.array([val(budget.dp), val(budget.eop), val(budget.pe), val(budget.ea)] + [val(budget.ind)] * n_pairs)


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class _Block:
    """Per-matrix data: accuracy weights, correlation weights and row columns."""

    p1: np.ndarray
    p0: np.ndarray
    d: np.ndarray
    alpha: np.ndarray  # N x R
    beta: np.ndarray  # N x R


def _or_zero(x: np.ndarray | None, n: int) -> np.ndarray:
    return np.zeros(n) if x is None else x


def _stack(cols: list[np.ndarray], W_part: np.ndarray) -> np.ndarray:
    return np.column_stack(cols + [W_part.T]) if W_part.size else np.column_stack(cols)


def _unaware_blocks(v: ProbabilityViews, W: NeighborMatrix) -> list[_Block]:
    n = v.n_cells
    z = np.zeros(n)
    pa, pb = v.require("pa", "pb")
    diff = lambda a, b: _or_zero(getattr(v, a), n) - _or_zero(getattr(v, b), n)  # noqa: E731
    alpha = _stack([pa - pb, diff("pa1", "pb1"), z, diff("pa_1", "pb_1")], W.W)
    beta = _stack([z, z, diff("pa0", "pb0"), diff("pa_0", "pb_0")], np.zeros_like(W.W))
    return [_Block(v.p1, v.p0, pa - pb, alpha, beta)]


def group_neighbor_weights(W: NeighborMatrix, p_g: np.ndarray) -> np.ndarray:
    """``W diag(p_g)``: neighbour rows weighted by one group's cell pmf."""
    return W.W * p_g[None, :]


def _aware_blocks(v: ProbabilityViews, W: NeighborMatrix) -> list[_Block]:
    n = v.n_cells
    z = np.zeros(n)
    if min(v.group_priors) <= 0:
        raise ZeroMassError("aware decorrelation needs both groups to have positive mass")
    blocks = []
    for g, sign in ((0, 1.0), (1, -1.0)):
        p_g = v.group(g)
        # group rows are a-minus-b differences; neighbour rows add both groups
        alpha = _stack(
            [sign * p_g, sign * _or_zero(v.group_label(g, 1), n), z, sign * v.label_given_group(g, 1)],
            group_neighbor_weights(W, p_g),
        )
        beta = _stack(
            [z, z, sign * _or_zero(v.group_label(g, 0), n), sign * v.label_given_group(g, 0)],
            np.zeros_like(W.W),
        )
        blocks.append(_Block(v.pg_joint[1, g], v.pg_joint[0, g], sign * p_g, alpha, beta))
    return blocks


def _check_zero_mass(v: ProbabilityViews, budget_f: np.ndarray) -> None:
    needed = {1: ("pa1", "pb1"), 2: ("pa0", "pb0")}
    for row, names in needed.items():
        if math.isfinite(budget_f[row]) and any(getattr(v, n) is None for n in names):
            raise ZeroMassError(f"fairness row {row} conditions on a zero-mass event")


class _Problem:
    """Vectorized evaluation of the augmented Lagrangian over a list of blocks."""

    def __init__(self, blocks: list[_Block], s: np.ndarray, f: np.ndarray, config: DecorrelationConfig):
        self.blocks = blocks
        self.s = s
        self.t = 1.0 - s
        self.f = f
        self.cfg = config
        self.n_rows = blocks[0].alpha.shape[1]
        if len(f) != self.n_rows:
            raise DecorrelationError(f"budget vector has length {len(f)}, expected {self.n_rows}")
        self.F2 = np.concatenate([f, f])
        self.acc_grad = [np.outer(s, b.p1) + np.outer(self.t, b.p0) for b in blocks]

    # -- pieces -----------------------------------------------------------
    def accuracy(self, Ts) -> float:
        return float(sum(np.sum(G * T) for G, T in zip(self.acc_grad, Ts)))

    def corr_vector(self, Ts) -> np.ndarray:
        return sum(T @ b.d for T, b in zip(Ts, self.blocks))

    def rows(self, Ts) -> np.ndarray:
        r = np.zeros(self.n_rows)
        for T, b in zip(Ts, self.blocks):
            r += b.alpha.T @ (T.T @ self.s) + b.beta.T @ (T.T @ self.t)
        return r

    def violation(self, Ts) -> np.ndarray:
        r = self.rows(Ts)
        with np.errstate(invalid="ignore"):
            g = np.concatenate([-r, r]) - self.F2
        return np.where(np.isfinite(g), np.maximum(g, 0.0), 0.0)

    def value(self, Ts, rho) -> float:
        g = self.violation(Ts)
        cfg = self.cfg
        return (
            -cfg.lam * self.accuracy(Ts)
            + cfg.beta * float(np.abs(self.corr_vector(Ts)).sum())
            + float(rho @ g)
            + 0.5 * cfg.tau * float(g @ g)
        )

    # -- subgradient w.r.t. block k -------------------------------------------
    def grad(self, Ts, k: int, rho) -> tuple[float, np.ndarray]:
        cfg = self.cfg
        b = self.blocks[k]
        cv = self.corr_vector(Ts)
        g = self.violation(Ts)
        weight = np.where(g > 0, rho + cfg.tau * g, 0.0)
        R = self.n_rows
        c = weight[R:] - weight[:R]
        grad = -cfg.lam * self.acc_grad[k] + cfg.beta * np.outer(np.sign(cv), b.d)
        if np.any(c):
            grad = grad + np.outer(self.s, b.alpha @ c) + np.outer(self.t, b.beta @ c)
        value = (
            -cfg.lam * self.accuracy(Ts)
            + cfg.beta * float(np.abs(cv).sum())
            + float(rho @ g)
            + 0.5 * cfg.tau * float(g @ g)
        )
        return value, grad


def _minimize_block(problem: _Problem, Ts: list[np.ndarray], k: int, rho: np.ndarray) -> tuple[np.ndarray, list[float]]:
    """Projected subgradient with momentum on block ``k``; returns the best iterate."""
    cfg = problem.cfg
    Ts = list(Ts)
    T = Ts[k]
    vel = np.zeros_like(T)
    best_T, best_val = T, math.inf
    trace = []
    for lr in cfg.learning_rates():
        Ts[k] = T
        val, grad = problem.grad(Ts, k, rho)
        if val < best_val:
            best_val, best_T = val, T
        trace.append(best_val)
        vel = cfg.momentum * vel - lr * grad
        T = project_columns(T + vel)
    Ts[k] = T
    val = problem.value(Ts, rho)
    if val < best_val:
        best_val, best_T = val, T
    trace.append(best_val)
    return best_T, trace


def _solve(problem: _Problem, T0: list[np.ndarray]) -> tuple[list[np.ndarray], MultiplierState, bool]:
    cfg = problem.cfg
    Ts = [T.copy() for T in T0]
    rho = np.zeros(2 * problem.n_rows)
    state = MultiplierState(rho)
    converged = False
    for it in range(cfg.max_outer):
        prev = [T.copy() for T in Ts]
        for k in range(len(Ts)):
            Ts[k], _ = _minimize_block(problem, Ts, k, rho)
        step = cfg.tau * problem.violation(Ts)
        rho = rho + step
        resid = float(step @ step) + sum(float(np.sum((T - P) ** 2)) for T, P in zip(Ts, prev))
        state.rho = rho
        state.outer_iterations = it + 1
        state.residual_history.append(resid)
        if resid < cfg.tol:
            converged = True
            break
    return Ts, state, converged


# ---------------------------------------------------------------------------
# public evaluation functions


def _blocks_for(Ts, views, W, aware):
    W = W if W is not None else NeighborMatrix.empty(views.n_cells)
    return _aware_blocks(views, W) if aware else _unaware_blocks(views, W)


def _as_blocks(T, s: np.ndarray, n: int) -> tuple[list[np.ndarray], bool]:
    if isinstance(T, (tuple, list)):
        Ts = [np.asarray(x, dtype=float) for x in T]
        if len(Ts) != 2 or any(x.shape != (2 * n, n) for x in Ts) or len(s) != 2 * n:
            raise DecorrelationError("aware transforms must be two 2N x N matrices with a length-2N score")
        return Ts, True
    T = np.asarray(T, dtype=float)
    if T.shape != (n, n) or len(s) != n:
        raise DecorrelationError(f"unaware transform must be {n} x {n} with a length-{n} score")
    return [T], False


def _scores(s_fair) -> np.ndarray:
    return s_fair.values if isinstance(s_fair, ScoreVector) else np.asarray(s_fair, dtype=float)


def _default_problem(T, s_fair, views, W, f=None, config=None):
    s = _scores(s_fair)
    Ts, aware = _as_blocks(T, s, views.n_cells)
    blocks = _blocks_for(Ts, views, W, aware)
    R = blocks[0].alpha.shape[1]
    f = np.full(R, math.inf) if f is None else np.asarray(f, dtype=float)
    return _Problem(blocks, s, f, config or DecorrelationConfig()), Ts


def accuracy_term(T, s_fair, views: ProbabilityViews) -> float:
    """Accuracy of the fair scores applied through ``T`` (or ``(T_a, T_b)``)."""
    problem, Ts = _default_problem(T, s_fair, views, None)
    return problem.accuracy(Ts)


def correlation_term(T, views: ProbabilityViews) -> float:
    """``||T (p_a - p_b)||_1``, or ``||T_a p_a - T_b p_b||_1`` for a pair."""
    pa, pb = views.require("pa", "pb")
    if isinstance(T, (tuple, list)):
        Ta, Tb = (np.asarray(x, dtype=float) for x in T)
        return float(np.abs(Ta @ pa - Tb @ pb).sum())
    return float(np.abs(np.asarray(T, dtype=float) @ (pa - pb)).sum())


def fairness_rows(T, s_fair, views: ProbabilityViews, W: NeighborMatrix | None = None) -> np.ndarray:
    """Signed fairness gaps of the transformed classifier, length B+4."""
    problem, Ts = _default_problem(T, s_fair, views, W)
    return problem.rows(Ts)


def fairness_violation(T, s_fair, views: ProbabilityViews, W: NeighborMatrix | None, f) -> np.ndarray:
    """``max([-r; r] - [f; f], 0)``, length 2B+8."""
    problem, Ts = _default_problem(T, s_fair, views, W, f)
    return problem.violation(Ts)


def lagrangian(T, rho, config: DecorrelationConfig, s_fair, views: ProbabilityViews, W: NeighborMatrix | None, f) -> float:
    problem, Ts = _default_problem(T, s_fair, views, W, f, config)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (2 * problem.n_rows,):
        raise DecorrelationError(f"rho must have length {2 * problem.n_rows}")
    if np.any(rho < 0):
        raise DecorrelationError("rho must be non-negative")
    return problem.value(Ts, rho)


def expand_transform(T: np.ndarray) -> np.ndarray:
    """Block-diagonal ``diag(T, T)`` built as ``M o (I~ T I~^T)``.

    With ``s~ = [s; 1-s]`` and ``P = [alpha; beta]`` stacked by rows, the
    fairness gaps are ``s~^T expand_transform(T) P``.
    """
    T = np.asarray(T, dtype=float)
    rows, cols = T.shape
    mask = np.kron(np.eye(2), np.ones((rows, cols)))
    stack_r = np.vstack([np.eye(rows), np.eye(rows)])
    stack_c = np.hstack([np.eye(cols), np.eye(cols)])
    return mask * (stack_r @ T @ stack_c)


def identity_transform(n_cells: int, aware: bool = False):
    if not aware:
        return np.eye(n_cells)
    z = np.zeros((n_cells, n_cells))
    I = np.eye(n_cells)
    return np.vstack([I, z]), np.vstack([z, I])


def evaluate_transfer(T, s_fair, views: ProbabilityViews, W: NeighborMatrix | None, f, converged: bool = True) -> TransferReport:
    s = _scores(s_fair)
    aware = isinstance(T, (tuple, list))
    ident = identity_transform(views.n_cells, aware)
    g = fairness_violation(T, s, views, W, f)
    return TransferReport(
        baseline_correlation=correlation_term(ident, views),
        final_correlation=correlation_term(T, views),
        acc_before=accuracy_term(ident, s, views),
        acc_after=accuracy_term(T, s, views),
        max_violation=float(g.max()) if len(g) else 0.0,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# solvers


def _budget_f(f, budget, W: NeighborMatrix) -> np.ndarray:
    if f is not None and budget is not None:
        raise DecorrelationError("pass either a budget vector or a FairnessBudget, not both")
    if budget is not None:
        return budget_vector(budget, W.n_rows)
    if f is None:
        return np.full(N_GROUP_ROWS + W.n_rows, math.inf)
    return np.asarray(f, dtype=float)


def solve_decorrelation_unaware(
    s_fair,
    views: ProbabilityViews,
    W: NeighborMatrix | None = None,
    config: DecorrelationConfig | None = None,
    f=None,
    budget: FairnessBudget | None = None,
) -> tuple[np.ndarray, MultiplierState, TransferReport]:
    """Method of multipliers over one N x N column-stochastic matrix."""
    config = config or DecorrelationConfig()
    W = W if W is not None else NeighborMatrix.empty(views.n_cells)
    s = _scores(s_fair)
    if len(s) != views.n_cells:
        raise DecorrelationError("unaware decorrelation needs a length-N score vector")
    fv = _budget_f(f, budget, W)
    _check_zero_mass(views, fv)
    problem = _Problem(_unaware_blocks(views, W), s, fv, config)
    (T,), state, converged = _solve(problem, [np.eye(views.n_cells)])
    return T, state, evaluate_transfer(T, s, views, W, fv, converged)


def solve_decorrelation_aware(
    s_fair,
    views: ProbabilityViews,
    W: NeighborMatrix | None = None,
    config: DecorrelationConfig | None = None,
    f=None,
    budget: FairnessBudget | None = None,
) -> tuple[np.ndarray, np.ndarray, MultiplierState, TransferReport]:
    """ADMM over ``(T_a, T_b)``, each 2N x N, alternating block minimization."""
    config = config or DecorrelationConfig()
    W = W if W is not None else NeighborMatrix.empty(views.n_cells)
    s = _scores(s_fair)
    if len(s) != 2 * views.n_cells:
        raise DecorrelationError("aware decorrelation needs a length-2N score vector")
    fv = _budget_f(f, budget, W)
    _check_zero_mass(views, fv)
    problem = _Problem(_aware_blocks(views, W), s, fv, config)
    (Ta, Tb), state, converged = _solve(problem, list(identity_transform(views.n_cells, aware=True)))
    return Ta, Tb, state, evaluate_transfer((Ta, Tb), s, views, W, fv, converged)
