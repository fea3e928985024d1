"""Fair Bayes classification on a discrete joint via linear programming.

The decision variable is the deviation ``m = s* - s_fair`` from the
unconstrained majority-vote scores ``s*``. Unaware problems have one score per
cell; aware problems stack per-group scores ``[s_a; s_b]`` (length 2N).

Every group fairness notion is an affine gap ``coef @ m + const`` whose
absolute value must stay within its budget. Individual fairness contributes
one such gap per neighbouring pair of cells.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.optimize import linprog

from .dataset import pairwise_distances
from .quantizer import Codebook, ProbabilityViews, ZeroMassError

GROUP_NOTIONS = ("dp", "eop", "pe", "ea")
NOTION_LABELS = {"dp": "DP", "eop": "EOp", "pe": "PE", "ea": "EA", "ind": "Ind"}

FEAS_TOL = 1e-8


class InfeasibleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class ScoreVector:
    values: np.ndarray
    aware: bool = False

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float).reshape(-1)
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
            raise ValueError("scores must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.aware:
            raise ValueError("only aware score vectors split by group")
        n = len(self.values) // 2
        return self.values[:n], self.values[n:]


def bayes_scores_unaware(v: ProbabilityViews) -> tuple[ScoreVector, float]:
    """Majority vote per cell; a tie scores 0."""
    s = (v.p1 > v.p0).astype(float)
    acc = float(np.where(s == 1, v.p1, v.p0).sum())
    return ScoreVector(s), acc


def bayes_scores_aware(v: ProbabilityViews) -> tuple[ScoreVector, float]:
    """Per-group majority vote; returns ``[s_a; s_b]`` and its accuracy."""
    if min(v.group_priors) <= 0:
        raise ZeroMassError("aware scores need both groups to have positive mass")
    parts = []
    acc = 0.0
    for g in (0, 1):
        pos, neg = v.pg_joint[1, g], v.pg_joint[0, g]
        s = (pos > neg).astype(float)
        parts.append(s)
        acc += float(np.where(s == 1, pos, neg).sum())
    return ScoreVector(np.concatenate(parts), aware=True), acc


# ---------------------------------------------------------------------------
# local individual fairness


@dataclass(frozen=True)
class NeighborMatrix:
    """One row per pair of centroids within radius ``eta``.

    Row n holds ``+exp(-theta d^2)`` at ``i`` and ``-exp(-theta d^2)`` at ``j``.
    """

    W: np.ndarray
    pairs: tuple[tuple[int, int, float], ...]
    theta: float
    eta: float

    @property
    def n_rows(self) -> int:
        return self.W.shape[0]

    @property
    def n_cells(self) -> int:
        return self.W.shape[1]

    @classmethod
    def empty(cls, n_cells: int) -> "NeighborMatrix":
        return cls(np.zeros((0, n_cells)), (), 1.0, 0.0)

    def to_dict(self) -> dict:
        return {"theta": self.theta, "eta": self.eta, "n_cells": self.n_cells, "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, doc: dict) -> "NeighborMatrix":
        return neighbor_matrix_from_pairs(
            [(int(i), int(j), float(d)) for i, j, d in doc["pairs"]], int(doc["n_cells"]), float(doc["theta"]), float(doc["eta"])
        )


def neighbor_matrix_from_pairs(pairs, n_cells: int, theta: float, eta: float) -> NeighborMatrix:
    W = np.zeros((len(pairs), n_cells))
    for row, (i, j, d) in enumerate(pairs):
        w = math.exp(-theta * d * d)
        W[row, i] = w
        W[row, j] = -w
    return NeighborMatrix(W, tuple(pairs), theta, eta)


def build_neighbor_matrix(codebook: Codebook, percentile: float = 3.5, theta: float = 1.0) -> NeighborMatrix:
    """Neighbour rows for every centroid pair no farther apart than the
    ``percentile``-th percentile of all pairwise centroid distances."""
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    n = codebook.n_cells
    if n < 2:
        return NeighborMatrix.empty(n)
    d = pairwise_distances(codebook.centroids, codebook.centroids, codebook.schema)
    iu, ju = np.triu_indices(n, k=1)
    dist = d[iu, ju]
    eta = float(np.percentile(dist, percentile))
    keep = dist <= eta
    pairs = [(int(i), int(j), float(x)) for i, j, x in zip(iu[keep], ju[keep], dist[keep])]
    return neighbor_matrix_from_pairs(pairs, n, theta, eta)


# ---------------------------------------------------------------------------
# budgets


@dataclass(frozen=True)
class FairnessBudget:
    """Relaxation budget per fairness notion; ``None`` marks a notion inactive.

    ``eod=True`` enforces equalized odds: EOp and PE are both active and share
    one budget.
    """

    dp: float | None = None
    eop: float | None = None
    pe: float | None = None
    ea: float | None = None
    ind: float | None = None
    eod: bool = False

    def __post_init__(self) -> None:
        if self.eod:
            shared = {x for x in (self.eop, self.pe) if x is not None}
            if len(shared) != 1:
                raise ValueError("equalized odds needs one shared budget for EOp and PE")
            value = shared.pop()
            object.__setattr__(self, "eop", value)
            object.__setattr__(self, "pe", value)
        for name in GROUP_NOTIONS + ("ind",):
            value = getattr(self, name)
            if value is not None:
                if not value >= 0:
                    raise ValueError(f"budget {name} must be non-negative, got {value}")
                object.__setattr__(self, name, float(value))

    @classmethod
    def from_label(cls, label: str, eps: float, ind: float | None = None) -> "FairnessBudget":
        """Budget for an active-set label such as ``"DP+EOd"`` or ``"EA+Ind"``.

        Group notions get ``eps``; ``Ind`` gets ``ind`` (default ``eps``).
        """
        kwargs: dict = {}
        if label.strip().lower() in ("", "none", "unconstrained"):
            return cls()
        for part in label.split("+"):
            key = part.strip().lower()
            if key == "eod":
                kwargs.update(eop=eps, pe=eps, eod=True)
            elif key in GROUP_NOTIONS:
                kwargs[key] = eps
            elif key in ("ind", "if"):
                kwargs["ind"] = eps if ind is None else ind
            else:
                raise ValueError(f"unknown fairness notion {part!r}")
        return cls(**kwargs)

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(n for n in GROUP_NOTIONS + ("ind",) if getattr(self, n) is not None)

    @property
    def label(self) -> str:
        parts = []
        for n in ("dp", "ea"):
            if getattr(self, n) is not None:
                parts.append(NOTION_LABELS[n])
        if self.eod:
            parts.append("EOd")
        else:
            parts += [NOTION_LABELS[n] for n in ("eop", "pe") if getattr(self, n) is not None]
        if self.ind is not None:
            parts.append("Ind")
        return "+".join(parts) if parts else "none"

    def to_dict(self) -> dict:
        return {"dp": self.dp, "eop": self.eop, "pe": self.pe, "ea": self.ea, "ind": self.ind, "eod": self.eod}

    @classmethod
    def from_dict(cls, doc: dict) -> "FairnessBudget":
        return cls(**{k: doc.get(k) for k in ("dp", "eop", "pe", "ea", "ind")}, eod=bool(doc.get("eod", False)))


# ---------------------------------------------------------------------------
# problem assembly


@dataclass(frozen=True)
class GapConstraint:
    """``|coef @ m + const| <= budget`` (one row per entry of ``const``)."""

    notion: str
    coef: np.ndarray
    const: np.ndarray
    budget: float

    def values(self, m: np.ndarray) -> np.ndarray:
        return self.coef @ m + self.const


@dataclass(frozen=True)
class LpProblem:
    """``min c @ m`` s.t. ``A_ub @ m <= b_ub`` and ``lower <= m <= upper``.

    ``tiebreak`` is an optional secondary objective minimized over the optimal
    face of the primary one.
    """

    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    row_labels: tuple[str, ...]
    constraints: tuple[GapConstraint, ...] = ()
    tiebreak: np.ndarray | None = None
    omitted: tuple[str, ...] = ()

    @property
    def n_vars(self) -> int:
        return len(self.c)


@dataclass(frozen=True)
class LpSolution:
    x: np.ndarray | None
    objective: float | None
    status: str
    message: str = ""
    max_violation: float = 0.0


def _group_gaps(v: ProbabilityViews, s_star: np.ndarray, aware: bool, budget: FairnessBudget) -> tuple[list[GapConstraint], list[str]]:
    """Affine fairness gaps in ``m`` for the active group notions."""
    gaps: list[GapConstraint] = []
    omitted: list[str] = []
    n = v.n_cells
    if aware:
        s_a, s_b = s_star[:n], s_star[n:]

    def add(notion: str, needed: tuple[str, ...], build) -> None:
        eps = getattr(budget, notion)
        if eps is None:
            return
        try:
            vecs = v.require(*needed)
        except ZeroMassError as exc:
            warnings.warn(f"{NOTION_LABELS[notion]} omitted: {exc}")
            omitted.append(notion)
            return
        coef, const = build(*vecs)
        gaps.append(GapConstraint(notion, np.atleast_2d(coef), np.atleast_1d(const), eps))

    if not aware:
        def rate(pa, pb):
            d = pa - pb
            return -d, d @ s_star

        def accuracy(pa1, pb1, pa0, pb0):
            e1, e0 = pa1 - pb1, pa0 - pb0
            return -e1 + e0, e1 @ s_star + e0 @ (1 - s_star)
    else:
        def rate(pa, pb):
            return np.concatenate([-pa, pb]), pa @ s_a - pb @ s_b

        def accuracy(pa1, pb1, pa0, pb0):
            coef = np.concatenate([-pa1 + pa0, pb1 - pb0])
            const = pa1 @ s_a - pb1 @ s_b + pa0 @ (1 - s_a) - pb0 @ (1 - s_b)
            return coef, const

    add("dp", ("pa", "pb"), rate)
    add("eop", ("pa1", "pb1"), rate)
    add("pe", ("pa0", "pb0"), rate)
    add("ea", ("pa_1", "pb_1", "pa_0", "pb_0"), accuracy)
    return gaps, omitted


def _individual_gap(v: ProbabilityViews, s_star: np.ndarray, W: NeighborMatrix, aware: bool, eps: float) -> GapConstraint | None:
    if W.n_rows == 0:
        return None
    if not aware:
        return GapConstraint("ind", -W.W, W.W @ s_star, eps)
    n = v.n_cells
    pa, pb = v.require("pa", "pb")
    Wa, Wb = W.W * pa, W.W * pb
    return GapConstraint("ind", np.hstack([-Wa, -Wb]), Wa @ s_star[:n] + Wb @ s_star[n:], eps)


def score_bounds(s_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign box for ``m``: [0, 1] where ``s* = 1`` and [-1, 0] where ``s* = 0``."""
    pos = s_star == 1
    return np.where(pos, 0.0, -1.0), np.where(pos, 1.0, 0.0)


def objective_coefficients(v: ProbabilityViews, aware: bool) -> np.ndarray:
    if not aware:
        return v.p1 - v.p0
    return np.concatenate([v.pg_joint[1, 0] - v.pg_joint[0, 0], v.pg_joint[1, 1] - v.pg_joint[0, 1]])


def assemble_tradeoff_lp(
    v: ProbabilityViews,
    s_star: ScoreVector,
    W: NeighborMatrix | None,
    budget: FairnessBudget,
    aware: bool = False,
) -> LpProblem:
    """Build the trade-off LP for the given awareness and active budgets.

    Each ``|gap| <= eps`` becomes the pair ``gap <= eps`` and ``-gap <= eps``.
    Inactive notions are left out entirely.
    """
    if s_star.aware != aware:
        raise ValueError("score vector awareness does not match the problem")
    s = s_star.values
    n_vars = 2 * v.n_cells if aware else v.n_cells
    if len(s) != n_vars:
        raise ValueError(f"score vector has length {len(s)}, expected {n_vars}")
    gaps, omitted = _group_gaps(v, s, aware, budget)
    if budget.ind is not None:
        if W is None:
            raise ValueError("individual fairness needs a neighbour matrix")
        if W.n_cells != v.n_cells:
            raise ValueError("neighbour matrix was built on a different codebook")
        gap = _individual_gap(v, s, W, aware, budget.ind)
        if gap is not None:
            gaps.append(gap)

    rows, rhs, labels = [], [], []
    for gap in gaps:
        tag = NOTION_LABELS[gap.notion]
        for k in range(len(gap.const)):
            rows.append(gap.coef[k])
            rhs.append(gap.budget - gap.const[k])
            rows.append(-gap.coef[k])
            rhs.append(gap.budget + gap.const[k])
            suffix = f"[{k}]" if gap.notion == "ind" else ""
            labels += [f"{tag}{suffix}+", f"{tag}{suffix}-"]
    A = np.array(rows, dtype=float).reshape(len(rows), n_vars)
    lower, upper = score_bounds(s)
    # prefer the lowest positive-prediction mass among equally accurate solutions,
    # mirroring the tie -> 0 rule of the majority vote
    tiebreak = -np.ones(n_vars)
    return LpProblem(
        c=objective_coefficients(v, aware),
        A_ub=A,
        b_ub=np.array(rhs, dtype=float),
        lower=lower,
        upper=upper,
        row_labels=tuple(labels),
        constraints=tuple(gaps),
        tiebreak=tiebreak,
        omitted=tuple(omitted),
    )


# ---------------------------------------------------------------------------
# solving


_HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _violation(problem: LpProblem, x: np.ndarray) -> float:
    viol = 0.0
    if len(problem.b_ub):
        viol = max(viol, float(np.max(problem.A_ub @ x - problem.b_ub)))
    viol = max(viol, float(np.max(problem.lower - x)), float(np.max(x - problem.upper)))
    return max(viol, 0.0)


def _linprog(c, A, b, bounds):
    return linprog(
        c,
        A_ub=A if len(b) else None,
        b_ub=b if len(b) else None,
        bounds=bounds,
        method="highs-ds",
        options=_HIGHS_OPTIONS,
    )


def solve_lp(problem: LpProblem) -> LpSolution:
    """Solve ``problem`` with the HiGHS dual simplex.

    Returns status ``optimal``, ``infeasible`` or ``numerical`` (when the
    returned point violates a constraint by more than 1e-8).
    """
    bounds = list(zip(problem.lower, problem.upper))
    res = _linprog(problem.c, problem.A_ub, problem.b_ub, bounds)
    if res.status == 2:
        return LpSolution(None, None, "infeasible", res.message)
    if res.status != 0:
        return LpSolution(None, None, "numerical", res.message)
    x = res.x
    if problem.tiebreak is not None:
        A2 = np.vstack([problem.A_ub, problem.c[None, :]]) if len(problem.b_ub) else problem.c[None, :]
        res2 = _linprog(problem.tiebreak, A2, np.append(problem.b_ub, res.fun), bounds)
        if res2.status == 0 and problem.c @ res2.x <= res.fun + 1e-10:
            x = res2.x
    x = np.clip(x, problem.lower, problem.upper)
    # vertex solutions come back with bound-level noise; snap it away when that stays feasible
    snapped = np.where(np.abs(x - problem.lower) <= 1e-9, problem.lower, x)
    snapped = np.where(np.abs(snapped - problem.upper) <= 1e-9, problem.upper, snapped)
    if _violation(problem, snapped) <= FEAS_TOL:
        x = snapped
    viol = _violation(problem, x)
    status = "optimal" if viol <= FEAS_TOL else "numerical"
    return LpSolution(x, float(problem.c @ x), status, res.message, viol)


# ---------------------------------------------------------------------------
# end to end


@dataclass(frozen=True)
class FairLpResult:
    m: np.ndarray | None
    s_star: ScoreVector
    s_fair: ScoreVector | None
    acc_star: float
    acc_fair: float | None
    residuals: dict[str, float]
    budget: FairnessBudget
    status: str
    omitted: tuple[str, ...] = ()

    @property
    def objective(self) -> float | None:
        return None if self.acc_fair is None else self.acc_star - self.acc_fair

    def to_dict(self) -> dict:
        return {
            "budget": self.budget.to_dict(),
            "label": self.budget.label,
            "aware": self.s_star.aware,
            "status": self.status,
            "acc_star": self.acc_star,
            "acc_fair": self.acc_fair,
            "m": None if self.m is None else self.m.tolist(),
            "s_star": self.s_star.values.tolist(),
            "s_fair": None if self.s_fair is None else self.s_fair.values.tolist(),
            "residuals": self.residuals,
            "omitted": list(self.omitted),
        }


def constraint_residuals(problem: LpProblem, m: np.ndarray) -> dict[str, float]:
    """Attained |gap| per active notion (the max over rows for Ind)."""
    return {c.notion: float(np.max(np.abs(c.values(m)))) for c in problem.constraints}


def fair_solution(
    v: ProbabilityViews,
    budget: FairnessBudget,
    aware: bool = False,
    W: NeighborMatrix | None = None,
) -> FairLpResult:
    s_star, acc_star = (bayes_scores_aware if aware else bayes_scores_unaware)(v)
    problem = assemble_tradeoff_lp(v, s_star, W, budget, aware)
    sol = solve_lp(problem)
    if sol.status == "infeasible" or sol.x is None:
        return FairLpResult(None, s_star, None, acc_star, None, {}, budget, sol.status, problem.omitted)
    m = sol.x
    s_fair = ScoreVector(np.clip(s_star.values - m, 0.0, 1.0), aware=aware)
    return FairLpResult(
        m=m,
        s_star=s_star,
        s_fair=s_fair,
        acc_star=acc_star,
        acc_fair=acc_star - sol.objective,
        residuals=constraint_residuals(problem, m),
        budget=budget,
        status=sol.status,
        omitted=problem.omitted,
    )


@dataclass(frozen=True)
class SweepPoint:
    budget: FairnessBudget
    acc_star: float
    acc_fair: float | None
    residuals: dict[str, float]
    status: str
    result: FairLpResult = field(repr=False, compare=False, default=None)


def pareto_sweep(
    v: ProbabilityViews,
    budget_grid: Iterable[FairnessBudget],
    aware: bool = False,
    W: NeighborMatrix | None = None,
) -> list[SweepPoint]:
    """Solve the trade-off LP at every grid point, keeping grid order."""
    grid = list(budget_grid)
    if not grid:
        raise ValueError("budget grid is empty")
    points = []
    for budget in grid:
        res = fair_solution(v, budget, aware, W)
        points.append(SweepPoint(budget, res.acc_star, res.acc_fair, res.residuals, res.status, res))
    return points


def budget_grid(label: str, eps_values: Iterable[float], ind_values: Iterable[float] | None = None) -> list[FairnessBudget]:
    eps_values = list(eps_values)
    ind_values = list(ind_values) if ind_values is not None else [None] * len(eps_values)
    if len(ind_values) != len(eps_values):
        raise ValueError("individual-fairness grid must match the group grid in length")
    return [FairnessBudget.from_label(label, e, i) for e, i in zip(eps_values, ind_values)]


def attained_budget(v: ProbabilityViews, budget: FairnessBudget, aware: bool = False, W: NeighborMatrix | None = None) -> FairnessBudget:
    """Budget equal to the residuals of the unconstrained classifier (m = 0)
    on the notions active in ``budget``."""
    s_star, _ = (bayes_scores_aware if aware else bayes_scores_unaware)(v)
    probe = replace(budget, **{n: 0.0 for n in budget.active}) if budget.active else budget
    problem = assemble_tradeoff_lp(v, s_star, W, probe, aware)
    res = constraint_residuals(problem, np.zeros(problem.n_vars))
    kwargs = {n: res.get(n, 0.0) for n in budget.active}
    if budget.eod:
        kwargs["eop"] = kwargs["pe"] = max(kwargs["eop"], kwargs["pe"])
    return replace(budget, **kwargs)
