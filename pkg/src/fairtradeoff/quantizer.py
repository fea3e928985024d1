"""Vector quantization of the feature space and the discrete joint (X, A, Y).

Cells are induced by nearest-centroid assignment under the mixed distance.
The joint tensor ``J[i, g, y]`` holds the fraction of samples falling in cell
``i`` with group ``g`` (0 = a, 1 = b) and label ``y``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureSchema, SampleTable, pairwise_distances

MAX_LLOYD_ITERATIONS = 500
_CHUNK_ROWS = 65536


class QuantizerError(ValueError):
    pass


class ZeroMassError(QuantizerError):
    """A conditional view was requested on an event of probability zero."""


# ---------------------------------------------------------------------------
# sampling bound


def _check_pac_args(delta_err: float, confidence: float) -> None:
    if not 0.0 < delta_err < 1.0:
        raise ValueError(f"error tolerance must lie in (0, 1), got {delta_err}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")


def pac_sample_bound(n_cells: int, delta_err: float, confidence: float) -> int:
    """Number of generator samples needed for ``n_cells`` cells.

    ceil(N * ln(8 / (1 - confidence)) / (2 * delta_err**2)).

    >>> pac_sample_bound(256, 0.05, 0.95)
    259849
    """
    if int(n_cells) != n_cells or n_cells < 1:
        raise ValueError(f"cell count must be a positive integer, got {n_cells}")
    _check_pac_args(delta_err, confidence)
    return math.ceil(n_cells * math.log(8.0 / (1.0 - confidence)) / (2.0 * delta_err**2))


def pac_max_cells(n_samples: int, delta_err: float, confidence: float) -> int:
    """Largest cell count whose sampling bound is met by ``n_samples``.

    floor(2 * delta_err**2 * M / ln(8 / (1 - confidence))), never negative.
    """
    if int(n_samples) != n_samples or n_samples < 1:
        raise ValueError(f"sample count must be a positive integer, got {n_samples}")
    _check_pac_args(delta_err, confidence)
    n = max(0, math.floor(2.0 * delta_err**2 * n_samples / math.log(8.0 / (1.0 - confidence))))
    # guard the floor against rounding right at an integer boundary
    while n >= 1 and pac_sample_bound(n, delta_err, confidence) > n_samples:
        n -= 1
    while pac_sample_bound(n + 1, delta_err, confidence) <= n_samples:
        n += 1
    return n


# ---------------------------------------------------------------------------
# codebook


@dataclass(frozen=True)
class Codebook:
    schema: FeatureSchema
    centroids: np.ndarray
    distortion: float
    converged: bool = True
    iterations: int = 0
    history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        c = np.array(self.centroids, dtype=float).reshape(-1, self.schema.n_features)
        if len(c) < 1:
            raise QuantizerError("codebook needs at least one centroid")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def n_cells(self) -> int:
        return len(self.centroids)

    def assign(self, features: np.ndarray) -> np.ndarray:
        """Nearest-centroid index for each row; ties go to the lowest index."""
        features = np.asarray(features, dtype=float).reshape(-1, self.schema.n_features)
        return _nearest(features, self.centroids, self.schema)[0]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "n_cells": self.n_cells,
            "centroids": self.centroids.tolist(),
            "distortion": self.distortion,
            "converged": self.converged,
            "iterations": self.iterations,
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Codebook":
        return cls(
            schema=FeatureSchema.from_dict(doc["schema"]),
            centroids=np.array(doc["centroids"], dtype=float),
            distortion=float(doc["distortion"]),
            converged=bool(doc.get("converged", True)),
            iterations=int(doc.get("iterations", 0)),
            history=tuple(float(v) for v in doc.get("history", ())),
        )


def _nearest(x: np.ndarray, centroids: np.ndarray, schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    labels = np.zeros(len(x), dtype=np.int64)
    dist = np.zeros(len(x))
    for start in range(0, len(x), _CHUNK_ROWS):
        d = pairwise_distances(x[start : start + _CHUNK_ROWS], centroids, schema)
        lab = np.argmin(d, axis=1)
        labels[start : start + len(lab)] = lab
        dist[start : start + len(lab)] = d[np.arange(len(lab)), lab]
    return labels, dist


def assign_cell(x: np.ndarray, codebook: Codebook) -> int:
    return int(codebook.assign(np.asarray(x, dtype=float)[None, :])[0])


def _seed_centroids(x: np.ndarray, n_cells: int, schema: FeatureSchema, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: draw proportional to squared mixed distance."""
    chosen = [int(rng.integers(len(x)))]
    nearest = pairwise_distances(x, x[chosen], schema)[:, 0]
    for _ in range(1, n_cells):
        weights = nearest**2
        total = weights.sum()
        if total <= 0:
            raise QuantizerError("ran out of distinct feature vectors while seeding")
        idx = int(rng.choice(len(x), p=weights / total))
        chosen.append(idx)
        nearest = np.minimum(nearest, pairwise_distances(x, x[idx : idx + 1], schema)[:, 0])
    return x[chosen].copy()


def _update_centroids(
    x: np.ndarray, labels: np.ndarray, dist: np.ndarray, centroids: np.ndarray, schema: FeatureSchema
) -> np.ndarray:
    cat = schema.categorical_mask
    new = centroids.copy()
    counts = np.bincount(labels, minlength=len(centroids))
    for k in np.flatnonzero(counts):
        members = x[labels == k]
        new[k, ~cat] = members[:, ~cat].mean(axis=0)
        for j in np.flatnonzero(cat):
            # argmax returns the first maximum, i.e. the lowest identifier on ties
            new[k, j] = float(np.argmax(np.bincount(members[:, j].astype(np.int64))))
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        # re-seed each empty cell at the sample currently farthest from its centroid
        remaining = dist.copy()
        for k in empty:
            far = int(np.argmax(remaining))
            new[k] = x[far]
            remaining[far] = -np.inf
    return new


def train_codebook(table: SampleTable, n_cells: int, rel_tol: float = 0.01, seed: int = 0) -> Codebook:
    """Lloyd/LBG codebook training under the mixed distance.

    Iterates assignment and centroid update (per-column mean for continuous
    columns, per-column mode for categorical ones) until the relative
    distortion improvement drops below ``rel_tol``. A step that would raise
    the distortion ends training with the previous codebook, so the recorded
    history is non-increasing.
    """
    if n_cells < 1:
        raise QuantizerError("cell count must be at least 1")
    if rel_tol <= 0:
        raise QuantizerError("rel_tol must be positive")
    schema = table.schema
    x = np.asarray(table.features, dtype=float)
    n_distinct = len(np.unique(x, axis=0)) if len(x) else 0
    if n_distinct < n_cells:
        raise QuantizerError(f"table has {n_distinct} distinct feature vectors, fewer than {n_cells} cells")

    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(x, n_cells, schema, rng)
    labels, dist = _nearest(x, centroids, schema)

    history: list[float] = []
    best = None
    converged = False
    iterations = 0
    for iterations in range(1, MAX_LLOYD_ITERATIONS + 1):
        centroids = _update_centroids(x, labels, dist, centroids, schema)
        labels, dist = _nearest(x, centroids, schema)
        distortion = float(dist.mean())
        if history and distortion > history[-1]:
            converged = True
            break
        history.append(distortion)
        best = centroids.copy()
        if distortion == 0.0:
            converged = True
            break
        if len(history) >= 2 and (history[-2] - distortion) / distortion < rel_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Lloyd iterations hit the cap of {MAX_LLOYD_ITERATIONS}; returning partial codebook")

    best = _collapse_duplicates(best)
    return Codebook(schema, best, history[-1], converged=converged, iterations=iterations, history=tuple(history))


def _collapse_duplicates(centroids: np.ndarray) -> np.ndarray:
    _, first = np.unique(centroids, axis=0, return_index=True)
    return centroids[np.sort(first)]


# ---------------------------------------------------------------------------
# discrete joint and its views


@dataclass(frozen=True)
class DiscreteJoint:
    """J[i, g, y] = P(X = x_i, A = g, Y = y) over N cells."""

    J: np.ndarray

    def __post_init__(self) -> None:
        j = np.array(self.J, dtype=float)
        if j.ndim != 3 or j.shape[1:] != (2, 2):
            raise QuantizerError(f"joint must have shape (N, 2, 2), got {j.shape}")
        if np.any(j < 0):
            raise QuantizerError("joint has negative entries")
        if abs(j.sum() - 1.0) > 1e-9:
            raise QuantizerError(f"joint sums to {j.sum()!r}, not 1")
        j.flags.writeable = False
        object.__setattr__(self, "J", j)

    @property
    def n_cells(self) -> int:
        return self.J.shape[0]

    def to_dict(self) -> dict:
        return {"n_cells": self.n_cells, "index": "J[cell][group a|b][label 0|1]", "J": self.J.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteJoint":
        return cls(np.array(doc["J"], dtype=float))


def build_joint(table: SampleTable, codebook: Codebook) -> DiscreteJoint:
    if table.count == 0:
        raise QuantizerError("cannot build a joint from an empty table")
    cells = codebook.assign(table.features)
    flat = cells * 4 + table.groups * 2 + table.labels
    counts = np.bincount(flat, minlength=codebook.n_cells * 4).reshape(codebook.n_cells, 2, 2)
    return DiscreteJoint(counts / table.count)


def _normalized(v: np.ndarray) -> np.ndarray | None:
    total = v.sum()
    return None if total <= 0 else v / total


@dataclass(frozen=True)
class ProbabilityViews:
    """Marginal and conditional vectors over cells derived from a joint.

    Naming: ``p1``/``p0`` are P(X, Y=y); ``pa``/``pb`` are P(X | A=g);
    ``pa1`` etc. are P(X | A=g, Y=y); ``pa_1`` etc. are P(X, Y=y | A=g);
    ``pg_joint[y, g]`` is P(X, Y=y, A=g). Views whose conditioning event has
    zero mass are ``None``.
    """

    p1: np.ndarray
    p0: np.ndarray
    pa: np.ndarray | None
    pb: np.ndarray | None
    pa1: np.ndarray | None
    pa0: np.ndarray | None
    pb1: np.ndarray | None
    pb0: np.ndarray | None
    pa_1: np.ndarray | None
    pa_0: np.ndarray | None
    pb_1: np.ndarray | None
    pb_0: np.ndarray | None
    pg_joint: np.ndarray
    group_priors: tuple[float, float]
    empty: frozenset[str] = field(default_factory=frozenset)

    @property
    def n_cells(self) -> int:
        return len(self.p1)

    def require(self, *names: str) -> tuple[np.ndarray, ...]:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ZeroMassError(f"views {missing} condition on a zero-mass event")
        return tuple(getattr(self, n) for n in names)

    def group(self, g: int) -> np.ndarray | None:
        return self.pa if g == 0 else self.pb

    def group_label(self, g: int, y: int) -> np.ndarray | None:
        """P(X | A=g, Y=y)."""
        return getattr(self, f"p{'ab'[g]}{y}")

    def label_given_group(self, g: int, y: int) -> np.ndarray | None:
        """P(X, Y=y | A=g)."""
        return getattr(self, f"p{'ab'[g]}_{y}")


def views(joint: DiscreteJoint) -> ProbabilityViews:
    J = joint.J
    out: dict[str, np.ndarray | None] = {}
    prior = J.sum(axis=(0, 2))
    for g, name in enumerate("ab"):
        out[f"p{name}"] = _normalized(J[:, g, :].sum(axis=1))
        for y in (0, 1):
            out[f"p{name}{y}"] = _normalized(J[:, g, y])
            out[f"p{name}_{y}"] = J[:, g, y] / prior[g] if prior[g] > 0 else None
    empty = frozenset(k for k, v in out.items() if v is None)
    return ProbabilityViews(
        p1=J[:, :, 1].sum(axis=1),
        p0=J[:, :, 0].sum(axis=1),
        pg_joint=np.transpose(J, (2, 1, 0)).copy(),
        group_priors=(float(prior[0]), float(prior[1])),
        empty=empty,
        **out,
    )


# ---------------------------------------------------------------------------
# fidelity metrics


def pcc(p: np.ndarray, q: np.ndarray) -> float:
    """Pearson correlation coefficient between two equal-length vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1 or len(p) < 2:
        raise ValueError("pcc needs two vectors of equal length >= 2")
    pc = p - p.mean()
    qc = q - q.mean()
    sp, sq = math.sqrt(pc @ pc), math.sqrt(qc @ qc)
    if sp == 0 or sq == 0:
        raise ValueError("pcc is undefined for a constant vector")
    return float(np.clip(pc @ qc / (sp * sq), -1.0, 1.0))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance, half the L1 distance between two pmfs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("tv_distance needs vectors of equal length")
    for v in (p, q):
        if abs(v.sum() - 1.0) > 1e-6 or np.any(v < 0):
            raise ValueError("tv_distance needs non-negative vectors summing to 1")
    return float(0.5 * np.abs(p - q).sum())


def fidelity_report(reference: DiscreteJoint, candidate: DiscreteJoint) -> list[dict]:
    """PCC and TV between per-(group, label) cell distributions of two joints.

    Each (g, y) slice is normalized to a pmf over cells before comparison.
    """
    if reference.n_cells != candidate.n_cells:
        raise QuantizerError("joints have different cell counts")
    rows = []
    for g, gname in enumerate("ab"):
        for y in (0, 1):
            p = _normalized(reference.J[:, g, y])
            q = _normalized(candidate.J[:, g, y])
            row: dict = {"group": gname, "label": y, "pcc": None, "tv": None}
            if p is not None and q is not None:
                row["tv"] = tv_distance(p, q)
                try:
                    row["pcc"] = pcc(p, q)
                except ValueError:
                    pass
            rows.append(row)
    return rows


def save_json(doc: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
