"""Tabular sample ingestion, normalization and the mixed feature distance.

Feature matrices are stored as float arrays. Categorical columns hold the
integer identifier of the category (its position in the schema's category
list), continuous columns hold the raw (or normalized) value.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

GROUP_A, GROUP_B = 0, 1


class SchemaError(ValueError):
    """Schema document is malformed or inconsistent."""


class DataError(ValueError):
    """A sample file does not conform to its schema."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and not self.categories:
            raise SchemaError(f"column {self.name!r}: categorical column needs categories")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"column {self.name!r}: duplicate categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature columns plus the group and label columns.

    ``group_values`` lists the two raw values of the group column; the first
    maps to group ``a`` and the second to group ``b``.
    """

    columns: tuple[Column, ...]
    group_column: str
    label_column: str
    group_values: tuple[str, str] = ("a", "b")

    def __post_init__(self) -> None:
        if not self.columns:
            raise SchemaError("schema needs at least one feature column")
        if len(self.group_values) != 2 or self.group_values[0] == self.group_values[1]:
            raise SchemaError("group column must take exactly two distinct values")
        names = [c.name for c in self.columns] + [self.group_column, self.label_column]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.columns], dtype=bool)

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def to_dict(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, **({"categories": list(c.categories)} if c.is_categorical else {})}
                for c in self.columns
            ],
            "group_column": self.group_column,
            "group_values": list(self.group_values),
            "label_column": self.label_column,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSchema":
        try:
            columns = tuple(
                Column(name=str(c["name"]), kind=str(c["kind"]), categories=tuple(str(v) for v in c.get("categories", ())))
                for c in doc["columns"]
            )
            return cls(
                columns=columns,
                group_column=str(doc["group_column"]),
                label_column=str(doc["label_column"]),
                group_values=tuple(str(v) for v in doc.get("group_values", ("a", "b"))),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc


def load_schema(path: str | Path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def save_schema(schema: FeatureSchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class SampleTable:
    """Immutable table of (features, group, label) rows.

    ``groups`` holds 0 for group a and 1 for group b; ``labels`` holds 0/1.
    """

    schema: FeatureSchema
    features: np.ndarray
    groups: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=float).reshape(-1, self.schema.n_features)
        groups = np.array(self.groups, dtype=np.int64).reshape(-1)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if not (len(features) == len(groups) == len(labels)):
            raise DataError("features, groups and labels differ in length")
        if np.any((groups != 0) & (groups != 1)):
            raise DataError("group values must be 0 (a) or 1 (b)")
        if np.any((labels != 0) & (labels != 1)):
            raise DataError("labels must be 0 or 1")
        for arr in (features, groups, labels):
            arr.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return len(self.groups)

    def __len__(self) -> int:
        return self.count

    @property
    def rows(self) -> Iterator[tuple[np.ndarray, int, int]]:
        for x, g, y in zip(self.features, self.groups, self.labels):
            yield x, int(g), int(y)

    def with_features(self, features: np.ndarray) -> "SampleTable":
        return SampleTable(self.schema, features, self.groups, self.labels)


def _parse_row(schema: FeatureSchema, record: dict[str, str], index: int) -> tuple[list[float], int, int]:
    values: list[float] = []
    for col in schema.columns:
        raw = record[col.name]
        if col.is_categorical:
            try:
                values.append(float(col.categories.index(raw)))
            except ValueError:
                raise DataError(f"category {raw!r} not in category set", row=index, column=col.name) from None
        else:
            try:
                value = float(raw)
            except ValueError:
                raise DataError(f"unparseable numeric {raw!r}", row=index, column=col.name) from None
            if not math.isfinite(value):
                raise DataError(f"non-finite numeric {raw!r}", row=index, column=col.name)
            values.append(value)
    raw_group = record[schema.group_column]
    if raw_group not in schema.group_values:
        raise DataError(f"group value {raw_group!r} outside {list(schema.group_values)}", row=index, column=schema.group_column)
    raw_label = record[schema.label_column].strip()
    if raw_label not in ("0", "1"):
        raise DataError(f"label {raw_label!r} outside {{0, 1}}", row=index, column=schema.label_column)
    return values, schema.group_values.index(raw_group), int(raw_label)


def load_samples(path: str | Path, schema: FeatureSchema) -> SampleTable:
    """Parse a comma-separated UTF-8 sample file with a header row.

    Row indices in errors count data rows from 0 (the header is not counted).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in schema.names + [schema.group_column, schema.label_column]:
            if name not in header:
                raise DataError(f"missing column {name!r} in header", column=name)
        feats: list[list[float]] = []
        groups: list[int] = []
        labels: list[int] = []
        for index, record in enumerate(reader):
            if None in record.values() or None in record:
                raise DataError("wrong number of fields", row=index)
            x, g, y = _parse_row(schema, record, index)
            feats.append(x)
            groups.append(g)
            labels.append(y)
    features = np.array(feats, dtype=float).reshape(len(feats), schema.n_features)
    return SampleTable(schema, features, np.array(groups, dtype=np.int64), np.array(labels, dtype=np.int64))


def write_samples(table: SampleTable, path: str | Path) -> None:
    """Write ``table`` in the format read by :func:`load_samples`.

    Continuous values use ``repr`` so they round-trip exactly.
    """
    schema = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.names + [schema.group_column, schema.label_column])
        for x, g, y in table.rows:
            out = []
            for col, v in zip(schema.columns, x):
                out.append(col.categories[int(v)] if col.is_categorical else repr(float(v)))
            out.append(schema.group_values[g])
            out.append(str(y))
            writer.writerow(out)


@dataclass(frozen=True)
class NormalizationParams:
    """Per continuous column: mean, population standard deviation and scale.

    ``scale`` is sqrt(1/2)/sd, or 0 for a zero-variance column.
    """

    columns: tuple[int, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    scale: tuple[float, ...]

    def apply(self, features: np.ndarray) -> np.ndarray:
        out = np.array(features, dtype=float, copy=True)
        if self.columns:
            idx = list(self.columns)
            out[:, idx] = (out[:, idx] - np.asarray(self.mean)) * np.asarray(self.scale)
        return out

    def apply_table(self, table: SampleTable) -> SampleTable:
        return table.with_features(self.apply(table.features))

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": list(self.mean), "std": list(self.std), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationParams":
        return cls(
            columns=tuple(int(c) for c in doc["columns"]),
            mean=tuple(float(v) for v in doc["mean"]),
            std=tuple(float(v) for v in doc["std"]),
            scale=tuple(float(v) for v in doc["scale"]),
        )


def fit_normalization(table: SampleTable) -> NormalizationParams:
    """Fit the zero-mean, variance-1/2 transform for every continuous column."""
    if table.count == 0:
        raise DataError("cannot fit normalization on an empty table")
    cols = tuple(int(i) for i in np.flatnonzero(~table.schema.categorical_mask))
    x = table.features[:, list(cols)]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # relative threshold so that float noise on a constant column counts as zero variance
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(degenerate, 0.0, math.sqrt(0.5) / np.where(degenerate, 1.0, std))
    return NormalizationParams(cols, tuple(mean.tolist()), tuple(std.tolist()), tuple(scale.tolist()))


def mixed_distance(u: Sequence[float], v: Sequence[float], schema: FeatureSchema) -> float:
    """Mean over columns of the per-column distance.

    Categorical columns contribute 1 if the identifiers differ, else 0;
    continuous columns contribute the absolute difference.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (schema.n_features,) or v.shape != (schema.n_features,):
        raise ValueError(f"expected vectors of length {schema.n_features}, got {u.shape} and {v.shape}")
    return float(pairwise_distances(u[None, :], v[None, :], schema)[0, 0])


def pairwise_distances(x: np.ndarray, y: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Mixed distances between every row of ``x`` and every row of ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros((len(x), len(y)))
    for j, is_cat in enumerate(schema.categorical_mask):
        diff = x[:, j, None] - y[None, :, j]
        if is_cat:
            out += diff != 0
        else:
            out += np.abs(diff)
    out /= schema.n_features
    return out
