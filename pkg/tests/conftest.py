import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fairtradeoff.quantizer import DiscreteJoint, views  # noqa: E402

import oracles  # noqa: E402


@pytest.fixture
def hand_views():
    return views(DiscreteJoint(oracles.hand_joint()))


def write_synthetic_dataset(directory: Path, n: int = 2000, seed: int = 0) -> tuple[Path, Path]:
    """Mixed-feature dataset whose label depends on the features and the group."""
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 2, n)
    x1 = rng.normal(g * 1.0, 1.0, n)
    x2 = rng.uniform(0, 10, n)
    c = rng.integers(0, 3, n)
    logit = x1 + 0.4 * c - 0.1 * x2
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-logit))).astype(int)
    samples = directory / "samples.csv"
    with open(samples, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "c", "grp", "y"])
        for i in range(n):
            w.writerow([repr(float(x1[i])), repr(float(x2[i])), "uvw"[c[i]], "mf"[g[i]], int(y[i])])
    schema = directory / "schema.json"
    schema.write_text(
        json.dumps(
            {
                "columns": [
                    {"name": "x1", "kind": "continuous"},
                    {"name": "x2", "kind": "continuous"},
                    {"name": "c", "kind": "categorical", "categories": ["u", "v", "w"]},
                ],
                "group_column": "grp",
                "group_values": ["m", "f"],
                "label_column": "y",
            }
        )
    )
    return samples, schema


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)
