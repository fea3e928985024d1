"""Command-line front end.

Subcommands: ``quantize``, ``tradeoff``, ``decorrelate``, ``metrics`` and
``bound``. Run configuration comes from an optional JSON file; command-line
flags override individual fields. All outputs are deterministic for a fixed
configuration, and every CSV starts with a ``# config_hash=...`` comment.

Exit codes: 0 success, 1 configuration or IO error, 2 numerical failure.
Errors are written to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import DataError, SchemaError, fit_normalization, load_samples, load_schema
from .decorrelate import (
    DecorrelationConfig,
    DecorrelationError,
    budget_vector,
    solve_decorrelation_aware,
    solve_decorrelation_unaware,
)
from .fairlp import FairnessBudget, NeighborMatrix, budget_grid, build_neighbor_matrix, fair_solution, pareto_sweep
from .quantizer import (
    Codebook,
    DiscreteJoint,
    QuantizerError,
    ZeroMassError,
    build_joint,
    fidelity_report,
    load_json,
    pac_max_cells,
    pac_sample_bound,
    save_json,
    train_codebook,
    views,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    samples: str | None = None
    schema: str | None = None
    reference: str | None = None
    output_dir: str = "out"
    # quantizer
    n_cells: int = 16
    delta_err: float = 0.05
    confidence: float = 0.95
    rel_tol: float = 0.01
    seed: int = 0
    # trade-off sweep
    constraints: list[str] = field(default_factory=lambda: ["DP", "EOd", "EA"])
    eps_grid: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1, 0.2])
    ind_grid: list[float] | None = None
    awareness: str = "unaware"
    percentile: float = 3.5
    theta: float = 1.0
    # decorrelation
    decorrelate_constraint: str = "DP"
    decorrelate_grid: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.10])
    decorrelate_ind: float = 0.05
    decorrelation: DecorrelationConfig = field(default_factory=DecorrelationConfig)

    def validate(self, command: str) -> None:
        if self.awareness not in ("unaware", "aware", "both"):
            raise ConfigError(f"awareness must be unaware, aware or both, got {self.awareness!r}")
        if command == "quantize":
            for name in ("samples", "schema"):
                path = getattr(self, name)
                if path is None:
                    raise ConfigError(f"quantize needs --{name}")
                if not Path(path).is_file():
                    raise ConfigError(f"{name} file {path!r} does not exist")
            if self.reference is not None and not Path(self.reference).is_file():
                raise ConfigError(f"reference file {self.reference!r} does not exist")
            if self.n_cells < 1:
                raise ConfigError("n_cells must be positive")
        if command == "tradeoff":
            if not self.constraints or not self.eps_grid:
                raise ConfigError("tradeoff needs a nonempty constraint list and eps grid")
            if self.ind_grid is not None and len(self.ind_grid) != len(self.eps_grid):
                raise ConfigError("ind_grid must match eps_grid in length")
        if command == "decorrelate":
            if not self.decorrelate_grid:
                raise ConfigError("decorrelate needs a nonempty budget grid")
            if self.awareness == "both":
                raise ConfigError("decorrelate runs one awareness mode at a time")
        if command in ("tradeoff", "decorrelate") and not (self.out / "joint.json").is_file():
            raise ConfigError(f"joint file {str(self.out / 'joint.json')!r} does not exist; run quantize first")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["decorrelation"] = self.decorrelation.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        try:
            if "decorrelation" in doc:
                doc["decorrelation"] = DecorrelationConfig.from_dict(doc["decorrelation"])
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[list], config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _label_slug(label: str) -> str:
    return label.replace("+", "_").lower()


# ---------------------------------------------------------------------------
# commands


def cmd_quantize(config: RunConfig) -> int:
    config.validate("quantize")
    config.out.mkdir(parents=True, exist_ok=True)
    schema = load_schema(config.schema)
    table = load_samples(config.samples, schema)
    m = table.count
    need = pac_sample_bound(config.n_cells, config.delta_err, config.confidence)
    cap = pac_max_cells(m, config.delta_err, config.confidence)
    advisory = {"samples": m, "n_cells": config.n_cells, "pac_sample_bound": need, "pac_max_cells": cap}
    if m < need:
        warnings.warn(f"{m} samples is below the sampling bound of {need} for {config.n_cells} cells")
    if config.n_cells > cap:
        warnings.warn(f"{config.n_cells} cells exceeds the {cap} supported by {m} samples")

    norm = fit_normalization(table)
    ntable = norm.apply_table(table)
    codebook = train_codebook(ntable, config.n_cells, rel_tol=config.rel_tol, seed=config.seed)
    joint = build_joint(ntable, codebook)
    save_json({**codebook.to_dict(), "normalization": norm.to_dict()}, config.out / "codebook.json")
    save_json(joint.to_dict(), config.out / "joint.json")

    if config.reference is not None:
        ref = norm.apply_table(load_samples(config.reference, schema))
        ref_joint = build_joint(ref, codebook)
        rows = fidelity_report(ref_joint, joint)
        write_csv(
            config.out / "fidelity.csv",
            ["group", "label", "pcc", "tv"],
            [[r["group"], r["label"], r["pcc"], r["tv"]] for r in rows],
            config.hash(),
        )
    _emit({"command": "quantize", **advisory, "cells_trained": codebook.n_cells, "distortion": codebook.distortion})
    return EXIT_OK


def _load_artifacts(config: RunConfig) -> tuple[DiscreteJoint, Codebook | None]:
    joint = DiscreteJoint.from_dict(load_json(config.out / "joint.json"))
    cb_path = config.out / "codebook.json"
    codebook = Codebook.from_dict(load_json(cb_path)) if cb_path.is_file() else None
    return joint, codebook


def _neighbors(config: RunConfig, codebook: Codebook | None, needed: bool, n_cells: int) -> NeighborMatrix | None:
    if not needed:
        return None
    if codebook is None:
        raise ConfigError("individual fairness needs codebook.json next to the joint")
    if codebook.n_cells != n_cells:
        raise ConfigError("codebook and joint disagree on the cell count")
    return build_neighbor_matrix(codebook, config.percentile, config.theta)


def _modes(config: RunConfig) -> list[bool]:
    return {"unaware": [False], "aware": [True], "both": [False, True]}[config.awareness]


def cmd_tradeoff(config: RunConfig) -> int:
    config.validate("tradeoff")
    joint, codebook = _load_artifacts(config)
    v = views(joint)
    digest = config.hash()
    summary = []
    for label in config.constraints:
        try:
            grid = budget_grid(label, config.eps_grid, config.ind_grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        W = _neighbors(config, codebook, grid[0].ind is not None, joint.n_cells)
        notions = grid[0].active
        for aware in _modes(config):
            points = pareto_sweep(v, grid, aware=aware, W=W)
            if any(p.status == "numerical" for p in points):
                raise NumericalFailure(f"LP solver reported a numerical failure for {label}")
            mode = "aware" if aware else "unaware"
            header = ["label", "awareness"] + [f"eps_{n}" for n in notions] + ["acc_star", "acc_fair", "status"]
            header += [f"residual_{n}" for n in notions]
            rows = []
            for p in points:
                row = [p.budget.label, mode] + [getattr(p.budget, n) for n in notions]
                row += [p.acc_star, p.acc_fair, p.status] + [p.residuals.get(n) for n in notions]
                rows.append(row)
            stem = f"tradeoff_{_label_slug(label)}_{mode}"
            write_csv(config.out / f"{stem}.csv", header, rows, digest)
            save_json(
                {"config_hash": digest, "label": label, "awareness": mode, "points": [p.result.to_dict() for p in points]},
                config.out / f"{stem}.json",
            )
            summary.append({"file": f"{stem}.csv", "points": len(points), "infeasible": sum(p.status == "infeasible" for p in points)})
    _emit({"command": "tradeoff", "outputs": summary})
    return EXIT_OK


def _stored_scores(path: Path, budget: FairnessBudget) -> np.ndarray | None:
    if not path.is_file():
        return None
    for point in load_json(path).get("points", []):
        if FairnessBudget.from_dict(point["budget"]) == budget and point.get("s_fair") is not None:
            return np.array(point["s_fair"], dtype=float)
    return None


def cmd_decorrelate(config: RunConfig) -> int:
    config.validate("decorrelate")
    joint, codebook = _load_artifacts(config)
    v = views(joint)
    aware = config.awareness == "aware"
    mode = "aware" if aware else "unaware"
    digest = config.hash()
    label = config.decorrelate_constraint
    try:
        grid = [FairnessBudget.from_label(label, e, config.decorrelate_ind) for e in config.decorrelate_grid]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    W = _neighbors(config, codebook, grid[0].ind is not None, joint.n_cells)
    stored = config.out / f"tradeoff_{_label_slug(label)}_{mode}.json"

    metrics = ["baseline_correlation", "final_correlation", "correlation_reduction", "acc_before", "acc_after", "acc_reduction", "max_violation"]
    rows, reports, transforms = [], [], []
    for budget in grid:
        s_fair = _stored_scores(stored, budget)
        if s_fair is None:
            res = fair_solution(v, budget, aware=aware, W=W)
            if res.status == "numerical":
                raise NumericalFailure(f"LP solver reported a numerical failure at {budget.to_dict()}")
            if res.status == "infeasible":
                rows.append([budget.label, _grid_eps(budget), "infeasible"] + [None] * len(metrics) + [False])
                continue
            s_fair = res.s_fair.values
        f = budget_vector(budget, 0 if W is None else W.n_rows)
        if aware:
            Ta, Tb, state, report = solve_decorrelation_aware(s_fair, v, W, config.decorrelation, f=f)
            transforms.append({"budget": budget.to_dict(), "T_a": Ta.tolist(), "T_b": Tb.tolist(), "multipliers": state.to_dict()})
        else:
            T, state, report = solve_decorrelation_unaware(s_fair, v, W, config.decorrelation, f=f)
            transforms.append({"budget": budget.to_dict(), "T": T.tolist(), "multipliers": state.to_dict()})
        doc = report.to_dict()
        reports.append(doc)
        rows.append([budget.label, _grid_eps(budget), "solved"] + [doc[k] for k in metrics] + [report.converged])

    if reports:
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            rows.append([label, stat, ""] + [float(fn([r[k] for r in reports])) for k in metrics] + [all(r["converged"] for r in reports)])
    stem = f"decorrelate_{_label_slug(label)}_{mode}"
    write_csv(config.out / f"{stem}.csv", ["label", "eps", "status"] + metrics + ["converged"], rows, digest)
    save_json({"config_hash": digest, "awareness": mode, "transforms": transforms}, config.out / f"{stem}_transforms.json")
    _emit(
        {
            "command": "decorrelate",
            "file": f"{stem}.csv",
            "solved": len(reports),
            "not_converged": sum(not r["converged"] for r in reports),
        }
    )
    return EXIT_OK


def _grid_eps(budget: FairnessBudget) -> float | None:
    for n in ("dp", "eop", "pe", "ea", "ind"):
        if getattr(budget, n) is not None:
            return getattr(budget, n)
    return None


def cmd_metrics(reference: str, candidate: str, output: str | None) -> int:
    ref = DiscreteJoint.from_dict(load_json(reference))
    cand = DiscreteJoint.from_dict(load_json(candidate))
    rows = fidelity_report(ref, cand)
    if output:
        write_csv(Path(output), ["group", "label", "pcc", "tv"], [[r["group"], r["label"], r["pcc"], r["tv"]] for r in rows], "metrics")
    _emit({"command": "metrics", "rows": rows})
    return EXIT_OK


def cmd_bound(n_cells: int | None, n_samples: int | None, delta_err: float, confidence: float) -> int:
    if (n_cells is None) == (n_samples is None):
        raise ConfigError("bound needs exactly one of --cells or --samples")
    doc: dict = {"command": "bound", "delta_err": delta_err, "confidence": confidence}
    if n_cells is not None:
        doc.update(n_cells=n_cells, pac_sample_bound=pac_sample_bound(n_cells, delta_err, confidence))
    else:
        doc.update(samples=n_samples, pac_max_cells=pac_max_cells(n_samples, delta_err, confidence))
    _emit(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _labels(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairtradeoff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--awareness", choices=["unaware", "aware", "both"])
        p.add_argument("--percentile", type=float)
        p.add_argument("--theta", type=float)

    q = sub.add_parser("quantize", help="train a codebook and build the discrete joint")
    run_args(q)
    q.add_argument("--samples")
    q.add_argument("--schema")
    q.add_argument("--reference", help="reference sample file for the fidelity report")
    q.add_argument("--n-cells", dest="n_cells", type=int)
    q.add_argument("--delta-err", dest="delta_err", type=float)
    q.add_argument("--confidence", type=float)
    q.add_argument("--rel-tol", dest="rel_tol", type=float)
    q.add_argument("--seed", type=int)

    t = sub.add_parser("tradeoff", help="sweep fairness budgets and solve the trade-off LPs")
    run_args(t)
    t.add_argument("--constraints", type=_labels, help="comma-separated active sets, e.g. DP,EOd,EA+Ind")
    t.add_argument("--eps-grid", dest="eps_grid", type=_floats)
    t.add_argument("--ind-grid", dest="ind_grid", type=_floats)

    d = sub.add_parser("decorrelate", help="solve decorrelation transforms over a budget grid")
    run_args(d)
    d.add_argument("--constraint", dest="decorrelate_constraint")
    d.add_argument("--grid", dest="decorrelate_grid", type=_floats)
    d.add_argument("--ind", dest="decorrelate_ind", type=float)
    for name in ("lam", "beta", "tau", "lr_initial", "lr_final", "momentum", "tol"):
        d.add_argument(f"--{name.replace('_', '-')}", dest=f"dc_{name}", type=float)
    for name in ("max_outer", "max_inner"):
        d.add_argument(f"--{name.replace('_', '-')}", dest=f"dc_{name}", type=int)

    m = sub.add_parser("metrics", help="PCC and TV between two joint files")
    m.add_argument("reference")
    m.add_argument("candidate")
    m.add_argument("--output")

    b = sub.add_parser("bound", help="sampling bound calculator")
    b.add_argument("--cells", type=int)
    b.add_argument("--samples", type=int)
    b.add_argument("--delta-err", dest="delta_err", type=float, default=0.05)
    b.add_argument("--confidence", type=float, default=0.95)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            doc = load_json(args.config)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    config = RunConfig.from_dict(doc)
    overrides = {}
    dc_overrides = {}
    for key, value in vars(args).items():
        if value is None or key in ("command", "config"):
            continue
        if key.startswith("dc_"):
            dc_overrides[key[3:]] = value
        elif key in RunConfig.__dataclass_fields__:
            overrides[key] = value
    for key, value in overrides.items():
        setattr(config, key, value)
    if dc_overrides:
        try:
            config.decorrelation = DecorrelationConfig(**{**config.decorrelation.to_dict(), **dc_overrides})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return config


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}, sort_keys=True) + "\n")
    return code


def _show_warning(message, category, filename, lineno, file=None, line=None) -> None:
    sys.stderr.write(json.dumps({"warning": category.__name__, "message": str(message)}, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    previous = warnings.showwarning
    warnings.showwarning = _show_warning
    try:
        if args.command == "metrics":
            return cmd_metrics(args.reference, args.candidate, args.output)
        if args.command == "bound":
            return cmd_bound(args.cells, args.samples, args.delta_err, args.confidence)
        config = resolve_config(args)
        return {"quantize": cmd_quantize, "tradeoff": cmd_tradeoff, "decorrelate": cmd_decorrelate}[args.command](config)
    except (NumericalFailure, ZeroMassError, DecorrelationError) as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL)
    except (ConfigError, SchemaError, DataError, QuantizerError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CONFIG)
    finally:
        warnings.showwarning = previous


if __name__ == "__main__":
    raise SystemExit(main())
