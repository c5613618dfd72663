"""Evaluation protocols: average/worst-group accuracy, corruption error,
and multi-seed aggregation.

All accuracies are exact counts; predictions are argmax with ties broken by
the lowest class index. Group coverage must be all-or-nothing: worst-group
numbers over a partial grouping would be silently wrong.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bagio import Bag, check_group_coverage
from .errors import ProtocolError, SchemaError
from .kernels import get_backend
from .milmodel import ModelParams
from .training import pack_bags, prepare_bags

SEVERITIES = (1, 2, 3, 4, 5)


def predict_labels(
    params: ModelParams, bags: list[Bag], backend=None, workers: int = 1
) -> np.ndarray:
    """Predicted class per bag, in bag order, worker-count invariant."""
    if backend is None:
        backend = get_backend()
    prepared = prepare_bags(bags, with_clip=False)
    if workers <= 1 or len(bags) < 2 * workers:
        packed_H, offsets, _, _ = pack_bags(prepared, range(len(prepared)))
        logits = backend.forward_many(params, packed_H, offsets)
    else:
        chunks = np.array_split(np.arange(len(bags)), workers)
        chunks = [c for c in chunks if c.size]

        def run(chunk):
            packed_H, offsets, _, _ = pack_bags(prepared, list(chunk))
            return backend.forward_many(params, packed_H, offsets)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
        logits = np.concatenate(parts, axis=0)
    return np.argmax(logits, axis=1)


@dataclass
class EvalReport:
    avg_acc: float
    per_group_acc: dict[int, float] = field(default_factory=dict)
    worst_group_acc: float | None = None
    n_per_group: dict[int, int] = field(default_factory=dict)
    n_total: int = 0
    n_correct: int = 0

    def to_dict(self) -> dict:
        return {
            "avg_acc": self.avg_acc,
            "worst_group_acc": self.worst_group_acc,
            "per_group_acc": {str(k): v for k, v in sorted(self.per_group_acc.items())},
            "n_per_group": {str(k): v for k, v in sorted(self.n_per_group.items())},
            "n_total": self.n_total,
            "n_correct": self.n_correct,
        }


def report_from_predictions(labels: np.ndarray, predictions: np.ndarray, group_ids) -> EvalReport:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    correct = predictions == labels
    report = EvalReport(
        avg_acc=float(np.mean(correct)) if labels.size else 0.0,
        n_total=int(labels.size),
        n_correct=int(np.sum(correct)),
    )
    if group_ids is not None:
        group_ids = np.asarray(group_ids)
        for g in sorted(int(g) for g in np.unique(group_ids)):
            mask = group_ids == g
            report.per_group_acc[g] = float(np.mean(correct[mask]))
            report.n_per_group[g] = int(np.sum(mask))
        report.worst_group_acc = min(report.per_group_acc.values())
    return report


def evaluate(
    params: ModelParams, bags: list[Bag], backend=None, workers: int = 1
) -> EvalReport:
    """Exact counting accuracies, overall and per group."""
    if not bags:
        raise SchemaError("evaluation split is empty")
    has_groups = check_group_coverage(bags, where="evaluation split")
    predictions = predict_labels(params, bags, backend=backend, workers=workers)
    labels = np.asarray([bag.label for bag in bags])
    group_ids = np.asarray([bag.group_id for bag in bags]) if has_groups else None
    return report_from_predictions(labels, predictions, group_ids)


@dataclass
class CorruptionReport:
    cell_acc: dict[tuple[str, int], float]
    ce_per_corruption: dict[str, float]
    overall_ce: float
    clean_acc: float
    mce_ratio: dict[str, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "clean_acc": self.clean_acc,
            "overall_ce": self.overall_ce,
            "ce_per_corruption": dict(sorted(self.ce_per_corruption.items())),
            "cells": [
                {"corruption": kind, "severity": sev, "acc": acc}
                for (kind, sev), acc in sorted(self.cell_acc.items())
            ],
        }
        if self.mce_ratio is not None:
            out["mce_ratio"] = dict(sorted(self.mce_ratio.items()))
        return out


def corruption_eval(
    params: ModelParams,
    clean_bags: list[Bag],
    corruption_suite,
    backend=None,
    workers: int = 1,
    baseline_ce: dict[str, float] | None = None,
) -> CorruptionReport:
    """Accuracy per (corruption, severity) cell plus per-corruption error.

    corruption_suite maps corruption name -> {severity: bags}; every
    severity 1..5 must be present. CE per corruption is the raw mean error
    over severities; pass baseline_ce to also get the baseline-normalized
    ratio per corruption (the canonical mCE convention).
    """
    if backend is None:
        backend = get_backend()
    clean = evaluate(params, clean_bags, backend=backend, workers=workers)
    cell_acc = {}
    ce = {}
    for kind in sorted(corruption_suite):
        by_severity = corruption_suite[kind]
        missing = [s for s in SEVERITIES if s not in by_severity]
        if missing:
            raise ProtocolError(
                f"corruption {kind!r} is missing severities {missing}"
            )
        errors = []
        for severity in SEVERITIES:
            report = evaluate(params, by_severity[severity], backend=backend, workers=workers)
            cell_acc[(kind, severity)] = report.avg_acc
            errors.append(1.0 - report.avg_acc)
        ce[kind] = float(np.mean(errors))
    if not ce:
        raise ProtocolError("corruption suite is empty")
    mce_ratio = None
    if baseline_ce is not None:
        missing = sorted(set(ce) - set(baseline_ce))
        if missing:
            raise ProtocolError(f"baseline CE missing corruptions {missing}")
        mce_ratio = {kind: ce[kind] / baseline_ce[kind] for kind in ce}
    return CorruptionReport(
        cell_acc=cell_acc,
        ce_per_corruption=ce,
        overall_ce=float(np.mean([ce[k] for k in sorted(ce)])),
        clean_acc=clean.avg_acc,
        mce_ratio=mce_ratio,
    )


@dataclass
class FieldStats:
    mean: float
    std: float | None
    ci95: float | None
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "ci95": self.ci95, "n": self.n}


def aggregate_values(values) -> FieldStats:
    values = np.asarray(list(values), dtype=np.float64)
    n = values.shape[0]
    if n == 0:
        raise SchemaError("cannot aggregate zero runs")
    if n == 1:
        return FieldStats(mean=float(values[0]), std=None, ci95=None, n=1)
    std = float(np.std(values, ddof=1))
    return FieldStats(
        mean=float(np.mean(values)),
        std=std,
        ci95=float(1.96 * std / np.sqrt(n)),
        n=n,
    )


def seed_aggregate(runs: list[EvalReport]) -> dict[str, FieldStats]:
    """Mean, sample std, and normal-approximation 95% CI per report field.

    Fields present in every run are aggregated: avg_acc always,
    worst_group_acc and the per-group accuracies when all runs carry them.
    """
    if not runs:
        raise SchemaError("cannot aggregate zero runs")
    out = {"avg_acc": aggregate_values(r.avg_acc for r in runs)}
    if all(r.worst_group_acc is not None for r in runs):
        out["worst_group_acc"] = aggregate_values(r.worst_group_acc for r in runs)
        common = set(runs[0].per_group_acc)
        for r in runs[1:]:
            common &= set(r.per_group_acc)
        for g in sorted(common):
            out[f"group_{g}_acc"] = aggregate_values(r.per_group_acc[g] for r in runs)
    return out
