"""Evaluation report types, metric computation and JSON validation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class ReportError(ValueError):
    pass


def confusion_matrix(expected: Sequence[int], predicted: Sequence[int], n_classes: int) -> np.ndarray:
    """Integer counts, rows = expected class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(expected, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
    return cm


def f1_scores(cm: np.ndarray) -> tuple[list[float], list[bool]]:
    """Per-class F1 and a flag for classes with no support (F1 forced to 0)."""
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    scores, zero = [], []
    for k in range(cm.shape[0]):
        denom = support[k] + predicted[k]
        scores.append(0.0 if support[k] == 0 or denom == 0 else float(2 * tp[k] / denom))
        zero.append(bool(support[k] == 0))
    return scores, zero


def macro_f1(scores: Sequence[float], zero_support: Sequence[bool], exclude_zero_support: bool = False) -> float:
    if exclude_zero_support:
        kept = [s for s, z in zip(scores, zero_support) if not z]
        return float(sum(kept) / len(kept)) if kept else 0.0
    return float(sum(scores) / len(scores))


@dataclass
class SegmentResult:
    dataset: str
    segment: str
    labels: list[str]
    confusion: list[list[int]]
    n_samples: int
    accuracy: float
    per_class_f1: list[float]
    zero_support: list[bool]
    macro_f1: float
    expected_label: str | None = None
    probabilities: list[list[float]] | None = None

    @classmethod
    def from_predictions(cls, dataset: str, segment: str, labels: Sequence[str],
                         expected: Sequence[int], predicted: Sequence[int],
                         expected_label: str | None = None,
                         exclude_zero_support: bool = False) -> "SegmentResult":
        cm = confusion_matrix(expected, predicted, len(labels))
        n = int(cm.sum())
        scores, zero = f1_scores(cm)
        return cls(
            dataset=dataset,
            segment=segment,
            labels=list(labels),
            confusion=cm.tolist(),
            n_samples=n,
            accuracy=float(np.trace(cm) / n) if n else 0.0,
            per_class_f1=scores,
            zero_support=zero,
            macro_f1=macro_f1(scores, zero, exclude_zero_support),
            expected_label=expected_label,
        )

    @property
    def key(self) -> str:
        return f"{self.dataset}|{self.segment}"

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "segment": self.segment,
            "labels": self.labels,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "per_class_f1": self.per_class_f1,
            "zero_support": self.zero_support,
            "macro_f1": self.macro_f1,
        }
        if self.expected_label is not None:
            d["expected_label"] = self.expected_label
        if self.probabilities is not None:
            d["probabilities"] = self.probabilities
        return d


@dataclass
class EvalReport:
    results: list[SegmentResult]
    load_duration_ms: float = 0.0
    inference_duration_ms: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def mean_macro_f1(self) -> float:
        """Unweighted mean of macro-F1 over all (dataset, segment) results."""
        if not self.results:
            return 0.0
        return float(sum(r.macro_f1 for r in self.results) / len(self.results))

    def scores(self) -> dict[str, float]:
        return {r.key: r.macro_f1 for r in self.results}

    def get(self, dataset: str, segment: str | None = None) -> SegmentResult:
        for r in self.results:
            if r.dataset == dataset and (segment is None or r.segment == segment):
                return r
        raise KeyError((dataset, segment))

    def to_dict(self) -> dict:
        return {
            "results": [r.to_dict() for r in self.results],
            "mean_macro_f1": self.mean_macro_f1,
            "timings": {
                "load_duration_ms": self.load_duration_ms,
                "inference_duration_ms": self.inference_duration_ms,
            },
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Any) -> "EvalReport":
        validate_report_dict(d)
        timings = d.get("timings", {})
        results = []
        for r in d["results"]:
            results.append(SegmentResult(
                dataset=r["dataset"], segment=r["segment"], labels=list(r["labels"]),
                confusion=[[int(x) for x in row] for row in r["confusion"]],
                n_samples=int(r["n_samples"]), accuracy=float(r["accuracy"]),
                per_class_f1=[float(x) for x in r["per_class_f1"]],
                zero_support=[bool(x) for x in r.get("zero_support", [False] * len(r["labels"]))],
                macro_f1=float(r["macro_f1"]), expected_label=r.get("expected_label"),
                probabilities=r.get("probabilities"),
            ))
        return cls(results, float(timings.get("load_duration_ms", 0.0)),
                   float(timings.get("inference_duration_ms", 0.0)), dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ReportError(f"report is not valid JSON: {e}") from None
        return cls.from_dict(d)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_report_dict(d: Any) -> None:
    """Structural checks on an EvalReport document; raises ReportError."""
    if not isinstance(d, dict) or not isinstance(d.get("results"), list):
        raise ReportError("report must be an object with a 'results' list")
    for i, r in enumerate(d["results"]):
        where = f"results[{i}]"
        if not isinstance(r, dict):
            raise ReportError(f"{where} is not an object")
        for key in ("dataset", "segment", "labels", "confusion", "n_samples", "accuracy",
                    "per_class_f1", "macro_f1"):
            if key not in r:
                raise ReportError(f"{where} missing {key!r}")
        k = len(r["labels"])
        cm = r["confusion"]
        if not (isinstance(cm, list) and len(cm) == k and all(isinstance(row, list) and len(row) == k for row in cm)):
            raise ReportError(f"{where}: confusion matrix must be {k}x{k}")
        flat = [x for row in cm for x in row]
        if any(not isinstance(x, int) or isinstance(x, bool) or x < 0 for x in flat):
            raise ReportError(f"{where}: confusion entries must be non-negative integers")
        if sum(flat) != r["n_samples"]:
            raise ReportError(f"{where}: confusion total {sum(flat)} != n_samples {r['n_samples']}")
        for key in ("accuracy", "macro_f1"):
            if not _is_num(r[key]) or not 0.0 <= r[key] <= 1.0:
                raise ReportError(f"{where}: {key} must be in [0, 1]")
        if len(r["per_class_f1"]) != k or not all(_is_num(x) and 0 <= x <= 1 for x in r["per_class_f1"]):
            raise ReportError(f"{where}: per_class_f1 must hold {k} values in [0, 1]")
        probs = r.get("probabilities")
        if probs is not None:
            for j, row in enumerate(probs):
                if len(row) != k or not all(_is_num(p) and p >= 0 for p in row):
                    raise ReportError(f"{where}.probabilities[{j}]: expected {k} non-negative numbers")
                if abs(math.fsum(row) - 1.0) > 1e-6:
                    raise ReportError(f"{where}.probabilities[{j}] sums to {math.fsum(row)!r}, not 1")
    timings = d.get("timings", {})
    if not isinstance(timings, dict) or not all(_is_num(v) and v >= 0 for v in timings.values()):
        raise ReportError("timings must map names to non-negative numbers")
