"""Dataset loading, per-segment evaluation, cross-check plans and runtime accounting."""
from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint_store
from .checkpoint_store import Checkpoint
from .report import EvalReport, SegmentResult
from .rng import U64, fnv1a_64
from .runtime import external_evaluate, forward_batch, layout_of, tokenize
from .transform import LayoutError, SegmentLayout


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    name: str
    examples: tuple[tuple[str, str], ...]
    target_segment: str | None = None

    @property
    def mixed(self) -> bool:
        return len({lab for _, lab in self.examples}) > 1

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.examples]

    def subset(self, indices: Iterable[int], name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(name or self.name, tuple(self.examples[i] for i in indices), self.target_segment)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"text": t, "expected_label": lab}) + "\n" for t, lab in self.examples)


@dataclass(frozen=True)
class EvalTask:
    dataset: str
    segment: str
    expected_label: str | None = None  # None: use each example's own label


def resolve_segment(layout: SegmentLayout, labels: Iterable[str], where: str = "") -> str:
    """The unique segment that contains every label in ``labels``."""
    labels = set(labels)
    hits = []
    for seg in layout.segments:
        try:
            for lab in labels:
                seg.label_index(lab)
        except LayoutError:
            continue
        hits.append(seg.model_id)
    if not hits:
        raise DatasetError(f"{where}unknown label(s) {sorted(labels)} for layout segments "
                           f"{[s.model_id for s in layout.segments]}")
    if len(hits) > 1:
        raise DatasetError(f"{where}labels {sorted(labels)} are ambiguous between segments {hits}; "
                           "name the target segment explicitly")
    return hits[0]


def parse_dataset(lines: Iterable[str], name: str, layout: SegmentLayout | None = None,
                  segment: str | None = None) -> LabeledDataset:
    examples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{name}:{lineno}: malformed JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetError(f"{name}:{lineno}: record is not an object")
        for key in ("text", "expected_label"):
            if not isinstance(rec.get(key), str):
                raise DatasetError(f"{name}:{lineno}: missing or non-string {key!r}")
        examples.append((rec["text"], rec["expected_label"]))
    if not examples:
        raise DatasetError(f"{name}: empty dataset")
    if layout is not None:
        labels = {lab for _, lab in examples}
        if segment is None:
            segment = resolve_segment(layout, labels, where=f"{name}: ")
        else:
            seg = layout.segment(segment)
            for lineno, (_, lab) in enumerate(examples, start=1):
                try:
                    seg.label_index(lab)
                except LayoutError as e:
                    raise DatasetError(f"{name}: example {lineno}: {e}") from None
    return LabeledDataset(name, tuple(examples), segment)


def load_dataset(path: str | os.PathLike, layout: SegmentLayout | None = None,
                 segment: str | None = None) -> LabeledDataset:
    """Load a JSONL file of ``{"text", "expected_label"}`` records; name = file stem."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_dataset(f, path.stem, layout, segment)


def sample_indices(dataset: LabeledDataset, cap: int | None, seed: int) -> np.ndarray:
    """First ``min(cap, n)`` entries of a permutation seeded by (seed, dataset name)."""
    n = len(dataset.examples)
    rng = np.random.default_rng([int(seed) & U64, fnv1a_64(dataset.name.encode("utf-8"))])
    perm = rng.permutation(n)
    return perm if cap is None else perm[:min(cap, n)]


def load_plan(path: str | os.PathLike) -> list[EvalTask]:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: plan is not valid JSON ({e.msg})") from None
    if not isinstance(raw, list):
        raise DatasetError(f"{path}: plan must be a JSON list")
    tasks = []
    for i, entry in enumerate(raw):
        try:
            tasks.append(EvalTask(str(entry["dataset"]), str(entry["segment"]), str(entry["expected_label"])))
        except (KeyError, TypeError):
            raise DatasetError(f"{path}: entry {i} needs dataset, segment and expected_label") from None
    return tasks


def cross_check_plan(layout: SegmentLayout, datasets: Sequence[LabeledDataset],
                     plan: Sequence[EvalTask] = ()) -> list[EvalTask]:
    """Home-segment tasks for every dataset plus every validated plan entry."""
    names = {d.name for d in datasets}
    tasks: list[EvalTask] = []
    for d in datasets:
        seg = d.target_segment or resolve_segment(layout, {lab for _, lab in d.examples}, f"{d.name}: ")
        tasks.append(EvalTask(d.name, seg))
    for entry in plan:
        if entry.dataset not in names:
            raise DatasetError(f"plan references unknown dataset {entry.dataset!r}")
        try:
            seg = layout.segment(entry.segment)
        except LayoutError as e:
            raise DatasetError(f"plan: {e}") from None
        try:
            seg.label_index(entry.expected_label)
        except LayoutError as e:
            raise DatasetError(f"plan: {e}") from None
        if entry not in tasks:
            tasks.append(entry)
    return tasks


def evaluate(model: Checkpoint | str | os.PathLike, datasets: Sequence[LabeledDataset],
             layout: SegmentLayout | None = None, sample_cap: int | None = 3000, seed: int = 0,
             plan: Sequence[EvalTask] = (), exclude_zero_support: bool = False) -> EvalReport:
    """Evaluate a checkpoint (or checkpoint path) on every planned (dataset, segment) pair."""
    t0 = time.perf_counter_ns()
    cp = model if isinstance(model, Checkpoint) else checkpoint_store.load(model)
    load_ns = time.perf_counter_ns() - t0
    layout = layout or layout_of(cp)
    if layout.total_width != cp.arch.head_out_dim:
        raise LayoutError(f"layout width {layout.total_width} != model head width {cp.arch.head_out_dim}")
    tasks = cross_check_plan(layout, datasets, plan)
    by_name = {d.name: d for d in datasets}

    infer_ns = 0
    logits_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    results = []
    for task in tasks:
        ds = by_name[task.dataset]
        if task.dataset not in logits_cache:
            idx = sample_indices(ds, sample_cap, seed)
            t1 = time.perf_counter_ns()
            try:
                logits = forward_batch(cp, [tokenize(ds.examples[i][0], cp.arch.vocab_size) for i in idx])
            except ValueError as e:
                raise RuntimeError(f"prediction failed on dataset {ds.name!r}: {e}") from e
            infer_ns += time.perf_counter_ns() - t1
            logits_cache[task.dataset] = (idx, logits)
        idx, logits = logits_cache[task.dataset]
        seg = layout.segment(task.segment)
        predicted = np.argmax(logits[:, seg.offset:seg.stop], axis=1) if len(idx) else np.zeros(0, int)
        if task.expected_label is None:
            expected = [seg.label_index(ds.examples[i][1]) for i in idx]
        else:
            expected = [seg.label_index(task.expected_label)] * len(idx)
        results.append(SegmentResult.from_predictions(
            ds.name, seg.model_id, seg.labels, expected, predicted,
            expected_label=task.expected_label, exclude_zero_support=exclude_zero_support,
        ))
    meta = {"sample_cap": sample_cap, "seed": seed, "exclude_zero_support": exclude_zero_support}
    return EvalReport(results, load_ns / 1e6, infer_ns / 1e6, meta)


class ExternalEvaluator:
    """Evaluate through an external command instead of the built-in runtime.

    The checkpoint, datasets and layout are written to a scratch directory
    and the command is invoked per :func:`hm3.runtime.external_evaluate`.
    Cross-check plans are not forwarded; the command decides what to test.
    """

    def __init__(self, command: str, timeout: float | None = None):
        self.command = command
        self.timeout = timeout

    def __call__(self, cp: Checkpoint, layout: SegmentLayout, datasets: Sequence[LabeledDataset],
                 plan: Sequence[EvalTask] = ()) -> EvalReport:
        with tempfile.TemporaryDirectory(prefix="hm3-eval-") as tmp:
            tmp = Path(tmp)
            ckpt = tmp / "model.hm3"
            checkpoint_store.save(cp, ckpt)
            layout_path = tmp / "layout.json"
            layout_path.write_text(json.dumps(layout.to_manifest(), indent=2), encoding="utf-8")
            paths = []
            for ds in datasets:
                p = tmp / f"{ds.name}.jsonl"
                p.write_text(ds.to_jsonl(), encoding="utf-8")
                paths.append(p)
            return external_evaluate(self.command, ckpt, paths, layout_path, timeout=self.timeout)


@dataclass
class RuntimeArm:
    load_ms: float = 0.0
    inference_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.load_ms + self.inference_ms


@dataclass
class RuntimeComparison:
    individual: RuntimeArm
    merged: RuntimeArm
    n_models: int
    n_inputs: int
    per_model: list[RuntimeArm] = field(default_factory=list)

    @staticmethod
    def _reduction(before: float, after: float) -> float:
        return 100.0 * (before - after) / before if before > 0 else 0.0

    def rows(self) -> list[tuple[str, float, float, float]]:
        i, m = self.individual, self.merged
        return [
            ("load_duration_ms", i.load_ms, m.load_ms, self._reduction(i.load_ms, m.load_ms)),
            ("inference_duration_ms", i.inference_ms, m.inference_ms, self._reduction(i.inference_ms, m.inference_ms)),
            ("total_ms", i.total_ms, m.total_ms, self._reduction(i.total_ms, m.total_ms)),
        ]

    @property
    def total_reduction(self) -> float:
        return self.rows()[-1][3]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "individual", "merged", "reduction_pct"])
        for name, a, b, r in self.rows():
            w.writerow([name, f"{a:.3f}", f"{b:.3f}", f"{r:.1f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_models": self.n_models,
            "n_inputs": self.n_inputs,
            "rows": [dict(zip(("metric", "individual", "merged", "reduction_pct"), r)) for r in self.rows()],
        }


def _timed_run(path: str | os.PathLike, texts: Sequence[str]) -> RuntimeArm:
    t0 = time.perf_counter_ns()
    cp = checkpoint_store.load(path)
    t1 = time.perf_counter_ns()
    forward_batch(cp, [tokenize(t, cp.arch.vocab_size) for t in texts])
    t2 = time.perf_counter_ns()
    return RuntimeArm((t1 - t0) / 1e6, (t2 - t1) / 1e6)


def compare_runtime(individual_paths: Sequence[str | os.PathLike], merged_path: str | os.PathLike,
                    texts: Sequence[str]) -> RuntimeComparison:
    """Load + inference time of N separate models vs one merged model on the same texts."""
    per_model = [_timed_run(p, texts) for p in individual_paths]
    individual = RuntimeArm(sum(a.load_ms for a in per_model), sum(a.inference_ms for a in per_model))
    merged = _timed_run(merged_path, texts)
    return RuntimeComparison(individual, merged, len(per_model), len(texts), per_model)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _safe(name: str) -> str:
    return _UNSAFE.sub("_", name)


def confusion_csv(result: SegmentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["expected\\predicted", *result.labels])
    for label, row in zip(result.labels, result.confusion):
        w.writerow([label, *row])
    return buf.getvalue()


def scores_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "segment", "accuracy", "macro_f1"])
    for r in report.results:
        w.writerow([r.dataset, r.segment, repr(r.accuracy), repr(r.macro_f1)])
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir: str | os.PathLike) -> list[Path]:
    """Write report.json, one confusion CSV per result and scores.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    put("report.json", report.to_json() + "\n")
    for r in report.results:
        put(f"confusion_{_safe(r.dataset)}_{_safe(r.segment)}.csv", confusion_csv(r))
    put("scores.csv", scores_csv(report))
    return written
