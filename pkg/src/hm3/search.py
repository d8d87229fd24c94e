"""Density search: repeated DARE-TIES merges at Beta-sampled densities.

Every trial is a pure function of ``(base_seed + trial_index)``; validation
and test subsets are fixed once, before the first trial, so the best-so-far
validation score is comparable across trials.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint_store import Checkpoint
from .evaluation import EvalTask, LabeledDataset, evaluate, resolve_segment
from .merge import MergeRecipe, dare_ties_merge
from .report import EvalReport
from .rng import U64, beta_variates, fnv1a_64
from .transform import SegmentLayout, expand_all

log = logging.getLogger(__name__)

Evaluator = Callable[[Checkpoint, SegmentLayout, Sequence[LabeledDataset], Sequence[EvalTask]], EvalReport]
MergeFn = Callable[[Checkpoint, Sequence[Checkpoint], MergeRecipe], Checkpoint]


@dataclass
class SearchConfig:
    trials: int = 500
    val_samples: int = 600
    test_samples: int = 1000
    beta_alpha: float = 1.2
    beta_beta: float = 2.0
    base_seed: int = 0
    self_merge: bool = False
    fixed_density: float | None = None
    exclude_zero_support: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.trials < 0 or self.val_samples <= 0 or self.test_samples <= 0:
            raise ValueError("trials must be >= 0 and sample counts positive")
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.fixed_density is not None and not 0 < self.fixed_density <= 1:
            raise ValueError("fixed_density must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SearchConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class TrialRecord:
    trial_index: int
    density: float
    seed: int
    val_scores: dict[str, float] = field(default_factory=dict)
    val_mean_f1: float | None = None
    is_new_best: bool = False
    test_scores: dict[str, float] | None = None
    failed: bool = False
    error: str | None = None

    @property
    def test_mean_f1(self) -> float | None:
        if not self.test_scores:
            return None
        return sum(self.test_scores.values()) / len(self.test_scores)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test_mean_f1"] = self.test_mean_f1
        return d


@dataclass
class SearchResult:
    best: Checkpoint | None
    records: list[TrialRecord]
    layout: SegmentLayout
    best_recipe: MergeRecipe | None = None
    splits: dict[str, tuple[list[int], list[int]]] = field(default_factory=dict)
    baseline: dict[str, list[int]] = field(default_factory=dict)


def sample_density(rng: np.random.Generator, alpha: float = 1.2, beta: float = 2.0) -> float:
    """One Beta(alpha, beta) variate in the open interval (0, 1)."""
    return float(beta_variates(rng, alpha, beta, 1)[0])


def trial_seed(base_seed: int, trial_index: int) -> int:
    return (int(base_seed) + trial_index) & U64


def trial_density(config: SearchConfig, seed: int) -> float:
    if config.fixed_density is not None:
        return config.fixed_density
    return sample_density(np.random.default_rng(seed), config.beta_alpha, config.beta_beta)


def _split_permutation(n: int, seed: int, name: str) -> np.ndarray:
    return np.random.default_rng([int(seed) & U64, fnv1a_64(name.encode("utf-8")), 1]).permutation(n)


def split_indices(n: int, n_val: int, n_test: int, seed: int, name: str) -> tuple[list[int], list[int]]:
    """Disjoint validation/test index sets drawn from one seeded permutation.

    When the dataset holds fewer than ``n_val + n_test`` examples the two
    sets share it proportionally; with a single example both reuse it.
    """
    perm = _split_permutation(n, seed, name)
    if n >= n_val + n_test:
        v, t = n_val, n_test
    elif n >= 2:
        v = min(n - 1, max(1, round(n * n_val / (n_val + n_test))))
        t = n - v
    else:
        log.warning("dataset %s has a single example; validation and test reuse it", name)
        return [int(perm[0])], [int(perm[0])]
    return [int(i) for i in perm[:v]], [int(i) for i in perm[v:v + t]]


def baseline_indices(n: int, n_val: int, n_test: int, seed: int, name: str, cap: int = 3000) -> list[int]:
    """Up to ``cap`` indices disjoint from both search splits, for baseline runs.

    Empty when validation and test already use the whole dataset; callers
    then fall back to evaluating the baseline on the full dataset.
    """
    used = n_val + n_test
    if n <= used:
        return []
    return [int(i) for i in _split_permutation(n, seed, name)[used:used + cap]]


def builtin_evaluator(exclude_zero_support: bool = False) -> Evaluator:
    def run(cp, layout, datasets, plan):
        return evaluate(cp, datasets, layout, sample_cap=None, plan=plan,
                        exclude_zero_support=exclude_zero_support)
    return run


def _scores(report: EvalReport, home: dict[str, str]) -> dict[str, float]:
    """Key home-segment results by dataset name, cross-checks by ``dataset|segment``."""
    out = {}
    for r in report.results:
        key = r.dataset if home.get(r.dataset) == r.segment and r.expected_label is None else r.key
        out[key] = r.macro_f1
    return out


def run_search(models: Sequence[tuple[str, Checkpoint]], base: Checkpoint,
               datasets: Sequence[LabeledDataset], plan: Sequence[EvalTask] = (),
               config: SearchConfig | None = None, evaluator: Evaluator | None = None,
               merge_fn: MergeFn | None = None) -> SearchResult:
    config = config or SearchConfig()
    if config.self_merge:
        if len(models) != 1:
            raise ValueError("self-merge takes exactly one model")
    elif len(models) < 2:
        raise ValueError("search needs at least two models (or self_merge with one)")
    if not datasets:
        raise ValueError("search needs at least one dataset")
    evaluator = evaluator or builtin_evaluator(config.exclude_zero_support)
    merge_fn = merge_fn or dare_ties_merge

    layout, expanded, xbase = expand_all(models, base)
    inputs = expanded * 2 if config.self_merge else expanded

    home, val_sets, test_sets, splits, baseline = {}, [], [], {}, {}
    for ds in datasets:
        seg = ds.target_segment or resolve_segment(layout, {lab for _, lab in ds.examples}, f"{ds.name}: ")
        ds = LabeledDataset(ds.name, ds.examples, seg)
        home[ds.name] = seg
        val_idx, test_idx = split_indices(len(ds.examples), config.val_samples, config.test_samples,
                                          config.base_seed, ds.name)
        splits[ds.name] = (val_idx, test_idx)
        baseline[ds.name] = baseline_indices(len(ds.examples), config.val_samples, config.test_samples,
                                             config.base_seed, ds.name)
        val_sets.append(ds.subset(val_idx))
        test_sets.append(ds.subset(test_idx))

    def run_trial(i: int) -> tuple[TrialRecord, Checkpoint | None]:
        seed = trial_seed(config.base_seed, i)
        density = trial_density(config, seed)
        rec = TrialRecord(i, density, seed)
        try:
            merged = merge_fn(xbase, inputs, MergeRecipe("dare_ties", density=density, seed=seed))
            report = evaluator(merged, layout, val_sets, plan)
        except Exception as e:  # a failed trial must not end the sweep
            log.warning("trial %d failed: %s", i, e)
            rec.failed, rec.error = True, f"{type(e).__name__}: {e}"
            return rec, None
        rec.val_scores = _scores(report, home)
        rec.val_mean_f1 = sum(rec.val_scores.values()) / len(rec.val_scores)
        return rec, merged

    records: list[TrialRecord] = []
    best, best_val, best_recipe = None, float("-inf"), None

    def reduce(rec: TrialRecord, merged: Checkpoint | None) -> None:
        nonlocal best, best_val, best_recipe
        if merged is not None and rec.val_mean_f1 > best_val:
            try:
                rec.test_scores = _scores(evaluator(merged, layout, test_sets, plan), home)
            except Exception as e:
                log.warning("test evaluation of trial %d failed: %s", rec.trial_index, e)
                rec.failed, rec.error = True, f"{type(e).__name__}: {e}"
            else:
                rec.is_new_best = True
                best, best_val = merged, rec.val_mean_f1
                best_recipe = MergeRecipe("dare_ties", density=rec.density, seed=rec.seed)
                log.info("trial %d: new best val %.4f (density %.4f)", rec.trial_index, best_val, rec.density)
        records.append(rec)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            for rec, merged in pool.map(run_trial, range(config.trials)):
                reduce(rec, merged)
    else:
        for i in range(config.trials):
            reduce(*run_trial(i))
    return SearchResult(best, records, layout, best_recipe, splits, baseline)


def run_self_merge(model: tuple[str, Checkpoint], base: Checkpoint, datasets: Sequence[LabeledDataset],
                   config: SearchConfig | None = None, **kw) -> SearchResult:
    """Search over DARE-TIES merges of one model with itself."""
    config = config or SearchConfig()
    config = SearchConfig(**{**asdict(config), "self_merge": True})
    return run_search([model], base, datasets, config=config, **kw)


def scatter_csv(records: Sequence[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "density", "val_mean_f1", "is_new_best", "test_mean_f1"])
    for r in records:
        w.writerow([
            r.trial_index, repr(r.density),
            "" if r.val_mean_f1 is None else repr(r.val_mean_f1),
            int(r.is_new_best),
            "" if r.test_mean_f1 is None else repr(r.test_mean_f1),
        ])
    return buf.getvalue()


def emit_search_artifacts(records: Sequence[TrialRecord], out_dir: str | os.PathLike,
                          best_recipe: MergeRecipe | None = None) -> list[Path]:
    """Write trials.jsonl, scatter.csv and best_recipe.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
    paths = [out / "trials.jsonl", out / "scatter.csv", out / "best_recipe.json"]
    paths[0].write_text(trials, encoding="utf-8")
    paths[1].write_text(scatter_csv(records), encoding="utf-8")
    paths[2].write_text((best_recipe.to_json() if best_recipe else "null") + "\n", encoding="utf-8")
    return paths
