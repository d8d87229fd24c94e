"""Training-free merge strategies: Model Soup, TIES and DARE-TIES.

All arithmetic on task vectors happens in float64 and is rounded to float32
once, when the merged checkpoint is assembled. Per-element reductions run in
a fixed order so that merges are bitwise reproducible.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor_core
from .rng import U64, uniform_stream
from .checkpoint_store import Checkpoint

STRATEGIES = ("soup", "ties", "dare_ties")
TRIM_SCOPES = ("global", "per_tensor")


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeRecipe:
    strategy: str = "ties"
    soup_weights: tuple[float, ...] | None = None
    density: float = 1.0
    seed: int = 0
    trim_scope: str = "global"
    lambda_: float = 1.0
    densities: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MergeError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.trim_scope not in TRIM_SCOPES:
            raise MergeError(f"unknown trim_scope {self.trim_scope!r}")
        for d in (self.density, *(self.densities or ())):
            if not (isinstance(d, (int, float)) and 0.0 < d <= 1.0):
                raise MergeError(f"density must be in (0, 1], got {d!r}")
        if not 0 <= int(self.seed) <= U64:
            raise MergeError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not math.isfinite(self.lambda_):
            raise MergeError("lambda must be finite")
        if self.soup_weights is not None:
            w = self.soup_weights
            if any(x < 0 or not math.isfinite(x) for x in w):
                raise MergeError(f"soup weights must be finite and non-negative, got {list(w)}")
            if abs(math.fsum(w) - 1.0) > 1e-9:
                raise MergeError(f"soup weights must sum to 1 (got {math.fsum(w)!r})")

    def density_for(self, model_index: int) -> float:
        if self.densities is not None:
            return self.densities[model_index]
        return self.density

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        for k in ("soup_weights", "densities"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeRecipe":
        d = dict(d)
        unknown = set(d) - {"strategy", "soup_weights", "density", "seed", "trim_scope", "lambda", "densities"}
        if unknown:
            raise MergeError(f"unknown recipe keys: {sorted(unknown)}")
        if "lambda" in d:
            d["lambda_"] = float(d.pop("lambda"))
        for k in ("soup_weights", "densities"):
            if d.get(k) is not None:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MergeRecipe":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor ``fine_tuned - base`` held in float64."""

    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)


def _require_same_shapes(cps: Sequence[Checkpoint]) -> None:
    ref = cps[0]
    for i, cp in enumerate(cps[1:], start=1):
        if set(cp.tensors) != set(ref.tensors):
            raise MergeError(f"checkpoint {i} has different tensor names")
        for name, t in ref.tensors.items():
            if cp.tensors[name].shape != t.shape:
                raise MergeError(
                    f"checkpoint {i}: {name} shape {list(cp.tensors[name].shape)} != {list(t.shape)}; "
                    "apply the HM3 transform before merging"
                )


def task_vector(base: Checkpoint, ft: Checkpoint) -> TaskVector:
    _require_same_shapes([base, ft])
    return TaskVector({
        name: ft.tensors[name].astype(np.float64) - base.tensors[name].astype(np.float64)
        for name in ft.tensors
    })


def _map_names(fn: Callable[[str], np.ndarray], names: Sequence[str], threads: int) -> dict[str, np.ndarray]:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(zip(names, pool.map(fn, names)))
    return {name: fn(name) for name in names}


def _assemble(template: Checkpoint, tensors: Mapping[str, np.ndarray], recipe: MergeRecipe | None) -> Checkpoint:
    out = {}
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(a)):
            raise MergeError(f"merged tensor {name} is not finite")
        a.setflags(write=False)
        out[name] = a
    return replace(template, tensors=out, role="merged",
                   recipe=recipe.to_dict() if recipe is not None else None).validate()


def soup_merge(cps: Sequence[Checkpoint], weights: Sequence[float] | None = None,
               threads: int = 1) -> Checkpoint:
    """Weighted average of full checkpoints (uniform 1/N by default).

    Weighted terms are sorted per element before summation, so the result
    does not depend on model order.
    """
    if len(cps) < 2:
        raise MergeError("soup_merge needs at least 2 checkpoints")
    if weights is None:
        weights = [1.0 / len(cps)] * len(cps)
    if len(weights) != len(cps):
        raise MergeError(f"{len(weights)} weights for {len(cps)} checkpoints")
    recipe = MergeRecipe(strategy="soup", soup_weights=tuple(float(w) for w in weights))
    _require_same_shapes(cps)
    _require_same_labels(cps)

    def one(name):
        terms = np.stack([w * cp.tensors[name].astype(np.float64) for w, cp in zip(weights, cps)])
        terms.sort(axis=0)
        acc = terms[0].copy()
        for t in terms[1:]:
            acc += t
        return acc

    return _assemble(cps[0], _map_names(one, list(cps[0].tensors), threads), recipe)


def _require_same_labels(cps: Sequence[Checkpoint]) -> None:
    for i, cp in enumerate(cps[1:], start=1):
        if cp.labels != cps[0].labels:
            raise MergeError(f"checkpoint {i} has a different label space; apply the HM3 transform first")


def dare(tv: TaskVector, density: float, seed: int) -> TaskVector:
    """Drop each value with probability ``1 - density``; rescale survivors by ``1/density``."""
    if not (0.0 < density <= 1.0):
        raise MergeError(f"density must be in (0, 1], got {density}")
    if density == 1.0:
        return tv
    out = {}
    for name, t in tv.tensors.items():
        keep = uniform_stream(seed, name, t.size).reshape(t.shape) < density
        out[name] = np.where(keep, t / density, 0.0)
    return TaskVector(out)


def trim_task_vector(tv: TaskVector, density: float, scope: str = "global") -> TaskVector:
    """Keep the top ``density`` fraction of values by magnitude, zero the rest."""
    names = tv.names()
    if scope == "global":
        trimmed = tensor_core.trim_top_fraction([tv.tensors[n] for n in names], density)
    elif scope == "per_tensor":
        trimmed = [tensor_core.trim_top_fraction([tv.tensors[n]], density)[0] for n in names]
    else:
        raise MergeError(f"unknown trim scope {scope!r}")
    return TaskVector(dict(zip(names, trimmed)))


def elect_and_mean(values: Sequence[np.ndarray]) -> np.ndarray:
    """Sign election plus disjoint mean over aligned task-vector arrays.

    The elected sign is the sign of the sum (zero sum elects +1); the result
    is the mean of the non-zero values carrying that sign, 0 where none do.
    """
    total = np.zeros_like(values[0], dtype=np.float64)
    for v in values:
        total += v
    sign = np.where(total >= 0, 1.0, -1.0)
    acc = np.zeros_like(total)
    count = np.zeros(total.shape, dtype=np.int64)
    for v in values:
        agree = (v != 0) & (np.sign(v) == sign)
        acc += np.where(agree, v, 0.0)
        count += agree
    return np.where(count > 0, acc / np.maximum(count, 1), 0.0)


def _check_merge_inputs(base: Checkpoint, cps: Sequence[Checkpoint]) -> None:
    if not cps:
        raise MergeError("nothing to merge")
    if base is None:
        raise MergeError("base required for task vectors")
    _require_same_shapes([base, *cps])
    _require_same_labels(cps)


def _combine(base: Checkpoint, cps: Sequence[Checkpoint], tvs: Sequence[TaskVector],
             recipe: MergeRecipe, threads: int) -> Checkpoint:
    def one(name):
        merged = elect_and_mean([tv.tensors[name] for tv in tvs])
        return base.tensors[name].astype(np.float64) + recipe.lambda_ * merged

    return _assemble(cps[0], _map_names(one, list(base.tensors), threads), recipe)


def ties_merge(base: Checkpoint, cps: Sequence[Checkpoint], recipe: MergeRecipe,
               threads: int = 1) -> Checkpoint:
    """Trim, elect sign, disjoint mean; output ``base + lambda * merged``."""
    if recipe.strategy != "ties":
        raise MergeError(f"ties_merge called with strategy {recipe.strategy!r}")
    _check_merge_inputs(base, cps)
    tvs = [trim_task_vector(task_vector(base, cp), recipe.density_for(i), recipe.trim_scope)
           for i, cp in enumerate(cps)]
    return _combine(base, cps, tvs, recipe, threads)


def dare_ties_merge(base: Checkpoint, cps: Sequence[Checkpoint], recipe: MergeRecipe,
                    threads: int = 1) -> Checkpoint:
    """DARE each task vector (sub-seed ``seed ^ i``), then sign election and disjoint mean.

    No magnitude trimming happens after DARE; the density is spent on the drop.
    """
    if recipe.strategy != "dare_ties":
        raise MergeError(f"dare_ties_merge called with strategy {recipe.strategy!r}")
    _check_merge_inputs(base, cps)
    tvs = [dare(task_vector(base, cp), recipe.density_for(i), (recipe.seed ^ i) & U64)
           for i, cp in enumerate(cps)]
    return _combine(base, cps, tvs, recipe, threads)


def merge(base: Checkpoint | None, cps: Sequence[Checkpoint], recipe: MergeRecipe,
          threads: int = 1) -> Checkpoint:
    if recipe.strategy == "soup":
        return soup_merge(cps, recipe.soup_weights, threads=threads)
    if recipe.strategy == "ties":
        return ties_merge(base, cps, recipe, threads=threads)
    return dare_ties_merge(base, cps, recipe, threads=threads)
