"""HM3: pad classifier heads with zeros into one shared output layout.

Each source model owns a contiguous segment of the expanded head. Its
weights are copied into that segment and every other column and bias entry
is exactly zero, so the expanded model reproduces the original logits on
its own segment and emits 0 elsewhere.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .checkpoint_store import (
    Checkpoint,
    CheckpointError,
    HEAD_TENSORS,
    compatible_for_merge,
)

_UNINFORMATIVE = re.compile(r"label[_\-\s]?\d+", re.IGNORECASE)


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    model_id: str
    labels: tuple[str, ...]
    offset: int
    source_labels: tuple[str, ...] | None = None

    @property
    def width(self) -> int:
        return len(self.labels)

    @property
    def stop(self) -> int:
        return self.offset + self.width

    def label_index(self, label: str) -> int:
        """Class index of ``label`` within this segment.

        Accepts the sanitized label, ``<model_id>:<label>``, or the label as
        it appeared in the source model before sanitization.
        """
        for candidate in (label, f"{self.model_id}:{label}"):
            if candidate in self.labels:
                return self.labels.index(candidate)
        if self.source_labels and label in self.source_labels:
            return self.source_labels.index(label)
        raise LayoutError(f"label {label!r} is not in segment {self.model_id!r} {list(self.labels)}")


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise LayoutError("layout has no segments")
        pos = 0
        for seg in self.segments:
            if seg.width <= 0:
                raise LayoutError(f"segment {seg.model_id!r} is empty")
            if seg.offset != pos:
                raise LayoutError(f"segment {seg.model_id!r} at offset {seg.offset}, expected {pos}")
            pos = seg.stop
        ids = [s.model_id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise LayoutError(f"duplicate model ids in layout: {ids}")
        dupes = [k for k, v in Counter(self.labels).items() if v > 1]
        if dupes:
            raise LayoutError(f"duplicate labels across segments: {dupes}")

    @property
    def total_width(self) -> int:
        return self.segments[-1].stop

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lab for seg in self.segments for lab in seg.labels)

    def segment(self, model_id: str) -> Segment:
        for seg in self.segments:
            if seg.model_id == model_id:
                return seg
        raise LayoutError(f"no segment for model id {model_id!r}")

    def to_manifest(self) -> list[dict]:
        out = []
        for seg in self.segments:
            d = {"model_id": seg.model_id, "labels": list(seg.labels), "offset": seg.offset}
            if seg.source_labels is not None:
                d["source_labels"] = list(seg.source_labels)
            out.append(d)
        return out

    @classmethod
    def from_manifest(cls, blocks: Sequence[dict]) -> "SegmentLayout":
        try:
            segs = tuple(
                Segment(
                    str(b["model_id"]),
                    tuple(b["labels"]),
                    int(b["offset"]),
                    tuple(b["source_labels"]) if b.get("source_labels") is not None else None,
                )
                for b in blocks
            )
        except (KeyError, TypeError, ValueError) as e:
            raise LayoutError(f"malformed layout block: {e}") from None
        return cls(segs)


def is_uninformative(label: str) -> bool:
    return label.strip() == "" or _UNINFORMATIVE.fullmatch(label.strip()) is not None


def sanitize_labels(models: Sequence[tuple[str, Sequence[str]]]) -> list[tuple[str, ...]]:
    """Rename uninformative labels and disambiguate labels shared across models.

    ``label0``/``LABEL_1``/empty become ``<model_id>:class<i>``; a label used
    by two or more models is prefixed with the model id everywhere it occurs.
    """
    if not models:
        raise LayoutError("sanitize_labels needs at least one model")
    renamed = [
        tuple(f"{mid}:class{i}" if is_uninformative(lab) else lab for i, lab in enumerate(labels))
        for mid, labels in models
    ]
    owners = Counter(lab for labels in renamed for lab in set(labels))
    out = [
        tuple(f"{mid}:{lab}" if owners[lab] > 1 else lab for lab in labels)
        for (mid, _), labels in zip(models, renamed)
    ]
    dupes = [k for k, v in Counter(lab for labels in out for lab in labels).items() if v > 1]
    if dupes:
        raise LayoutError(f"labels still collide after sanitization: {dupes}")
    return out


def build_layout(models: Sequence[tuple[str, Sequence[str]]],
                 source_labels: Sequence[Sequence[str]] | None = None) -> SegmentLayout:
    segs, offset = [], 0
    for i, (mid, labels) in enumerate(models):
        src = tuple(source_labels[i]) if source_labels is not None else None
        segs.append(Segment(mid, tuple(labels), offset, src))
        offset += len(labels)
    return SegmentLayout(tuple(segs))


def layout_for(models: Sequence[tuple[str, Sequence[str]]]) -> SegmentLayout:
    """Sanitize label spaces and lay segments out in input order."""
    clean = sanitize_labels(models)
    return build_layout([(mid, labels) for (mid, _), labels in zip(models, clean)],
                        [labels for _, labels in models])


def _with_head(cp: Checkpoint, layout: SegmentLayout, weight: np.ndarray, bias: np.ndarray,
               role: str) -> Checkpoint:
    weight.setflags(write=False)
    bias.setflags(write=False)
    tensors = dict(cp.tensors)
    tensors["head.weight"] = weight
    tensors["head.bias"] = bias
    arch = replace(cp.arch, head_out_dim=layout.total_width)
    return replace(cp, arch=arch, tensors=tensors, labels=layout.labels, role=role,
                   layout=layout.to_manifest()).validate()


def expand_head(cp: Checkpoint, layout: SegmentLayout, model_id: str) -> Checkpoint:
    if cp.role != "fine_tuned":
        raise CheckpointError(f"expand_head expects a fine_tuned checkpoint, got role {cp.role!r}")
    seg = layout.segment(model_id)
    if cp.arch.head_out_dim != seg.width:
        raise LayoutError(
            f"model {model_id!r} head width {cp.arch.head_out_dim} != segment width {seg.width}"
        )
    hidden, width = cp.arch.hidden_dim, layout.total_width
    weight = np.zeros((hidden, width), dtype=np.float32)
    bias = np.zeros(width, dtype=np.float32)
    weight[:, seg.offset:seg.stop] = cp.tensors["head.weight"]
    bias[seg.offset:seg.stop] = cp.tensors["head.bias"]
    return _with_head(cp, layout, weight, bias, "expanded")


def make_base(base: Checkpoint, layout: SegmentLayout, reference: Checkpoint | None = None) -> Checkpoint:
    """Replace the base head with an all-zero head of the layout's width."""
    if base.role not in ("base", "expanded"):
        raise CheckpointError(f"make_base expects a base checkpoint, got role {base.role!r}")
    if base.role == "expanded" and any(np.any(base.tensors[n]) for n in HEAD_TENSORS):
        raise CheckpointError("expanded checkpoint passed to make_base is not a zero-head base")
    if reference is not None:
        ok, diags = compatible_for_merge([reference, base])
        if not ok:
            raise CheckpointError("base architecture mismatch: " + "; ".join(diags))
    weight = np.zeros((base.arch.hidden_dim, layout.total_width), dtype=np.float32)
    bias = np.zeros(layout.total_width, dtype=np.float32)
    return _with_head(base, layout, weight, bias, "expanded")


def expand_all(models: Sequence[tuple[str, Checkpoint]], base: Checkpoint | None = None
               ) -> tuple[SegmentLayout, list[Checkpoint], Checkpoint | None]:
    """Transform N models (and optionally their base) onto one layout."""
    cps = [cp for _, cp in models]
    if len(cps) > 1 or base is not None:
        ok, diags = compatible_for_merge(cps + ([base] if base is not None else []))
        if not ok:
            raise CheckpointError("incompatible checkpoints:\n  " + "\n  ".join(diags))
    layout = layout_for([(mid, cp.labels) for mid, cp in models])
    expanded = [expand_head(cp, layout, mid) for mid, cp in models]
    new_base = make_base(base, layout) if base is not None else None
    return layout, expanded, new_base


def unique_model_ids(names: Sequence[str]) -> list[str]:
    """Make ids unique by suffixing repeats: ``a, a`` -> ``a, a_2``."""
    seen: Counter = Counter()
    out = []
    for name in names:
        seen[name] += 1
        out.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
    return out
