"""Reference classifier for ``tiny_text_v1`` checkpoints.

tokenize -> mean-pooled embedding -> tanh(dense) -> linear head, followed by
a softmax applied separately to each output segment. Dense and head layers
accumulate over the input dimension one row at a time, so every logit is a
fixed-order sum that does not depend on how many other columns the head has.
"""
from __future__ import annotations

import os
import re
import shlex
import subprocess
from functools import lru_cache
from typing import Sequence

import numpy as np

from .checkpoint_store import Checkpoint
from .report import EvalReport, ReportError
from .rng import fnv1a_64
from .transform import SegmentLayout, build_layout

MAX_LEN = 512
_WORD = re.compile(r"[^\W_]+")


class RuntimeFailure(RuntimeError):
    pass


@lru_cache(maxsize=1 << 16)
def _token_hash(token: str) -> int:
    return fnv1a_64(token.encode("utf-8"))


def tokenize(text: str, vocab_size: int) -> list[int]:
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    words = _WORD.findall(text.lower())
    if not words:
        return [0]
    return [_token_hash(w) % vocab_size for w in words[:MAX_LEN]]


def _linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight + bias`` for a (B, I) batch, summing over I in index order."""
    w = weight.astype(np.float64)
    acc = np.broadcast_to(bias.astype(np.float64), (x.shape[0], w.shape[1])).copy()
    for i in range(w.shape[0]):
        acc += x[:, i:i + 1] * w[i]
    return acc


def forward_batch(cp: Checkpoint, batch: Sequence[Sequence[int]]) -> np.ndarray:
    """Logits of shape (len(batch), head_out_dim), float64."""
    vocab = cp.arch.vocab_size
    lengths = np.array([len(ids) for ids in batch], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("empty token sequence")
    flat = np.fromiter((i for ids in batch for i in ids), dtype=np.int64, count=int(lengths.sum()))
    if flat.size and (flat.min() < 0 or flat.max() >= vocab):
        bad = flat[(flat < 0) | (flat >= vocab)][0]
        raise ValueError(f"token id {bad} out of range [0, {vocab})")
    rows = cp.tensors["embed.weight"].astype(np.float64)[flat]
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    pooled = np.add.reduceat(rows, starts, axis=0) / lengths[:, None]
    hidden = np.tanh(_linear(pooled, cp.tensors["dense.weight"], cp.tensors["dense.bias"]))
    return _linear(hidden, cp.tensors["head.weight"], cp.tensors["head.bias"])


def forward(cp: Checkpoint, ids: Sequence[int]) -> np.ndarray:
    return forward_batch(cp, [ids])[0]


def layout_of(cp: Checkpoint) -> SegmentLayout:
    """The checkpoint's recorded layout, or one segment spanning its labels."""
    if cp.layout is not None:
        return SegmentLayout.from_manifest(cp.layout)
    return build_layout([("model", cp.labels)])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_star(logits: np.ndarray, layout: SegmentLayout) -> dict[str, np.ndarray]:
    """Softmax applied to each segment of the last axis independently."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != layout.total_width:
        raise ValueError(f"logits width {logits.shape[-1]} != layout width {layout.total_width}")
    return {seg.model_id: softmax(logits[..., seg.offset:seg.stop]) for seg in layout.segments}


def predict(cp: Checkpoint, layout: SegmentLayout | None, text: str) -> dict[str, tuple[str, float]]:
    """Per segment: (argmax label, its probability); ties go to the lowest index."""
    layout = layout or layout_of(cp)
    probs = softmax_star(forward(cp, tokenize(text, cp.arch.vocab_size)), layout)
    out = {}
    for seg in layout.segments:
        p = probs[seg.model_id]
        k = int(np.argmax(p))
        out[seg.model_id] = (seg.labels[k], float(p[k]))
    return out


def predict_indices(cp: Checkpoint, layout: SegmentLayout, model_id: str,
                    texts: Sequence[str]) -> np.ndarray:
    """Argmax class index within one segment for a batch of texts."""
    seg = layout.segment(model_id)
    if not texts:
        return np.zeros(0, dtype=np.int64)
    logits = forward_batch(cp, [tokenize(t, cp.arch.vocab_size) for t in texts])
    return np.argmax(logits[:, seg.offset:seg.stop], axis=1)


def external_evaluate(command: str, checkpoint_path: str | os.PathLike,
                      dataset_paths: Sequence[str | os.PathLike],
                      layout_path: str | os.PathLike, timeout: float | None = None) -> EvalReport:
    """Run ``<command> --checkpoint P --dataset D... --layout L`` and parse its stdout report."""
    argv = shlex.split(command) + ["--checkpoint", str(checkpoint_path)]
    for p in dataset_paths:
        argv += ["--dataset", str(p)]
    argv += ["--layout", str(layout_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as e:
        raise RuntimeFailure(f"external evaluator failed: {e}") from None
    if proc.returncode != 0:
        raise RuntimeFailure(
            f"external evaluator failed with exit code {proc.returncode}: {proc.stderr.strip()[-500:]}"
        )
    try:
        return EvalReport.from_json(proc.stdout)
    except ReportError as e:
        raise ReportError(f"external evaluator returned an invalid report: {e}") from None
