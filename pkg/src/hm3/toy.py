"""Synthetic checkpoints and datasets for desk-scale experiments.

Fine-tuned models are built analytically: keyword embedding rows are pushed
along a per-label direction and the head is fitted by ridge regression on
the hidden features. No training loop is involved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint_store import ArchDescriptor, Checkpoint, make_checkpoint
from .evaluation import LabeledDataset
from .runtime import forward_batch, tokenize


def random_arch(head_out_dim: int, vocab_size: int = 512, embed_dim: int = 16, hidden_dim: int = 32) -> ArchDescriptor:
    return ArchDescriptor("tiny_text_v1", vocab_size, embed_dim, hidden_dim, head_out_dim)


def random_checkpoint(rng: np.random.Generator, labels, role: str = "fine_tuned", scale: float = 0.5,
                      **arch_kw) -> Checkpoint:
    arch = random_arch(len(labels), **arch_kw)
    tensors = {name: rng.normal(0.0, scale, size=shape) for name, shape in arch.tensor_shapes().items()}
    return make_checkpoint(arch, tensors, labels, role)


def random_texts(rng: np.random.Generator, n: int, n_words: int = 300, max_len: int = 20) -> list[str]:
    words = [f"w{i:03d}" for i in range(n_words)]
    return [" ".join(rng.choice(words, size=rng.integers(1, max_len + 1))) for _ in range(n)]


def distinct_words(prefix: str, count: int, vocab_size: int, taken: set[int]) -> list[str]:
    """``count`` words whose token ids are not in ``taken`` (which is updated)."""
    out, i = [], 0
    while len(out) < count:
        word = f"{prefix}{i}"
        tid = tokenize(word, vocab_size)[0]
        if tid not in taken:
            taken.add(tid)
            out.append(word)
        i += 1
    return out


def _texts(rng, pools: dict[str, list[str]], fillers: list[str], n: int) -> list[tuple[str, str]]:
    labels = list(pools)
    examples = []
    for j in range(n):
        label = labels[j % len(labels)]
        words = list(rng.choice(pools[label], size=rng.integers(3, 9)))
        words += list(rng.choice(fillers, size=rng.integers(0, 4)))
        rng.shuffle(words)
        examples.append((" ".join(words), label))
    order = rng.permutation(n)
    return [examples[i] for i in order]


def fit_head(cp: Checkpoint, labels, examples, ridge: float = 1e-3) -> Checkpoint:
    """Least-squares fit of the head on hidden features of ``examples``."""
    head_less = dict(cp.tensors)
    arch = cp.arch
    probe = make_checkpoint(
        ArchDescriptor(arch.family, arch.vocab_size, arch.embed_dim, arch.hidden_dim, arch.hidden_dim),
        {**head_less, "head.weight": np.eye(arch.hidden_dim), "head.bias": np.zeros(arch.hidden_dim)},
        [f"h{i}" for i in range(arch.hidden_dim)], "fine_tuned",
    )
    hidden = forward_batch(probe, [tokenize(t, arch.vocab_size) for t, _ in examples])
    x = np.hstack([hidden, np.ones((len(hidden), 1))])
    y = -np.ones((len(examples), len(labels)))
    for r, (_, lab) in enumerate(examples):
        y[r, labels.index(lab)] = 1.0
    coef = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    tensors = {**head_less, "head.weight": coef[:-1], "head.bias": coef[-1]}
    return make_checkpoint(
        ArchDescriptor(arch.family, arch.vocab_size, arch.embed_dim, arch.hidden_dim, len(labels)),
        tensors, labels, "fine_tuned",
    )


def accuracy(cp: Checkpoint, examples) -> float:
    logits = forward_batch(cp, [tokenize(t, cp.arch.vocab_size) for t, _ in examples])
    pred = np.argmax(logits, axis=1)
    return float(np.mean([cp.labels[k] == lab for k, (_, lab) in zip(pred, examples)]))


@dataclass
class ToyTask:
    model_id: str
    model: Checkpoint
    dataset: LabeledDataset


@dataclass
class ToyFixture:
    base: Checkpoint
    tasks: list[ToyTask]

    @property
    def models(self) -> list[tuple[str, Checkpoint]]:
        return [(t.model_id, t.model) for t in self.tasks]

    @property
    def datasets(self) -> list[LabeledDataset]:
        return [t.dataset for t in self.tasks]


DEFAULT_TASKS = (
    ("jailbreak", ("benign", "jailbreak")),
    ("hatespeech", ("hate speech", "normal", "offensive")),
)


def build_fixture(seed: int = 0, n_examples: int = 200, overlap: float = 0.0,
                  tasks=DEFAULT_TASKS, words_per_label: int = 8, **arch_kw) -> ToyFixture:
    """Base model plus one fine-tuned model and dataset per task.

    Each model only moves the embedding rows of its own keywords, so task
    vectors have disjoint supports after head expansion. ``overlap > 0``
    adds a per-model perturbation of the dense layer, creating conflicts.
    """
    rng = np.random.default_rng(seed)
    base = random_checkpoint(rng, ["LABEL_0", "LABEL_1"], role="base", scale=0.3, **arch_kw)
    base = make_checkpoint(base.arch, {**base.tensors, "embed.weight": base.tensors["embed.weight"] * 0.3},
                           base.labels, "base")
    vocab = base.arch.vocab_size
    taken: set[int] = set()
    fillers = distinct_words("filler", 12, vocab, taken)
    out = []
    for t, (model_id, labels) in enumerate(tasks):
        pools = {lab: distinct_words(f"{model_id[:3]}{k}x", words_per_label, vocab, taken)
                 for k, lab in enumerate(labels)}
        examples = _texts(rng, pools, fillers, n_examples)
        embed = base.tensors["embed.weight"].astype(np.float64).copy()
        for lab, words in pools.items():
            direction = rng.normal(size=base.arch.embed_dim)
            direction *= 2.0 / np.linalg.norm(direction)
            for w in words:
                embed[tokenize(w, vocab)[0]] += direction + rng.normal(0, 0.1, base.arch.embed_dim)
        tensors = {**base.tensors, "embed.weight": embed}
        if overlap > 0:
            tensors["dense.weight"] = base.tensors["dense.weight"] + rng.normal(
                0, overlap, base.tensors["dense.weight"].shape)
            tensors["dense.bias"] = base.tensors["dense.bias"] + rng.normal(0, overlap, base.arch.hidden_dim)
        draft = make_checkpoint(base.arch, tensors, base.labels, "fine_tuned")
        model = fit_head(draft, list(labels), examples)
        acc = accuracy(model, examples)
        if acc != 1.0:
            raise RuntimeError(f"toy model {model_id!r} only reaches accuracy {acc} on its data")
        out.append(ToyTask(model_id, model, LabeledDataset(f"{model_id}_toy", tuple(examples))))
    return ToyFixture(base, out)
