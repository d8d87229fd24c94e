import numpy as np
import pytest
from hypothesis import given, strategies as st

from hm3 import transform as tf
from hm3.checkpoint_store import CheckpointError
from hm3.runtime import forward, softmax, softmax_star
from conftest import small_checkpoint


def test_shared_label_gets_model_prefix():
    out = tf.sanitize_labels([("A", ("hate", "normal")), ("B", ("normal", "spam"))])
    assert out == [("hate", "A:normal"), ("B:normal", "spam")]


def test_uninformative_labels_are_renamed():
    assert tf.sanitize_labels([("jx", ("label0", "label1"))]) == [("jx:class0", "jx:class1")]
    assert tf.sanitize_labels([("m", ("LABEL_0", ""))]) == [("m:class0", "m:class1")]


def test_informative_unique_labels_unchanged():
    models = [("j", ("benign", "jailbreak")), ("h", ("hate speech", "normal", "offensive"))]
    assert tf.sanitize_labels(models) == [m[1] for m in models]


def test_label_is_not_uninformative_by_substring():
    assert not tf.is_uninformative("labeled")
    assert tf.is_uninformative("Label-3")


@pytest.mark.parametrize("widths,offsets", [((2, 3), (0, 2)), ((4,), (0,)), ((2, 2, 2), (0, 2, 4))])
def test_build_layout_offsets(widths, offsets):
    models = [(f"m{i}", [f"m{i}l{j}" for j in range(w)]) for i, w in enumerate(widths)]
    layout = tf.build_layout(models)
    assert tuple(s.offset for s in layout.segments) == offsets
    assert tuple(s.width for s in layout.segments) == widths
    assert layout.total_width == sum(widths)


def test_build_layout_rejects_duplicate_labels():
    with pytest.raises(tf.LayoutError):
        tf.build_layout([("a", ["x", "y"]), ("b", ["y", "z"])])


def test_layout_manifest_round_trip():
    layout = tf.layout_for([("a", ["x", "LABEL_1"]), ("b", ["x", "z", "w"])])
    assert tf.SegmentLayout.from_manifest(layout.to_manifest()) == layout
    assert layout.segment("a").label_index("LABEL_1") == 1
    assert layout.segment("b").label_index("x") == 0


@pytest.fixture
def pair(rng):
    j = small_checkpoint(rng, ["benign", "jailbreak"])
    h = small_checkpoint(rng, ["hate speech", "normal", "offensive"])
    base = small_checkpoint(rng, ["LABEL_0", "LABEL_1"], role="base")
    return j, h, base


def test_expand_head_bias_padding(pair):
    j, h, _ = pair
    layout = tf.layout_for([("j", j.labels), ("h", h.labels)])
    ej = tf.expand_head(j, layout, "j")
    eh = tf.expand_head(h, layout, "h")
    bj, bh = j.tensors["head.bias"], h.tensors["head.bias"]
    assert ej.tensors["head.bias"].tolist() == [bj[0], bj[1], 0, 0, 0]
    assert eh.tensors["head.bias"].tolist() == [0, 0, bh[0], bh[1], bh[2]]
    assert not ej.tensors["head.weight"][:, 2:].any()
    assert np.array_equal(ej.tensors["head.weight"][:, :2], j.tensors["head.weight"])
    for name in ("embed.weight", "dense.weight", "dense.bias"):
        assert np.array_equal(ej.tensors[name], j.tensors[name])
    assert ej.role == "expanded" and ej.labels == layout.labels
    assert tf.SegmentLayout.from_manifest(ej.layout) == layout


def test_single_model_expand_is_identity_on_head(pair):
    j, _, _ = pair
    layout = tf.layout_for([("j", j.labels)])
    ej = tf.expand_head(j, layout, "j")
    for name in ("head.weight", "head.bias"):
        assert np.array_equal(ej.tensors[name], j.tensors[name])


def test_expand_head_errors(pair):
    j, h, base = pair
    layout = tf.layout_for([("j", j.labels), ("h", h.labels)])
    with pytest.raises(tf.LayoutError):
        tf.expand_head(j, layout, "h")
    with pytest.raises(tf.LayoutError):
        tf.expand_head(j, layout, "nope")
    with pytest.raises(CheckpointError):
        tf.expand_head(base, layout, "j")


@pytest.mark.parametrize("width", [5, 1])
def test_make_base_zero_head(pair, width):
    _, _, base = pair
    layout = tf.build_layout([("m", [f"c{i}" for i in range(width)])])
    nb = tf.make_base(base, layout)
    assert nb.tensors["head.weight"].shape == (base.arch.hidden_dim, width)
    assert nb.tensors["head.bias"].shape == (width,)
    assert not nb.tensors["head.weight"].any() and not nb.tensors["head.bias"].any()
    again = tf.make_base(nb, layout)
    assert all(np.array_equal(again.tensors[n], nb.tensors[n]) for n in nb.tensors)


def test_make_base_arch_mismatch(rng, pair):
    j, _, _ = pair
    other = small_checkpoint(rng, ["a", "b"], role="base", hidden_dim=7)
    layout = tf.layout_for([("j", j.labels)])
    with pytest.raises(CheckpointError, match="mismatch"):
        tf.make_base(other, layout, reference=j)


def test_expand_all_incompatible(rng):
    a = small_checkpoint(rng, ["x", "y"])
    b = small_checkpoint(rng, ["z", "w"], embed_dim=3)
    with pytest.raises(CheckpointError, match="embed_dim"):
        tf.expand_all([("a", a), ("b", b)])


def test_unique_model_ids():
    assert tf.unique_model_ids(["a", "b", "a", "a"]) == ["a", "b", "a_2", "a_3"]


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 63), min_size=1, max_size=30))
def test_logit_and_probability_equivalence(seed, ids):
    rng = np.random.default_rng(seed)
    models = [(f"m{k}", small_checkpoint(rng, [f"m{k}c{i}" for i in range(w)])) for k, w in enumerate((2, 3, 4))]
    layout, expanded, _ = tf.expand_all(models)
    for (mid, cp), ex in zip(models, expanded):
        seg = layout.segment(mid)
        orig = forward(cp, ids)
        full = forward(ex, ids)
        assert np.array_equal(full[seg.offset:seg.stop], orig)
        mask = np.ones(layout.total_width, bool)
        mask[seg.offset:seg.stop] = False
        assert np.all(full[mask] == 0.0)
        np.testing.assert_allclose(softmax_star(full, layout)[mid], softmax(orig), atol=1e-6, rtol=0)
