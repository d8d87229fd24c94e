import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hm3 import checkpoint_store as cs
from hm3 import evaluation as ev
from hm3.checkpoint_store import make_checkpoint
from hm3.merge import MergeRecipe, ties_merge
from hm3.report import confusion_matrix, f1_scores, macro_f1
from hm3.transform import build_layout, expand_all
from conftest import FIXED_REPORT, small_checkpoint, write_stub


def _jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_load_dataset(tmp_path):
    rows = [{"text": f"t{i}", "expected_label": "a"} for i in range(3)]
    ds = ev.load_dataset(_jsonl(tmp_path / "three.jsonl", rows))
    assert ds.name == "three" and len(ds.examples) == 3 and not ds.mixed


def test_load_dataset_reports_bad_line(tmp_path):
    rows = [{"text": "ok", "expected_label": "a"}, {"expected_label": "a"}]
    with pytest.raises(ev.DatasetError, match=":2: missing or non-string 'text'"):
        ev.load_dataset(_jsonl(tmp_path / "bad.jsonl", rows))


def test_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("\n", encoding="utf-8")
    with pytest.raises(ev.DatasetError, match="empty dataset"):
        ev.load_dataset(tmp_path / "e.jsonl")


def test_dataset_label_must_fit_segment(tmp_path):
    layout = build_layout([("j", ["benign", "jailbreak"]), ("h", ["hate", "normal"])])
    path = _jsonl(tmp_path / "d.jsonl", [{"text": "x", "expected_label": "normal"}])
    assert ev.load_dataset(path, layout).target_segment == "h"
    with pytest.raises(ev.DatasetError):
        ev.load_dataset(path, layout, segment="j")
    bogus = _jsonl(tmp_path / "b.jsonl", [{"text": "x", "expected_label": "spam"}])
    with pytest.raises(ev.DatasetError, match="unknown label"):
        ev.load_dataset(bogus, layout)


def test_confusion_rows_are_expected():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 1, 0]]


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_confusion_and_f1_invariants(pairs):
    exp, pred = zip(*pairs)
    cm = confusion_matrix(exp, pred, 4)
    assert cm.sum() == len(pairs)
    assert cm.sum(axis=1).tolist() == [exp.count(k) for k in range(4)]
    scores, zero = f1_scores(cm)
    assert all(0 <= s <= 1 for s in scores)
    assert zero == [exp.count(k) == 0 for k in range(4)]
    assert macro_f1(scores, zero) == pytest.approx(sum(scores) / 4)


@pytest.mark.parametrize("c", [2, 3, 5])
def test_zero_support_policy(c):
    scores, zero = f1_scores(confusion_matrix([0] * 10, [0] * 10, c))
    assert macro_f1(scores, zero) == pytest.approx(1 / c)
    assert zero == [False] + [True] * (c - 1)
    assert macro_f1(scores, zero, exclude_zero_support=True) == 1.0


def _label_model(rng, labels, bias_winner):
    cp = small_checkpoint(rng, labels, scale=0.01)
    bias = np.zeros(len(labels))
    bias[bias_winner] = 100.0
    return make_checkpoint(cp.arch, {**cp.tensors, "head.bias": bias}, labels)


def test_perfect_and_wrong_constant_classifiers(rng):
    labels = ["a", "b", "c"]
    ds = ev.LabeledDataset("ones", tuple((f"text {i}", "a") for i in range(20)))
    right = ev.evaluate(_label_model(rng, labels, 0), [ds])
    r = right.get("ones")
    assert r.accuracy == 1.0 and r.zero_support == [False, True, True]
    assert r.macro_f1 == pytest.approx(1 / 3)
    wrong = ev.evaluate(_label_model(rng, labels, 2), [ds]).get("ones")
    assert wrong.accuracy == 0.0 and wrong.macro_f1 == 0.0


def test_sample_cap(rng):
    cp = small_checkpoint(rng, ["a", "b"])
    ds = ev.LabeledDataset("big", tuple((f"w{i}", "ab"[i % 2]) for i in range(10_000)))
    rep = ev.evaluate(cp, [ds], sample_cap=3000)
    assert rep.get("big").n_samples == 3000
    again = ev.evaluate(cp, [ds], sample_cap=3000)
    assert again.get("big").confusion == rep.get("big").confusion
    idx = ev.sample_indices(ds, 3000, 0)
    assert len(set(idx.tolist())) == 3000


def test_cross_check_plan(toy):
    layout, expanded, xbase = expand_all(toy.models, toy.base)
    merged = ties_merge(xbase, expanded, MergeRecipe("ties"))
    jb, hs = toy.datasets
    hate_only = hs.subset([i for i, (_, lab) in enumerate(hs.examples) if lab == "hate speech"], "hate_only")
    plan = [ev.EvalTask("hate_only", "jailbreak", "benign")]
    tasks = ev.cross_check_plan(layout, [jb, hate_only], plan)
    assert tasks == [ev.EvalTask("jailbreak_toy", "jailbreak"), ev.EvalTask("hate_only", "hatespeech"), plan[0]]
    rep = ev.evaluate(merged, [jb, hate_only], layout, plan=plan)
    cross = rep.get("hate_only", "jailbreak")
    assert cross.expected_label == "benign" and cross.n_samples == len(hate_only.examples)
    assert ev.cross_check_plan(layout, [jb], ()) == [ev.EvalTask("jailbreak_toy", "jailbreak")]
    with pytest.raises(ev.DatasetError):
        ev.cross_check_plan(layout, [jb, hate_only], [ev.EvalTask("hate_only", "jailbreak", "normal")])


def test_load_plan(tmp_path):
    p = tmp_path / "plan.json"
    p.write_text(json.dumps([{"dataset": "mmlu", "segment": "h", "expected_label": "normal"}]))
    assert ev.load_plan(p) == [ev.EvalTask("mmlu", "h", "normal")]
    p.write_text(json.dumps([{"dataset": "mmlu"}]))
    with pytest.raises(ev.DatasetError):
        ev.load_plan(p)


def test_emit_report(tmp_path, toy):
    layout, expanded, xbase = expand_all(toy.models, toy.base)
    merged = ties_merge(xbase, expanded, MergeRecipe("ties"))
    rep = ev.evaluate(merged, toy.datasets, layout, seed=3)
    files = ev.emit_report(rep, tmp_path / "a")
    names = sorted(p.name for p in files)
    assert names == ["confusion_hatespeech_toy_hatespeech.csv", "confusion_jailbreak_toy_jailbreak.csv",
                     "report.json", "scores.csv"]
    assert len((tmp_path / "a" / "scores.csv").read_text().splitlines()) == 3
    ev.emit_report(ev.evaluate(merged, toy.datasets, layout, seed=3), tmp_path / "b")
    for n in names:
        if n.endswith(".csv"):
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    one = ev.emit_report(ev.evaluate(merged, toy.datasets[:1], layout), tmp_path / "c")
    assert sum(p.name.startswith("confusion_") for p in one) == 1
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(doc["timings"]) == {"load_duration_ms", "inference_duration_ms"}


def test_external_evaluator_callable(tmp_path, toy):
    layout, expanded, _ = expand_all(toy.models)
    rep = ev.ExternalEvaluator(write_stub(tmp_path))(expanded[0], layout, toy.datasets[:1])
    assert rep.to_dict()["results"][0]["confusion"] == FIXED_REPORT["results"][0]["confusion"]


def test_compare_runtime(tmp_path, toy):
    layout, expanded, xbase = expand_all(toy.models, toy.base)
    merged = ties_merge(xbase, expanded, MergeRecipe("ties"))
    paths = []
    for name, cp in [("j", toy.tasks[0].model), ("h", toy.tasks[1].model), ("m", merged)]:
        cs.save(cp, tmp_path / name)
        paths.append(tmp_path / name)
    texts = [t for d in toy.datasets for t in d.texts]
    cmp = ev.compare_runtime(paths[:2], paths[2], texts)
    assert cmp.n_models == 2 and cmp.n_inputs == len(texts)
    assert cmp.individual.total_ms > cmp.merged.total_ms
    assert cmp.to_csv().splitlines()[0] == "metric,individual,merged,reduction_pct"
    self_cmp = ev.compare_runtime(paths[2:], paths[2], texts)
    assert self_cmp.n_models == 1 and abs(self_cmp.total_reduction) < 100
