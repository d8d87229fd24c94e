import hashlib
import json

import numpy as np
import pytest

from hm3 import checkpoint_store as cs
from hm3.cli import main
from hm3.toy import build_fixture
from conftest import FIXED_REPORT, small_checkpoint, write_stub


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    fx = build_fixture(0, overlap=0.1)
    cs.save(fx.base, d / "base.hm3")
    for t in fx.tasks:
        cs.save(t.model, d / f"{t.model_id}.hm3")
        (d / f"{t.dataset.name}.jsonl").write_text(t.dataset.to_jsonl(), encoding="utf-8")
    return d


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_expand(files, tmp_path, capsys):
    before = _digest(files)
    code, out = run(capsys, "expand", "--model", files / "jailbreak.hm3", "--model", files / "hatespeech.hm3",
                    "--base", files / "base.hm3", "--out", tmp_path)
    assert code == 0
    summary = json.loads(out.out)
    assert summary["total_width"] == 5
    cps = [cs.load(tmp_path / n) for n in ("jailbreak.expanded.hm3", "hatespeech.expanded.hm3", "base.expanded.hm3")]
    assert all(cp.arch.head_out_dim == 5 for cp in cps)
    assert _digest(files) == before


def test_expand_single_model_passes_through(files, tmp_path, capsys):
    code, _ = run(capsys, "expand", "--model", files / "jailbreak.hm3", "--out", tmp_path)
    assert code == 0
    orig, ex = cs.load(files / "jailbreak.hm3"), cs.load(tmp_path / "jailbreak.expanded.hm3")
    assert all(np.array_equal(orig.tensors[n], ex.tensors[n]) for n in orig.tensors)


def test_expand_incompatible(tmp_path, capsys, caplog):
    rng = np.random.default_rng(0)
    cs.save(small_checkpoint(rng, ["a", "b"]), tmp_path / "a.hm3")
    cs.save(small_checkpoint(rng, ["c", "d"], embed_dim=9), tmp_path / "b.hm3")
    code, out = run(capsys, "expand", "--model", tmp_path / "a.hm3", "--model", tmp_path / "b.hm3",
                    "--out", tmp_path / "o")
    assert code == 3
    assert "embed_dim" in caplog.text


def test_merge_soup_on_duplicate(files, tmp_path, capsys):
    m = files / "jailbreak.hm3"
    code, _ = run(capsys, "merge", "--model", m, "--model", m, "--strategy", "soup", "--out", tmp_path)
    assert code == 0
    merged, orig = cs.load(tmp_path / "merged.hm3"), cs.load(m)
    for n in ("embed.weight", "dense.weight", "dense.bias"):
        assert np.array_equal(merged.tensors[n], orig.tensors[n])


def test_merge_dare_ties_self_merge_is_bitwise(files, tmp_path, capsys):
    m = files / "hatespeech.hm3"
    code, _ = run(capsys, "merge", "--model", m, "--self-merge", "--strategy", "dare_ties", "--density", "1",
                  "--base", files / "base.hm3", "--out", tmp_path, "--seed", "3")
    assert code == 0
    assert cs.tensors_equal(cs.load(tmp_path / "merged.hm3"), cs.load(m))


def test_merge_recipe_file_and_idempotence(files, tmp_path, capsys):
    recipe = tmp_path / "r.json"
    recipe.write_text(json.dumps({"strategy": "dare_ties", "density": 0.4, "seed": 11}))
    args = ["merge", "--model", files / "jailbreak.hm3", "--model", files / "hatespeech.hm3",
            "--base", files / "base.hm3", "--recipe", recipe]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b", "--threads", "3")[0] == 0
    assert (tmp_path / "a" / "merged.hm3").read_bytes() == (tmp_path / "b" / "merged.hm3").read_bytes()
    assert cs.load(tmp_path / "a" / "merged.hm3").recipe["seed"] == 11


def test_merge_without_base(files, tmp_path, capsys, caplog):
    code, out = run(capsys, "merge", "--model", files / "jailbreak.hm3", "--model", files / "hatespeech.hm3",
                    "--strategy", "ties", "--out", tmp_path)
    assert code == 3
    assert "base required for task vectors" in caplog.text


def test_argument_errors_exit_2(files, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["merge", "--model", str(files / "jailbreak.hm3"), "--out", str(tmp_path)])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["merge", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_missing_file_exit_3(tmp_path, capsys):
    assert run(capsys, "eval", "--model", tmp_path / "nope.hm3", "--dataset", tmp_path / "d.jsonl",
               "--out", tmp_path)[0] == 3


def test_search(files, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HM3_THREADS", "2")
    args = ["search", "--model", files / "jailbreak.hm3", "--model", files / "hatespeech.hm3",
            "--base", files / "base.hm3", "--dataset", files / "jailbreak_toy.jsonl",
            "--dataset", files / "hatespeech_toy.jsonl", "--trials", "5", "--seed", "1"]
    code, out = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0 and json.loads(out.out)["trials"] == 5
    assert len((tmp_path / "a" / "trials.jsonl").read_text().splitlines()) == 5
    assert (tmp_path / "a" / "best.hm3").exists()
    run(capsys, *args, "--out", tmp_path / "b")
    for n in ("trials.jsonl", "scatter.csv", "best_recipe.json", "best.hm3"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_self_merge(files, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 1, "fixed_density": 1.0, "val_samples": 60, "test_samples": 100}))
    code, _ = run(capsys, "self-merge", "--model", files / "hatespeech.hm3", "--base", files / "base.hm3",
                  "--dataset", files / "hatespeech_toy.jsonl", "--search-config", cfg, "--out", tmp_path)
    assert code == 0
    assert cs.tensors_equal(cs.load(tmp_path / "best.hm3"), cs.load(files / "hatespeech.hm3"))


def test_eval_builtin(files, tmp_path, capsys):
    code, out = run(capsys, "eval", "--model", files / "jailbreak.hm3", "--dataset",
                    files / "jailbreak_toy.jsonl", "--out", tmp_path)
    assert code == 0
    assert json.loads(out.out)["mean_macro_f1"] == 1.0
    assert (tmp_path / "scores.csv").exists()


def test_eval_external_stub_passthrough(files, tmp_path, capsys):
    code, out = run(capsys, "eval", "--model", files / "jailbreak.hm3", "--dataset", files / "jailbreak_toy.jsonl",
                    "--evaluator", "external", "--evaluator-cmd", write_stub(tmp_path), "--out", tmp_path / "o")
    assert code == 0
    doc = json.loads((tmp_path / "o" / "report.json").read_text())
    assert doc["results"][0]["confusion"] == FIXED_REPORT["results"][0]["confusion"]
    assert doc["timings"] == FIXED_REPORT["timings"]


def test_eval_external_failure_exit_4(files, tmp_path, capsys, caplog):
    code, out = run(capsys, "eval", "--model", files / "jailbreak.hm3", "--dataset", files / "jailbreak_toy.jsonl",
                    "--evaluator", "external", "--evaluator-cmd", write_stub(tmp_path, exit_code=1),
                    "--out", tmp_path / "o")
    assert code == 4 and "external evaluator failed" in caplog.text


def test_compare_runtime_and_report(files, tmp_path, capsys):
    run(capsys, "merge", "--model", files / "jailbreak.hm3", "--model", files / "hatespeech.hm3",
        "--base", files / "base.hm3", "--out", tmp_path / "m")
    code, out = run(capsys, "compare-runtime", "--model", files / "jailbreak.hm3", "--model",
                    files / "hatespeech.hm3", "--merged", tmp_path / "m" / "merged.hm3",
                    "--dataset", files / "jailbreak_toy.jsonl", "--inputs", "500", "--out", tmp_path / "rt")
    assert code == 0
    table = json.loads(out.out)
    assert table["n_models"] == 2 and table["n_inputs"] == 500
    assert [r["metric"] for r in table["rows"]] == ["load_duration_ms", "inference_duration_ms", "total_ms"]
    assert (tmp_path / "rt" / "runtime.csv").exists()

    run(capsys, "eval", "--model", tmp_path / "m" / "merged.hm3", "--dataset", files / "jailbreak_toy.jsonl",
        "--dataset", files / "hatespeech_toy.jsonl", "--out", tmp_path / "ev")
    code, _ = run(capsys, "report", "--report", tmp_path / "ev" / "report.json", "--out", tmp_path / "re")
    assert code == 0
    for n in ("scores.csv", "confusion_jailbreak_toy_jailbreak.csv"):
        assert (tmp_path / "ev" / n).read_bytes() == (tmp_path / "re" / n).read_bytes()


def test_stdout_is_json_and_logs_go_to_stderr(files, tmp_path):
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "hm3.cli", "expand", "--model", str(files / "jailbreak.hm3"),
         "--model", str(files / "hatespeech.hm3"), "--out", str(tmp_path)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["total_width"] == 5
    assert "expanded 2 model(s)" in proc.stderr
