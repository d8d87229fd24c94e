"""Desk-scale version of the full workflow on synthetic fixtures.

Builds two conflicting toy classifiers, merges them with TIES, runs a
DARE-TIES density search and a self-merge search, and writes all artifacts
to an output directory:

    python scripts/run_desk_search.py out/desk [--trials 100] [--seed 0]
"""
import argparse
import json
import logging
from pathlib import Path

from hm3.evaluation import emit_report, evaluate
from hm3.merge import MergeRecipe, ties_merge
from hm3.search import SearchConfig, emit_search_artifacts, run_search, run_self_merge
from hm3.toy import build_fixture
from hm3.transform import expand_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--overlap", type=float, default=0.1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    fx = build_fixture(args.seed, overlap=args.overlap)
    layout, expanded, xbase = expand_all(fx.models, fx.base)
    ties = ties_merge(xbase, expanded, MergeRecipe("ties", density=0.2))
    ties_report = evaluate(ties, fx.datasets, layout, sample_cap=None)
    emit_report(ties_report, out / "ties")

    cfg = SearchConfig(trials=args.trials, val_samples=60, test_samples=100, base_seed=args.seed)
    res = run_search(fx.models, fx.base, fx.datasets, config=cfg)
    emit_search_artifacts(res.records, out / "search", res.best_recipe)

    model_id, model = fx.models[1]
    ds = fx.datasets[1]
    selfm = run_self_merge((model_id, model), fx.base, [ds], cfg)
    held_out = selfm.baseline[ds.name]
    original = evaluate(model, [ds.subset(held_out) if held_out else ds], sample_cap=None).get(ds.name).macro_f1
    emit_search_artifacts(selfm.records, out / "self_merge", selfm.best_recipe)

    stars = [r for r in res.records if r.is_new_best]
    summary = {
        "ties_density_0.2_macro_f1": ties_report.scores(),
        "search_best": {"density": stars[-1].density, "val": stars[-1].val_mean_f1,
                        "test": stars[-1].test_mean_f1} if stars else None,
        "self_merge": {"original_macro_f1": original,
                       "best_val": max((r.val_mean_f1 for r in selfm.records if r.is_new_best), default=None)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
