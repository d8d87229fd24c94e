"""Command-line entry point: ``hm3 <subcommand> ...``.

Repeated ``--model`` flags are ordered: that order becomes the segment order
of the merged head. Logs go to stderr; artifacts go to ``--out`` and a short
JSON summary is printed to stdout.

Exit codes: 0 success, 2 bad arguments, 3 invalid input, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint_store
from .checkpoint_store import CheckpointError, compatible_for_merge
from .evaluation import (
    DatasetError,
    ExternalEvaluator,
    compare_runtime,
    emit_report,
    evaluate,
    load_dataset,
    load_plan,
)
from .merge import MergeError, MergeRecipe, merge
from .report import EvalReport, ReportError
from .runtime import RuntimeFailure, external_evaluate, layout_of
from .search import SearchConfig, emit_search_artifacts, run_search
from .transform import LayoutError, expand_all, unique_model_ids

log = logging.getLogger("hm3")

EXIT_OK, EXIT_ARGS, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _model_ids(paths) -> list[str]:
    return unique_model_ids([Path(p).stem for p in paths])


def _load_models(paths):
    return list(zip(_model_ids(paths), (checkpoint_store.load(p) for p in paths)))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    try:
        return max(1, int(os.environ.get("HM3_THREADS", "1")))
    except ValueError:
        raise UsageError("HM3_THREADS must be an integer") from None


def _emit(summary: dict) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


def _write_layout(layout, out: Path) -> Path:
    p = out / "layout.json"
    p.write_text(json.dumps(layout.to_manifest(), indent=2) + "\n", encoding="utf-8")
    return p


def cmd_expand(args) -> int:
    models = _load_models(args.model)
    base = checkpoint_store.load(args.base) if args.base else None
    if len(models) > 1 or base is not None:
        ok, diags = compatible_for_merge([cp for _, cp in models] + ([base] if base else []))
        if not ok:
            for d in diags:
                log.error("incompatible: %s", d)
            return EXIT_INPUT
    layout, expanded, xbase = expand_all(models, base)
    out = _out_dir(args)
    written = []
    for (mid, _), cp in zip(models, expanded):
        p = out / f"{mid}.expanded.hm3"
        checkpoint_store.save(cp, p)
        written.append(str(p))
    if xbase is not None:
        p = out / "base.expanded.hm3"
        checkpoint_store.save(xbase, p)
        written.append(str(p))
    written.append(str(_write_layout(layout, out)))
    log.info("expanded %d model(s) onto a %d-wide head", len(models), layout.total_width)
    _emit({"total_width": layout.total_width, "written": written})
    return EXIT_OK


def _read_recipe(args) -> MergeRecipe:
    if args.recipe:
        recipe = MergeRecipe.from_json(Path(args.recipe).read_text(encoding="utf-8"))
    else:
        recipe = MergeRecipe(strategy=args.strategy, density=args.density)
    if args.seed is not None:
        recipe = MergeRecipe.from_dict({**recipe.to_dict(), "seed": args.seed})
    return recipe


def cmd_merge(args) -> int:
    if args.self_merge and len(args.model) != 1:
        raise UsageError("--self-merge takes exactly one --model")
    if not args.self_merge and len(args.model) < 2:
        raise UsageError("merge needs at least two --model flags (or --self-merge)")
    recipe = _read_recipe(args)
    if recipe.strategy != "soup" and not args.base:
        raise MergeError("base required for task vectors (strategy %r)" % recipe.strategy)
    models = _load_models(args.model)
    base = checkpoint_store.load(args.base) if args.base else None
    layout, expanded, xbase = expand_all(models, base)
    inputs = expanded * 2 if args.self_merge else expanded
    merged = merge(xbase, inputs, recipe, threads=_threads(args))
    out = _out_dir(args)
    path = out / "merged.hm3"
    checkpoint_store.save(merged, path)
    _write_layout(layout, out)
    log.info("merged %d model(s) with %s", len(inputs), recipe.strategy)
    _emit({"merged": str(path), "recipe": recipe.to_dict(), "total_width": layout.total_width})
    return EXIT_OK


def _evaluator(args):
    if args.evaluator == "external":
        if not args.evaluator_cmd:
            raise UsageError("--evaluator external requires --evaluator-cmd")
        return ExternalEvaluator(args.evaluator_cmd)
    return None


def cmd_eval(args) -> int:
    if len(args.model) != 1:
        raise UsageError("eval takes exactly one --model")
    if args.evaluator == "external" and not args.evaluator_cmd:
        raise UsageError("--evaluator external requires --evaluator-cmd")
    out = _out_dir(args)
    if args.evaluator == "external":
        layout_path = args.layout
        if layout_path is None:
            layout_path = _write_layout(layout_of(checkpoint_store.load(args.model[0])), out)
        report = external_evaluate(args.evaluator_cmd, args.model[0], args.dataset, layout_path)
    else:
        cp = checkpoint_store.load(args.model[0])
        layout = layout_of(cp)
        datasets = [load_dataset(p, layout) for p in args.dataset]
        plan = load_plan(args.plan) if args.plan else []
        report = evaluate(args.model[0], datasets, layout, sample_cap=args.sample_cap,
                          seed=args.seed or 0, plan=plan, exclude_zero_support=args.exclude_zero_support)
    written = emit_report(report, out)
    for r in report.results:
        log.info("%s / %s: accuracy %.4f macro-F1 %.4f (n=%d)", r.dataset, r.segment, r.accuracy,
                 r.macro_f1, r.n_samples)
    _emit({"mean_macro_f1": report.mean_macro_f1, "written": [str(p) for p in written]})
    return EXIT_OK


def _search_config(args, self_merge: bool) -> SearchConfig:
    d = json.loads(Path(args.search_config).read_text(encoding="utf-8")) if args.search_config else {}
    if args.seed is not None:
        d["base_seed"] = args.seed
    if args.trials is not None:
        d["trials"] = args.trials
    d["self_merge"] = self_merge
    d.setdefault("workers", _threads(args))
    return SearchConfig.from_dict(d)


def _run_search(args, self_merge: bool) -> int:
    if self_merge and len(args.model) != 1:
        raise UsageError("self-merge takes exactly one --model")
    if not self_merge and len(args.model) < 2:
        raise UsageError("search needs at least two --model flags")
    config = _search_config(args, self_merge)
    evaluator = _evaluator(args)
    models = _load_models(args.model)
    base = checkpoint_store.load(args.base)
    datasets = [load_dataset(p) for p in args.dataset]
    plan = load_plan(args.plan) if args.plan else []
    result = run_search(models, base, datasets, plan, config, evaluator=evaluator)
    out = _out_dir(args)
    written = emit_search_artifacts(result.records, out, result.best_recipe)
    if result.best is not None:
        p = out / "best.hm3"
        checkpoint_store.save(result.best, p)
        written.append(p)
    _write_layout(result.layout, out)
    failed = sum(r.failed for r in result.records)
    best = max((r.val_mean_f1 for r in result.records if r.is_new_best), default=None)
    log.info("%d trials (%d failed); best validation mean macro-F1 %s", len(result.records), failed, best)
    _emit({"trials": len(result.records), "failed": failed, "best_val_mean_f1": best,
           "written": [str(p) for p in written]})
    return EXIT_OK


def cmd_search(args) -> int:
    return _run_search(args, self_merge=False)


def cmd_self_merge(args) -> int:
    return _run_search(args, self_merge=True)


def cmd_compare_runtime(args) -> int:
    datasets = [load_dataset(p) for p in args.dataset]
    texts = [t for d in datasets for t in d.texts]
    if args.inputs:
        texts = [texts[i % len(texts)] for i in range(args.inputs)]
    table = compare_runtime(args.model, args.merged, texts)
    out = _out_dir(args)
    (out / "runtime.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "runtime.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    sys.stderr.write(table.to_csv())
    _emit(table.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    report = EvalReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    written = emit_report(report, _out_dir(args))
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hm3", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, base=False):
        p.add_argument("--model", action="append", required=True, metavar="PATH",
                       help="checkpoint path; repeat in segment order")
        p.add_argument("--base", required=base, metavar="PATH")
        p.add_argument("--out", required=True, metavar="DIR")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads (default $HM3_THREADS or 1)")
        return p

    def eval_opts(p):
        p.add_argument("--dataset", action="append", required=True, metavar="PATH")
        p.add_argument("--plan", metavar="PATH", help="cross-check plan JSON")
        p.add_argument("--evaluator", choices=("builtin", "external"), default="builtin")
        p.add_argument("--evaluator-cmd", metavar="CMD")

    p = common(sub.add_parser("expand", help="HM3-expand models and base"))
    p.set_defaults(func=cmd_expand)

    p = common(sub.add_parser("merge", help="expand then merge"))
    p.add_argument("--recipe", metavar="PATH", help="MergeRecipe JSON")
    p.add_argument("--strategy", choices=("soup", "ties", "dare_ties"), default="ties")
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--self-merge", action="store_true", help="merge a single model with itself")
    p.set_defaults(func=cmd_merge)

    for name, func in (("search", cmd_search), ("self-merge", cmd_self_merge)):
        p = common(sub.add_parser(name, help="DARE-TIES density search"), base=True)
        eval_opts(p)
        p.add_argument("--search-config", metavar="PATH")
        p.add_argument("--trials", type=int)
        p.set_defaults(func=func)

    p = common(sub.add_parser("eval", help="evaluate one checkpoint"))
    eval_opts(p)
    p.add_argument("--layout", metavar="PATH")
    p.add_argument("--sample-cap", type=int, default=3000)
    p.add_argument("--exclude-zero-support", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("compare-runtime", help="N individual models vs one merged model"))
    p.add_argument("--merged", required=True, metavar="PATH")
    p.add_argument("--dataset", action="append", required=True, metavar="PATH")
    p.add_argument("--inputs", type=int, help="cycle dataset texts to this many inputs")
    p.set_defaults(func=cmd_compare_runtime)

    p = sub.add_parser("report", help="re-emit CSVs from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_INPUT
    except (CheckpointError, LayoutError, DatasetError, MergeError, ReportError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return EXIT_INPUT
    except ValueError as e:
        log.error("invalid input: %s", e)
        return EXIT_INPUT
    except (RuntimeFailure, RuntimeError, OSError) as e:
        log.error("runtime failure: %s", e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
