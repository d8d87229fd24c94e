"""Reference external evaluator: the built-in runtime behind the command contract.

Invoked as ``builtin_evaluator.py --checkpoint P --dataset D... --layout L``;
prints one EvalReport JSON document on stdout. Real-model evaluators (for
example a transformers pipeline) implement the same arguments and output.
"""
import argparse
import json
import sys

from hm3.evaluation import evaluate, load_dataset
from hm3.transform import SegmentLayout


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--dataset", action="append", required=True)
    ap.add_argument("--layout", required=True)
    ap.add_argument("--sample-cap", type=int, default=None)
    args = ap.parse_args()
    with open(args.layout, encoding="utf-8") as f:
        layout = SegmentLayout.from_manifest(json.load(f))
    datasets = [load_dataset(p, layout) for p in args.dataset]
    report = evaluate(args.checkpoint, datasets, layout, sample_cap=args.sample_cap)
    sys.stdout.write(report.to_json() + "\n")


if __name__ == "__main__":
    main()
