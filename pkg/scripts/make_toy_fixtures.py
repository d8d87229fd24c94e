"""Write the synthetic base model, two fine-tuned models and their datasets to a directory.

    python scripts/make_toy_fixtures.py out/toy [--seed 0] [--overlap 0.1]
"""
import argparse
import json
from pathlib import Path

from hm3 import checkpoint_store
from hm3.toy import build_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--examples", type=int, default=200)
    ap.add_argument("--overlap", type=float, default=0.0,
                    help="std of per-model dense-layer perturbations (0 = disjoint task vectors)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fx = build_fixture(args.seed, args.examples, overlap=args.overlap)
    checkpoint_store.save(fx.base, out / "base.hm3")
    written = {"base": str(out / "base.hm3"), "models": [], "datasets": []}
    for task in fx.tasks:
        checkpoint_store.save(task.model, out / f"{task.model_id}.hm3")
        (out / f"{task.dataset.name}.jsonl").write_text(task.dataset.to_jsonl(), encoding="utf-8")
        written["models"].append(str(out / f"{task.model_id}.hm3"))
        written["datasets"].append(str(out / f"{task.dataset.name}.jsonl"))
    print(json.dumps(written, indent=2))


if __name__ == "__main__":
    main()
