import numpy as np
import pytest
from hypothesis import settings

from hm3.checkpoint_store import make_checkpoint
from hm3.toy import build_fixture, random_arch

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

SMALL = dict(vocab_size=64, embed_dim=6, hidden_dim=5)


def small_checkpoint(rng, labels, role="fine_tuned", scale=0.5, **kw):
    arch = random_arch(len(labels), **{**SMALL, **kw})
    tensors = {n: rng.normal(0, scale, s) for n, s in arch.tensor_shapes().items()}
    return make_checkpoint(arch, tensors, labels, role)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    return build_fixture(0)


@pytest.fixture(scope="session")
def toy_overlap():
    return build_fixture(0, overlap=0.1)


FIXED_REPORT = {
    "results": [{
        "dataset": "stub_ds", "segment": "m", "labels": ["a", "b"],
        "confusion": [[3, 1], [0, 2]], "n_samples": 6, "accuracy": 5 / 6,
        "per_class_f1": [6 / 7, 0.8], "zero_support": [False, False], "macro_f1": (6 / 7 + 0.8) / 2,
        "probabilities": [[0.25, 0.75]],
    }],
    "timings": {"load_duration_ms": 1.5, "inference_duration_ms": 2.5},
    "meta": {"source": "stub"},
}


def write_stub(directory, report=FIXED_REPORT, exit_code=0):
    """A command that prints ``report`` as JSON and exits with ``exit_code``."""
    import json
    import shlex
    import sys

    path = directory / "stub_eval.py"
    path.write_text(
        "import json, sys\n"
        f"sys.stdout.write({json.dumps(report)!r})\n"
        f"sys.stderr.write('stub args: ' + ' '.join(sys.argv[1:]))\n"
        f"sys.exit({exit_code})\n",
        encoding="utf-8",
    )
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(path))}"
