import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vtfusion.backbone import BackboneSpec  # noqa: E402
from vtfusion.toydata import make_toy_set, write_toy_dataset  # noqa: E402
from vtfusion.trainer import TrainConfig, build_model, train  # noqa: E402

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def toy():
    return make_toy_set(seed=0)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    write_toy_dataset(root, "toy", seed=0)
    return root


@pytest.fixture(scope="session")
def toy_run(toy):
    """k=2, 500-iteration toy training run shared by the slow tests.

    Returns (checkpoint, frozen digest before training, trained model, seconds).
    """
    cfg = TrainConfig(k_shots=2, iterations=500, seed=0)
    start = time.perf_counter()
    model = build_model(cfg, BackboneSpec())
    before = model.frozen_digest()
    ckpt = train(list(toy.train[:2]), cfg, BackboneSpec(), model=model)
    return ckpt, before, model, time.perf_counter() - start


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line-per-criterion acceptance verdicts after the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
