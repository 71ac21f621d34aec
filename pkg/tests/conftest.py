import json
import time
import warnings

import numpy as np
import pytest

from unlearn_audit.config import PipelineConfig
from unlearn_audit.data import generate_synthetic
from unlearn_audit.model import TrainConfig, train_classifier
from unlearn_audit.numerics import make_rng
from unlearn_audit.pipeline import run_pipeline

# acceptance outcomes, printed in the terminal summary: {number: (passed, detail)}
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """4 classes in 8 dimensions, 60 samples per class."""
    return generate_synthetic(num_classes=4, samples_per_class=60, d_in=8, rng=make_rng(7, "small"))


@pytest.fixture(scope="session")
def small_model(small_data):
    train, test = small_data
    cfg = TrainConfig(epochs=15, lr=0.05, momentum=0.9, batch_size=32, l2=1e-4)
    return train_classifier(train, cfg, make_rng(7, "small-model"), test, hidden_dim=16, num_hidden=3)


@pytest.fixture(scope="session")
def default_data():
    return generate_synthetic(rng=make_rng(0, "data"))


@pytest.fixture(scope="session")
def default_model(default_data):
    train, test = default_data
    return train_classifier(train, TrainConfig(), make_rng(0, "model"), test)


def _run_default(root):
    cfg = PipelineConfig(output_dir=str(root))
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = run_pipeline(cfg)
    elapsed = time.perf_counter() - start
    doc = json.loads((root / "report" / "report.json").read_text())
    return {"config": cfg, "manifest": manifest, "seconds": elapsed, "report": doc, "root": root}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default pipeline, run once per session from an empty directory."""
    return _run_default(tmp_path_factory.mktemp("default_run"))


@pytest.fixture(scope="session")
def second_default_run(tmp_path_factory, default_run):
    return _run_default(tmp_path_factory.mktemp("default_run_again"))
