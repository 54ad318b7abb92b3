import json
import time

import numpy as np
import pytest

from acceptance_log import RESULTS
from spurank.dataset import SyntheticConfig, generate_synthetic
from spurank.detection import MockDetector, batch_score
from spurank.pipeline import config_from_dict, run_pipeline


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        status, detail = RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status:6s} {detail}")


def fixture_run_config(out_dir, seed):
    """Default-size fixture, top and bot heads at k=100, all three eval families."""
    return {"output_dir": str(out_dir), "synthetic": {"seed": seed}, "seed": seed,
            "strategies": ["top", "bot"], "k_values": [100]}


class SeedRuns:
    """Full pipeline runs on the default fixture, one per seed, computed on first use."""

    def __init__(self, base):
        self.base = base
        self._runs = {}

    def get(self, seed):
        if seed not in self._runs:
            out = self.base / f"seed{seed}"
            cfg = config_from_dict(fixture_run_config(out, seed))
            t0 = time.process_time()
            run_pipeline(cfg)
            cpu = time.process_time() - t0
            summary = json.loads((out / "summary.json").read_text())
            by_label = {r["label"]: r for r in summary["results"]}
            self._runs[seed] = (by_label, out, cpu)
        return self._runs[seed]


@pytest.fixture(scope="session")
def seed_runs(tmp_path_factory):
    return SeedRuns(tmp_path_factory.mktemp("seed_runs"))


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """3 classes x 30 train, 10 val, 5 ood images."""
    root = tmp_path_factory.mktemp("small_fixture")
    cfg = SyntheticConfig(num_classes=3, per_class=30, val_per_class=10, ood_per_class=5, seed=7)
    manifest, truth = generate_synthetic(cfg, root)
    return cfg, root, manifest, {g.image_id: g for g in truth}


@pytest.fixture(scope="session")
def full_fixture(tmp_path_factory):
    """The default 10 x 300 fixture (seed 0) scored by the mock detector."""
    root = tmp_path_factory.mktemp("full_fixture")
    cfg = SyntheticConfig(seed=0)
    manifest, truth = generate_synthetic(cfg, root)
    truth = {g.image_id: g for g in truth}
    table = batch_score(manifest, MockDetector(truth))
    return cfg, root, manifest, truth, table


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
