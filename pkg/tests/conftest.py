import numpy as np
import pytest

from advtrack.evaluation import read_frame_csv, read_summary
from advtrack.harness import ExperimentConfig, run_experiment
from advtrack.trackmodel import TrackerModel
from helpers import VARIANTS, trained


@pytest.fixture(scope="session")
def fixture_seq_model():
    """Default synthetic sequence (seed 0) and a model trained on its frame 1."""
    return trained(0)


@pytest.fixture(scope="session")
def default_matrix(tmp_path_factory):
    """Default config, seeds 0..4, every mode plus branch and temporal variants."""
    cfg = ExperimentConfig(seeds=(0, 1, 2, 3, 4), vot=False, attack_variants=VARIANTS)
    out = run_experiment(cfg, tmp_path_factory.mktemp("matrix"))
    summary = read_summary(out)
    assert summary["failures"] == []
    return out, summary


@pytest.fixture(scope="session")
def median_mean_iou(default_matrix):
    """Per mode: median over seeds of the per-sequence mean IoU."""
    out, summary = default_matrix
    by_mode = {}
    for r in summary["runs"]:
        by_mode.setdefault(r["mode"], []).append(read_frame_csv(out / "frames" / f"{r['run_id']}.csv").iou.mean())
    return {m: float(np.median(v)) for m, v in by_mode.items()}


@pytest.fixture
def small_model():
    rng = np.random.default_rng(11)
    m = TrackerModel.init(rng, P=8, hidden=12, channels=1, reg_iou=0.3)
    m.b1 = rng.normal(0, 0.3, m.b1.shape)
    m.Wr = rng.normal(0, 0.5, m.Wr.shape)
    m.br = rng.normal(0, 0.5, m.br.shape)
    return m


def pytest_terminal_summary(terminalreporter):
    import helpers
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE):
            terminalreporter.write_line(line)
