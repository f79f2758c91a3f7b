import time

import numpy as np
import pytest

from ridgevos import pipeline, synthvid

ACCEPTANCE_LINES = []

# Desk-scale learning setup shared by the pipeline and acceptance tests.
LEARN_SEED = 42
LEARN_TRAIN_VIDEOS = 25
LEARN_HELDOUT_VIDEOS = 5


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def learning_run():
    """Train C=64, S=2, lambda=5 for 2000 episodes on 25 synthetic videos; hold out 5."""
    t0 = time.perf_counter()
    videos = synthvid.make_dataset(LEARN_TRAIN_VIDEOS + LEARN_HELDOUT_VIDEOS, frames=12, size=64,
                                   seed=LEARN_SEED)
    train_set, heldout = videos[:LEARN_TRAIN_VIDEOS], videos[LEARN_TRAIN_VIDEOS:]
    cfg = pipeline.TrainConfig(episodes=2000, lam=5.0, splits=2, c_out=64, seed=LEARN_SEED)
    losses = []
    params = pipeline.train(train_set, cfg, log=lambda rec: losses.append(rec["loss"]))
    report = pipeline.evaluate(params, heldout, cfg.ridge())
    return {
        "params": params,
        "cfg": cfg,
        "train": train_set,
        "heldout": heldout,
        "losses": losses,
        "report": report,
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(label, ok, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
