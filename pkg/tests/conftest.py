import numpy as np
import pytest

from pecnet.data import SceneBatch, gen_synthetic, window_samples


def micro_scene(seed: int = 0) -> SceneBatch:
    """Two interacting agents (a crossing pair), both in one batch."""
    samples = window_samples(gen_synthetic(1, 2, seed=seed, kinds=["crossing"]), stride=20)
    batch = SceneBatch.from_samples(samples, t_dist=2.0)
    assert batch.mask.all()
    return batch


@pytest.fixture
def micro():
    return micro_scene()


@pytest.fixture(scope="session")
def synth_batches():
    samples = window_samples(gen_synthetic(6, 4, seed=11), stride=20)
    return [SceneBatch.from_samples(samples, t_dist=2.0)]


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
