import numpy as np
import pytest
import torch

from vlcritic import taskworld as tw
from vlcritic.critic import CriticConfig, CriticModel, Vocab


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tasks():
    return tw.enumerate_tasks()


@pytest.fixture(scope="session")
def small_episodes(tasks):
    """Four tasks, three expert successes and two failures each."""
    eps = []
    for k, task in enumerate(tasks[:4]):
        for s in range(3):
            eps.append(tw.generate_episode(task, tw.ExpertPolicy(), 100 * k + s))
        n = 0
        seed = 1000 + 100 * k
        while n < 2:
            ep = tw.generate_episode(task, tw.corrupt_policy(tw.ExpertPolicy(), 1.0, seed), seed)
            seed += 1
            if not ep.success:
                eps.append(ep)
                n += 1
    return eps


@pytest.fixture(scope="session")
def vocab(tasks):
    return Vocab.build([t.caption for t in tasks])


def tiny_config(**kw):
    base = dict(embed_dim=16, temporal_heads=2, text_layers=1, temporal_layers=1,
                frame_layers=1, frame_patch=16, frame_size=64, max_frames=12)
    base.update(kw)
    return CriticConfig(**base)


@pytest.fixture
def tiny_model(vocab):
    torch.manual_seed(0)
    return CriticModel(tiny_config(), vocab).eval()


def random_video(rng, K, size=64):
    return rng.random((K, size, size, 3), dtype=np.float32)


# one "criterion N: PASS/FAIL ..." line per acceptance check, echoed in the summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
