import numpy as np
import pytest
from hypothesis import strategies as st

from evssl.events import EventStream
from evssl.synth import SynthConfig, gen_dataset


def random_stream(rng: np.random.Generator, width: int = 16, height: int = 12, n: int = 200, t_max: int = 10_000) -> EventStream:
    return EventStream(
        width,
        height,
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        np.sort(rng.integers(0, t_max, n)),
        rng.choice([-1, 1], n),
    )


@st.composite
def streams(draw, max_side: int = 32, max_events: int = 300):
    w = draw(st.integers(1, max_side))
    h = draw(st.integers(1, max_side))
    n = draw(st.integers(0, max_events))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_stream(np.random.default_rng(seed), w, h, n)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Small synthetic dataset: (config, train manifest, val manifest)."""
    cfg = SynthConfig(samples_per_class=8, val_samples_per_class=4, events_per_sample=800)
    root = tmp_path_factory.mktemp("synth")
    return cfg, gen_dataset(cfg, root, "train"), gen_dataset(cfg, root, "val")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
