import dataclasses

import numpy as np
import pytest

from tagcorr import io
from tagcorr.timebase import TimestampStream

DESK_RATE = 1e5  # pairs/s; keeps simulations to seconds


def desk_config(preset: str, *, seed: int | None = None, **source):
    """Bundled preset at desk-scale rate, with optional source overrides."""
    cfg = io.load_config(preset, seed=seed)
    src = dataclasses.replace(cfg.source, pair_rate=source.pop("pair_rate", DESK_RATE), **source)
    return dataclasses.replace(cfg, source=src)


def replace_clock_b(cfg, **kw):
    return dataclasses.replace(cfg, clock_b=dataclasses.replace(cfg.clock_b, **kw))


def poisson_stream(rng, rate, duration_s, channel=0, start_ps=0):
    n = rng.poisson(rate * duration_s)
    span = int(duration_s * 1e12)
    ev = np.sort(rng.integers(start_ps, start_ps + span, n))
    return TimestampStream(channel, 1, ev, span)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
