"""Synthetic two-arm photon-pair experiment.

A pair source feeds a local herald arm and a fibre-delayed signal arm; each arm
has its own detector and its own tagger clock. All randomness is drawn from
per-stage generators derived from one master seed, so a config plus a seed
fully determines both output streams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .timebase import PS_PER_S, ClockModel, TimestampStream, apply_clock

SPEED_OF_LIGHT = 299_792_458.0  # m/s
FIBER_GROUP_INDEX = 1.468

HERALD_CHANNEL_ID = 1
SIGNAL_CHANNEL_ID = 2


def fiber_delay_ps(length_m: float, group_index: float = FIBER_GROUP_INDEX) -> int:
    """Propagation delay of a fibre spool, rounded to the nearest ps."""
    return int(round(length_m * group_index / SPEED_OF_LIGHT * PS_PER_S))


def sub_seed(master: int, tag: str) -> int:
    """Derive an independent 64-bit seed for one stage from the master seed."""
    digest = hashlib.sha256(f"{int(master)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SourceConfig:
    pair_rate: float  # pairs/s
    duration: float  # s
    intrinsic_correlation_jitter: float = 10.0  # ps
    start: float = 0.0  # s, true time of the first possible emission

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise ValueError("pair_rate must be > 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.intrinsic_correlation_jitter < 0:
            raise ValueError("intrinsic_correlation_jitter must be >= 0")
        if self.start < 0:
            raise ValueError("start must be >= 0")

    @property
    def start_ps(self) -> int:
        return int(round(self.start * PS_PER_S))

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration * PS_PER_S))


@dataclass(frozen=True)
class ChannelConfig:
    delay: int = 0  # ps
    transmission: float = 1.0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError("transmission must be in [0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    # hardware defaults; not characterised by the experiment being modelled
    efficiency: float = 0.8
    jitter: float = 50.0  # ps
    dead_time: int = 25_000  # ps
    dark_rate: float = 100.0  # counts/s

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be in [0, 1]")
        if self.jitter < 0 or self.dead_time < 0 or self.dark_rate < 0:
            raise ValueError("jitter, dead_time and dark_rate must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceConfig
    herald_channel: ChannelConfig = field(default_factory=ChannelConfig)
    signal_channel: ChannelConfig = field(default_factory=ChannelConfig)
    herald_detector: DetectorConfig = field(default_factory=DetectorConfig)
    signal_detector: DetectorConfig = field(default_factory=DetectorConfig)
    clock_a: ClockModel = field(default_factory=ClockModel)
    clock_b: ClockModel = field(default_factory=ClockModel)
    seed: int = 0
    label: str = ""

    def expected_fwhm(self) -> float:
        """Gaussian FWHM of the coincidence peak implied by all timing noise.

        Ignores frequency smear, so it is only the ground truth when the two
        clocks share a rate.
        """
        var = (
            self.source.intrinsic_correlation_jitter**2
            + self.herald_detector.jitter**2
            + self.signal_detector.jitter**2
            + self.clock_a.white_phase_jitter**2
            + self.clock_b.white_phase_jitter**2
            + (self.clock_a.quantization**2 + self.clock_b.quantization**2) / 12.0
        )
        return 2.0 * np.sqrt(2.0 * np.log(2.0)) * np.sqrt(var)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate_pairs(source: SourceConfig, seed):
    """Emission times of herald and signal photons, in true-time ps.

    Pair events form a homogeneous Poisson process on
    ``[start, start + duration)``; each signal photon trails its herald by a
    Gaussian offset. Both outputs are sorted; index ``i`` in each refers to the
    same pair except where the jitter reorders two pairs closer than the
    jitter itself.
    """
    rng = _rng(seed)
    n = rng.poisson(source.pair_rate * source.duration)
    start = source.start_ps
    herald = np.sort(rng.integers(start, start + max(source.duration_ps, 1), size=n, dtype=np.int64))
    if source.intrinsic_correlation_jitter > 0 and n:
        offsets = np.rint(rng.normal(0.0, source.intrinsic_correlation_jitter, n)).astype(np.int64)
        signal = np.sort(np.maximum(herald + offsets, 0))
    else:
        signal = herald.copy()
    return herald, signal


def propagate(times, channel: ChannelConfig, seed) -> np.ndarray:
    """Keep each event with probability ``transmission`` and delay it."""
    times = np.asarray(times, dtype=np.int64)
    if channel.transmission < 1.0:
        keep = _rng(seed).random(times.size) < channel.transmission
        times = times[keep]
    return times + np.int64(channel.delay)


def detect(times, det: DetectorConfig, duration: float, seed, start: float = 0.0) -> np.ndarray:
    """Single-photon detector: loss, timing jitter, dark counts, dead time.

    Args:
        times: sorted photon arrival times in ps.
        det: detector parameters.
        duration: span over which dark counts are generated, in s.
        seed: seed or Generator.
        start: beginning of the dark-count span, in s.

    Returns:
        Sorted detection times in ps.
    """
    rng = _rng(seed)
    times = np.asarray(times, dtype=np.int64)
    if det.efficiency < 1.0:
        times = times[rng.random(times.size) < det.efficiency]
    if det.jitter > 0 and times.size:
        times = times + np.rint(rng.normal(0.0, det.jitter, times.size)).astype(np.int64)
    if det.dark_rate > 0 and duration > 0:
        n_dark = rng.poisson(det.dark_rate * duration)
        lo = int(round(start * PS_PER_S))
        dark = rng.integers(lo, lo + int(round(duration * PS_PER_S)), size=n_dark, dtype=np.int64)
        times = np.concatenate((times, dark))
    times = np.sort(np.maximum(times, 0))
    if det.dead_time > 0 and times.size:
        times = times[kernels.dead_time_mask(times, int(det.dead_time))]
    return times


def run_experiment(cfg: ExperimentConfig):
    """Simulate both arms and return ``(stream_a, stream_b)``.

    Stream A is the herald arm on ``clock_a``; stream B is the signal arm on
    ``clock_b``.
    """
    src = cfg.source
    herald, signal = generate_pairs(src, sub_seed(cfg.seed, "source"))
    duration_ps = src.duration_ps

    arms = []
    for name, times, channel, det, clock, cid in (
        ("herald", herald, cfg.herald_channel, cfg.herald_detector, cfg.clock_a, HERALD_CHANNEL_ID),
        ("signal", signal, cfg.signal_channel, cfg.signal_detector, cfg.clock_b, SIGNAL_CHANNEL_ID),
    ):
        t = propagate(times, channel, sub_seed(cfg.seed, f"{name}.channel"))
        t = detect(t, det, src.duration, sub_seed(cfg.seed, f"{name}.detector"),
                   start=src.start + channel.delay / PS_PER_S)
        tag = "clock_a" if name == "herald" else "clock_b"
        arms.append(apply_clock(t, clock, sub_seed(cfg.seed, tag), channel_id=cid,
                                duration=duration_ps, drop_negative=True))
    return arms[0], arms[1]


def expected_offset(cfg: ExperimentConfig, t_s: float) -> float:
    """Ground-truth position of the B-minus-A peak for pairs emitted at true time ``t_s``."""
    t_ps = t_s * PS_PER_S
    herald_t = t_ps + cfg.herald_channel.delay
    signal_t = t_ps + cfg.signal_channel.delay
    return float(
        signal_t + cfg.clock_b.deviation(signal_t) - herald_t - cfg.clock_a.deviation(herald_t)
    )


__all__ = [
    "ChannelConfig",
    "DetectorConfig",
    "ExperimentConfig",
    "SourceConfig",
    "TimestampStream",
    "detect",
    "expected_offset",
    "fiber_delay_ps",
    "generate_pairs",
    "propagate",
    "run_experiment",
    "sub_seed",
]
