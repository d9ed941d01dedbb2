"""Timestamp streams and the oscillator model of a time tagger.

All timestamps are integer picoseconds held in ``int64`` arrays. The on-disk
format is unsigned 64-bit, so anything negative or beyond ``2**63 - 1`` is
rejected rather than wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PS_PER_S = 10**12
MAX_PS = np.iinfo(np.int64).max


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimestampStream:
    """Sorted detection times of one channel on one tagger's timescale.

    Attributes:
        channel_id: small integer channel label (0-255 in the file format).
        resolution: tagger bin size in ps.
        events: non-decreasing integer picosecond timestamps.
        duration: nominal acquisition span in ps.
    """

    channel_id: int
    resolution: int
    events: np.ndarray = field(repr=False)
    duration: int

    def __post_init__(self):
        events = _frozen_array(self.events, np.int64)
        object.__setattr__(self, "events", events)
        if not 0 <= self.channel_id <= 255:
            raise ValueError(f"channel_id {self.channel_id} outside 0..255")
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1 ps")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if events.size:
            if events[0] < 0:
                raise ValueError("negative timestamp")
            bad = np.flatnonzero(np.diff(events) < 0)
            if bad.size:
                raise ValueError(f"events not sorted at index {bad[0] + 1}")

    def __len__(self):
        return self.events.size

    def __eq__(self, other):
        if not isinstance(other, TimestampStream):
            return NotImplemented
        return (
            self.channel_id == other.channel_id
            and self.resolution == other.resolution
            and self.duration == other.duration
            and np.array_equal(self.events, other.events)
        )

    @property
    def span(self) -> int:
        """Time between first and last event, in ps."""
        if self.events.size < 2:
            return 0
        return int(self.events[-1] - self.events[0])

    def between(self, start: int, stop: int) -> TimestampStream:
        """Sub-stream with ``start <= t < stop``; duration becomes ``stop - start``."""
        i, j = np.searchsorted(self.events, [start, stop], side="left")
        return TimestampStream(self.channel_id, self.resolution, self.events[i:j], max(stop - start, 0))


@dataclass(frozen=True)
class ClockModel:
    """Maps true time to a tagger's local timescale.

    ``tau(t) = phase_offset + (1 + frac_freq_offset) * t + 0.5 * freq_drift_rate * t**2``
    with ``t`` in seconds for the drift term, plus per-event white phase
    noise and round-half-even quantization to ``quantization`` ps.
    """

    phase_offset: float = 0.0  # ps
    frac_freq_offset: float = 0.0
    freq_drift_rate: float = 0.0  # 1/s
    white_phase_jitter: float = 0.0  # ps, std. dev.
    quantization: int = 1  # ps

    def __post_init__(self):
        if int(self.quantization) != self.quantization or self.quantization < 1:
            raise ValueError("quantization must be an integer >= 1 ps")
        object.__setattr__(self, "quantization", int(self.quantization))
        if self.white_phase_jitter < 0:
            raise ValueError("white_phase_jitter must be >= 0")

    def rate(self, t_ps) -> np.ndarray:
        """Local-time rate d(tau)/dt at true time ``t_ps``."""
        t_s = np.asarray(t_ps, dtype=np.float64) / PS_PER_S
        return 1.0 + self.frac_freq_offset + self.freq_drift_rate * t_s

    def deviation(self, t_ps) -> np.ndarray:
        """Noiseless ``tau(t) - t`` in ps, as float."""
        t = np.asarray(t_ps, dtype=np.float64)
        return (
            self.phase_offset
            + self.frac_freq_offset * t
            + 0.5 * self.freq_drift_rate * t * t / PS_PER_S
        )

    def is_increasing(self, t_min, t_max) -> bool:
        """True when the mapping is strictly increasing on ``[t_min, t_max]``."""
        return bool(np.all(self.rate([t_min, t_max]) > 0))


@dataclass(frozen=True, eq=False)
class PhaseSeries:
    """Phase difference samples (clock A minus clock B) in seconds, spaced ``tau0`` s."""

    tau0: float
    x: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        x = _frozen_array(self.x, np.float64)
        if x.ndim != 1:
            raise ValueError("x must be one-dimensional")
        object.__setattr__(self, "x", x)

    def __len__(self):
        return self.x.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.x.size) * self.tau0


def relative_delay(clock_a: ClockModel, clock_b: ClockModel, t_ps) -> np.ndarray:
    """Noiseless, unquantized ``tau_B(t) - tau_A(t)`` in ps."""
    return clock_b.deviation(t_ps) - clock_a.deviation(t_ps)


def _round_half_even_grid(base: np.ndarray, frac: np.ndarray, step: int) -> np.ndarray:
    """Round ``base + frac`` (int + float in [0, 1)) to the nearest multiple of ``step``."""
    k = np.floor_divide(base, step)
    rem2 = 2.0 * ((base - k * step) + frac)
    up = (rem2 > step) | ((rem2 == step) & (k % 2 == 1))
    return (k + up) * step


def _split(values: np.ndarray):
    whole = np.floor(values)
    return whole.astype(np.int64), values - whole


def apply_clock(true_times, clock: ClockModel, rng_seed=None, *, channel_id: int = 0,
                duration: int | None = None, drop_negative: bool = False) -> TimestampStream:
    """Timestamp true event times with a tagger running on ``clock``.

    Args:
        true_times: non-decreasing integer ps.
        clock: oscillator model.
        rng_seed: seed (or Generator) for the white phase noise.
        channel_id: label for the resulting stream.
        duration: nominal span stored on the stream; defaults to the input span.
        drop_negative: discard events that land before local time zero instead
            of raising; a tagger does not record before it starts.

    Returns:
        The quantized local timestamps, re-sorted if noise swapped neighbours.
    """
    t = np.asarray(true_times, dtype=np.int64)
    if t.size and np.any(np.diff(t) < 0):
        raise ValueError("true_times must be non-decreasing")
    if duration is None:
        duration = int(t[-1] - t[0]) if t.size else 0
    if t.size and not clock.is_increasing(t[0], t[-1]):
        raise ValueError("clock mapping is not increasing over the input span")

    corr = clock.deviation(t)
    if clock.white_phase_jitter > 0:
        rng = np.random.default_rng(rng_seed)
        corr = corr + rng.normal(0.0, clock.white_phase_jitter, t.size)

    whole, frac = _split(corr)
    bad = np.flatnonzero(whole > (MAX_PS - t) - 2 * clock.quantization)
    if bad.size:
        raise OverflowError(f"timestamp out of range at index {bad[0]}")
    out = _round_half_even_grid(t + whole, frac, clock.quantization)
    negative = out < 0
    if negative.any():
        if not drop_negative:
            raise OverflowError(f"timestamp out of range at index {np.flatnonzero(negative)[0]}")
        out = out[~negative]
    if clock.white_phase_jitter > 0:
        out.sort(kind="stable")
    return TimestampStream(channel_id, clock.quantization, out, int(duration))


def invert_clock_times(local_times, clock: ClockModel) -> np.ndarray:
    """Exact noiseless inverse of the clock mapping, as float ps.

    Solves ``phase_offset + (1 + y) t + a t**2 = tau`` in a cancellation-free
    form so that the sub-picosecond part survives at 1e15 ps magnitudes.
    """
    tau = np.asarray(local_times, dtype=np.int64)
    u_whole, u_frac = _inverse_parts(tau, clock)
    return u_whole.astype(np.float64) + u_frac


def _inverse_parts(tau: np.ndarray, clock: ClockModel):
    phi_whole = int(np.floor(clock.phase_offset))
    phi_frac = clock.phase_offset - phi_whole
    u_int = tau - phi_whole
    u = u_int.astype(np.float64) - phi_frac
    y = clock.frac_freq_offset
    a = 0.5 * clock.freq_drift_rate / PS_PER_S
    b = 1.0 + y
    e = 2.0 * y + y * y + 4.0 * a * u
    if np.any(1.0 + e <= 0) or b <= 0:
        raise ValueError("clock mapping is not increasing at the requested times")
    s = e / (np.sqrt(1.0 + e) + 1.0)
    delta = -u * (y + s) / (b + 1.0 + s)
    return u_int, delta - phi_frac


def invert_clock(stream: TimestampStream, clock: ClockModel) -> TimestampStream:
    """Map a stream back to true time, rounding to the nearest ps (ties to even)."""
    u_int, corr = _inverse_parts(stream.events, clock)
    whole, frac = _split(np.asarray(corr, dtype=np.float64))
    out = _round_half_even_grid(u_int + whole, frac, 1)
    if out.size and out[0] < 0:
        raise OverflowError("inverse maps an event before time zero")
    return TimestampStream(stream.channel_id, 1, out, stream.duration)
