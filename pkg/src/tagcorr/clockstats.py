"""Clock-difference statistics and a simulated digital tuning loop."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .timebase import PS_PER_S, ClockModel, PhaseSeries

DEFAULT_TUNING_RESOLUTION = 1e-12
REFERENCE_TICK_RATE = 10e6  # Hz, the 10 MHz output both clocks are compared on


@dataclass(frozen=True, eq=False)
class AdevCurve:
    tau: np.ndarray = field(repr=False)  # s
    adev: np.ndarray = field(repr=False)
    n: np.ndarray = field(repr=False)  # number of second differences used

    @property
    def points(self):
        return list(zip(self.tau.tolist(), self.adev.tolist(), self.n.tolist()))

    def __len__(self):
        return self.tau.size


def octave_ladder(n_samples: int):
    """m = 1, 2, 4, ... while at least one second difference remains."""
    m, out = 1, []
    while n_samples - 2 * m > 0:
        out.append(m)
        m *= 2
    return out


def overlapping_adev(p: PhaseSeries, m_values=None) -> AdevCurve:
    """Overlapping Allan deviation of a phase series.

    Averaging factors without enough samples are skipped with a warning.
    """
    x = p.x
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 phase samples")
    if m_values is None:
        m_values = octave_ladder(n)
    ms = sorted({int(m) for m in m_values})
    taus, devs, counts = [], [], []
    for m in ms:
        if m < 1:
            raise ValueError("averaging factors must be >= 1")
        k = n - 2 * m
        if k <= 0:
            warnings.warn(f"m={m} omitted: needs {2 * m + 1} samples, have {n}", stacklevel=2)
            continue
        d2 = x[2 * m:] - 2.0 * x[m:n - m] + x[:k]
        var = float(d2 @ d2) / (2.0 * m * m * p.tau0 * p.tau0 * k)
        taus.append(m * p.tau0)
        devs.append(math.sqrt(var))
        counts.append(k)
    return AdevCurve(np.asarray(taus, float), np.asarray(devs, float), np.asarray(counts, np.int64))


class FrequencyDriftFit(NamedTuple):
    y0: float
    drift: float  # 1/s
    residual_rms: float  # s


def fit_frequency_drift(p: PhaseSeries, cov: bool = False):
    """Least squares ``x(t) = c0 + y0 t + D t^2 / 2`` on a phase series.

    With ``cov=True`` also returns the 3x3 parameter covariance of
    ``(c0, y0, D)`` estimated from the residual scatter.
    """
    n = len(p)
    if n < 3:
        raise ValueError("need at least 3 phase samples")
    t = p.t
    # centre and scale time so the normal equations stay well conditioned
    t_mid = 0.5 * t[-1]
    t_scale = t_mid if t_mid > 0 else 1.0
    u = (t - t_mid) / t_scale
    basis = np.column_stack((np.ones(n), u, 0.5 * u * u))
    coef, *_ = np.linalg.lstsq(basis, p.x, rcond=None)
    resid = p.x - basis @ coef
    rms = float(np.sqrt(np.mean(resid**2)))
    # back to unscaled time origin at t = 0
    a0, a1, a2 = coef
    drift = a2 / t_scale**2
    y0 = a1 / t_scale - drift * t_mid
    fit = FrequencyDriftFit(float(y0), float(drift), rms)
    if not cov:
        return fit
    dof = max(n - 3, 1)
    s2 = float(resid @ resid) / dof
    inv = np.linalg.pinv(basis.T @ basis) * s2
    # Jacobian from scaled coefficients to (c0, y0, D)
    jac = np.array([
        [1.0, -t_mid / t_scale, 0.5 * t_mid**2 / t_scale**2],
        [0.0, 1.0 / t_scale, -t_mid / t_scale**2],
        [0.0, 0.0, 1.0 / t_scale**2],
    ])
    return fit, jac @ inv @ jac.T


@dataclass(frozen=True)
class TuningResult:
    steps: tuple  # (gate_time s, measured_y, applied_correction)
    final_residual_y: float
    converged: bool

    @property
    def n_corrections(self) -> int:
        return sum(1 for _, _, c in self.steps if c != 0)


def _compare(free: ClockModel, ref: ClockModel, t0_s: float, gate: float, rng, tick_rate: float):
    """Measured fractional frequency of ``free`` relative to ``ref`` over one gate.

    Both clocks timestamp the same tick train at ``tick_rate``; the slope of
    the phase difference is the least-squares fit over all ticks. For white
    phase noise that estimator is Gaussian with a closed-form variance, so
    the noise is drawn directly instead of simulating every tick.
    """
    t0 = t0_s * PS_PER_S
    t1 = (t0_s + gate) * PS_PER_S
    phase = lambda t: free.deviation(t) - ref.deviation(t)  # noqa: E731
    true_y = float(phase(t1) - phase(t0)) / (gate * PS_PER_S)
    sigma_rel = math.hypot(free.white_phase_jitter, ref.white_phase_jitter)  # ps
    if sigma_rel == 0:
        return true_y
    n_ticks = max(int(tick_rate * gate) + 1, 2)
    dt = gate / (n_ticks - 1)
    slope_sd = sigma_rel / PS_PER_S * math.sqrt(12.0 / (n_ticks * (n_ticks**2 - 1))) / dt
    return true_y + rng.normal(0.0, slope_sd)


def discipline(free_clock: ClockModel, reference: ClockModel, gate_time: float = 10.0,
               tuning_resolution: float = DEFAULT_TUNING_RESOLUTION, max_steps: int = 20,
               seed=None, *, tick_rate: float = REFERENCE_TICK_RATE):
    """Steer ``free_clock``'s frequency onto ``reference`` with a quantized tuning word.

    Each step measures the relative frequency over one gate and applies
    ``-round(measured / resolution) * resolution`` to the free clock's
    frequency offset. Drift is not touched. Stops once a measurement is
    below one resolution step.

    Returns:
        ``(tuned_clock, TuningResult)``.
    """
    if not gate_time > 0 or not tuning_resolution > 0:
        raise ValueError("gate_time and tuning_resolution must be positive")
    rng = np.random.default_rng(seed)
    clock = free_clock
    steps = []
    converged = False
    t = 0.0
    for _ in range(max_steps):
        measured = _compare(clock, reference, t, gate_time, rng, tick_rate)
        t += gate_time
        if abs(measured) < tuning_resolution:
            steps.append((gate_time, measured, 0.0))
            converged = True
            break
        correction = -round(measured / tuning_resolution) * tuning_resolution
        steps.append((gate_time, measured, correction))
        clock = replace(clock, frac_freq_offset=clock.frac_freq_offset + correction)
    residual = clock.frac_freq_offset - reference.frac_freq_offset
    return clock, TuningResult(tuple(steps), float(residual), converged)
