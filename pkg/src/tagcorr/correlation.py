"""Coincidence peak retrieval between two independently clocked streams.

The pipeline is: coarse FFT cross-correlation to find the gross B-minus-A
offset, an exact fine histogram around it, a Gaussian-plus-background fit,
and optionally a per-slice drift track that feeds a software retiming of B.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import kernels
from .timebase import PS_PER_S, TimestampStream

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

DEFAULT_BIN_PS = 5
DEFAULT_SPAN_PS = 100_000  # +-50 ns
DEFAULT_COARSE_BIN_PS = 10_000
DEFAULT_SEARCH_RANGE_PS = 1_000_000_000  # +-1 ms

MAX_BINS = 10_000_000
BRUTE_FORCE_MAX_PAIRS = 10**8
_DELAY_LIMIT = 2**62


class NoSignificantOffsetError(RuntimeError):
    """Coarse search found no peak above the accidental background."""

    def __init__(self, best_offset: int, significance: float):
        self.best_offset = int(best_offset)
        self.significance = float(significance)
        super().__init__(
            f"no significant offset (best candidate {self.best_offset} ps, "
            f"significance {self.significance:.2f} sigma)"
        )


class NoPeakError(RuntimeError):
    """Histogram has no bin clearly above its background."""


@dataclass(frozen=True, eq=False)
class CorrelationHistogram:
    center_offset: int  # ps
    bin_width: int  # ps
    counts: np.ndarray = field(repr=False)
    span: int  # ps, full width
    acq_duration: int  # ps
    n_a: int
    n_b: int

    @property
    def lo(self) -> int:
        """Smallest integer delay counted in bin 0."""
        return _bin_origin(self.center_offset, self.span, self.bin_width)

    @property
    def taus(self) -> np.ndarray:
        """Bin-centre delays in ps: the mean of the integer delays each bin holds."""
        return self.lo + np.arange(self.counts.size) * self.bin_width + 0.5 * (self.bin_width - 1)

    def __eq__(self, other):
        if not isinstance(other, CorrelationHistogram):
            return NotImplemented
        return (
            (self.center_offset, self.bin_width, self.span, self.acq_duration, self.n_a, self.n_b)
            == (other.center_offset, other.bin_width, other.span, other.acq_duration, other.n_a, other.n_b)
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class PeakFit:
    center: float  # ps
    fwhm: float  # ps
    amplitude: float  # counts
    background: float  # counts/bin
    residual_rms: float  # counts
    converged: bool
    iterations: int = 0

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True, eq=False)
class DriftTrack:
    """Peak centre against wall time with a straight-line fit.

    ``wall_time`` is the slice midpoint on stream A's timescale in s;
    ``fitted_y`` is the slope in ps/s times 1e-12.
    """

    slice_duration: float
    wall_time: np.ndarray = field(repr=False)
    center: np.ndarray = field(repr=False)
    fwhm: np.ndarray = field(repr=False)
    fitted_y: float | None
    fitted_intercept: float | None
    fit_residual_rms: float | None
    failed_slices: tuple = ()

    @property
    def slope_ps_per_s(self) -> float | None:
        return None if self.fitted_y is None else self.fitted_y * PS_PER_S

    @property
    def slice_centers(self):
        return list(zip(self.wall_time.tolist(), self.center.tolist(), self.fwhm.tolist()))

    @property
    def valid(self) -> bool:
        return self.fitted_y is not None and math.isfinite(self.fitted_y)


# --- histogramming -----------------------------------------------------------


def _events(x) -> np.ndarray:
    if isinstance(x, TimestampStream):
        return x.events
    arr = np.ascontiguousarray(x, dtype=np.int64)
    if arr.size and np.any(np.diff(arr) < 0):
        raise ValueError("input timestamps must be sorted")
    return arr


def _acq_duration(a, b) -> int:
    durations = [x.duration for x in (a, b) if isinstance(x, TimestampStream)]
    if durations:
        return int(min(durations))
    spans = [int(e[-1] - e[0]) for e in (_events(a), _events(b)) if e.size > 1]
    return max(spans, default=0)


def _bin_origin(center_offset: int, span: int, bin_width: int) -> int:
    # the bin holding center_offset is centred on it, so quantized delays
    # land mid-bin rather than on an edge
    return center_offset - span // 2 - bin_width // 2


def _window(center_offset: int, span: int, bin_width: int):
    center_offset, span, bin_width = int(center_offset), int(span), int(bin_width)
    if bin_width < 1 or span < bin_width:
        raise ValueError("need bin_width >= 1 and span >= bin_width")
    if span % bin_width:
        raise ValueError("span must be an integer multiple of bin_width")
    nbins = span // bin_width
    if nbins > MAX_BINS:
        raise ValueError(f"{nbins} bins exceeds the {MAX_BINS} limit")
    lo = _bin_origin(center_offset, span, bin_width)
    if abs(lo) + span >= _DELAY_LIMIT:
        raise ValueError("histogram window exceeds the representable delay range")
    return lo, nbins


def coincidence_histogram(a, b, center_offset: int, span: int = DEFAULT_SPAN_PS,
                          bin_width: int = DEFAULT_BIN_PS) -> CorrelationHistogram:
    """Exact histogram of ``b_j - a_i`` over ``center_offset +- span/2``.

    Args:
        a, b: sorted streams (or int64 arrays).
        center_offset: window midpoint in ps.
        span: full window width in ps, a multiple of ``bin_width``.
        bin_width: bin size in ps.
    """
    ea, eb = _events(a), _events(b)
    lo, nbins = _window(center_offset, span, bin_width)
    counts = kernels.coincidence_counts(ea, eb, lo, int(bin_width), nbins)
    return CorrelationHistogram(int(center_offset), int(bin_width), counts, int(span),
                                _acq_duration(a, b), ea.size, eb.size)


def partition_bounds(a_events: np.ndarray, b_events: np.ndarray, lo: int, hi: int, n_parts: int):
    """Index ranges for partitioned histogramming.

    A is cut into disjoint contiguous index ranges, so every pair ``(i, j)``
    is owned by exactly one part through its A index. Each part receives the
    B range ``[a_first + lo, a_last + hi)``; B events near a boundary are
    replicated into both neighbours, but because ownership follows ``i`` no
    pair is counted twice and the parts merge by plain addition.
    """
    n_parts = max(1, min(int(n_parts), max(a_events.size, 1)))
    cuts = np.linspace(0, a_events.size, n_parts + 1).round().astype(np.int64)
    bounds = []
    for i0, i1 in zip(cuts[:-1], cuts[1:]):
        if i1 <= i0:
            continue
        j0 = int(np.searchsorted(b_events, a_events[i0] + lo, side="left"))
        j1 = int(np.searchsorted(b_events, a_events[i1 - 1] + hi, side="left"))
        bounds.append((int(i0), int(i1), j0, j1))
    return bounds


def coincidence_histogram_parallel(a, b, center_offset: int, span: int = DEFAULT_SPAN_PS,
                                   bin_width: int = DEFAULT_BIN_PS, n_parts: int = 4,
                                   workers: int | None = None) -> CorrelationHistogram:
    """Partitioned version of :func:`coincidence_histogram`; identical output."""
    ea, eb = _events(a), _events(b)
    lo, nbins = _window(center_offset, span, bin_width)
    hi = lo + nbins * int(bin_width)
    bounds = partition_bounds(ea, eb, lo, hi, n_parts)

    def run(bd):
        i0, i1, j0, j1 = bd
        return kernels.coincidence_counts(ea[i0:i1], eb[j0:j1], lo, int(bin_width), nbins)

    counts = np.zeros(nbins, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=workers or len(bounds) or 1) as pool:
        for part in pool.map(run, bounds):
            counts += part
    return CorrelationHistogram(int(center_offset), int(bin_width), counts, int(span),
                                _acq_duration(a, b), ea.size, eb.size)


def brute_force_histogram(a, b, center_offset: int, span: int = DEFAULT_SPAN_PS,
                          bin_width: int = DEFAULT_BIN_PS) -> CorrelationHistogram:
    """Reference histogram from full pair enumeration. Test oracle only."""
    ea, eb = _events(a), _events(b)
    if ea.size * eb.size > BRUTE_FORCE_MAX_PAIRS:
        raise ValueError("too many pairs for brute-force enumeration")
    lo, nbins = _window(center_offset, span, bin_width)
    width = nbins * int(bin_width)
    counts = np.zeros(nbins, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(eb.size, 1))
    for start in range(0, ea.size, chunk):
        diff = eb[None, :] - ea[start:start + chunk, None] - lo
        diff = diff[(diff >= 0) & (diff < width)]
        counts += np.bincount(diff // int(bin_width), minlength=nbins)
    return CorrelationHistogram(int(center_offset), int(bin_width), counts, int(span),
                                _acq_duration(a, b), ea.size, eb.size)


def normalize_g2(h: CorrelationHistogram):
    """Return ``(taus, g2)`` normalised so uncorrelated streams sit at 1."""
    if h.n_a <= 0 or h.n_b <= 0 or h.acq_duration <= 0:
        raise ValueError("normalisation needs non-zero event counts and duration")
    g2 = h.counts * (h.acq_duration / (h.n_a * h.n_b * h.bin_width))
    return h.taus, g2


# --- coarse offset search ----------------------------------------------------


@dataclass(frozen=True)
class CoarseResult:
    offset: int  # ps
    significance: float  # Gaussian-equivalent, corrected for the number of lags
    peak_counts: int
    background: float  # mean accidental counts per lag
    n_blocks: int


def _significance(peak: float, background: float, n_lags: int) -> float:
    """Gaussian z of seeing ``peak`` or more in any of ``n_lags`` Poisson lags."""
    if peak <= background:
        return 0.0
    log_p = stats.poisson.logsf(peak - 1, background)
    if not np.isfinite(log_p):
        # sf underflowed; bound it by the leading term of its series
        log_p = stats.poisson.logpmf(peak, background) - math.log1p(-background / (peak + 1))
    p = math.exp(log_p)
    if p * n_lags < 1e-3:
        log_any = math.log(n_lags) + log_p
    else:
        log_any = math.log(-math.expm1(n_lags * math.log1p(-min(p, 1 - 1e-16))))
    return float(-special.ndtri_exp(log_any))


def coarse_correlation(a, b, coarse_bin: int = DEFAULT_COARSE_BIN_PS,
                       search_range: int = DEFAULT_SEARCH_RANGE_PS, *,
                       max_blocks: int = 64, stop_significance: float = 10.0) -> CoarseResult:
    """FFT cross-correlation of binned streams over ``+-search_range``.

    Stream A is cut into blocks; each block is correlated against the part of
    B that can pair with it and the results are summed until the peak is
    unambiguous or ``max_blocks`` blocks have been used.
    """
    ea, eb = _events(a), _events(b)
    if ea.size == 0 or eb.size == 0:
        raise ValueError("coarse search needs two non-empty streams")
    coarse_bin = int(coarse_bin)
    if coarse_bin < 1 or search_range < coarse_bin:
        raise ValueError("need coarse_bin >= 1 and search_range >= coarse_bin")
    for s in (a, b):
        if isinstance(s, TimestampStream) and search_range > s.duration:
            raise ValueError("search_range exceeds stream duration")

    n_half = -(-int(search_range) // coarse_bin)
    reach = n_half * coarse_bin
    n_lags = 2 * n_half + 1
    block = max(2 * reach, (1 << 16) * coarse_bin)
    nfft = 1 << int(math.ceil(math.log2(block // coarse_bin + 2 * n_half + 2)))

    corr = np.zeros(n_lags, dtype=np.float64)
    t0, t_end = int(ea[0]), int(ea[-1])
    n_blocks = 0
    peak_idx, z = 0, 0.0
    bg = 0.0
    start = t0
    while start <= t_end and n_blocks < max_blocks:
        i0, i1 = np.searchsorted(ea, [start, start + block], side="left")
        if i1 > i0:
            j0, j1 = np.searchsorted(eb, [start - reach, start + block + reach + coarse_bin], side="left")
            ha = np.bincount((ea[i0:i1] - start) // coarse_bin, minlength=nfft)[:nfft]
            hb = np.bincount((eb[j0:j1] - (start - reach)) // coarse_bin, minlength=nfft)[:nfft]
            cc = np.fft.irfft(np.conj(np.fft.rfft(ha)) * np.fft.rfft(hb), nfft)
            corr += np.rint(cc[:n_lags])
            n_blocks += 1

            peak_idx = int(np.argmax(corr))
            peak = corr[peak_idx]
            mask = np.ones(n_lags, dtype=bool)
            mask[max(peak_idx - 2, 0):peak_idx + 3] = False
            total = corr.sum()
            bg = float(corr[mask].mean()) if mask.any() else 0.0
            bg = max(bg, 1.0 / n_lags, (total - peak) / n_lags if total > peak else 0.0)
            z = _significance(peak, bg, n_lags)
            if z >= stop_significance:
                break
        start += block

    offset = peak_idx * coarse_bin - reach
    return CoarseResult(int(offset), z, int(corr[peak_idx]), bg, n_blocks)


def coarse_offset_search(a, b, coarse_bin: int = DEFAULT_COARSE_BIN_PS,
                         search_range: int = DEFAULT_SEARCH_RANGE_PS, *,
                         min_significance: float = 3.0, **kwargs) -> int:
    """Gross B-minus-A delay in ps, on the ``coarse_bin`` grid.

    Raises:
        NoSignificantOffsetError: best lag is below ``min_significance``.
    """
    res = coarse_correlation(a, b, coarse_bin, search_range, **kwargs)
    if res.significance < min_significance:
        raise NoSignificantOffsetError(res.offset, res.significance)
    return res.offset


# --- peak fitting ------------------------------------------------------------


def _gauss_model(p, x):
    bkg, amp, mu, sigma = p
    g = np.exp(-0.5 * ((x - mu) / sigma) ** 2)
    return bkg + amp * g, g


def fit_peak(h: CorrelationHistogram, max_iter: int = 100, rtol: float = 1e-6) -> PeakFit:
    """Least-squares fit of ``B + A exp(-(tau - mu)^2 / (2 sigma^2))``.

    Starts from a median background over the outer quarters and moments of
    the central excess, then refines with Levenberg-Marquardt damping.
    """
    y = np.asarray(h.counts, dtype=np.float64)
    n = y.size
    if n < 7:
        raise ValueError("fit needs at least 7 bins")
    bw = float(h.bin_width)
    x = np.arange(n) * bw + 0.5 * (bw - 1.0)  # relative to h.lo, for conditioning
    x_origin = float(h.lo)

    q = max(1, n // 4)
    bkg0 = float(np.median(np.concatenate((y[:q], y[-q:]))))
    if not np.any(y > bkg0 + 5.0 * math.sqrt(max(bkg0, 0.0))):
        raise NoPeakError("no bin exceeds background + 5 sqrt(background)")

    excess = y - bkg0
    k = int(np.argmax(excess))
    amp0 = float(excess[k])
    cut = amp0 / 10.0
    left, right = k, k
    while left > 0 and excess[left - 1] > cut:
        left -= 1
    while right < n - 1 and excess[right + 1] > cut:
        right += 1
    w = np.clip(excess[left:right + 1], 0.0, None)
    xs = x[left:right + 1]
    mu0 = float(np.sum(w * xs) / np.sum(w))
    sigma0 = float(math.sqrt(max(np.sum(w * (xs - mu0) ** 2) / np.sum(w), (bw / 2.0) ** 2)))

    p = np.array([bkg0, amp0, mu0, sigma0])
    scale = np.array([1.0, 1.0, bw, bw])
    lam = 1e-3
    f, g = _gauss_model(p, x)
    r = y - f
    sse = float(r @ r)
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        bkg, amp, mu, sigma = p
        d = x - mu
        jac = np.column_stack((np.ones(n), g, amp * g * d / sigma**2, amp * g * d**2 / sigma**3))
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), jtr)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        small = np.all(np.abs(step) <= rtol * np.maximum(np.abs(p), scale))
        trial = p + step
        trial[3] = abs(trial[3]) or sigma
        f_new, g_new = _gauss_model(trial, x)
        r_new = y - f_new
        sse_new = float(r_new @ r_new)
        if sse_new <= sse:
            p, g, r, sse = trial, g_new, r_new, sse_new
            lam = max(lam / 10.0, 1e-12)
            if small:
                converged = True
                break
        else:
            if small:
                # already at the minimum to within tolerance
                converged = True
                break
            lam *= 10.0
            if lam > 1e16:
                break

    bkg, amp, mu, sigma = p
    return PeakFit(
        center=x_origin + float(mu),
        fwhm=FWHM_PER_SIGMA * abs(float(sigma)),
        amplitude=float(amp),
        background=float(bkg),
        residual_rms=math.sqrt(sse / n),
        converged=bool(converged and amp > 0),
        iterations=it,
    )


# --- drift tracking and compensation ----------------------------------------


def correlate(a, b, *, bin_width: int = DEFAULT_BIN_PS, span: int = DEFAULT_SPAN_PS,
              coarse_bin: int = DEFAULT_COARSE_BIN_PS,
              search_range: int = DEFAULT_SEARCH_RANGE_PS):
    """Coarse search, fine histogram and fit in one call. Returns ``(hist, fit)``."""
    offset = coarse_offset_search(a, b, coarse_bin, search_range)
    hist = coincidence_histogram(a, b, offset, span, bin_width)
    return hist, fit_peak(hist)


def track_drift(a: TimestampStream, b: TimestampStream, slice_duration: float = 1.0, *,
                bin_width: int = DEFAULT_BIN_PS, span: int = DEFAULT_SPAN_PS,
                coarse_bin: int = DEFAULT_COARSE_BIN_PS,
                search_range: int = DEFAULT_SEARCH_RANGE_PS) -> DriftTrack:
    """Fit the peak in consecutive wall-time slices and regress centre on time.

    Slices partition stream A from its first event; a trailing partial slice
    is kept when it covers at least half a slice. Slices whose coarse search
    or fit fails are left out and listed in ``failed_slices``.
    """
    if not slice_duration > 0:
        raise ValueError("slice_duration must be positive")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty stream")
    step = int(round(slice_duration * PS_PER_S))
    origin = int(a.events[0])
    total = max(a.span, a.duration)
    if total < 2 * step:
        raise ValueError("stream shorter than two slices")
    n_slices = total // step + (1 if total % step >= step // 2 else 0)
    search_range = min(int(search_range), step // 2)
    margin = search_range + span + coarse_bin

    times, centers, widths, failed = [], [], [], []
    for k in range(n_slices):
        lo = origin + k * step
        hi = min(lo + step, origin + total + 1)
        sa = a.between(lo, hi)
        sb = b.between(max(lo - margin, 0), hi + margin)
        mid = 0.5 * (lo + hi) / PS_PER_S
        if len(sa) == 0 or len(sb) == 0:
            failed.append((mid, "empty slice"))
            continue
        sa = TimestampStream(sa.channel_id, sa.resolution, sa.events, hi - lo)
        sb = TimestampStream(sb.channel_id, sb.resolution, sb.events, max(sb.duration, hi - lo))
        try:
            _, fit = correlate(sa, sb, bin_width=bin_width, span=span,
                               coarse_bin=coarse_bin, search_range=search_range)
        except (NoSignificantOffsetError, NoPeakError, ValueError) as exc:
            failed.append((mid, str(exc)))
            continue
        if not fit.converged:
            failed.append((mid, "fit did not converge"))
            continue
        times.append(mid)
        centers.append(fit.center)
        widths.append(fit.fwhm)

    times = np.asarray(times)
    centers = np.asarray(centers)
    if times.size < 2:
        raise ValueError(f"only {times.size} usable slices; need 2")
    slope, intercept = np.polyfit(times, centers, 1)
    resid = centers - (intercept + slope * times)
    return DriftTrack(
        slice_duration=float(slice_duration),
        wall_time=times,
        center=centers,
        fwhm=np.asarray(widths),
        fitted_y=float(slope) / PS_PER_S,
        fitted_intercept=float(intercept),
        fit_residual_rms=float(np.sqrt(np.mean(resid**2))),
        failed_slices=tuple(failed),
    )


def compensate(b: TimestampStream, track: DriftTrack) -> TimestampStream:
    """Retime B onto A's timescale: ``b' = (b - intercept) / (1 + y)``.

    Rounds to the nearest ps. Events mapped before time zero have no partner
    in A and are dropped.
    """
    if not track.valid or track.fitted_intercept is None:
        raise ValueError("drift track has no valid fit")
    y = track.fitted_y
    if not 1.0 + y > 0:
        raise ValueError("fitted rate is not physical")
    icpt_whole = math.floor(track.fitted_intercept)
    icpt_frac = track.fitted_intercept - icpt_whole
    u_int = b.events - np.int64(icpt_whole)
    u = u_int.astype(np.float64) - icpt_frac
    corr = -u * (y / (1.0 + y)) - icpt_frac
    out = u_int + np.rint(corr).astype(np.int64)
    out = out[out >= 0]
    return TimestampStream(b.channel_id, 1, out, b.duration)


def predict_broadened_fwhm(fwhm0: float, rel_freq: float, acq_duration: float) -> float:
    """FWHM of a Gaussian peak smeared by a constant relative frequency offset.

    The smear is a rectangle of width ``|rel_freq| * acq_duration`` (in ps);
    the half-maximum point of the Gaussian-rectangle convolution is found by
    bisection on its error-function closed form.
    """
    if not fwhm0 > 0 or not acq_duration > 0:
        raise ValueError("fwhm0 and acq_duration must be positive")
    w = abs(rel_freq) * acq_duration * PS_PER_S
    if w == 0:
        return float(fwhm0)
    s = fwhm0 / FWHM_PER_SIGMA * math.sqrt(2.0)
    half = 0.5 * w

    nodes, weights = np.polynomial.legendre.leggauss(24)

    def profile(x):
        hw = half / s
        if hw > 1.0:
            return special.erfc((x - half) / s) - special.erfc((x + half) / s)
        # narrow smear: the erfc difference cancels, integrate directly
        mid = x / s
        return hw * float(weights @ np.exp(-((mid + hw * nodes) ** 2)))

    target = 0.5 * profile(0.0)
    lo, hi = 0.0, half + 10.0 * s
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if profile(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return 2.0 * 0.5 * (lo + hi)
