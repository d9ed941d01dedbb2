"""Pure-Python/numpy versions of the hot loops in ``_ckernels.pyx``.

Same signatures and bit-identical results; used when the extension is not
built or when ``TAGCORR_PURE_PYTHON`` is set.
"""

import numpy as np


def coincidence_counts(a, b, lo, bin_width, nbins):
    """Count pairs with ``lo <= b[j] - a[i] < lo + nbins * bin_width``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    counts = np.zeros(nbins, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return counts
    hi = lo + nbins * bin_width
    first = np.searchsorted(b, a + lo, side="left")
    last = np.searchsorted(b, a + hi, side="left")
    per_a = last - first
    total = int(per_a.sum())
    if total == 0:
        return counts
    # expand every (i, j) match without a Python loop
    owner = np.repeat(np.arange(a.size), per_a)
    step = np.arange(total) - np.repeat(np.cumsum(per_a) - per_a, per_a)
    j = first[owner] + step
    idx = (b[j] - a[owner] - lo) // bin_width
    counts += np.bincount(idx, minlength=nbins)
    return counts


def dead_time_mask(t, dead_time):
    """Non-paralyzable dead time: keep events at least ``dead_time`` after the last kept one."""
    t = np.asarray(t, dtype=np.int64)
    keep = np.zeros(t.size, dtype=bool)
    if t.size == 0:
        return keep
    if dead_time <= 0:
        keep[:] = True
        return keep
    gaps = np.diff(t)
    # an event whose gap to the previous raw event is >= dead_time is always kept
    free = np.concatenate(([True], gaps >= dead_time))
    keep[free] = True
    starts = np.flatnonzero(free[:-1] & ~free[1:])
    for start in starts:
        # walk the cluster of close events that follows a guaranteed keep
        last = t[start]
        i = start + 1
        while i < t.size and not free[i]:
            if t[i] - last >= dead_time:
                keep[i] = True
                last = t[i]
            i += 1
    return keep
