"""Daily presence histograms from decrypted folded sums."""

from __future__ import annotations

import csv
from typing import Mapping, Sequence, TextIO

from collapse.crypto import NUM_STATES
from collapse.presence import STATE_NAMES
from collapse.store import DAY

HEADER = ("state", "bin_start_seconds", "average", "smoothed_average")


def smooth(series: Sequence[float], window: int = 3) -> list[float]:
    """Centered moving average, wrapping around midnight."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd number")
    n = len(series)
    if window == 1 or n == 0:
        return list(series)
    half = window // 2
    return [sum(series[(i + d) % n] for d in range(-half, half + 1)) / window for i in range(n)]


def histogram_rows(
    averages: Mapping[tuple[int, int], float | None],
    bin_width: int = 900,
    window: int = 3,
    states: Sequence[int] = tuple(range(NUM_STATES)),
) -> list[tuple[str, int, float, float]]:
    """Rows ``(state, bin_start_seconds, average, smoothed_average)``.

    *averages* maps ``(bin, state)`` to the decrypted average; bins without
    data count as 0.
    """
    if DAY % bin_width:
        raise ValueError("bin width must divide a day")
    nbins = DAY // bin_width
    rows = []
    for s in states:
        raw = [float(averages.get((b, s)) or 0.0) for b in range(nbins)]
        for b, (a, sm) in enumerate(zip(raw, smooth(raw, window))):
            rows.append((STATE_NAMES[s], b * bin_width, a, sm))
    return rows


def write_csv(rows: Sequence[tuple[str, int, float, float]], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(HEADER)
    for state, start, avg, sm in rows:
        writer.writerow((state, start, repr(avg), repr(sm)))


def write_gnuplot(rows: Sequence[tuple[str, int, float, float]], fh: TextIO) -> None:
    """One whitespace-separated block per state, separated by blank lines."""
    current = None
    for state, start, avg, sm in rows:
        if state != current:
            if current is not None:
                fh.write("\n\n")
            fh.write(f"# {state}\n")
            current = state
        fh.write(f"{start / 3600:.4f} {avg!r} {sm!r}\n")
