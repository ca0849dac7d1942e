"""Invocation statistics over trajectory dumps.

A dump is JSON lines as written by :func:`latentmem.decoding.dump_trajectories`.
For each memory kind we report the invocation ratio (samples with at least
one invocation of that kind over all samples) and a histogram of relative
invocation positions, ``position / output_length``, in 20 equal bins over
``[0, 1]``.  A value of exactly 1 falls in the last bin.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .vlm import KINDS

N_BINS = 20


@dataclass
class InvocationStats:
    samples: int = 0
    skipped: int = 0
    invoked: dict[str, int] = field(default_factory=lambda: {k: 0 for k in KINDS})
    histograms: dict[str, np.ndarray] = field(
        default_factory=lambda: {k: np.zeros(N_BINS, dtype=np.int64) for k in KINDS})

    def ratio(self, kind: str) -> float:
        return self.invoked[kind] / self.samples if self.samples else 0.0

    def total(self, kind: str) -> int:
        return int(self.histograms[kind].sum())


def bin_index(position: int, length: int, n_bins: int = N_BINS) -> int:
    if length <= 0:
        raise ValueError("output length must be positive")
    if not 0 <= position <= length:
        raise ValueError(f"relative position {position}/{length} outside [0, 1]")
    # integer arithmetic keeps bin edges exact
    return min(n_bins * position // length, n_bins - 1)


def _parse(line: str) -> tuple[int, list[tuple[str, int]]]:
    rec = json.loads(line)
    length = int(rec["output_length"])
    invs = []
    for inv in rec["invocations"]:
        kind = inv["kind"]
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        invs.append((kind, bin_index(int(inv["position"]), length)))
    return length, invs


def scan_lines(lines) -> InvocationStats:
    """Accumulate statistics; malformed lines are skipped and counted."""
    st = InvocationStats()
    for line in lines:
        if not line.strip():
            continue
        try:
            _, invs = _parse(line)
        except (ValueError, KeyError, TypeError):
            st.skipped += 1
            continue
        st.samples += 1
        for kind in {k for k, _ in invs}:
            st.invoked[kind] += 1
        for kind, b in invs:
            st.histograms[kind][b] += 1
    return st


def scan_dump(path) -> InvocationStats:
    with open(path) as fh:
        return scan_lines(fh)


def smooth(hist: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Gaussian-smoothed curve over the bins, for display only."""
    from scipy.ndimage import gaussian_filter1d

    return gaussian_filter1d(np.asarray(hist, dtype=np.float64), sigma, mode="nearest")


def write_csv(stats: InvocationStats, path, sigma: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "bin_lo", "bin_hi", "count", "smoothed"])
        for kind in KINDS:
            hist = stats.histograms[kind]
            curve = smooth(hist, sigma) if sigma else None
            for i, c in enumerate(hist):
                s = "" if curve is None else f"{curve[i]:.6f}"
                w.writerow([kind, f"{i / N_BINS:.2f}", f"{(i + 1) / N_BINS:.2f}", int(c), s])


def write_summary(stats: InvocationStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "samples", "invoked", "ratio", "invocations", "skipped_lines"])
        for kind in KINDS:
            w.writerow([kind, stats.samples, stats.invoked[kind], f"{stats.ratio(kind):.6f}",
                        stats.total(kind), stats.skipped])


def write_svg(stats: InvocationStats, path, sigma: float = 1.0, width: int = 480,
              height: int = 240) -> None:
    """Line plot of the smoothed relative-position curves, one per kind."""
    colours = {"short": "#1f77b4", "long": "#d62728"}
    pad = 30
    curves = {k: smooth(stats.histograms[k], sigma) for k in KINDS}
    top = max(1e-12, max(float(c.max()) for c in curves.values()))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad // 2}" width="{width - 2 * pad}" '
             f'height="{height - 2 * pad}" fill="none" stroke="#999"/>']
    for kind, curve in curves.items():
        pts = []
        for i, v in enumerate(curve):
            x = pad + (i + 0.5) / N_BINS * (width - 2 * pad)
            y = height - pad - v / top * (height - 2 * pad)
            pts.append(f"{x:.1f},{y:.1f}")
        parts.append(f'<polyline fill="none" stroke="{colours[kind]}" stroke-width="2" '
                     f'points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 14 * (1 + KINDS.index(kind))}" '
                     f'fill="{colours[kind]}" font-size="11">{kind} '
                     f'{stats.ratio(kind):.2f}</text>')
    parts.append(f'<text x="{width // 2 - 50}" y="{height - 6}" font-size="11">'
                 'relative position</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
