"""Reference metrics, user-study analytics, and the evaluation report format.

PSNR and SSIM operate on full-range BT.601 luma; the YCbCr convention is a
documented choice.  Study analytics work from per-group selection counts.
Learned perceptual metrics are out of scope: callers can pass named external
scorer callables and their outputs land in the same report.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma: 0.299 R + 0.587 G + 0.114 B."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB, got {img.shape}")
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW,
                     sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_y(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM between the luma planes, mean over valid 11x11 windows.

    Standard constants: K1=0.01, K2=0.03, dynamic range 1.0, gaussian window
    sigma 1.5.
    """
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError("shape mismatch")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image sides must be >= {SSIM_WINDOW}, got {ya.shape}")
    win = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = convolve2d(ya, win, mode="valid")
    mu_b = convolve2d(yb, win, mode="valid")
    var_a = convolve2d(ya * ya, win, mode="valid") - mu_a ** 2
    var_b = convolve2d(yb * yb, win, mode="valid") - mu_b ** 2
    cov = convolve2d(ya * yb, win, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ScoreTable:
    """Per-group, per-method selection counts from a preference study."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be [num_groups, num_methods]")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")

    @property
    def num_groups(self) -> int:
        return self.counts.shape[0]

    @property
    def num_methods(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_selections(cls, selections, num_methods: int) -> "ScoreTable":
        """Build counts from per-group lists of chosen method indices."""
        counts = np.zeros((len(selections), num_methods), dtype=np.int64)
        for j, group in enumerate(selections):
            for idx in group:
                if not 0 <= idx < num_methods:
                    raise ValueError(f"method index {idx} out of range")
                counts[j, idx] += 1
        return cls(counts=counts)


def vote_percentage(table: ScoreTable) -> np.ndarray:
    """Fraction of all votes each method received, summed over groups."""
    totals = table.counts.sum(axis=0).astype(np.float64)
    grand = totals.sum()
    if table.num_groups == 0 or grand == 0:
        raise ValueError("table holds no votes")
    return totals / grand


def topk_ratio(table: ScoreTable, k: int) -> np.ndarray:
    """Fraction of groups where each method ranks in the top k by count.

    Ties at the k-th rank include every tied method, so the ratio is
    optimistic under ties and monotone in k.
    """
    if not 1 <= k <= table.num_methods:
        raise ValueError(f"k={k} outside [1, {table.num_methods}]")
    if table.num_groups == 0:
        raise ValueError("table holds no groups")
    counts = table.counts
    kth = -np.partition(-counts, k - 1, axis=1)[:, k - 1]
    member = counts >= kth[:, None]
    return member.mean(axis=0)


def compute_pair_metrics(restored: np.ndarray, reference: np.ndarray,
                         peak: float = 1.0, external: dict | None = None) -> dict:
    """PSNR + luma SSIM for one pair, plus any named external scorers."""
    out = {"psnr": psnr(restored, reference, peak),
           "ssim_y": ssim_y(restored, reference)}
    for name, scorer in (external or {}).items():
        out[name] = float(scorer(restored, reference))
    return out


def write_report(path: str, report: dict) -> None:
    """Emit a metrics report as stable, human-diffable JSON."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=default)
        f.write("\n")
