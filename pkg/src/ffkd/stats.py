"""Empirical class distribution, pixel-intensity KDE likelihoods and scene priors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import chisquare

from .data.synth import CLASS_NAMES

MIN_KDE_PIXELS = 100
MIN_BANDWIDTH = 1.0  # intensity units; keeps constant samples integrable on a unit grid


@dataclass
class ClassDistribution:
    counts: np.ndarray  # (C,) per class id 1..C
    freqs: np.ndarray
    empty: bool


def class_distribution(annotations: Iterable, num_classes: int = len(CLASS_NAMES)) -> ClassDistribution:
    counts = np.zeros(num_classes, dtype=np.int64)
    for ann in annotations:
        lab = np.asarray(ann.labels, dtype=np.int64)
        counts += np.bincount(lab - 1, minlength=num_classes)[:num_classes]
    total = counts.sum()
    freqs = counts / total if total else np.zeros(num_classes)
    return ClassDistribution(counts, freqs, total == 0)


@dataclass
class KDEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    class_id: Optional[int] = None
    modality: str = ""
    num_samples: int = 0

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.density, self.grid))

    def mode(self) -> float:
        return float(self.grid[np.argmax(self.density)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["intensity", "density"])
            for g, d in zip(self.grid, self.density):
                w.writerow([f"{g:.6g}", f"{d:.8g}"])


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** -0.2


def kde(samples: np.ndarray, lo: float = 0.0, hi: float = 255.0, points: int = 256,
        bandwidth: Optional[float] = None) -> KDEstimate:
    """Gaussian KDE on [lo, hi] with reflection at both boundaries."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ValueError("KDE needs at least one sample")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    h = max(h, MIN_BANDWIDTH)
    grid = np.linspace(lo, hi, points)
    vals, weights = np.unique(x, return_counts=True)  # intensities repeat heavily
    dens = np.zeros(points)
    for src in (vals, 2 * lo - vals, 2 * hi - vals):
        for s in range(0, len(src), 2048):
            z = (grid[:, None] - src[None, s:s + 2048]) / h
            dens += np.exp(-0.5 * z * z) @ weights[s:s + 2048]
    dens /= len(x) * h * np.sqrt(2 * np.pi)
    return KDEstimate(grid, dens, h, num_samples=len(x))


def box_pixels(frame, ann, modality: str, class_id: int) -> np.ndarray:
    if modality == "thermal":
        img = frame.thm.astype(np.float64)
    elif modality == "rgb":
        img = frame.rgb.astype(np.float64).mean(axis=2)
    else:
        raise ValueError(f"modality must be 'rgb' or 'thermal', got {modality!r}")
    out = []
    for (x, y, w, h), c in zip(np.asarray(ann.boxes).astype(int), ann.labels):
        if c == class_id:
            out.append(img[y:y + h, x:x + w].ravel())
    return np.concatenate(out) if out else np.zeros(0)


def kde_pixel_intensity(samples: Sequence, modality: str, class_id: int) -> KDEstimate:
    """KDE of in-box intensities (thermal raw, RGB channel mean) for one class.

    ``samples`` is a sequence of (frame, annotation) pairs.
    """
    px = [box_pixels(f, a, modality, class_id) for f, a in samples]
    px = np.concatenate(px) if px else np.zeros(0)
    if len(px) < MIN_KDE_PIXELS:
        raise ValueError(f"class {class_id} has only {len(px)} in-box {modality} pixels; "
                         f"KDE needs at least {MIN_KDE_PIXELS}")
    est = kde(px)
    est.class_id, est.modality = class_id, modality
    return est


@dataclass
class PriorEstimate:
    p_n: np.ndarray  # P(N = k), k = 0..len-1
    pi_hat: np.ndarray  # class frequencies for ids 1..C
    area_edges: np.ndarray
    area_hist: np.ndarray  # probability mass per box-area bin
    placement_hist: np.ndarray  # (bins, bins) expected-count histogram of placements
    uniformity_pvalue: float


def _fractional_bins(pos: np.ndarray, span: np.ndarray, bins: int) -> np.ndarray:
    """Spread integer position x in {0..span} over [x, x+1)/(span+1) across equal bins."""
    lo = pos / (span + 1)
    hi = (pos + 1) / (span + 1)
    e = np.linspace(0, 1, bins + 1)
    ov = np.minimum(hi[:, None], e[None, 1:]) - np.maximum(lo[:, None], e[None, :-1])
    return np.clip(ov, 0, None) * (span + 1)[:, None]


def placement_histogram(boxes: np.ndarray, width: int, height: int, bins: int = 4) -> np.ndarray:
    """Histogram of box positions in placement coordinates x/(W-w), y/(H-h).

    Under full containment the uniform prior is uniform over the feasible
    top-left corners, so this histogram is flat exactly when placement is
    uniform, whatever the box sizes.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(b) == 0:
        return np.zeros((bins, bins))
    wx = _fractional_bins(b[:, 0], width - b[:, 2], bins)
    wy = _fractional_bins(b[:, 1], height - b[:, 3], bins)
    return np.einsum("ni,nj->ji", wx, wy)


def estimate_prior(annotations: Sequence, width: int = 128, height: int = 128,
                   num_classes: int = len(CLASS_NAMES), area_bins: int = 16,
                   grid: int = 4) -> PriorEstimate:
    """Empirical P(N), class frequencies, box-area histogram and placement uniformity."""
    annotations = list(annotations)
    counts = np.array([len(a) for a in annotations], dtype=np.int64)
    p_n = np.bincount(counts) / len(counts) if len(counts) else np.zeros(1)
    pi_hat = class_distribution(annotations, num_classes).freqs
    boxes = (np.concatenate([np.asarray(a.boxes).reshape(-1, 4) for a in annotations])
             if annotations else np.zeros((0, 4)))
    areas = boxes[:, 2] * boxes[:, 3]
    edges = np.linspace(0, width * height, area_bins + 1)
    hist, _ = np.histogram(areas, edges)
    area_hist = hist / max(hist.sum(), 1)
    ph = placement_histogram(boxes, width, height, grid)
    pval = float(chisquare(ph.ravel()).pvalue) if len(boxes) else float("nan")
    return PriorEstimate(p_n, pi_hat, edges, area_hist, ph, pval)


def write_histogram_csv(path, edges: np.ndarray, values: np.ndarray, header=("bin_lo", "bin_hi", "mass")):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for lo, hi, v in zip(edges[:-1], edges[1:], values):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", f"{v:.8g}"])


def write_kde_csvs(samples: Sequence, out_dir, num_classes: int = len(CLASS_NAMES)) -> list[Path]:
    """One CSV per (class, modality); raises if a class has too few pixels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(1, num_classes + 1):
        for mod in ("rgb", "thermal"):
            est = kde_pixel_intensity(samples, mod, c)
            name = CLASS_NAMES[c - 1] if c <= len(CLASS_NAMES) else str(c)
            p = out_dir / f"kde_{name}_{mod}.csv"
            est.to_csv(p)
            paths.append(p)
    return paths
