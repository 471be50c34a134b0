"""Classical autofocus: reconstruct a stack of images, score each, pick the best.

Variance is maximal at focus. Entropy is selected at its minimum: the sharp
image of a binary target concentrates the intensity histogram.
"""

from __future__ import annotations

import csv
import math
from typing import NamedTuple

import numpy as np

from .errors import EmptySweep
from .optics import Hologram, reconstruct_at
from .preprocess import crop_roi

METRICS = ("variance", "entropy")
SELECTION = {"variance": "argmax", "entropy": "argmin"}


class Sweep(NamedTuple):
    z_best: float
    curve: np.ndarray  # (n, 2) rows of (z, metric)


def focus_metric(image: np.ndarray, kind: str) -> float:
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("focus metric of an empty image")
    if kind == "variance":
        # shifting by one pixel keeps var() exact for constant images
        return float((image - image.flat[0]).var())
    if kind == "entropy":
        lo, hi = image.min(), image.max()
        scaled = np.zeros_like(image) if hi - lo <= 0 else (image - lo) / (hi - lo)
        counts, _ = np.histogram(scaled, bins=256, range=(0.0, 1.0))
        p = counts[counts > 0] / image.size
        return float(-(p * np.log2(p)).sum()) + 0.0
    raise ValueError(f"unknown focus metric {kind!r}; expected one of {METRICS}")


def sweep_grid(z_min: float, z_max: float, step: float) -> np.ndarray:
    if not (np.isfinite(z_min) and np.isfinite(z_max) and np.isfinite(step)):
        raise EmptySweep("sweep bounds must be finite")
    if step <= 0 or z_max < z_min:
        raise EmptySweep(f"empty sweep grid for [{z_min}, {z_max}] step {step}")
    n = int(math.floor((z_max - z_min) / step + 1e-9)) + 1
    return z_min + step * np.arange(n)


def autofocus_sweep(
    holo: Hologram,
    z_min: float,
    z_max: float,
    step: float,
    kind: str = "variance",
    roi_size: int | None = None,
) -> Sweep:
    """Evaluate the focus metric on the inclusive z grid and select the focus.

    The metric is computed on the central ``roi_size`` square of each
    reconstruction (half the grid by default). Ties go to the smaller z.
    """
    grid = sweep_grid(z_min, z_max, step)
    size = roi_size or holo.intensity.shape[0] // 2
    values = np.array(
        [focus_metric(crop_roi(reconstruct_at(holo, z), "center", size), kind) for z in grid]
    )
    pick = np.argmax if SELECTION[kind] == "argmax" else np.argmin
    i = int(pick(values))
    return Sweep(float(grid[i]), np.column_stack([grid, values]))


def write_curve_csv(curve: np.ndarray, kind: str, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z_um", "metric", "kind"])
        for z, v in curve:
            writer.writerow([f"{z:.6f}", repr(float(v)), kind])
