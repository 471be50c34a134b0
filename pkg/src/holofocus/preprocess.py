"""Scenario datasets: optional negation, optional Sobel magnitude, ROI crop.

The pipeline order is fixed: negate -> Sobel -> crop -> area downsample.
Because the Sobel magnitude of ``1 - v`` equals that of ``v``, SFN and SFO
produce the same pixels; both are kept so the four-way grid stays complete.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .errors import ImageTooSmall, InvalidConfig, OutOfRange, RoiTooLarge
from .io import Manifest, write_png16

SCENARIOS = {
    # tag: (sobel, negative)
    "SFO": (True, False),
    "NSO": (False, False),
    "SFN": (True, True),
    "NSN": (False, True),
}
ANCHORS = ("center", "bottom_left")

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class Scenario:
    tag: str
    roi_anchor: str = "center"
    roi_size: int = 64

    def __post_init__(self):
        if self.tag not in SCENARIOS:
            raise InvalidConfig(f"scenario tag must be one of {sorted(SCENARIOS)}, got {self.tag!r}")
        if self.roi_anchor not in ANCHORS:
            raise InvalidConfig(f"roi_anchor must be one of {ANCHORS}, got {self.roi_anchor!r}")

    @property
    def sobel(self) -> bool:
        return SCENARIOS[self.tag][0]

    @property
    def negative(self) -> bool:
        return SCENARIOS[self.tag][1]


def crop_roi(image: np.ndarray, anchor: str, size: int) -> np.ndarray:
    h, w = image.shape
    if size > h or size > w:
        raise RoiTooLarge(f"ROI {size} exceeds image {h}x{w}")
    if anchor == "center":
        r, c = (h - size) // 2, (w - size) // 2
    elif anchor == "bottom_left":
        r, c = h - size, 0
    else:
        raise InvalidConfig(f"unknown anchor {anchor!r}")
    return image[r : r + size, c : c + size]


def sobel_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw Sobel responses (Gx, Gy) with replicate padding."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 3:
        raise ImageTooSmall(f"Sobel needs at least 3x3, got {image.shape}")
    gx = correlate(image, SOBEL_X, mode="nearest")
    gy = correlate(image, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude min-max rescaled to [0, 1]; constant input gives zeros."""
    gx, gy = sobel_gradients(image)
    mag = np.hypot(gx, gy)
    lo, hi = mag.min(), mag.max()
    if hi - lo <= 0:
        return np.zeros_like(mag)
    return (mag - lo) / (hi - lo)


def negate(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < -1e-9 or image.max() > 1 + 1e-9):
        raise OutOfRange(f"negate expects values in [0, 1], got [{image.min()}, {image.max()}]")
    return 1.0 - image


def area_downsample(image: np.ndarray, out_size: int) -> np.ndarray:
    h, w = image.shape
    if out_size == h == w:
        return image
    if h != w or h % out_size:
        raise InvalidConfig(f"cannot area-average {h}x{w} to {out_size} (needs an integer factor)")
    f = h // out_size
    return image.reshape(out_size, f, out_size, f).mean(axis=(1, 3))


def apply_scenario(
    image: np.ndarray, scenario: Scenario, out_size: int | None = None, anchor: str | None = None
) -> np.ndarray:
    """Run the scenario pipeline on one normalized [0, 1] hologram."""
    out = np.asarray(image, dtype=np.float64)
    if scenario.negative:
        out = negate(out)
    if scenario.sobel:
        out = sobel_magnitude(out)
    out = crop_roi(out, anchor or scenario.roi_anchor, scenario.roi_size)
    if out_size is not None:
        out = area_downsample(out, out_size)
    return out


def make_scenario_dataset(
    raw: Manifest, scenario: Scenario, out_size: int, out_dir
) -> Manifest:
    if out_size > scenario.roi_size:
        raise InvalidConfig(f"out_size {out_size} exceeds roi_size {scenario.roi_size}")
    out_dir = Path(out_dir)
    rows = []
    for row in raw.rows:
        try:
            img = apply_scenario(raw.image(row), scenario, out_size)
        except (RoiTooLarge, ImageTooSmall, OutOfRange) as exc:
            raise type(exc)(f"{raw.resolve(row['path'])}: {exc}") from exc
        rel = f"images/{Path(row['path']).stem}.png"
        write_png16(out_dir / rel, img, 0.0, 1.0)
        rows.append(
            {
                "path": rel,
                "z_true_um": row["z_true_um"],
                "class_label": row["class_label"],
                "scenario": scenario.tag,
                "seed": row["seed"],
                "lo": 0.0,
                "hi": 1.0,
                "raw_path": os.path.relpath(raw.resolve(row["path"]).resolve(), out_dir.resolve()),
            }
        )
    meta = dict(raw.meta)
    meta.update(
        kind="scenario",
        scenario=scenario.tag,
        roi_anchor=scenario.roi_anchor,
        roi_size=scenario.roi_size,
        out_size=out_size,
    )
    manifest = Manifest(rows, meta, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest

