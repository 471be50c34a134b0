"""Image and manifest persistence.

Images are 16-bit grayscale PNGs. Each stored image is mapped linearly from
``[lo, hi]`` to ``[0, 65535]``; ``lo`` and ``hi`` live in the image's
manifest row so the physical values can be recovered.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_VERSION = 1


def write_png16(path, image: np.ndarray, lo: float | None = None, hi: float | None = None):
    """Write ``image`` as a 16-bit PNG; return the ``(lo, hi)`` mapping used."""
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if lo is None else float(lo)
    hi = float(image.max()) if hi is None else float(hi)
    span = hi - lo
    scaled = np.zeros_like(image) if span <= 0 else (image - lo) / span
    q = np.rint(np.clip(scaled, 0.0, 1.0) * 65535).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")
    return lo, hi


def read_png16(path) -> np.ndarray:
    """Read a 16-bit PNG as floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Manifest:
    """A list of image rows plus dataset-level metadata.

    Row keys: ``path`` (relative to the manifest's directory), ``z_true_um``,
    ``class_label``, ``scenario``, ``seed``, ``lo``, ``hi`` and, for scenario
    datasets, ``raw_path`` pointing back at the source hologram.
    """

    rows: list[dict]
    meta: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __len__(self):
        return len(self.rows)

    def subset(self, rows) -> "Manifest":
        return Manifest(list(rows), dict(self.meta), self.root)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def image(self, row: dict) -> np.ndarray:
        """Stored image in [0, 1] (normalized for network input)."""
        return read_png16(self.resolve(row["path"]))

    def physical(self, row: dict) -> np.ndarray:
        """Stored image mapped back through its ``[lo, hi]`` constants."""
        return row["lo"] + self.image(row) * (row["hi"] - row["lo"])

    def labels(self) -> np.ndarray:
        return np.array([r["class_label"] for r in self.rows], dtype=np.int64)

    def arrays(self, dtype=np.float32):
        """Stack every image into ``(N, 1, H, W)`` plus the label vector."""
        x = np.stack([self.image(r) for r in self.rows]).astype(dtype)
        return x[:, None], self.labels()

    def save(self, path) -> Path:
        path = Path(path)
        doc = {"version": MANIFEST_VERSION, "meta": self.meta, "images": self.rows}
        dump_json(doc, path)
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(doc["images"], doc.get("meta", {}), path.parent)
