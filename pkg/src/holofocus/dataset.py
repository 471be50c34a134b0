from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from .io import Manifest, write_png16
from .optics import DatasetSpec, OpticalConfig, TargetPattern, default_target, simulate_dataset


def write_raw_dataset(
    spec: DatasetSpec,
    config: OpticalConfig,
    out_dir,
    target: TargetPattern | None = None,
) -> Manifest:
    """Simulate every hologram of ``spec`` and store it under ``out_dir``.

    Each PNG is min-max mapped over its own intensity range, so the stored
    image doubles as the [0, 1]-normalized network input.
    """
    out_dir = Path(out_dir)
    target = target if target is not None else default_target(config)
    rows = []
    for label, index, seed, holo in simulate_dataset(spec, config, target):
        rel = f"images/c{label:02d}_{index:04d}.png"
        lo, hi = write_png16(out_dir / rel, holo.intensity)
        rows.append(
            {
                "path": rel,
                "z_true_um": holo.z_true,
                "class_label": label,
                "scenario": "raw",
                "seed": seed,
                "lo": lo,
                "hi": hi,
            }
        )
    meta = {
        "kind": "raw",
        "optics": asdict(config),
        "dataset": asdict(spec),
        "target": {
            "bits_x": list(target.bits_x),
            "bits_y": list(target.bits_y),
            "cell_px": target.cell_px,
        },
    }
    manifest = Manifest(rows, meta, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
