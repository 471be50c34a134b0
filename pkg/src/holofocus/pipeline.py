"""End-to-end experiment runner with content-hash stage caching.

Stages: simulate -> preprocess (per scenario) -> split -> train (model x
scenario) -> eval (per ROI anchor) -> explain. Every stage is keyed by the
hash of its config subsection, the digests of its upstream outputs and
``CODE_VERSION``; a stage whose key was seen before and whose outputs are
still intact is skipped.

Seeds: every random stream is ``derive_seed(run_seed, stage, *names)``, the
first 8 bytes of ``sha256("<run_seed>/<stage>/<name>...")``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .dataset import write_raw_dataset
from .errors import StageFailed
from .explain import attention_map, emit_overlay, grad_cam, spatial_entropy, write_heatmap_csv
from .io import Manifest, dump_json, file_sha256
from .models import CnnConfig, VitConfig, build_model, load_checkpoint, save_checkpoint
from .optics import DatasetSpec, OpticalConfig, generate_target
from .preprocess import Scenario, make_scenario_dataset
from .train import SplitSpec, TrainSpec, evaluate, split_dataset, train, write_report

log = logging.getLogger(__name__)

CODE_VERSION = f"holofocus-{__version__}"
ScenarioTag = Literal["SFO", "NSO", "SFN", "NSN"]
Anchor = Literal["center", "bottom_left"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OpticsSection(_Section):
    wavelength: float = Field(0.6, gt=0)
    pixel_pitch: float = Field(0.5, gt=0)
    grid_size: int = 128
    numerical_aperture: float = Field(0.3, gt=0, le=1)


class TargetSection(_Section):
    bits_x: list[Literal[0, 1]] = [1, 0, 1, 1, 0, 0, 1, 0]
    bits_y: list[Literal[0, 1]] = [0, 1, 1, 0, 1, 0, 0, 1]
    cell_px: int = Field(2, ge=2)


class DatasetSection(_Section):
    z0: float = 50.0
    z_step: float = Field(1.0, gt=0)
    n_classes: int = Field(10, gt=1)
    per_class: int = Field(60, gt=0)
    noise_sigma: float = Field(0.01, ge=0)


class PreprocessSection(_Section):
    roi_size: int = Field(64, gt=0)
    out_size: int = Field(64, gt=0)
    anchor: Anchor = "center"


class SplitSection(_Section):
    train_frac: float = Field(0.8, gt=0, lt=1)
    test_per_class: int = Field(20, gt=0)


class TrainSection(_Section):
    max_epochs: int = Field(200, gt=0)
    patience: int = Field(20, gt=0)
    batch_size: int = Field(8, gt=0)
    lr: float = Field(1e-4, gt=0)


class CnnEntry(_Section):
    name: str = "cnn"
    family: Literal["cnn"] = "cnn"
    config: CnnConfig = CnnConfig()


class VitEntry(_Section):
    name: str = "vit"
    family: Literal["vit"] = "vit"
    config: VitConfig = VitConfig()


ModelEntry = Annotated[Union[CnnEntry, VitEntry], Field(discriminator="family")]


class ExplainSection(_Section):
    n_samples: int = Field(20, ge=0)
    attention_method: Literal["rollout", "last_layer"] = "rollout"


class ExperimentConfig(_Section):
    seed: int = 0
    optics: OpticsSection = OpticsSection()
    target: TargetSection = TargetSection()
    dataset: DatasetSection = DatasetSection()
    preprocess: PreprocessSection = PreprocessSection()
    scenarios: list[ScenarioTag] = ["NSO"]
    split: SplitSection = SplitSection()
    train: TrainSection = TrainSection()
    models: list[ModelEntry] = Field(default_factory=lambda: [CnnEntry(), VitEntry()])
    eval_anchors: list[Anchor] = ["center", "bottom_left"]
    explain: ExplainSection = ExplainSection()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def derive_seed(root: int, *names) -> int:
    text = "/".join([str(root), *map(str, names)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % (2**63)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def default_cache_dir(out_dir: Path) -> Path:
    env = os.environ.get("HOLOFOCUS_CACHE")
    return Path(env) if env else out_dir / ".cache"


@dataclass
class RunResult:
    out_dir: Path
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    manifest_path: Path | None = None
    summary: dict = field(default_factory=dict)


class _Runner:
    def __init__(self, out_dir: Path, cache_dir: Path, result: RunResult):
        self.out = out_dir
        self.cache = cache_dir
        self.result = result
        self.files: dict[str, str] = {}

    def stage(self, name: str, key_obj, fn) -> str:
        """Run ``fn`` unless an identical stage already produced intact outputs.

        ``fn`` returns the paths it wrote; the return value is a digest of
        those outputs used to key downstream stages.
        """
        key = _digest({"stage": name, "inputs": key_obj, "code": CODE_VERSION})
        stamp = self.cache / f"{key}.json"
        if stamp.exists():
            recorded = json.loads(stamp.read_text(encoding="utf-8"))["outputs"]
            if all(
                (self.out / rel).is_file() and file_sha256(self.out / rel) == h
                for rel, h in recorded.items()
            ):
                log.info("skip %s", name)
                self.result.skipped.append(name)
                self.files.update(recorded)
                return _digest(recorded)
        log.info("run %s", name)
        try:
            paths = fn()
        except Exception as exc:
            raise StageFailed(name, exc) from exc
        outputs = {}
        for p in paths:
            rel = Path(p).resolve().relative_to(self.out.resolve()).as_posix()
            outputs[rel] = file_sha256(p)
        dump_json({"stage": name, "outputs": outputs}, stamp)
        self.result.executed.append(name)
        self.files.update(outputs)
        return _digest(outputs)


def _files_under(d: Path) -> list[Path]:
    return sorted(p for p in d.rglob("*") if p.is_file())


def _relocate(m: Manifest, new_root: Path) -> Manifest:
    rows = []
    for row in m.rows:
        row = dict(row)
        for key in ("path", "raw_path"):
            if key in row:
                row[key] = os.path.relpath((m.root / row[key]).resolve(), new_root.resolve())
        rows.append(row)
    return Manifest(rows, dict(m.meta), new_root)


def run_pipeline(
    config: ExperimentConfig,
    out_dir,
    stop_after: str | None = None,
    threads: int | None = None,
) -> RunResult:
    """Execute the full experiment and return what ran and what was skipped.

    ``stop_after`` may be ``"simulate"``, ``"preprocess"``, ``"split"`` or
    ``"train"`` to truncate the run.
    """
    from threadpoolctl import threadpool_limits

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult(out)
    runner = _Runner(out, default_cache_dir(out), result)
    with threadpool_limits(threads):
        _run(config, runner, stop_after)
    result.summary = _summarize(config, out, runner) if stop_after is None else {}
    if stop_after is None:
        dump_json(result.summary, out / "summary.json")
        runner.files["summary.json"] = file_sha256(out / "summary.json")
    manifest = {
        "code_version": CODE_VERSION,
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "executed": result.executed,
        "skipped": result.skipped,
        "files": dict(sorted(runner.files.items())),
    }
    result.manifest_path = out / "run_manifest.json"
    dump_json(manifest, result.manifest_path)
    return result


def _run(cfg: ExperimentConfig, runner: _Runner, stop_after):
    out = runner.out
    seed = cfg.seed
    optics = OpticalConfig(**cfg.optics.model_dump())
    ds = DatasetSpec(seed=derive_seed(seed, "simulate"), **cfg.dataset.model_dump())
    raw_dir = out / "raw"

    def do_simulate():
        target = generate_target(cfg.target.bits_x, cfg.target.bits_y, cfg.target.cell_px, optics.grid_size)
        write_raw_dataset(ds, optics, raw_dir, target)
        return _files_under(raw_dir)

    raw_digest = runner.stage(
        "simulate",
        {"optics": cfg.optics.model_dump(), "target": cfg.target.model_dump(), "dataset": cfg.dataset.model_dump(), "seed": ds.seed},
        do_simulate,
    )
    if stop_after == "simulate":
        return
    raw = Manifest.load(raw_dir / "manifest.json")

    split_digests = {}
    for tag in cfg.scenarios:
        scen = Scenario(tag, cfg.preprocess.anchor, cfg.preprocess.roi_size)
        sdir = out / "scenarios" / tag

        def do_pre(scen=scen, sdir=sdir):
            make_scenario_dataset(raw, scen, cfg.preprocess.out_size, sdir)
            return _files_under(sdir)

        pre_digest = runner.stage(
            f"preprocess/{tag}", {"raw": raw_digest, "tag": tag, **cfg.preprocess.model_dump()}, do_pre
        )
        if stop_after == "preprocess":
            continue
        split_spec = SplitSpec(seed=derive_seed(seed, "split", tag), **cfg.split.model_dump())
        split_dir = out / "splits" / tag

        def do_split(sdir=sdir, split_dir=split_dir, split_spec=split_spec):
            parts = split_dataset(Manifest.load(sdir / "manifest.json"), split_spec)
            paths = []
            for name, part in zip(("train", "val", "test"), parts):
                p = split_dir / f"{name}.json"
                _relocate(part, split_dir).save(p)
                paths.append(p)
            return paths

        split_digests[tag] = runner.stage(
            f"split/{tag}", {"scenario": pre_digest, **cfg.split.model_dump(), "seed": split_spec.seed}, do_split
        )
    if stop_after in ("preprocess", "split"):
        return

    for entry in cfg.models:
        for tag in cfg.scenarios:
            split_dir = out / "splits" / tag
            run_id = f"{entry.name}_{tag}"
            mdir = out / "models" / run_id
            model_seed = derive_seed(seed, "model", entry.name)
            tspec = TrainSpec(seed=derive_seed(seed, "train", entry.name, tag), **cfg.train.model_dump())

            def do_train(entry=entry, split_dir=split_dir, mdir=mdir, model_seed=model_seed, tspec=tspec):
                trn = Manifest.load(split_dir / "train.json")
                val = Manifest.load(split_dir / "val.json")
                model = build_model(entry.family, entry.config.model_dump(), model_seed)
                model, history = train(model, trn, val, tspec)
                mdir.mkdir(parents=True, exist_ok=True)
                history.write_csv(mdir / "history.csv")
                save_checkpoint(
                    model,
                    mdir / "checkpoint",
                    {"best_epoch": history.best_epoch, "stopped_early": history.stopped_early},
                )
                return [mdir / "history.csv", *_files_under(mdir / "checkpoint")]

            train_digest = runner.stage(
                f"train/{run_id}",
                {"split": split_digests[tag], "model": entry.model_dump(mode="json"), "train": cfg.train.model_dump(), "seeds": [model_seed, tspec.seed]},
                do_train,
            )
            if stop_after == "train":
                continue

            for anchor in cfg.eval_anchors:

                def do_eval(mdir=mdir, split_dir=split_dir, anchor=anchor, run_id=run_id):
                    model = load_checkpoint(mdir / "checkpoint")
                    test = Manifest.load(split_dir / "test.json")
                    history = _read_history(mdir / "history.csv")
                    report = evaluate(model, test, anchor)
                    report.val_loss = history["val_loss"]
                    report.val_accuracy = history["val_acc"]
                    return write_report(report, out / "reports", f"{run_id}_{anchor}")

                runner.stage(f"eval/{run_id}/{anchor}", {"train": train_digest, "split": split_digests[tag], "anchor": anchor}, do_eval)

            def do_explain(entry=entry, mdir=mdir, split_dir=split_dir, run_id=run_id):
                return _explain_samples(entry.family, mdir, split_dir, out / "explain" / run_id, cfg.explain)

            runner.stage(
                f"explain/{run_id}",
                {"train": train_digest, "split": split_digests[tag], "explain": cfg.explain.model_dump()},
                do_explain,
            )


def _read_history(path) -> dict[str, list[float]]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) for r in rows] for k in ("train_loss", "val_loss", "val_acc")}


def _explain_samples(family, mdir: Path, split_dir: Path, edir: Path, ecfg: ExplainSection):
    model = load_checkpoint(mdir / "checkpoint")
    test = Manifest.load(split_dir / "test.json")
    edir.mkdir(parents=True, exist_ok=True)
    n = min(ecfg.n_samples, len(test))
    # evenly spaced through the (class-sorted) test set so every class shows up
    picks = np.linspace(0, len(test) - 1, n).round().astype(int) if n else []
    paths, entropies = [], []
    for i in picks:
        row = test.rows[int(i)]
        img = test.image(row)
        if family == "cnn":
            pred = int(model.predict(img[None, None].astype(np.float32)).argmax())
            heat = grad_cam(model, img, pred)
        else:
            heat = attention_map(model, img, ecfg.attention_method)
        stem = Path(row["path"]).stem
        emit_overlay(img, heat, edir / f"{stem}_overlay.png")
        write_heatmap_csv(heat, edir / f"{stem}_heatmap.csv")
        paths += [edir / f"{stem}_overlay.png", edir / f"{stem}_heatmap.csv"]
        entropies.append(spatial_entropy(heat))
    dump_json(
        {
            "family": family,
            "method": "gradcam" if family == "cnn" else ecfg.attention_method,
            "spatial_entropy_bits": entropies,
            "median_spatial_entropy_bits": statistics.median(entropies) if entropies else None,
        },
        edir / "entropy.json",
    )
    return [*paths, edir / "entropy.json"]


def _summarize(cfg: ExperimentConfig, out: Path, runner: _Runner) -> dict:
    runs = {}
    for entry in cfg.models:
        for tag in cfg.scenarios:
            run_id = f"{entry.name}_{tag}"
            rec = {"family": entry.family, "scenario": tag}
            mf = out / "models" / run_id / "checkpoint" / "manifest.json"
            if mf.exists():
                meta = json.loads(mf.read_text(encoding="utf-8"))
                rec.update(checksum=meta["checksum"], best_epoch=meta["best_epoch"], param_count=meta["param_count"])
                hist = _read_history(out / "models" / run_id / "history.csv")
                rec["best_val_loss"] = hist["val_loss"][meta["best_epoch"] - 1]
                rec["best_val_acc"] = hist["val_acc"][meta["best_epoch"] - 1]
            for anchor in cfg.eval_anchors:
                rp = out / "reports" / f"{run_id}_{anchor}.json"
                if rp.exists():
                    rep = json.loads(rp.read_text(encoding="utf-8"))
                    rec[f"test_accuracy_{anchor}"] = rep["accuracy"]
                    rec[f"max_abs_class_error_{anchor}"] = rep["max_abs_class_error"]
            ep = out / "explain" / run_id / "entropy.json"
            if ep.exists():
                rec["median_spatial_entropy_bits"] = json.loads(ep.read_text(encoding="utf-8"))[
                    "median_spatial_entropy_bits"
                ]
            runs[run_id] = rec
    return {
        "optical_resolution_um": OpticalConfig(**cfg.optics.model_dump()).optical_resolution(),
        "class_step_um": cfg.dataset.z_step,
        "runs": runs,
    }
