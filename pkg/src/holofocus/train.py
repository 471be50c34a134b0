"""Experiment protocol: stratified split, early-stopped training, evaluation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceDetected, InsufficientData, MissingRawImages
from .io import Manifest, dump_json, read_png16
from .nn import TRAIN, AdamState, ModelGraph, adam_step, cross_entropy_loss
from .preprocess import Scenario, apply_scenario


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    test_per_class: int = 20
    seed: int = 0

    @property
    def val_frac(self) -> float:
        return 1.0 - self.train_frac


@dataclass(frozen=True)
class TrainSpec:
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0


def split_dataset(manifest: Manifest, spec: SplitSpec):
    """Hold out ``test_per_class`` images per class, then split the rest.

    The remainder of each class goes ``floor(train_frac * r)`` to training
    and the rest to validation. Returns ``(train, val, test)`` manifests.
    """
    by_class = defaultdict(list)
    for i, row in enumerate(manifest.rows):
        by_class[row["class_label"]].append(i)
    rng = np.random.default_rng(spec.seed)
    parts = {"train": [], "val": [], "test": []}
    for label in sorted(by_class):
        idx = by_class[label]
        need = spec.test_per_class + 5
        if len(idx) < need:
            raise InsufficientData(label, len(idx), need)
        order = [idx[j] for j in rng.permutation(len(idx))]
        test, rest = order[: spec.test_per_class], order[spec.test_per_class :]
        n_train = int(math.floor(len(rest) * spec.train_frac + 1e-9))
        parts["test"] += test
        parts["train"] += rest[:n_train]
        parts["val"] += rest[n_train:]
    out = tuple(manifest.subset([manifest.rows[i] for i in sorted(parts[k])]) for k in ("train", "val", "test"))
    assert_disjoint(*out)
    return out


def assert_disjoint(*manifests: Manifest) -> None:
    seen: dict[str, int] = {}
    for k, m in enumerate(manifests):
        for row in m.rows:
            if seen.setdefault(row["path"], k) != k:
                raise AssertionError(f"split leakage: {row['path']} in more than one split")


def _as_arrays(data):
    if isinstance(data, Manifest):
        return data.arrays()
    x, y = data
    return np.asarray(x), np.asarray(y, dtype=np.int64)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def column(self, key):
        return [r[key] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for r in self.rows:
                writer.writerow(
                    [r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["val_acc"])]
                )


def validation_metrics(model: ModelGraph, x, y, batch_size=64):
    logits = model.predict(x, batch_size)
    loss, _ = cross_entropy_loss(logits.astype(np.float64), y)
    return loss, float((logits.argmax(axis=1) == y).mean())


def train(model: ModelGraph, train_data, val_data, spec: TrainSpec, monitor=None, log=None):
    """Train with Adam and early stopping on validation loss.

    ``train_data``/``val_data`` are manifests or ``(x, y)`` pairs. ``monitor``
    replaces the validation pass (``monitor(model, epoch) -> (loss, acc)``).
    The weights of the best validation-loss epoch (earliest on ties) are
    restored before returning ``(model, history)``.
    """
    x, y = _as_arrays(train_data)
    xv, yv = _as_arrays(val_data)
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    x = x.astype(np.float32, copy=False)
    xv = xv.astype(np.float32, copy=False)
    opt = model.optimizer or AdamState(lr=spec.lr)
    model.optimizer = opt
    history = History()
    best_loss, best_state, wait = math.inf, model.get_state(), 0
    for epoch in range(1, spec.max_epochs + 1):
        order = np.random.default_rng([spec.seed, epoch]).permutation(len(x))
        total = 0.0
        for start in range(0, len(order), spec.batch_size):
            batch = order[start : start + spec.batch_size]
            logits, caches = model.forward(x[batch], TRAIN)
            loss, grad = cross_entropy_loss(logits, y[batch])
            if not math.isfinite(loss):
                raise DivergenceDetected(epoch)
            _, grads = model.backward(caches, grad.astype(logits.dtype, copy=False))
            adam_step(model.params(), grads, opt)
            total += loss * len(batch)
        if monitor is None:
            val_loss, val_acc = validation_metrics(model, xv, yv)
        else:
            val_loss, val_acc = monitor(model, epoch)
        if not math.isfinite(val_loss):
            raise DivergenceDetected(epoch)
        history.rows.append(
            dict(epoch=epoch, train_loss=total / len(x), val_loss=float(val_loss), val_acc=float(val_acc))
        )
        if log is not None:
            log(history.rows[-1])
        if val_loss < best_loss:
            best_loss, best_state, wait = val_loss, model.get_state(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= spec.patience:
                history.stopped_early = True
                break
    model.set_state(best_state)
    model.epoch = history.best_epoch
    return model, history


# --- evaluation -------------------------------------------------------------


@dataclass
class EvalReport:
    scenario: str
    roi_anchor: str
    n_classes: int
    z_step: float
    confusion: list[list[int]]
    per_class_accuracy: list[float]
    accuracy: float
    distance_error_hist: dict[str, int]
    max_abs_class_error: int
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        dump_json(self.to_dict(), path)


def report_from_predictions(pred, labels, n_classes, z_step, scenario="", roi_anchor="center", history=None):
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), totals, out=np.zeros(n_classes), where=totals > 0
    )
    class_err = np.abs(pred - labels)
    hist: dict[str, int] = {}
    for e in np.unique(class_err):
        hist[f"{e * z_step:g}"] = int((class_err == e).sum())
    return EvalReport(
        scenario=scenario,
        roi_anchor=roi_anchor,
        n_classes=n_classes,
        z_step=z_step,
        confusion=confusion.tolist(),
        per_class_accuracy=per_class.tolist(),
        accuracy=float((pred == labels).mean()) if len(labels) else 0.0,
        distance_error_hist=hist,
        max_abs_class_error=int(class_err.max()) if len(labels) else 0,
        val_loss=[] if history is None else history.column("val_loss"),
        val_accuracy=[] if history is None else history.column("val_acc"),
    )


def reanchored_arrays(test: Manifest, roi_anchor: str):
    """Recompute the test images from raw holograms with a different ROI anchor."""
    meta = test.meta
    scenario = Scenario(meta["scenario"], roi_anchor, meta["roi_size"])
    images = []
    for row in test.rows:
        raw = row.get("raw_path")
        path = test.resolve(raw) if raw else None
        if path is None or not path.exists():
            raise MissingRawImages(f"raw hologram for {row['path']} not found ({raw})")
        images.append(apply_scenario(read_png16(path), scenario, meta["out_size"]))
    x = np.stack(images).astype(np.float32)[:, None]
    return x, test.labels()


def evaluate(model, test: Manifest, roi_anchor: str = "center", history: History | None = None) -> EvalReport:
    """Classify the test set and summarise the distance error.

    When ``roi_anchor`` differs from the anchor the test set was built with,
    the images are re-derived from the raw holograms.
    """
    meta = test.meta
    if roi_anchor == meta.get("roi_anchor", "center"):
        x, y = test.arrays()
    else:
        x, y = reanchored_arrays(test, roi_anchor)
    pred = model.predict(x).argmax(axis=1)
    ds = meta.get("dataset", {})
    return report_from_predictions(
        pred,
        y,
        ds.get("n_classes", int(y.max()) + 1),
        ds.get("z_step", 1.0),
        meta.get("scenario", ""),
        roi_anchor,
        history,
    )


def plot_confusion(report: EvalReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.array(report.confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        if v:
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(f"{report.scenario} / {report.roi_anchor}")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_error_hist(report: EvalReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = sorted(report.distance_error_hist, key=float)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar([float(k) for k in keys], [report.distance_error_hist[k] for k in keys], width=0.6 * report.z_step)
    ax.set_xlabel("distance error (um)")
    ax.set_ylabel("test images")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(report: EvalReport, out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{stem}.json", out_dir / f"{stem}_confusion.png", out_dir / f"{stem}_error_hist.png"]
    report.write_json(paths[0])
    plot_confusion(report, paths[1])
    plot_error_hist(report, paths[2])
    return paths
