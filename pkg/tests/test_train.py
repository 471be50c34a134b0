import numpy as np
import pytest

from holofocus.errors import DivergenceDetected, InsufficientData, MissingRawImages
from holofocus.io import Manifest, write_png16
from holofocus.models import CnnConfig, build_small_cnn
from holofocus.train import (
    SplitSpec,
    TrainSpec,
    evaluate,
    report_from_predictions,
    split_dataset,
    train,
    write_report,
)


def fake_manifest(n_classes, per_class):
    rows = [
        {"path": f"images/c{c:02d}_{i:04d}.png", "class_label": c, "z_true_um": 50.0 + c}
        for c in range(n_classes)
        for i in range(per_class)
    ]
    return Manifest(rows, {"dataset": {"n_classes": n_classes, "z_step": 1.0}}, ".")


def paths(m):
    return {r["path"] for r in m.rows}


def test_split_sizes_full_scale():
    # per class 360 - 20 = 340 -> floor(0.8 * 340) = 272 train, 68 val
    train_m, val_m, test_m = split_dataset(fake_manifest(10, 360), SplitSpec())
    assert (len(train_m), len(val_m), len(test_m)) == (2720, 680, 200)
    assert not paths(train_m) & paths(test_m) and not paths(train_m) & paths(val_m)
    assert np.bincount(test_m.labels()).tolist() == [20] * 10


def test_split_seeding():
    m = fake_manifest(4, 40)
    a = split_dataset(m, SplitSpec(seed=1))
    b = split_dataset(m, SplitSpec(seed=1))
    c = split_dataset(m, SplitSpec(seed=2))
    assert paths(a[2]) == paths(b[2]) and paths(a[0]) == paths(b[0])
    assert paths(a[2]) != paths(c[2])


def test_split_insufficient():
    with pytest.raises(InsufficientData):
        split_dataset(fake_manifest(2, 24), SplitSpec())


def _tiny_problem():
    rng = np.random.default_rng(0)
    x = rng.random((12, 1, 4, 4)).astype(np.float32)
    y = np.arange(12) % 2
    model = build_small_cnn(CnnConfig(input_size=4, blocks=[{"out_channels": 2}], n_classes=2))
    return model, (x, y), (x[:4], y[:4])


def test_strictly_improving_runs_all_epochs():
    model, tr, va = _tiny_problem()
    _, hist = train(model, tr, va, TrainSpec(max_epochs=200, patience=20), monitor=lambda m, e: (1.0 / e, 0.5))
    assert len(hist.rows) == 200 and hist.best_epoch == 200 and not hist.stopped_early


def test_frozen_loss_stops_at_patience_plus_one():
    model, tr, va = _tiny_problem()
    _, hist = train(model, tr, va, TrainSpec(patience=20), monitor=lambda m, e: (1.0, 0.5))
    assert len(hist.rows) == 21 and hist.best_epoch == 1 and hist.stopped_early


def test_best_weights_restored():
    model, tr, va = _tiny_problem()
    seen = {}

    def monitor(m, e):
        seen[e] = m.checksum()
        return (abs(e - 3) + 1.0, 0.0)

    model, hist = train(model, tr, va, TrainSpec(max_epochs=6, patience=10), monitor=monitor)
    assert hist.best_epoch == 3 and model.checksum() == seen[3] and model.epoch == 3


def test_divergence():
    model, tr, va = _tiny_problem()
    with pytest.raises(DivergenceDetected):
        train(model, tr, va, TrainSpec(max_epochs=3), monitor=lambda m, e: (float("nan"), 0.0))


def test_history_csv(tmp_path):
    model, tr, va = _tiny_problem()
    _, hist = train(model, tr, va, TrainSpec(max_epochs=3))
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc" and len(lines) == 4


class LabelReader:
    """Stub classifier: the image's mean pixel encodes the class."""

    def __init__(self, n_classes, constant=None):
        self.n, self.constant = n_classes, constant

    def predict(self, x):
        labels = np.rint(x.mean(axis=(1, 2, 3)) * 10).astype(int)
        if self.constant is not None:
            labels[:] = self.constant
        return np.eye(self.n)[labels]


def coded_test_set(tmp_path, n_classes=4, per_class=5, with_raw=False):
    rows = []
    for c in range(n_classes):
        for i in range(per_class):
            rel = f"images/c{c}_{i}.png"
            write_png16(tmp_path / rel, np.full((8, 8), c / 10), 0.0, 1.0)
            rows.append({"path": rel, "class_label": c, "z_true_um": 50.0 + c})
            if with_raw:
                rows[-1]["raw_path"] = f"raw/missing_{c}_{i}.png"
    meta = {"scenario": "NSO", "roi_anchor": "center", "roi_size": 8, "out_size": 8,
            "dataset": {"n_classes": n_classes, "z_step": 1.0}}
    return Manifest(rows, meta, tmp_path)


def test_perfect_stub(tmp_path):
    rep = evaluate(LabelReader(4), coded_test_set(tmp_path))
    assert rep.confusion == np.diag([5] * 4).tolist()
    assert rep.max_abs_class_error == 0 and rep.accuracy == 1.0
    assert rep.distance_error_hist == {"0": 20}


def test_constant_stub(tmp_path):
    rep = evaluate(LabelReader(4, constant=0), coded_test_set(tmp_path))
    assert rep.accuracy == pytest.approx(1 / 4)
    assert rep.max_abs_class_error == 3
    assert rep.distance_error_hist == {"0": 5, "1": 5, "2": 5, "3": 5}
    paths_ = write_report(rep, tmp_path / "rep", "stub")
    assert all(p.exists() for p in paths_)


def test_reanchor_needs_raw(tmp_path):
    with pytest.raises(MissingRawImages):
        evaluate(LabelReader(4), coded_test_set(tmp_path, with_raw=True), "bottom_left")


def test_distance_error_in_um():
    rep = report_from_predictions([2, 0], [0, 0], 3, 2.5)
    assert rep.distance_error_hist == {"0": 1, "5": 1} and rep.max_abs_class_error == 2
