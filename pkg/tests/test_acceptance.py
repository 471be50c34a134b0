"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 4, 5, 7 and 8 share three full desk-scale pipeline runs
(seeds 0, 1, 2) plus a repeat of seed 0; expect roughly 15-20 minutes on one
core.
"""

import json
import math
import statistics
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from holofocus.autofocus import autofocus_sweep
from holofocus.explain import attention_distribution, vit_attentions
from holofocus.io import Manifest
from holofocus.models import load_checkpoint
from holofocus.nn import AdamState, GlobalAvgPool, adam_step, cross_entropy_loss, softmax
from holofocus.nn.gradcheck import check_all_kinds
from holofocus.nn.layers import LAYER_KINDS
from holofocus.optics import (
    ComplexField,
    OpticalConfig,
    angular_spectrum_propagate,
    default_target,
    record_hologram,
)
from holofocus.pipeline import ExperimentConfig, run_pipeline
from holofocus.preprocess import Scenario, apply_scenario, negate

SEEDS = (0, 1, 2)


@contextmanager
def criterion(n, title):
    """Record a PASS/FAIL line for criterion ``n``; details go in ``info``."""
    info = {}
    try:
        yield info
    except BaseException:
        ACCEPTANCE[n] = (False, f"[FAIL] {n}. {title} {info.get('detail', '')}".rstrip())
        raise
    ACCEPTANCE[n] = (True, f"[PASS] {n}. {title} {info.get('detail', '')}".rstrip())


# --- 1, 2, 3, 6, 9: fast oracles -------------------------------------------


def test_c1_gradient_oracle():
    with criterion(1, "gradient oracle") as info:
        start = time.perf_counter()
        worst = check_all_kinds([k.kind for k in LAYER_KINDS], instances=5, seed=2024)
        elapsed = time.perf_counter() - start
        info["detail"] = f"worst rel err {max(worst.values()):.2e} over {len(worst)} kinds, {elapsed:.1f}s"
        assert max(worst.values()) < 1e-4, worst
        assert elapsed < 30


def test_c2_propagation_round_trip():
    with criterion(2, "propagation round trip") as info:
        start = time.perf_counter()
        cfg = OpticalConfig()
        rng = np.random.default_rng(11)
        n = cfg.grid_size
        f = np.fft.fftfreq(n, d=cfg.pixel_pitch)
        fx, fy = np.meshgrid(f, f)
        errs = []
        for z in (1.0, 5.0, 10.0):
            spec = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
            spec[fx**2 + fy**2 > (0.9 / cfg.wavelength) ** 2] = 0
            field = ComplexField(np.fft.ifft2(spec), cfg)
            back = angular_spectrum_propagate(angular_spectrum_propagate(field, z), -z)
            errs.append(np.linalg.norm(back.data - field.data) / np.linalg.norm(field.data))
        elapsed = time.perf_counter() - start
        info["detail"] = f"max rel err {max(errs):.2e}, {elapsed:.2f}s"
        assert max(errs) < 1e-10 and elapsed < 5


def test_c3_classical_baseline():
    with criterion(3, "classical baseline 20/20") as info:
        start = time.perf_counter()
        cfg = OpticalConfig()
        target = default_target(cfg)
        hits = 0
        for i in range(20):
            z = 45.0 + i
            holo = record_hologram(target, z, cfg, noise_sigma=0.0)
            hits += autofocus_sweep(holo, 35.0, 75.0, 1.0, "variance").z_best == z
        elapsed = time.perf_counter() - start
        info["detail"] = f"{hits}/20 exact, {elapsed:.1f}s"
        assert hits == 20 and elapsed < 120


def test_c6_scenario_equivalence():
    with criterion(6, "SFN == SFO(negate) on 50 holograms") as info:
        cfg = OpticalConfig()
        target = default_target(cfg)
        rng = np.random.default_rng(6)
        sfn, sfo = Scenario("SFN"), Scenario("SFO")
        equal = 0
        for _ in range(50):
            h = record_hologram(target, rng.uniform(45, 65), cfg, int(rng.integers(2**31))).intensity
            img = (h - h.min()) / (h.max() - h.min())
            equal += np.array_equal(apply_scenario(img, sfn), apply_scenario(negate(img), sfo))
        info["detail"] = f"{equal}/50 bit-identical"
        assert equal == 50


def test_c9_closed_forms():
    with criterion(9, "loss and optimizer closed forms") as info:
        loss, _ = cross_entropy_loss(np.zeros((1, 10)), [4])
        assert abs(loss - math.log(10)) <= 1e-9
        assert np.max(np.abs(softmax(np.zeros(3)) - 1 / 3)) <= 1e-9
        x = np.log(np.array([1.0, 2.0, 3.0]))
        assert np.max(np.abs(softmax(x) - np.array([1, 2, 3]) / 6)) <= 1e-9
        gap, _ = GlobalAvgPool().forward(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert abs(gap[0, 0] - 4.0) <= 1e-9
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState())
        assert abs(p["w"][0] - (-1e-4 / (1 + 1e-8))) <= 1e-9
        info["detail"] = f"CE uniform = {loss:.12f}"


# --- 4, 5, 7, 8: desk-scale pipeline runs ----------------------------------


def desk_config(seed):
    # protocol defaults: 10 classes x 60, 128 raw, 64 centre ROI, NSO, sigma 0.01,
    # Adam lr 1e-4, <= 200 epochs, patience 20; explain the whole test set
    return ExperimentConfig(seed=seed, explain={"n_samples": 200})


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    runs = {}
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv("HOLOFOCUS_CACHE", raising=False)
        for seed in SEEDS:
            out = tmp_path_factory.mktemp(f"desk{seed}")
            start = time.perf_counter()
            res = run_pipeline(desk_config(seed), out, threads=1)
            runs[seed] = (res, time.perf_counter() - start)
    return runs


def _runs(desk_runs, seed):
    return desk_runs[seed][0].summary["runs"]


def test_c4_desk_classification(desk_runs):
    with criterion(4, "desk-scale classification (>= 2 of 3 seeds)") as info:
        parts, ok = [], {"cnn": 0, "vit": 0}
        for seed in SEEDS:
            for run in _runs(desk_runs, seed).values():
                good = run["best_val_acc"] >= 0.90 and run["max_abs_class_error_center"] <= 1
                ok[run["family"]] += good
                parts.append(
                    f"{run['family']}/s{seed}: val {run['best_val_acc']:.3f} maxerr {run['max_abs_class_error_center']}"
                )
        longest = max(t for _, t in desk_runs.values())
        info["detail"] = f"cnn {ok['cnn']}/3, vit {ok['vit']}/3; " + "; ".join(parts)
        assert ok["cnn"] >= 2 and ok["vit"] >= 2
        # two models per run, 30 min budget each
        assert longest <= 2 * 30 * 60


REPORT_FIELDS = {
    "scenario", "roi_anchor", "n_classes", "z_step", "confusion", "per_class_accuracy",
    "accuracy", "distance_error_hist", "max_abs_class_error", "val_loss", "val_accuracy",
}


def test_c5_roi_shift(desk_runs):
    with criterion(5, "bottom-left ROI robustness (measured)") as info:
        acc = {"cnn": [], "vit": []}
        for seed in SEEDS:
            res = desk_runs[seed][0]
            for run_id, run in _runs(desk_runs, seed).items():
                rep = json.loads((res.out_dir / "reports" / f"{run_id}_bottom_left.json").read_text())
                assert set(rep) == REPORT_FIELDS
                assert rep["roi_anchor"] == "bottom_left"
                assert sum(map(sum, rep["confusion"])) == 200
                assert len(rep["per_class_accuracy"]) == 10 and rep["val_loss"]
                acc[run["family"]].append(rep["accuracy"])
        vit, cnn = statistics.mean(acc["vit"]), statistics.mean(acc["cnn"])
        verdict = "ViT more robust" if vit > cnn else "ViT not more robust"
        info["detail"] = f"bottom-left accuracy ViT {vit:.3f} vs CNN {cnn:.3f} -> {verdict} (reported, not asserted)"


def test_c7_explainability(desk_runs):
    with criterion(7, "explainability contracts") as info:
        ent = {"cnn": [], "vit": []}
        per_seed = []
        for seed in SEEDS:
            res = desk_runs[seed][0]
            for run_id, run in _runs(desk_runs, seed).items():
                edir = res.out_dir / "explain" / run_id
                ent[run["family"]] += json.loads((edir / "entropy.json").read_text())["spatial_entropy_bits"]
                if run["family"] == "cnn":
                    for csv in edir.glob("*_heatmap.csv"):
                        m = np.loadtxt(csv, delimiter=",")
                        assert m.min() >= 0 and m.max() <= 1
                        assert m.max() == 1 or not m.any()
            per_seed.append(
                f"s{seed} vit {_runs(desk_runs, seed)['vit_NSO']['median_spatial_entropy_bits']:.3f}"
                f"/cnn {_runs(desk_runs, seed)['cnn_NSO']['median_spatial_entropy_bits']:.3f}"
            )

        res = desk_runs[SEEDS[0]][0]
        vit = load_checkpoint(res.out_dir / "models" / "vit_NSO" / "checkpoint")
        test = Manifest.load(res.out_dir / "splits" / "NSO" / "test.json")
        worst = 0.0
        for row in test.rows[::10]:
            for a in vit_attentions(vit, test.image(row)):
                worst = max(worst, float(np.abs(a.sum(-1) - 1).max()))
        assert worst <= 1e-6

        for k, v in vit.params().items():
            if k.endswith("qkv"):
                v[..., : 2 * v.shape[-1] // 3] = 0.0
        img = test.image(test.rows[0])
        assert np.ptp(attention_distribution(vit, img, "last_layer")) == 0
        # rollout multiplies matrices, so equality holds to rounding only
        dist = attention_distribution(vit, img, "rollout")
        assert np.ptp(dist) <= 1e-15 and abs(dist.sum() - 1) <= 1e-12

        med_vit, med_cnn = statistics.median(ent["vit"]), statistics.median(ent["cnn"])
        info["detail"] = (
            f"row-sum err {worst:.1e}; median entropy ViT {med_vit:.3f} >= CNN {med_cnn:.3f} bits "
            f"over {len(ent['vit'])} test images ({'; '.join(per_seed)})"
        )
        assert med_vit >= med_cnn


def test_c8_determinism(desk_runs, tmp_path_factory):
    with criterion(8, "determinism of a full run") as info:
        first = desk_runs[0][0]
        with pytest.MonkeyPatch.context() as mp:
            mp.delenv("HOLOFOCUS_CACHE", raising=False)
            second = run_pipeline(desk_config(0), tmp_path_factory.mktemp("desk0_repeat"), threads=1)
        assert not second.skipped
        metric_files = sorted(
            p.relative_to(first.out_dir)
            for p in first.out_dir.rglob("*")
            if p.suffix in (".csv", ".json") and ".cache" not in p.parts and p.name != "run_manifest.json"
        )
        differing = [str(p) for p in metric_files if (first.out_dir / p).read_bytes() != (second.out_dir / p).read_bytes()]
        sums = [(a["checksum"], b["checksum"]) for a, b in zip(first.summary["runs"].values(), second.summary["runs"].values())]
        info["detail"] = f"{len(metric_files)} csv/json files compared, {len(differing)} differ; checksums equal: {all(a == b for a, b in sums)}"
        assert not differing, differing[:5]
        assert all(a == b for a, b in sums)
