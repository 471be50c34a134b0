import io

import numpy as np
import pytest
from PIL import Image

from holofocus.errors import NotConvolutional, NotViT, ShapeMismatch
from holofocus.explain import (
    attention_distribution,
    attention_map,
    emit_overlay,
    grad_cam,
    spatial_entropy,
    upsample_bilinear,
    vit_attentions,
)
from holofocus.models import CnnConfig, VitConfig, build_small_cnn, build_small_vit
from holofocus.nn import Conv2D, Dense, GlobalAvgPool, ModelGraph, ReLU
from holofocus.train import TrainSpec, train

TINY_VIT = dict(input_size=16, patch_size=4, dim=8, heads=2, n_classes=3)


def one_by_one_net():
    conv = Conv2D(1, 1, kernel=1)
    conv.params["w"][...] = 1.0
    conv.params["b"][...] = 0.0
    head = Dense(1, 2)
    head.params["w"][...] = [[2.0, -1.0]]
    head.params["b"][...] = 0.0
    layers = [("conv", conv), ("relu", ReLU()), ("gap", GlobalAvgPool()), ("head", head)]
    return ModelGraph(layers, (1, 6, 6), "cnn")


def test_gradcam_closed_form():
    x = np.random.default_rng(0).normal(size=(6, 6))
    cam = grad_cam(one_by_one_net(), x, 0)
    relu = np.maximum(x, 0)
    np.testing.assert_allclose(cam, relu / relu.max(), rtol=1e-12)


def test_gradcam_contract_and_class_dependence():
    rng = np.random.default_rng(1)
    x = rng.random((16, 1, 16, 16)).astype(np.float32)
    y = np.arange(16) % 3
    x[y == 1, :, :8] += 1.0
    x[y == 2, :, :, :8] += 1.0
    model = build_small_cnn(CnnConfig(input_size=16, blocks=[{"out_channels": 4}, {"out_channels": 8}], n_classes=3))
    model, _ = train(model, (x, y), (x, y), TrainSpec(max_epochs=5, lr=1e-2))
    maps = [grad_cam(model, x[1, 0], c) for c in range(3)]
    for m in maps:
        assert m.shape == (16, 16) and m.min() >= 0 and m.max() <= 1
    assert not np.allclose(maps[1], maps[2])


def test_gradcam_rejects_non_conv():
    with pytest.raises(NotConvolutional):
        grad_cam(build_small_vit(VitConfig(depth=1, **TINY_VIT)), np.zeros((16, 16)), 0)
    with pytest.raises(NotConvolutional):
        grad_cam(one_by_one_net(), np.zeros((6, 6)), 0, layer="relu")


def test_uniform_attention_with_zero_qk():
    m = build_small_vit(VitConfig(depth=2, **TINY_VIT))
    for k, v in m.params().items():
        if k.endswith("qkv"):
            v[..., : 2 * 8] = 0.0  # query and key columns
    img = np.random.default_rng(0).random((16, 16))
    for method in ("last_layer", "rollout"):
        dist = attention_distribution(m, img, method)
        np.testing.assert_allclose(dist, 1 / 16, rtol=0, atol=1e-12)
        np.testing.assert_allclose(attention_map(m, img, method), 1.0, atol=1e-12)


def test_attention_rows_and_last_layer_sum():
    m = build_small_vit(VitConfig(depth=2, **TINY_VIT), seed=3)
    img = np.random.default_rng(2).random((16, 16))
    for a in vit_attentions(m, img):
        assert np.all(np.abs(a.sum(-1) - 1) <= 1e-6)
    assert abs(attention_distribution(m, img, "last_layer").sum() - 1) <= 1e-12


def test_rollout_depth_one_matches_last_layer():
    m = build_small_vit(VitConfig(depth=1, **TINY_VIT), seed=5)
    img = np.random.default_rng(3).random((16, 16))
    np.testing.assert_allclose(
        attention_distribution(m, img, "rollout"), attention_distribution(m, img, "last_layer"), rtol=1e-6
    )


def test_attention_needs_vit():
    with pytest.raises(NotViT):
        vit_attentions(one_by_one_net(), np.zeros((6, 6)))


def test_upsample_bilinear():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = upsample_bilinear(a, (4, 4))
    assert up.shape == (4, 4)
    np.testing.assert_allclose(up[0], [0, 0.25, 0.75, 1.0])
    assert np.array_equal(upsample_bilinear(a, (2, 2)), a)


def test_spatial_entropy():
    assert spatial_entropy(np.ones((4, 4))) == pytest.approx(4.0)
    peak = np.zeros((4, 4))
    peak[1, 2] = 1
    assert spatial_entropy(peak) == 0.0


def test_overlay_contracts():
    base = np.random.default_rng(0).random((12, 10))
    zero = emit_overlay(base, np.zeros_like(base))
    rgb = np.asarray(Image.open(io.BytesIO(zero)))
    gray = np.rint((base - base.min()) / (base.max() - base.min()) * 255).astype(np.uint8)
    assert rgb.shape == (12, 10, 3)
    assert np.array_equal(rgb, np.repeat(gray[..., None], 3, -1))
    heat = np.random.default_rng(1).random((12, 10))
    assert emit_overlay(base, heat) == emit_overlay(base, heat)
    with pytest.raises(ShapeMismatch):
        emit_overlay(base, np.zeros((10, 12)))
