"""Grad-CAM for CNN graphs and attention maps for ViT graphs."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import NotConvolutional, NotViT, ShapeMismatch
from .nn import INFER, Conv2D, ModelGraph, MultiHeadSelfAttention, Residual

OVERLAY_ALPHA = 0.5
OVERLAY_CMAP = "jet"


def upsample_bilinear(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape == tuple(shape):
        return a.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(a.shape[0], shape[0])
    c0, c1, fc = axis_weights(a.shape[1], shape[1])
    rows = a[r0] * (1 - fr)[:, None] + a[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def _max_normalize(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def _batch(model: ModelGraph, image) -> np.ndarray:
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None]
    dtype = model.params()[next(iter(model.params()))].dtype
    return x[None].astype(dtype)


def last_conv_layer(model: ModelGraph) -> str:
    for name, layer in reversed(model.layers):
        if isinstance(layer, Conv2D):
            return name
    raise NotConvolutional("model has no convolution layer")


def grad_cam(model: ModelGraph, image, target_class: int, layer: str | None = None) -> np.ndarray:
    """Grad-CAM heatmap in [0, 1] at the input's spatial size.

    Channel weights are the spatial mean of d(logit_target)/d(activation) at
    the output of ``layer`` (the last convolution by default).
    """
    name = layer or last_conv_layer(model)
    idx = model.layer_index(name)
    if not isinstance(model.layers[idx][1], Conv2D):
        raise NotConvolutional(f"layer {name} is {model.layers[idx][1].kind}, not conv2d")
    x = _batch(model, image)
    logits, caches = model.forward(x, INFER)
    n_classes = logits.shape[1]
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target_class must be in [0, {n_classes})")
    activation, _ = model.forward(x, INFER, stop=idx)
    seed = np.zeros_like(logits)
    seed[0, target_class] = 1.0
    grad, _ = model.backward(caches, seed, stop=idx)
    weights = grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation[0], axes=1), 0.0)
    return _max_normalize(upsample_bilinear(cam, x.shape[2:]))


def vit_attentions(model: ModelGraph, image) -> list[np.ndarray]:
    """Attention probabilities ``(heads, T, T)`` of every attention block."""
    blocks = [l for _, l in model.layers if isinstance(l, Residual) and _mhsa(l) is not None]
    if not blocks:
        raise NotViT("model has no self-attention blocks")
    h = _batch(model, image)
    maps = []
    for _, layer in model.layers:
        if isinstance(layer, Residual) and _mhsa(layer) is not None:
            z = h
            for _, child in layer.layers:
                if isinstance(child, MultiHeadSelfAttention):
                    maps.append(child.attention(z)[0][0].astype(np.float64))
                    break
                z, _ = child.forward(z, INFER)
        h, _ = layer.forward(h, INFER)
    return maps


def _mhsa(block: Residual):
    for _, child in block.layers:
        if isinstance(child, MultiHeadSelfAttention):
            return child
    return None


def attention_distribution(model: ModelGraph, image, method: str = "rollout") -> np.ndarray:
    """Class-token attention over the patch grid, summing to 1."""
    maps = vit_attentions(model, image)
    if method == "last_layer":
        row = maps[-1].mean(axis=0)[0]
    elif method == "rollout":
        t = maps[0].shape[-1]
        eye = np.eye(t)
        rollout = eye
        for a in maps:
            a = a.mean(axis=0) + eye
            a /= a.sum(axis=-1, keepdims=True)
            rollout = a @ rollout
        row = rollout[0]
    else:
        raise ValueError(f"unknown attention method {method!r}")
    patches = row[1:]
    side = int(round(np.sqrt(patches.size)))
    return (patches / patches.sum()).reshape(side, side)


def attention_map(model: ModelGraph, image, method: str = "rollout") -> np.ndarray:
    dist = attention_distribution(model, image, method)
    size = model.input_shape[1:]
    return _max_normalize(upsample_bilinear(dist, size))


def spatial_entropy(heatmap: np.ndarray) -> float:
    """Shannon entropy (bits) of a nonnegative map treated as a distribution."""
    m = np.asarray(heatmap, dtype=np.float64).ravel()
    total = m.sum()
    if total <= 0:
        return 0.0
    p = m[m > 0] / total
    return float(-(p * np.log2(p)).sum())


def _render(base: np.ndarray, heatmap: np.ndarray) -> np.ndarray:
    import matplotlib

    base = np.asarray(base, dtype=np.float64)
    lo, hi = base.min(), base.max()
    gray = np.zeros_like(base) if hi - lo <= 0 else (base - lo) / (hi - lo)
    gray = np.repeat(gray[..., None], 3, axis=-1)
    heat = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    color = matplotlib.colormaps[OVERLAY_CMAP](heat)[..., :3]
    a = (OVERLAY_ALPHA * heat)[..., None]
    rgb = gray * (1.0 - a) + color * a
    return np.rint(rgb * 255).astype(np.uint8)


def emit_overlay(base: np.ndarray, heatmap: np.ndarray, path=None) -> bytes:
    """Blend ``heatmap`` over a grayscale ``base`` and return PNG bytes.

    The colour map is ``jet``; each pixel is mixed with weight
    ``OVERLAY_ALPHA * heat``, so a zero heatmap leaves the base untouched.
    """
    if np.shape(base) != np.shape(heatmap):
        raise ShapeMismatch(np.shape(base), np.shape(heatmap), "heatmap")
    buf = io.BytesIO()
    Image.fromarray(_render(base, heatmap)).save(buf, format="PNG")
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def write_heatmap_csv(heatmap: np.ndarray, path) -> None:
    np.savetxt(path, heatmap, delimiter=",", fmt="%.8g")

