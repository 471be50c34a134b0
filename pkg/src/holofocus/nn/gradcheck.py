"""Central finite-difference checks of the analytic backward passes.

The scalar probed is ``sum(forward(x) * R)`` for a fixed random ``R``, so
``R`` is the upstream gradient fed to ``backward``. Every input element and
every parameter element is perturbed by ``+-h``.
"""

from __future__ import annotations

import numpy as np

from .layers import (
    GELU,
    ClassReadout,
    ClassToken,
    Conv2D,
    Dense,
    GlobalAvgPool,
    Layer,
    LayerNorm,
    MaxPool2,
    MultiHeadSelfAttention,
    PatchEmbed,
    PositionalEmbed,
    ReLU,
    Residual,
    Softmax,
    TRAIN,
    cast,
    named_params,
)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _numeric(f, arr: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def layer_gradient_errors(layer: Layer, x: np.ndarray, rng, h: float = 1e-5) -> dict[str, float]:
    """Relative error of each analytic gradient (``"input"`` and every param path)."""
    x = np.array(x, dtype=np.float64)
    out, cache = layer.forward(x, TRAIN)
    r = rng.normal(size=out.shape)
    grad_in, grad_params = layer.backward(cache, r)

    def objective():
        return float((layer.forward(x, TRAIN)[0] * r).sum())

    errors = {"input": relative_error(grad_in, _numeric(objective, x, h))}
    for path, arr in named_params(layer):
        errors[path] = relative_error(grad_params[path], _numeric(objective, arr, h))
    return errors


def _randomize(layer: Layer, rng) -> Layer:
    cast(layer, np.float64)
    for _, arr in named_params(layer):
        arr[...] = rng.normal(0.0, 0.5, size=arr.shape)
    return layer


def random_instance(kind: str, rng) -> tuple[Layer, np.ndarray]:
    """A small random layer of ``kind`` (every dimension <= 8) and an input batch."""
    n = int(rng.integers(1, 3))
    if kind in ("conv2d", "relu", "gelu", "maxpool2", "global_avg_pool"):
        c = int(rng.integers(1, 4))
        hw = 2 * int(rng.integers(2, 5))
        x = rng.normal(size=(n, c, hw, hw))
        if kind == "conv2d":
            k = int(rng.choice([1, 3]))
            layer = Conv2D(c, int(rng.integers(1, 4)), k, int(rng.choice([1, 2])), rng)
        elif kind == "relu":
            # keep inputs off the kink at 0
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
            layer = ReLU()
        elif kind == "gelu":
            layer = GELU()
        elif kind == "maxpool2":
            # distinct values so the argmax is stable under +-h
            x = rng.permutation(np.arange(x.size, dtype=np.float64)).reshape(x.shape) * 0.1
            layer = MaxPool2()
        else:
            layer = GlobalAvgPool()
        return _randomize(layer, rng), x

    t = int(rng.integers(2, 6))
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.integers(2, 5))
    tokens = rng.normal(size=(n, t, d))
    if kind == "dense":
        return _randomize(Dense(d, int(rng.integers(1, 8)), rng), rng), tokens
    if kind == "layer_norm":
        return _randomize(LayerNorm(d), rng), tokens
    if kind == "softmax":
        return Softmax(), tokens
    if kind == "patch_embed":
        p = int(rng.choice([2, 4]))
        c = int(rng.integers(1, 3))
        x = rng.normal(size=(n, c, 2 * p, 2 * p))
        return _randomize(PatchEmbed(p, d, c, rng), rng), x
    if kind == "positional_embed":
        return _randomize(PositionalEmbed(t, d), rng), tokens
    if kind == "class_token":
        return _randomize(ClassToken(d, rng), rng), tokens
    if kind == "class_readout":
        return ClassReadout(), tokens
    if kind == "multi_head_self_attention":
        return _randomize(MultiHeadSelfAttention(d, heads, rng), rng), tokens
    if kind == "residual_add":
        branch = [("norm", LayerNorm(d)), ("attn", MultiHeadSelfAttention(d, heads, rng)), ("fc", Dense(d, d, rng))]
        return _randomize(Residual(branch), rng), tokens
    raise KeyError(f"no random instance for layer kind {kind!r}")


def check_all_kinds(kinds, instances: int = 5, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per layer kind over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in kinds:
        errs = []
        for _ in range(instances):
            layer, x = random_instance(kind, rng)
            errs.extend(layer_gradient_errors(layer, x, rng, h).values())
        worst[kind] = max(errs)
    return worst
