"""Layers with hand-written forward and backward passes.

Every layer follows the same functional contract::

    out, cache = layer.forward(x, mode)
    grad_in, grad_params = layer.backward(cache, grad_out)

``forward`` never touches parameters, so inference is a pure function of
(params, input). Batches lead every tensor: images are ``(N, C, H, W)`` and
token sequences ``(N, T, D)``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeMismatch, StaleCache

TRAIN = "train"
INFER = "infer"


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind: str = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x, mode=INFER):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        """Map a per-example input shape (no batch axis) to the output shape."""
        return tuple(in_shape)

    def config(self) -> dict:
        return {}

    def children(self):
        return ()

    def _check_grad(self, cache_shape, grad_out):
        if tuple(grad_out.shape) != tuple(cache_shape):
            raise StaleCache(
                f"{self.kind}: grad_out shape {grad_out.shape} does not match "
                f"cached output shape {cache_shape}"
            )

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    """2-D convolution with ``same`` zero padding (``kernel // 2``)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2
        fan_in = in_ch * kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.params["b"] = np.zeros(out_ch)

    def config(self):
        return dict(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel, stride=self.stride)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeMismatch((self.in_ch, "H", "W"), in_shape)
        return (self.out_ch, *self._out_hw(h, w))

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, mode=INFER):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(("N", self.in_ch, "H", "W"), x.shape)
        k, s, p = self.kernel, self.stride, self.pad
        n = x.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        # (N, Ho, Wo, C, k, k) -> rows of receptive fields
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        w = self.params["w"].reshape(self.out_ch, -1)
        out = cols @ w.T + self.params["b"]
        out = out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return out, (x.shape, cols, out.shape)

    def backward(self, cache, grad_out):
        x_shape, cols, out_shape = cache
        self._check_grad(out_shape, grad_out)
        n, c, h, w_ = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = out_shape[2], out_shape[3]
        g = grad_out.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        w = self.params["w"].reshape(self.out_ch, -1)
        grad_w = (g.T @ cols).reshape(self.params["w"].shape)
        grad_b = g.sum(axis=0)
        dcols = (g @ w).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w_ + 2 * p), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w_] if p else dxp
        return dx, {"w": grad_w, "b": grad_b}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode=INFER):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return grad_out * cache, {}


class GELU(Layer):
    """Exact (erf-based) GELU."""

    kind = "gelu"

    def forward(self, x, mode=INFER):
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        return (x * cdf).astype(x.dtype, copy=False), (x, cdf)

    def backward(self, cache, grad_out):
        x, cdf = cache
        self._check_grad(x.shape, grad_out)
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (grad_out * (cdf + x * pdf)).astype(x.dtype, copy=False), {}


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Odd trailing rows/columns are dropped."""

    kind = "maxpool2"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, mode=INFER):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        xr = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        idx = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, grad_out):
        x_shape, idx = cache
        self._check_grad(idx.shape, grad_out)
        n, c, h, w = x_shape
        ho, wo = idx.shape[2], idx.shape[3]
        g = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
        np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
        g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        dx[:, :, : 2 * ho, : 2 * wo] = g.reshape(n, c, 2 * ho, 2 * wo)
        return dx, {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, mode=INFER):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, grad_out):
        n, c, h, w = cache
        self._check_grad((n, c), grad_out)
        dx = np.broadcast_to(grad_out[:, :, None, None] / (h * w), cache)
        return dx.copy(), {}


class Dense(Layer):
    """Affine map on the last axis."""

    kind = "dense"

    def __init__(self, d_in, d_out, rng=None, init="he"):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "xavier":
            w = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        else:
            w = he_normal(rng, (d_in, d_out), d_in)
        self.params["w"] = w
        self.params["b"] = np.zeros(d_out)

    def config(self):
        return dict(d_in=self.d_in, d_out=self.d_out)

    def output_shape(self, in_shape):
        if in_shape[-1] != self.d_in:
            raise ShapeMismatch((..., self.d_in), in_shape)
        return (*in_shape[:-1], self.d_out)

    def forward(self, x, mode=INFER):
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(("...", self.d_in), x.shape)
        return x @ self.params["w"] + self.params["b"], x

    def backward(self, cache, grad_out):
        x = cache
        self._check_grad((*x.shape[:-1], self.d_out), grad_out)
        x2 = x.reshape(-1, self.d_in)
        g2 = grad_out.reshape(-1, self.d_out)
        return grad_out @ self.params["w"].T, {"w": x2.T @ g2, "b": g2.sum(axis=0)}


class LayerNorm(Layer):
    kind = "layer_norm"

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)

    def config(self):
        return dict(dim=self.dim)

    def forward(self, x, mode=INFER):
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(("...", self.dim), x.shape)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * self.params["gamma"] + self.params["beta"], (xhat, inv)

    def backward(self, cache, grad_out):
        xhat, inv = cache
        self._check_grad(xhat.shape, grad_out)
        gamma = self.params["gamma"]
        axes = tuple(range(grad_out.ndim - 1))
        grads = {
            "gamma": (grad_out * xhat).sum(axis=axes),
            "beta": grad_out.sum(axis=axes),
        }
        gx = grad_out * gamma
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, grads


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, grad_out, axis=-1):
    return p * (grad_out - (grad_out * p).sum(axis=axis, keepdims=True))


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, mode=INFER):
        p = softmax(x)
        return p, p

    def backward(self, cache, grad_out):
        self._check_grad(cache.shape, grad_out)
        return softmax_backward(cache, grad_out), {}


class PatchEmbed(Layer):
    """Split ``(N, C, H, W)`` into non-overlapping patches and project each."""

    kind = "patch_embed"

    def __init__(self, patch, dim, in_ch=1, rng=None):
        super().__init__()
        self.patch, self.dim, self.in_ch = patch, dim, in_ch
        fan_in = in_ch * patch * patch
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = xavier_uniform(rng, (fan_in, dim), fan_in, dim)
        self.params["b"] = np.zeros(dim)

    def config(self):
        return dict(patch=self.patch, dim=self.dim, in_ch=self.in_ch)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch or h % self.patch or w % self.patch:
            raise ShapeMismatch((self.in_ch, f"k*{self.patch}", f"k*{self.patch}"), in_shape)
        return ((h // self.patch) * (w // self.patch), self.dim)

    def patchify(self, x):
        n, c, h, w = x.shape
        p = self.patch
        x = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n, (h // p) * (w // p), c * p * p)

    def unpatchify(self, t, x_shape):
        n, c, h, w = x_shape
        p = self.patch
        t = t.reshape(n, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return t.reshape(x_shape)

    def forward(self, x, mode=INFER):
        if x.ndim != 4:
            raise ShapeMismatch(("N", self.in_ch, "H", "W"), x.shape)
        self.output_shape(x.shape[1:])
        t = self.patchify(x)
        return t @ self.params["w"] + self.params["b"], (x.shape, t)

    def backward(self, cache, grad_out):
        x_shape, t = cache
        self._check_grad((*t.shape[:2], self.dim), grad_out)
        t2 = t.reshape(-1, t.shape[-1])
        g2 = grad_out.reshape(-1, self.dim)
        grads = {"w": t2.T @ g2, "b": g2.sum(axis=0)}
        return self.unpatchify(grad_out @ self.params["w"].T, x_shape), grads


class PositionalEmbed(Layer):
    kind = "positional_embed"

    def __init__(self, tokens, dim):
        super().__init__()
        self.tokens, self.dim = tokens, dim
        self.params["pos"] = np.zeros((tokens, dim))

    def config(self):
        return dict(tokens=self.tokens, dim=self.dim)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.tokens, self.dim):
            raise ShapeMismatch((self.tokens, self.dim), in_shape)
        return tuple(in_shape)

    def forward(self, x, mode=INFER):
        if x.shape[1:] != (self.tokens, self.dim):
            raise ShapeMismatch(("N", self.tokens, self.dim), x.shape)
        return x + self.params["pos"], x.shape

    def backward(self, cache, grad_out):
        self._check_grad(cache, grad_out)
        return grad_out, {"pos": grad_out.sum(axis=0)}


class ClassToken(Layer):
    """Prepend a learned token to every sequence."""

    kind = "class_token"

    def __init__(self, dim, rng=None):
        super().__init__()
        self.dim = dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["cls"] = rng.normal(0.0, 0.02, size=(1, dim))

    def config(self):
        return dict(dim=self.dim)

    def output_shape(self, in_shape):
        return (in_shape[0] + 1, in_shape[1])

    def forward(self, x, mode=INFER):
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(("N", "T", self.dim), x.shape)
        cls = np.broadcast_to(self.params["cls"].astype(x.dtype), (x.shape[0], 1, self.dim))
        out = np.concatenate([cls, x], axis=1)
        return out, out.shape

    def backward(self, cache, grad_out):
        self._check_grad(cache, grad_out)
        return grad_out[:, 1:], {"cls": grad_out[:, :1].sum(axis=0)}


class ClassReadout(Layer):
    """Select the class token (index 0) from a token sequence."""

    kind = "class_readout"

    def output_shape(self, in_shape):
        return (in_shape[-1],)

    def forward(self, x, mode=INFER):
        return x[:, 0], x.shape

    def backward(self, cache, grad_out):
        self._check_grad((cache[0], cache[2]), grad_out)
        dx = np.zeros(cache, dtype=grad_out.dtype)
        dx[:, 0] = grad_out
        return dx, {}


class MultiHeadSelfAttention(Layer):
    kind = "multi_head_self_attention"

    def __init__(self, dim, heads, rng=None):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim divisible by {heads}", dim, "attention dim")
        self.dim, self.heads = dim, heads
        self.d_head = dim // heads
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w_qkv"] = xavier_uniform(rng, (dim, 3 * dim), dim, dim)
        self.params["b_qkv"] = np.zeros(3 * dim)
        self.params["w_out"] = xavier_uniform(rng, (dim, dim), dim, dim)
        self.params["b_out"] = np.zeros(dim)

    def config(self):
        return dict(dim=self.dim, heads=self.heads)

    def output_shape(self, in_shape):
        if in_shape[-1] != self.dim:
            raise ShapeMismatch(("T", self.dim), in_shape)
        return tuple(in_shape)

    def attention(self, x):
        """Return ``(attn, q, k, v)`` with ``attn`` of shape ``(N, heads, T, T)``."""
        n, t, _ = x.shape
        qkv = x @ self.params["w_qkv"] + self.params["b_qkv"]
        qkv = qkv.reshape(n, t, 3, self.heads, self.d_head).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(self.d_head)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        return attn, q, k, v

    def forward(self, x, mode=INFER):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeMismatch(("N", "T", self.dim), x.shape)
        n, t, d = x.shape
        attn, q, k, v = self.attention(x)
        heads_out = attn @ v
        concat = heads_out.transpose(0, 2, 1, 3).reshape(n, t, d)
        out = concat @ self.params["w_out"] + self.params["b_out"]
        return out, (x, q, k, v, attn, concat)

    def backward(self, cache, grad_out):
        x, q, k, v, attn, concat = cache
        self._check_grad(x.shape, grad_out)
        n, t, d = x.shape
        scale = 1.0 / math.sqrt(self.d_head)
        g2 = grad_out.reshape(-1, d)
        grads = {
            "w_out": concat.reshape(-1, d).T @ g2,
            "b_out": g2.sum(axis=0),
        }
        d_concat = grad_out @ self.params["w_out"].T
        d_heads = d_concat.reshape(n, t, self.heads, self.d_head).transpose(0, 2, 1, 3)
        d_attn = d_heads @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ d_heads
        d_scores = softmax_backward(attn, d_attn) * scale
        dq = d_scores @ k
        dk = d_scores.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(n, t, 3 * d)
        grads["w_qkv"] = x.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        grads["b_qkv"] = dqkv.reshape(-1, 3 * d).sum(axis=0)
        return dqkv @ self.params["w_qkv"].T, grads


class Residual(Layer):
    """``x + f(x)`` where ``f`` is a sequence of named sub-layers."""

    kind = "residual_add"

    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for _, layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != tuple(in_shape):
            raise ShapeMismatch(in_shape, shape, "residual branch")
        return shape

    def forward(self, x, mode=INFER):
        h = x
        caches = []
        for _, layer in self.layers:
            h, c = layer.forward(h, mode)
            caches.append(c)
        if h.shape != x.shape:
            raise ShapeMismatch(x.shape, h.shape, "residual branch")
        return x + h, (x.shape, caches)

    def backward(self, cache, grad_out):
        x_shape, caches = cache
        self._check_grad(x_shape, grad_out)
        grads = {}
        g = grad_out
        for (name, layer), c in zip(reversed(self.layers), reversed(caches)):
            g, gp = layer.backward(c, g)
            for key, val in gp.items():
                grads[f"{name}.{key}"] = val
        return grad_out + g, grads


LAYER_KINDS = (
    Conv2D,
    ReLU,
    GELU,
    MaxPool2,
    GlobalAvgPool,
    Dense,
    LayerNorm,
    Softmax,
    PatchEmbed,
    PositionalEmbed,
    MultiHeadSelfAttention,
    Residual,
    ClassToken,
    ClassReadout,
)


def forward(layer: Layer, x, mode=INFER):
    return layer.forward(x, mode)


def backward(layer: Layer, cache, grad_out):
    return layer.backward(cache, grad_out)


def named_params(layer: Layer, prefix: str = ""):
    """Yield ``(path, array)`` for a layer and its children, depth first."""
    for key, val in layer.params.items():
        yield prefix + key, val
    for name, child in layer.children():
        yield from named_params(child, f"{prefix}{name}.")


def set_param(layer: Layer, path: str, value) -> None:
    head, _, rest = path.partition(".")
    if not rest:
        layer.params[head] = value
        return
    for name, child in layer.children():
        if name == head:
            set_param(child, rest, value)
            return
    raise KeyError(path)


def cast(layer: Layer, dtype) -> None:
    for key in list(layer.params):
        layer.params[key] = layer.params[key].astype(dtype)
    for _, child in layer.children():
        cast(child, dtype)
