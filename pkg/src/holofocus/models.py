"""Small CNN and ViT classifier families plus the checkpoint format.

Parameter counts (``n`` classes, 1 input channel):

* CNN: ``sum(c_in*k*k*c_out + c_out over blocks) + c_last*n + n``
* ViT with patch ``p``, width ``D``, ``T = (input/p)**2`` patches, MLP width
  ``H = round(D*mlp_ratio)`` and depth ``L``::

      p*p*D + D            patch projection
      + T*D + D            positional embedding, class token
      + L*(4*D + 3*D*D + 3*D + D*D + D + 2*D*H + H + D)
      + 2*D + D*n + n      final norm, head
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import InvalidConfig
from .nn import (
    ClassReadout,
    ClassToken,
    Conv2D,
    Dense,
    GELU,
    GlobalAvgPool,
    LayerNorm,
    MaxPool2,
    ModelGraph,
    MultiHeadSelfAttention,
    PatchEmbed,
    PositionalEmbed,
    ReLU,
    Residual,
)
from .nn.layers import cast
from .nn.optim import AdamState


class ConvBlock(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    out_channels: int = Field(gt=0)
    kernel: int = Field(default=3, gt=0)
    stride: int = Field(default=1, gt=0)
    pool: bool = True


class CnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_size: int = Field(default=64, gt=0)
    blocks: list[ConvBlock] = Field(
        default_factory=lambda: [
            ConvBlock(out_channels=16),
            ConvBlock(out_channels=32),
            ConvBlock(out_channels=64),
        ]
    )
    n_classes: int = Field(default=10, gt=0)


class VitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_size: int = Field(default=64, gt=0)
    patch_size: int = Field(default=8, gt=0)
    dim: int = Field(default=64, gt=0)
    depth: int = Field(default=4, gt=0)
    heads: int = Field(default=4, gt=0)
    mlp_ratio: float = Field(default=2.0, gt=0)
    n_classes: int = Field(default=10, gt=0)

    @property
    def n_patches(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


def build_small_cnn(cfg: CnnConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    if not cfg.blocks:
        raise InvalidConfig("blocks: at least one conv block is required")
    rng = np.random.default_rng(seed)
    layers = []
    size, c_in = cfg.input_size, 1
    for i, b in enumerate(cfg.blocks):
        size = (size + 2 * (b.kernel // 2) - b.kernel) // b.stride + 1
        if b.pool:
            size //= 2
        if size < 1:
            raise InvalidConfig(
                f"blocks[{i}]: spatial size drops below 1 for input_size={cfg.input_size}"
            )
        layers.append((f"block{i}.conv", Conv2D(c_in, b.out_channels, b.kernel, b.stride, rng)))
        layers.append((f"block{i}.relu", ReLU()))
        if b.pool:
            layers.append((f"block{i}.pool", MaxPool2()))
        c_in = b.out_channels
    layers.append(("gap", GlobalAvgPool()))
    layers.append(("head", Dense(c_in, cfg.n_classes, rng)))
    model = ModelGraph(
        layers, (1, cfg.input_size, cfg.input_size), "cnn", cfg.model_dump(), seed
    )
    for _, layer in model.layers:
        cast(layer, dtype)
    return model


def build_small_vit(cfg: VitConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    if cfg.input_size % cfg.patch_size:
        raise InvalidConfig(
            f"input_size {cfg.input_size} not divisible by patch_size {cfg.patch_size}"
        )
    if cfg.dim % cfg.heads:
        raise InvalidConfig(f"dim {cfg.dim} not divisible by heads {cfg.heads}")
    rng = np.random.default_rng(seed)
    d = cfg.dim
    layers = [
        ("patch_embed", PatchEmbed(cfg.patch_size, d, 1, rng)),
        ("pos_embed", PositionalEmbed(cfg.n_patches, d)),
        ("cls_token", ClassToken(d, rng)),
    ]
    for i in range(cfg.depth):
        attn = Residual([("norm", LayerNorm(d)), ("mhsa", MultiHeadSelfAttention(d, cfg.heads, rng))])
        mlp = Residual(
            [
                ("norm", LayerNorm(d)),
                ("fc1", Dense(d, cfg.mlp_dim, rng)),
                ("gelu", GELU()),
                ("fc2", Dense(cfg.mlp_dim, d, rng)),
            ]
        )
        layers += [(f"block{i}.attn", attn), (f"block{i}.mlp", mlp)]
    layers += [
        ("norm", LayerNorm(d)),
        ("readout", ClassReadout()),
        ("head", Dense(d, cfg.n_classes, rng)),
    ]
    model = ModelGraph(
        layers, (1, cfg.input_size, cfg.input_size), "vit", cfg.model_dump(), seed
    )
    for _, layer in model.layers:
        cast(layer, dtype)
    return model


def cnn_param_count(cfg: CnnConfig) -> int:
    total, c_in = 0, 1
    for b in cfg.blocks:
        total += c_in * b.kernel * b.kernel * b.out_channels + b.out_channels
        c_in = b.out_channels
    return total + c_in * cfg.n_classes + cfg.n_classes


def vit_param_count(cfg: VitConfig) -> int:
    d, h, n = cfg.dim, cfg.mlp_dim, cfg.n_classes
    p2 = cfg.patch_size**2
    block = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * h + h + d
    return p2 * d + d + cfg.n_patches * d + d + cfg.depth * block + 2 * d + d * n + n


def build_model(family: str, config: dict, seed: int = 0, dtype=np.float32) -> ModelGraph:
    if family == "cnn":
        return build_small_cnn(CnnConfig(**config), seed, dtype)
    if family == "vit":
        return build_small_vit(VitConfig(**config), seed, dtype)
    raise InvalidConfig(f"unknown model family {family!r}")


# --- checkpoints ------------------------------------------------------------
#
# <dir>/manifest.json   family, config, seed, epoch, tensor table, optimizer
# <dir>/<path>.bin      little-endian float32, C order, one per tensor


def save_checkpoint(model: ModelGraph, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = dict(model.params())
    opt = model.optimizer
    if opt is not None:
        for key in model.params():
            if key in opt.m:
                blobs[f"optim.m.{key}"] = opt.m[key]
                blobs[f"optim.v.{key}"] = opt.v[key]
    for key, val in blobs.items():
        fname = f"{key}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(val, dtype="<f4").tobytes())
        tensors.append({"name": key, "shape": list(val.shape), "file": fname})
    manifest = {
        "family": model.family,
        "config": model.config,
        "seed": model.seed,
        "epoch": model.epoch,
        "input_shape": list(model.input_shape),
        "param_count": model.param_count(),
        "checksum": model.checksum(),
        "layers": model.describe(),
        "tensors": tensors,
        "optimizer": None
        if opt is None
        else {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(directory) -> ModelGraph:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    model = build_model(manifest["family"], manifest["config"], manifest["seed"])
    model.epoch = manifest.get("epoch", 0)
    opt_meta = manifest.get("optimizer")
    opt = None
    if opt_meta is not None:
        opt = AdamState(**opt_meta)
    params = model.params()
    for entry in manifest["tensors"]:
        data = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4")
        arr = data.reshape(entry["shape"]).astype(np.float32)
        name = entry["name"]
        if name.startswith("optim."):
            _, slot, key = name.split(".", 2)
            getattr(opt, slot)[key] = arr
        elif name in params:
            params[name][...] = arr
        else:
            raise InvalidConfig(f"checkpoint tensor {name} not in model")
    model.optimizer = opt
    return model
