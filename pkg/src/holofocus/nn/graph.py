from __future__ import annotations

import hashlib

import numpy as np

from ..errors import NoSuchLayer, ShapeMismatch
from .layers import INFER, Layer, named_params
from .optim import AdamState


class ModelGraph:
    """An ordered stack of named layers forming a classifier.

    ``input_shape`` excludes the batch axis. ``family`` and ``config`` record
    how the graph was built so a checkpoint can rebuild it.
    """

    def __init__(self, layers, input_shape, family="custom", config=None, seed=0):
        self.layers: list[tuple[str, Layer]] = list(layers)
        self.input_shape = tuple(input_shape)
        self.family = family
        self.config = dict(config or {})
        self.seed = seed
        self.optimizer: AdamState | None = None
        self.epoch = 0
        self.shapes = self._infer_shapes()

    def _infer_shapes(self):
        shapes = []
        shape = self.input_shape
        for name, layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatch as exc:
                raise ShapeMismatch(exc.expected, exc.actual, f"layer {name}") from None
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def layer_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.layers):
            if n == name:
                return i
        raise NoSuchLayer(name)

    def forward(self, x, mode=INFER, stop: int | None = None):
        """Run layers ``0..stop`` (all by default); return output and caches."""
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(("N", *self.input_shape), x.shape)
        caches = []
        last = len(self.layers) - 1 if stop is None else stop
        for _, layer in self.layers[: last + 1]:
            x, cache = layer.forward(x, mode)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out, stop: int = -1):
        """Backpropagate through layers ``len-1 .. stop+1``.

        Returns ``(grad, param_grads)`` where ``grad`` is the gradient with
        respect to the output of layer ``stop`` (the model input when
        ``stop == -1``).
        """
        grads = {}
        g = grad_out
        for i in range(len(caches) - 1, stop, -1):
            name, layer = self.layers[i]
            g, gp = layer.backward(caches[i], g)
            for key, val in gp.items():
                grads[f"{name}.{key}"] = val
        return g, grads

    def predict(self, x, batch_size=64):
        outs = []
        for i in range(0, len(x), batch_size):
            out, _ = self.forward(x[i : i + batch_size], INFER)
            outs.append(out)
        return np.concatenate(outs, axis=0)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            for key, val in named_params(layer, f"{name}."):
                out[key] = val
        return out

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params().values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key, val in self.params().items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(val, dtype="<f4").tobytes())
        return h.hexdigest()

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        live = self.params()
        for key, val in state.items():
            live[key][...] = val

    def describe(self) -> list[dict]:
        rows = []
        for (name, layer), shape in zip(self.layers, self.shapes):
            n = sum(p.size for _, p in named_params(layer))
            rows.append(dict(name=name, kind=layer.kind, output=list(shape), params=int(n)))
        return rows

    def describe_text(self) -> str:
        rows = self.describe()
        width = max(len(r["name"]) for r in rows)
        kw = max(len(r["kind"]) for r in rows)
        lines = [f"{'layer':<{width}}  {'kind':<{kw}}  {'output':<16}  params"]
        for r in rows:
            shape = "x".join(str(s) for s in r["output"])
            lines.append(f"{r['name']:<{width}}  {r['kind']:<{kw}}  {shape:<16}  {r['params']}")
        lines.append(f"total parameters: {self.param_count()}")
        return "\n".join(lines)
