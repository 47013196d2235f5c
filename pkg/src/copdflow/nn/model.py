from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, ShapeError
from .layers import BatchNorm, Cache, Layer


class Sequential(Layer):
    """A chain of layers; itself a layer.

    Parameter names are ``"<index>.<param>"``, e.g. ``"0.weight"``.
    """

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def __repr__(self):
        inner = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"Sequential(\n  {inner}\n)"

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    @params.setter
    def params(self, value):
        if value:
            raise AttributeError("set parameters through load_state_dict")

    @property
    def buffers(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    @buffers.setter
    def buffers(self, value):
        if value:
            raise AttributeError("set buffers through load_state_dict")

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{i}.{k}"] = v
        return out

    def load_state_dict(self, state):
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ContractError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            idx, key = name.split(".", 1)
            layer = self.layers[int(idx)]
            store = layer.params if key in layer.params else layer.buffers
            if store[key].shape != np.shape(value):
                raise ShapeError(f"{name}: expected shape {store[key].shape}, got {np.shape(value)}")
            store[key] = np.array(value, dtype=store[key].dtype)

    def shape_trace(self, input_shape):
        """Output shape after every layer, starting with ``input_shape``."""
        shapes = [tuple(input_shape)]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    def output_shape(self, input_shape):
        return self.shape_trace(input_shape)[-1]

    @contextmanager
    def frozen_stats(self):
        """Run train-mode forwards without touching BatchNorm running statistics."""
        bns = [layer for layer in self.layers if isinstance(layer, BatchNorm)]
        saved = [bn.track_running_stats for bn in bns]
        for bn in bns:
            bn.track_running_stats = False
        try:
            yield self
        finally:
            for bn, flag in zip(bns, saved):
                bn.track_running_stats = flag

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode=mode, rng=rng)
            caches.append(cache)
        return x, self._cache(caches=caches)

    def backward(self, dout, cache):
        caches = self._open(cache)["caches"]
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dout, g = self.layers[i].backward(dout, caches[i])
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return dout, grads

    def predict(self, x, batch_size=64):
        """Inference-mode forward in chunks."""
        outs = [self.forward(x[i:i + batch_size], mode="infer")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


__all__ = ["Sequential", "Cache"]
