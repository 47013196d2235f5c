"""Layers with hand-written forward and backward passes.

Every layer follows the same protocol::

    out, cache = layer.forward(x, mode="train", rng=None)
    dx, grads = layer.backward(dout, cache)

``grads`` maps parameter names (the keys of ``layer.params``) to gradients.
A cache can only be consumed once, and only by the layer that produced it.

Arrays are NCHW for images and (N, features) for dense activations.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError
from ..tensor import Rng

MODES = ("train", "infer")


class Cache:
    __slots__ = ("owner", "data", "used")

    def __init__(self, owner, **data):
        self.owner = owner
        self.data = data
        self.used = False


class Layer:
    def __init__(self):
        self.params = {}
        self.buffers = {}

    def _cache(self, **data):
        return Cache(self, **data)

    def _open(self, cache):
        if not isinstance(cache, Cache) or cache.owner is not self:
            raise ContractError(f"{type(self).__name__}.backward got a cache from another layer")
        if cache.used:
            raise ContractError(f"{type(self).__name__}.backward got a stale cache (already consumed)")
        cache.used = True
        return cache.data

    @staticmethod
    def _check_mode(mode):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, mode="train", rng=None):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


def he_normal(rng, shape, fan_in, dtype=np.float64):
    return rng.normal(shape, 0.0, np.sqrt(2.0 / fan_in)).astype(dtype)


def small_normal(rng, shape, stddev=0.02, dtype=np.float64):
    return rng.normal(shape, 0.0, stddev).astype(dtype)


def _init_weights(init, rng, shape, fan_in, dtype):
    rng = rng if rng is not None else Rng(0)
    if init == "he":
        return he_normal(rng, shape, fan_in, dtype)
    if init == "dcgan":
        return small_normal(rng, shape, 0.02, dtype)
    raise ValueError(f"unknown init {init!r}")


def conv_output_size(n, kernel, stride, pad_total):
    return (n + pad_total - kernel) // stride + 1


def _padding_amounts(padding, n, kernel, stride):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + kernel - n, 0)
        return total // 2, total - total // 2
    p = int(padding)
    if p < 0:
        raise ValueError("padding must be non-negative")
    return p, p


class Conv2D(Layer):
    """2-D cross-correlation, weights [out_ch, in_ch, kh, kw].

    ``padding`` is "valid", "same" (TensorFlow convention, extra pixel on the
    bottom/right) or an explicit symmetric integer.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding="valid", rng=None,
                 init="he", dtype=np.float64, weights=None, bias=None):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if stride < 1:
            raise ValueError("stride must be positive")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, (kh, kw)
        self.stride, self.padding = stride, padding
        if weights is None:
            weights = _init_weights(init, rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype)
        if bias is None:
            bias = np.zeros(out_ch, dtype=dtype)
        self.params = {"weight": np.asarray(weights, dtype=dtype), "bias": np.asarray(bias, dtype=dtype)}

    def __repr__(self):
        return (f"Conv2D({self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride}, "
                f"padding={self.padding!r})")

    def _pads(self, h, w):
        (kh, kw), s = self.kernel, self.stride
        return _padding_amounts(self.padding, h, kh, s), _padding_amounts(self.padding, w, kw, s)

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.in_ch:
            raise ShapeError(f"{self!r} expects {self.in_ch} channels, got {c}")
        (pt, pb), (pl, pr) = self._pads(h, w)
        ho = conv_output_size(h, self.kernel[0], self.stride, pt + pb)
        wo = conv_output_size(w, self.kernel[1], self.stride, pl + pr)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r} cannot be applied to spatial size {h}x{w}")
        return (n, self.out_ch, ho, wo)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 4:
            raise ShapeError(f"Conv2D expects NCHW input, got shape {x.shape}")
        n, _, ho, wo = self.output_shape(x.shape)
        c = x.shape[1]
        (pt, pb), (pl, pr) = self._pads(x.shape[2], x.shape[3])
        xt = x.transpose(1, 0, 2, 3)
        if pt or pb or pl or pr:
            xt = np.pad(xt, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        kh, kw = self.kernel
        s = self.stride
        # columns are laid out (C, kh, kw) x (N, Ho, Wo) so the copy reads rows contiguously
        win = sliding_window_view(xt, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(c * kh * kw, n * ho * wo)
        w2 = self.params["weight"].reshape(self.out_ch, -1)
        out = (w2 @ cols).reshape(self.out_ch, n, ho, wo)
        out += self.params["bias"][:, None, None, None]
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        return out, self._cache(cols=cols, x_shape=x.shape, pads=(pt, pb, pl, pr))

    def backward(self, dout, cache):
        d = self._open(cache)
        n, c, h, w = d["x_shape"]
        pt, pb, pl, pr = d["pads"]
        kh, kw = self.kernel
        s = self.stride
        _, o, ho, wo = dout.shape
        dt = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(o, -1)
        w2 = self.params["weight"].reshape(o, -1)
        grads = {
            "weight": (dt @ d["cols"].T).reshape(self.params["weight"].shape),
            "bias": dt.sum(axis=1),
        }
        dcols = (w2.T @ dt).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        dx = dxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), grads


class TransposedConv2D(Layer):
    """Fractionally-strided convolution, weights [in_ch, out_ch, kh, kw].

    Output size per axis is ``(n - 1) * stride - 2 * padding + kernel + output_padding``.
    With equal weights this is the adjoint of ``Conv2D(stride, padding)``.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, output_padding=0, rng=None,
                 init="he", dtype=np.float64, weights=None, bias=None):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if output_padding >= max(stride, 1) and output_padding:
            raise ValueError("output_padding must be smaller than stride")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, (kh, kw)
        self.stride, self.padding, self.output_padding = stride, int(padding), int(output_padding)
        if weights is None:
            # fan-in of each output pixel is in_ch * (k / stride)**2 on average
            fan_in = max(in_ch * kh * kw // (stride * stride), 1)
            weights = _init_weights(init, rng, (in_ch, out_ch, kh, kw), fan_in, dtype)
        if bias is None:
            bias = np.zeros(out_ch, dtype=dtype)
        self.params = {"weight": np.asarray(weights, dtype=dtype), "bias": np.asarray(bias, dtype=dtype)}

    def __repr__(self):
        return (f"TransposedConv2D({self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride}, "
                f"p={self.padding}, op={self.output_padding})")

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.in_ch:
            raise ShapeError(f"{self!r} expects {self.in_ch} channels, got {c}")
        s, p, op = self.stride, self.padding, self.output_padding
        ho = (h - 1) * s - 2 * p + self.kernel[0] + op
        wo = (w - 1) * s - 2 * p + self.kernel[1] + op
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r} produces empty output for {h}x{w}")
        return (n, self.out_ch, ho, wo)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 4:
            raise ShapeError(f"TransposedConv2D expects NCHW input, got shape {x.shape}")
        _, _, ho, wo = self.output_shape(x.shape)
        n, c, h, w = x.shape
        kh, kw = self.kernel
        s, p, op = self.stride, self.padding, self.output_padding
        xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)
        cols = (self.params["weight"].reshape(c, -1).T @ xt).reshape(self.out_ch, kh, kw, n, h, w)
        hf, wf = (h - 1) * s + kh + op, (w - 1) * s + kw + op
        full = np.zeros((self.out_ch, n, hf, wf), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += cols[:, i, j]
        out = full[:, :, p:p + ho, p:p + wo].transpose(1, 0, 2, 3) + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(out), self._cache(xt=xt, x_shape=x.shape)

    def backward(self, dout, cache):
        d = self._open(cache)
        n, c, h, w = d["x_shape"]
        kh, kw = self.kernel
        s, p, op = self.stride, self.padding, self.output_padding
        hf, wf = (h - 1) * s + kh + op, (w - 1) * s + kw + op
        dfull = np.zeros((self.out_ch, n, hf, wf), dtype=dout.dtype)
        dfull[:, :, p:p + dout.shape[2], p:p + dout.shape[3]] = dout.transpose(1, 0, 2, 3)
        win = sliding_window_view(dfull, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :w]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(-1, n * h * w)
        w2 = self.params["weight"].reshape(c, -1)
        dx = (w2 @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        grads = {
            "weight": (d["xt"] @ cols.T).reshape(self.params["weight"].shape),
            "bias": dout.sum(axis=(0, 2, 3)),
        }
        return np.ascontiguousarray(dx), grads


class BatchNorm(Layer):
    """Per-channel batch normalisation for (N, C) or (N, C, H, W) inputs.

    Running statistics follow ``running = (1 - momentum) * running + momentum * batch``
    (unbiased batch variance) and are only touched in train mode while
    ``track_running_stats`` is set.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.track_running_stats = True
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}

    def __repr__(self):
        return f"BatchNorm({self.channels})"

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input shape {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, ndim):
        return v if ndim == 2 else v[None, :, None, None]

    def output_shape(self, input_shape):
        if len(input_shape) not in (2, 4) or input_shape[1] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input shape {tuple(input_shape)}")
        return tuple(input_shape)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        axes = self._axes(x)
        nd = x.ndim
        gamma, beta = self.params["gamma"], self.params["beta"]
        if mode == "infer":
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        else:
            m = x.size // self.channels
            if m < 2:
                raise ShapeError("BatchNorm in train mode needs more than one value per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if self.track_running_stats:
                mom = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                self.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
                self.buffers["running_var"] = ((1 - mom) * rv + mom * var * m / (m - 1)).astype(rv.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, nd)) * self._bcast(inv_std, nd)
        out = xhat * self._bcast(gamma, nd) + self._bcast(beta, nd)
        return out.astype(x.dtype, copy=False), self._cache(xhat=xhat, inv_std=inv_std, mode=mode)

    def backward(self, dout, cache):
        d = self._open(cache)
        axes = self._axes(dout)
        nd = dout.ndim
        xhat, inv_std = d["xhat"], d["inv_std"]
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self._bcast(self.params["gamma"], nd)
        if d["mode"] == "infer":
            return dxhat * self._bcast(inv_std, nd), grads
        m = dout.size // self.channels
        dx = (self._bcast(inv_std / m, nd)
              * (m * dxhat - self._bcast(dxhat.sum(axis=axes), nd)
                 - xhat * self._bcast((dxhat * xhat).sum(axis=axes), nd)))
        return dx.astype(dout.dtype, copy=False), grads


class Dense(Layer):
    """Fully connected layer, weights [out, in]: ``y = x @ W.T + b``."""

    def __init__(self, in_features, out_features, rng=None, init="he", dtype=np.float64,
                 weights=None, bias=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if weights is None:
            weights = _init_weights(init, rng, (out_features, in_features), in_features, dtype)
        if bias is None:
            bias = np.zeros(out_features, dtype=dtype)
        self.params = {"weight": np.asarray(weights, dtype=dtype), "bias": np.asarray(bias, dtype=dtype)}

    def __repr__(self):
        return f"Dense({self.in_features}->{self.out_features})"

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.in_features:
            raise ShapeError(f"{self!r} got input shape {tuple(input_shape)}")
        return (input_shape[0], self.out_features)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        self.output_shape(x.shape)
        out = x @ self.params["weight"].T + self.params["bias"]
        return out, self._cache(x=x)

    def backward(self, dout, cache):
        x = self._open(cache)["x"]
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"], grads


class Dropout(Layer):
    """Inverted dropout; identity in infer mode."""

    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else Rng(0)

    def __repr__(self):
        return f"Dropout({self.rate})"

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if mode == "infer" or self.rate == 0:
            return x, self._cache(mask=None)
        rng = rng if rng is not None else self.rng
        keep = rng.random(x.shape) >= self.rate
        mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * mask, self._cache(mask=mask)

    def backward(self, dout, cache):
        mask = self._open(cache)["mask"]
        return (dout if mask is None else dout * mask), {}


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped.

    The gradient goes to the first maximum in row-major window order.
    """

    window = 2
    stride = 2

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if h < 2 or w < 2:
            raise ShapeError(f"MaxPool2D needs spatial size >= 2, got {h}x{w}")
        return (n, c, h // 2, w // 2)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if x.ndim != 4:
            raise ShapeError(f"MaxPool2D expects NCHW input, got shape {x.shape}")
        _, _, ho, wo = self.output_shape(x.shape)
        # window positions in row-major order: (0,0), (0,1), (1,0), (1,1)
        views = [x[:, :, a:2 * ho:2, b:2 * wo:2] for a in (0, 1) for b in (0, 1)]
        out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
        idx = np.full(out.shape, 3, dtype=np.int8)
        for k in (2, 1, 0):
            idx[views[k] == out] = k
        return out, self._cache(idx=idx, x_shape=x.shape)

    def backward(self, dout, cache):
        d = self._open(cache)
        idx = d["idx"]
        ho, wo = idx.shape[2:]
        dx = np.zeros(d["x_shape"], dtype=dout.dtype)
        for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, a:2 * ho:2, b:2 * wo:2] = dout * (idx == k)
        return dx, {}


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Activation(Layer):
    KINDS = ("relu", "leaky_relu", "tanh", "sigmoid")

    def __init__(self, kind, alpha=0.2):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind, self.alpha = kind, alpha

    def __repr__(self):
        return f"Activation({self.kind!r})" if self.kind != "leaky_relu" else f"Activation('leaky_relu', {self.alpha})"

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        if self.kind == "relu":
            out = np.maximum(x, 0)
        elif self.kind == "leaky_relu":
            out = np.where(x > 0, x, self.alpha * x)
        elif self.kind == "tanh":
            out = np.tanh(x)
        else:
            out = sigmoid(x)
        return out.astype(x.dtype, copy=False), self._cache(x=x, out=out)

    def backward(self, dout, cache):
        d = self._open(cache)
        x, out = d["x"], d["out"]
        if self.kind == "relu":
            dx = dout * (x > 0)
        elif self.kind == "leaky_relu":
            dx = dout * np.where(x > 0, 1.0, self.alpha).astype(dout.dtype)
        elif self.kind == "tanh":
            dx = dout * (1 - out * out)
        else:
            dx = dout * out * (1 - out)
        return dx, {}


class Flatten(Layer):
    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        return x.reshape(x.shape[0], -1), self._cache(shape=x.shape)

    def backward(self, dout, cache):
        return dout.reshape(self._open(cache)["shape"]), {}


class Reshape(Layer):
    """Reshape the per-sample part of the input to ``shape``."""

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def __repr__(self):
        return f"Reshape({self.shape})"

    def output_shape(self, input_shape):
        if int(np.prod(input_shape[1:])) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(input_shape[1:])} to {self.shape}")
        return (input_shape[0], *self.shape)

    def forward(self, x, mode="train", rng=None):
        self._check_mode(mode)
        self.output_shape(x.shape)
        return x.reshape(x.shape[0], *self.shape), self._cache(shape=x.shape)

    def backward(self, dout, cache):
        return dout.reshape(self._open(cache)["shape"]), {}
