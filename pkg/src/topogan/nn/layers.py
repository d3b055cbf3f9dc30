"""Layer implementations, NHWC layout, batch axis first.

Every layer exposes ``output_shape`` (per-sample shape rule), ``forward``
returning ``(y, cache)`` and ``backward(cache, dy)`` returning
``(dx, grads)``.  Shapes passed around exclude the batch axis.
"""

from __future__ import annotations

import math

import numpy as np

from topogan.errors import SpecError

INIT_STD = 0.02
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def truncated_normal(rng: np.random.Generator, shape, std=INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def param_shapes(self, in_shape: tuple) -> dict[str, tuple]:
        return {}

    def state_shapes(self, in_shape: tuple) -> dict[str, tuple]:
        return {}

    def build(self, in_shape: tuple, rng: np.random.Generator, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name, filters: int, kernel: int = 3, stride: int = 1, padding: str = "same"):
        super().__init__(name)
        if padding not in ("same", "valid"):
            raise SpecError(f"unknown padding {padding!r}")
        self.filters, self.kernel, self.stride, self.padding = int(filters), int(kernel), int(stride), padding

    def config(self):
        return {"filters": self.filters, "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def _geometry(self, h, w):
        k, s = self.kernel, self.stride
        if self.padding == "same":
            ho, pt, pb = same_padding(h, k, s)
            wo, pl, pr = same_padding(w, k, s)
        else:
            if h < k or w < k:
                raise SpecError(f"{self.name}: {h}x{w} input smaller than kernel {k}")
            ho, wo = (h - k) // s + 1, (w - k) // s + 1
            pt = pb = pl = pr = 0
        return ho, wo, (pt, pb, pl, pr)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"{self.name}: conv2d needs (H, W, C) input, got {in_shape}")
        ho, wo, _ = self._geometry(in_shape[0], in_shape[1])
        return (ho, wo, self.filters)

    def param_shapes(self, in_shape):
        return {"kernel": (self.kernel, self.kernel, in_shape[2], self.filters), "bias": (self.filters,)}

    def build(self, in_shape, rng, dtype):
        shapes = self.param_shapes(in_shape)
        self.params = {
            "kernel": truncated_normal(rng, shapes["kernel"], dtype=dtype),
            "bias": np.zeros(shapes["bias"], dtype=dtype),
        }

    def forward(self, x, train):
        n, h, w, c = x.shape
        k, s = self.kernel, self.stride
        ho, wo, (pt, pb, pl, pr) = self._geometry(h, w)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
        if s == 1:
            return self._forward_shift(xp, x.shape, (pt, pl), (ho, wo))
        # im2col with columns ordered (ki, kj, c) to match the kernel layout
        cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
        cols = cols.reshape(n * ho * wo, k * k * c)
        wmat = self.params["kernel"].reshape(k * k * c, self.filters)
        y = (cols @ wmat + self.params["bias"]).reshape(n, ho, wo, self.filters)
        return y, ("cols", cols, x.shape, xp.shape, (pt, pl), (ho, wo))

    def _forward_shift(self, xp, x_shape, pads, out_hw):
        # Stride 1: treat the padded batch as one long row-major strip.  Output
        # row r gathers input rows r + i*Wp + j, so every tap is a contiguous
        # slice matmul; rows that wrap across an edge are computed and dropped.
        n, hp, wp, c = xp.shape
        k = self.kernel
        ho, wo = out_hw
        xa = xp.reshape(-1, c)
        rows = n * hp * wp - (k - 1) * (wp + 1)
        y = np.zeros((n * hp * wp, self.filters), dtype=xp.dtype)
        yv = y[:rows]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                yv += xa[off : off + rows] @ self.params["kernel"][i, j]
        y = y.reshape(n, hp, wp, self.filters)[:, :ho, :wo] + self.params["bias"]
        return y, ("shift", xa, x_shape, xp.shape, pads, out_hw)

    def backward(self, cache, dy):
        mode, cols, x_shape, xp_shape, (pt, pl), (ho, wo) = cache
        n, h, w, c = x_shape
        k, s = self.kernel, self.stride
        if mode == "shift":
            _, hp, wp, _ = xp_shape
            rows = n * hp * wp - (k - 1) * (wp + 1)
            dyf = np.zeros((n, hp, wp, self.filters), dtype=dy.dtype)
            dyf[:, :ho, :wo] = dy
            dyf = dyf.reshape(-1, self.filters)[:rows]
            dk = np.empty_like(self.params["kernel"])
            dxa = np.zeros_like(cols)
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    dk[i, j] = cols[off : off + rows].T @ dyf
                    dxa[off : off + rows] += dyf @ self.params["kernel"][i, j].T
            dx = dxa.reshape(xp_shape)[:, pt : pt + h, pl : pl + w, :]
            return dx, {"kernel": dk, "bias": dy.reshape(-1, self.filters).sum(axis=0)}
        dy2 = dy.reshape(-1, self.filters)
        grads = {
            "kernel": (cols.T @ dy2).reshape(self.params["kernel"].shape),
            "bias": dy2.sum(axis=0),
        }
        dcols = (dy2 @ self.params["kernel"].reshape(k * k * c, self.filters).T).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        return dx, grads


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, units: int):
        super().__init__(name)
        self.units = int(units)

    def config(self):
        return {"units": self.units}

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(f"{self.name}: dense needs flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"kernel": (in_shape[0], self.units), "bias": (self.units,)}

    def build(self, in_shape, rng, dtype):
        shapes = self.param_shapes(in_shape)
        self.params = {
            "kernel": truncated_normal(rng, shapes["kernel"], dtype=dtype),
            "bias": np.zeros(shapes["bias"], dtype=dtype),
        }

    def forward(self, x, train):
        return x @ self.params["kernel"] + self.params["bias"], x

    def backward(self, cache, dy):
        x = cache
        return dy @ self.params["kernel"].T, {"kernel": x.T @ dy, "bias": dy.sum(axis=0)}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, name, window: int = 2):
        super().__init__(name)
        self.window = int(window)

    def config(self):
        return {"window": self.window}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"{self.name}: maxpool needs (H, W, C) input, got {in_shape}")
        ho, wo = in_shape[0] // self.window, in_shape[1] // self.window
        if ho < 1 or wo < 1:
            raise SpecError(f"{self.name}: input {in_shape[:2]} smaller than pool window {self.window}")
        return (ho, wo, in_shape[2])

    def _windows(self, x):
        n, h, w, c = x.shape
        p = self.window
        ho, wo = h // p, w // p
        blocks = x[:, : ho * p, : wo * p].reshape(n, ho, p, wo, p, c).transpose(0, 1, 3, 5, 2, 4)
        return blocks.reshape(n, ho, wo, c, p * p)

    def forward(self, x, train):
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def min_gap(self, x) -> float:
        """Smallest gap between the two largest values of any window (tie detector)."""
        win = np.sort(self._windows(x), axis=-1)
        return float(np.min(win[..., -1] - win[..., -2])) if win.shape[-1] > 1 else math.inf

    def backward(self, cache, dy):
        x_shape, idx = cache
        n, h, w, c = x_shape
        p = self.window
        ho, wo = h // p, w // p
        dwin = np.zeros((n, ho, wo, c, p * p), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dblocks = dwin.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * p, wo * p, c)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, : ho * p, : wo * p] = dblocks
        return dx, {}


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last."""

    kind = "batchnorm"

    def __init__(self, name, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__(name)
        self.momentum, self.eps = float(momentum), float(eps)

    def config(self):
        return {"momentum": self.momentum, "eps": self.eps}

    def param_shapes(self, in_shape):
        return {"gamma": (in_shape[-1],), "beta": (in_shape[-1],)}

    def state_shapes(self, in_shape):
        return {"mean": (in_shape[-1],), "var": (in_shape[-1],)}

    def build(self, in_shape, rng, dtype):
        c = in_shape[-1]
        self.params = {"gamma": np.ones(c, dtype=dtype), "beta": np.zeros(c, dtype=dtype)}
        self.state = {"mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)}

    def forward(self, x, train):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv = 1.0 / np.sqrt(self.state["var"] + self.eps)
            return (x - self.state["mean"]) * (inv * gamma) + beta, None
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        m = self.momentum
        count = x.size // x.shape[-1]
        unbiased = var * count / max(count - 1, 1)
        self.state["mean"] = (m * self.state["mean"] + (1 - m) * mean).astype(self.state["mean"].dtype)
        self.state["var"] = (m * self.state["var"] + (1 - m) * unbiased).astype(self.state["var"].dtype)
        return xhat * gamma + beta, (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        axes = tuple(range(dy.ndim - 1))
        dbeta = dy.sum(axis=axes)
        dgamma = (dy * xhat).sum(axis=axes)
        m = dy.size // dy.shape[-1]
        dxhat = dy * self.params["gamma"]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, {"gamma": dgamma, "beta": dbeta}


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh", "none")


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, fn: str = "relu", alpha: float = 0.2):
        super().__init__(name)
        if fn not in ACTIVATIONS:
            raise SpecError(f"unknown activation {fn!r}")
        self.fn, self.alpha = fn, float(alpha)

    def config(self):
        cfg = {"fn": self.fn}
        if self.fn == "leaky_relu":
            cfg["alpha"] = self.alpha
        return cfg

    def forward(self, x, train):
        fn = self.fn
        if fn == "relu":
            y = np.maximum(x, 0)
        elif fn == "leaky_relu":
            y = np.where(x > 0, x, self.alpha * x)
        elif fn == "sigmoid":
            y = 0.5 * (1 + np.tanh(0.5 * x))  # overflow-free logistic
        elif fn == "tanh":
            y = np.tanh(x)
        else:
            y = x
        return y, (x, y)

    def backward(self, cache, dy):
        x, y = cache
        fn = self.fn
        if fn == "relu":
            dx = dy * (x > 0)
        elif fn == "leaky_relu":
            dx = dy * np.where(x > 0, 1, self.alpha).astype(dy.dtype)
        elif fn == "sigmoid":
            dx = dy * y * (1 - y)
        elif fn == "tanh":
            dx = dy * (1 - y * y)
        else:
            dx = dy
        return dx, {}


class Upsample(Layer):
    kind = "upsample"

    def __init__(self, name, factor: int = 2):
        super().__init__(name)
        self.factor = int(factor)

    def config(self):
        return {"factor": self.factor}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"{self.name}: upsample needs (H, W, C) input, got {in_shape}")
        return (in_shape[0] * self.factor, in_shape[1] * self.factor, in_shape[2])

    def forward(self, x, train):
        f = self.factor
        return x.repeat(f, axis=1).repeat(f, axis=2), None

    def backward(self, cache, dy):
        n, h, w, c = dy.shape
        f = self.factor
        return dy.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4)), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, name, shape):
        super().__init__(name)
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return {"shape": list(self.shape)}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise SpecError(f"{self.name}: cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Dense, MaxPool2D, BatchNorm, Activation, Upsample, Flatten, Reshape)}
