"""Minimal CNN engine: conv / pooling / fully connected layers with exact
backpropagation, class-weighted binary cross-entropy, Adam, and a warmup
learning-rate schedule.

Layers operate on channels-last (N, H, W, C) or flat (N, F) float arrays;
channels-last keeps the im2col gathers contiguous, which is what makes the
pure-numpy convolutions fast.  Forward passes cache what backward needs;
``backward`` returns the input gradient and stores parameter gradients on
the layer.  Compute is float32 by default with float64 accumulation in the
loss and optimizer moments; a float64 dtype can be forced for verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECK_FINITE = True

_MAGIC = b"VSCK"
_VERSION = 1


class NonFiniteError(FloatingPointError):
    """An activation or gradient contained NaN/Inf."""


def _check(arr: np.ndarray, what: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Layer:
    """Base layer; subclasses fill in forward/backward."""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Cross-correlation with bias; output floor((H + 2p - k) / s) + 1.

    Weights are stored (out_ch, k, k, in_ch) to match the channels-last
    im2col row order.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        limit = np.sqrt(6.0 / (in_ch * k * k))
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(out_ch, k, k, in_ch)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._col = None
        self._dims = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x):
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {c}")
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise ValueError("conv output is empty for this input size")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        # im2col with (di, dj, c) row order; every block copy is contiguous in c
        col6 = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                col6[:, :, :, di, dj, :] = xp[:, di : di + s * ho : s, dj : dj + s * wo : s, :]
        col = col6.reshape(n * ho * wo, k * k * c)
        self._col = col
        self._dims = (n, ho, wo, h, w)
        out = col @ self.w.reshape(self.out_ch, -1).T + self.b
        return _check(out.reshape(n, ho, wo, self.out_ch), "conv forward")

    def backward(self, gout):
        n, ho, wo, h, w = self._dims
        k, s, p = self.k, self.stride, self.pad
        self.gb = gout.sum(axis=(0, 1, 2), dtype=np.float64).astype(self.b.dtype)
        g_mat = gout.reshape(n * ho * wo, self.out_ch)
        self.gw = (g_mat.T @ self._col).reshape(self.w.shape)
        gcol = (g_mat @ self.w.reshape(self.out_ch, -1)).reshape(n, ho, wo, k, k, self.in_ch)
        gx_p = np.zeros((n, h + 2 * p, w + 2 * p, self.in_ch), dtype=gout.dtype)
        for di in range(k):
            for dj in range(k):
                gx_p[:, di : di + s * ho : s, dj : dj + s * wo : s, :] += gcol[:, :, :, di, dj, :]
        gx = gx_p[:, p:-p, p:-p, :] if p else gx_p
        return _check(gx, "conv backward")


class MaxPool(Layer):
    """Non-overlapping k x k max pooling; input dims must divide by k."""

    def __init__(self, k: int = 2):
        self.k = k
        self._idx = None
        self._shape = None

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"pool input {h}x{w} not divisible by {k}")
        # stack the k*k phase slices; argmax picks a single winner per cell
        stack = np.stack(
            [x[:, di::k, dj::k, :] for di in range(k) for dj in range(k)], axis=0
        )
        self._idx = stack.argmax(axis=0)
        self._shape = (n, h, w, c)
        out = np.take_along_axis(stack, self._idx[None], axis=0)[0]
        return _check(out, "maxpool forward")

    def backward(self, gout):
        n, h, w, c = self._shape
        k = self.k
        g = np.zeros((n, h, w, c), dtype=gout.dtype)
        for q in range(k * k):
            di, dj = divmod(q, k)
            g[:, di::k, dj::k, :] = np.where(self._idx == q, gout, 0)
        return g


class RoiPool(Layer):
    """Adaptive max pooling of the whole map into out_h x out_w bins.

    Bin edges are the near-equal integer splits floor(i * H / out_h).
    """

    def __init__(self, out_h: int, out_w: int):
        self.out_h, self.out_w = out_h, out_w
        self._argpos = None
        self._shape = None

    @staticmethod
    def bin_edges(size: int, bins: int):
        return [(i * size // bins, (i + 1) * size // bins) for i in range(bins)]

    def forward(self, x):
        n, h, w, c = x.shape
        if self.out_h > h or self.out_w > w:
            raise ValueError(f"roi pool {self.out_h}x{self.out_w} exceeds input {h}x{w}")
        out = np.empty((n, self.out_h, self.out_w, c), dtype=x.dtype)
        argpos = np.empty((n, self.out_h, self.out_w, c, 2), dtype=np.int64)
        for bi, (r0, r1) in enumerate(self.bin_edges(h, self.out_h)):
            for bj, (c0, c1) in enumerate(self.bin_edges(w, self.out_w)):
                cell = x[:, r0:r1, c0:c1, :].reshape(n, -1, c)
                flat = cell.argmax(axis=1)
                out[:, bi, bj, :] = np.take_along_axis(cell, flat[:, None, :], axis=1)[:, 0, :]
                argpos[:, bi, bj, :, 0] = r0 + flat // (c1 - c0)
                argpos[:, bi, bj, :, 1] = c0 + flat % (c1 - c0)
        self._argpos = argpos
        self._shape = (n, h, w, c)
        return _check(out, "roipool forward")

    def backward(self, gout):
        n, h, w, c = self._shape
        g = np.zeros((n, h, w, c), dtype=gout.dtype)
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        for bi in range(self.out_h):
            for bj in range(self.out_w):
                rr = self._argpos[:, bi, bj, :, 0]
                cc = self._argpos[:, bi, bj, :, 1]
                np.add.at(g, (ni, rr, cc, ci), gout[:, bi, bj, :])
        return g


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        return gout.reshape(self._shape)


class FC(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        limit = np.sqrt(6.0 / in_features)
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(out_features, in_features)).astype(dtype)
        self.b = np.zeros(out_features, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x):
        if x.ndim > 2:
            raise ValueError("FC expects flattened input")
        if x.shape[1] != self.w.shape[1]:
            raise ValueError(f"FC expects {self.w.shape[1]} features, got {x.shape[1]}")
        self._x = x
        return _check(x @ self.w.T + self.b, "fc forward")

    def backward(self, gout):
        self.gw = gout.T @ self._x
        self.gb = gout.sum(axis=0, dtype=np.float64).astype(self.b.dtype)
        return _check(gout @ self.w, "fc backward")


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, gout):
        return np.where(self._mask, gout, 0)


class Sigmoid(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return _check(out, "sigmoid forward")

    def backward(self, gout):
        return gout * self._out * (1.0 - self._out)


def run_forward(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


def run_backward(layers, gout):
    for layer in reversed(layers):
        gout = layer.backward(gout)
    return gout


def loss_weights(n_v, n_n):
    """Class weights balancing vehicle and non-vehicle loss contributions.

    Kept in plain arithmetic so exact types (fractions.Fraction) pass through.
    """
    total = n_v + n_n
    return total / (2 * n_v), total / (2 * n_n)


_P_EPS = 1e-7


def weighted_bce(p, y, n_v: int, n_n: int):
    """Mean class-weighted binary cross-entropy and its gradient wrt p.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    Returns (loss, dloss/dp) with the same shape as p.
    """
    w1, w0 = loss_weights(n_v, n_n)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    w = np.where(y == 1, w1, w0)
    per = w * (-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    n = per.size if per.ndim else 1
    loss = float(np.sum(per, dtype=np.float64) / n)
    inside = (p > _P_EPS) & (p < 1.0 - _P_EPS)
    grad = np.where(inside, w * (pc - y) / (pc * (1.0 - pc)) / n, 0.0)
    return loss, grad


@dataclass
class WarmupSchedule:
    """Linear warmup to the max rate, then exponential decay to a floor."""

    start_rate: float = 1e-4
    max_rate: float = 1e-3
    min_rate: float = 1e-6
    warmup_epochs: int = 20
    sustain_epochs: int = 0
    decay: float = 0.8

    def __post_init__(self):
        if not (self.min_rate <= self.start_rate <= self.max_rate):
            raise ValueError("need min_rate <= start_rate <= max_rate")
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")


def warmup_lr(epoch: int, s: WarmupSchedule) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch <= s.warmup_epochs:
        if s.warmup_epochs == 0:
            return s.max_rate
        return s.start_rate + (s.max_rate - s.start_rate) * epoch / s.warmup_epochs
    if epoch <= s.warmup_epochs + s.sustain_epochs:
        return s.max_rate
    steps = epoch - s.warmup_epochs - s.sustain_epochs
    return max(s.max_rate * s.decay**steps, s.min_rate)


class Adam:
    """Standard bias-corrected Adam; moments kept in float64."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params  # name -> array, updated in place
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, rate: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


def save_checkpoint(path, named_params: dict) -> None:
    """Versioned binary checkpoint: name, shape, little-endian float32 payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named_params)))
        for name, arr in named_params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a model checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            out[name] = arr.copy()
    return out
