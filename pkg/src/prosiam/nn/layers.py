"""Layers with explicit forward/backward passes on channels-last arrays.

Activations are numpy arrays shaped (batch, freq, time, channels) for the
convolutional part and (batch, features) for dense layers. ``forward``
caches what ``backward`` needs; ``backward`` takes the output gradient,
accumulates parameter gradients into ``Parameter.grad`` and returns the
input gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# transient im2col buffers are built in batch chunks of at most this size
_COL_BUDGET_BYTES = 96 * 2 ** 20


class Parameter:
    """A named array with a gradient buffer and a trainable flag."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[Parameter]:
        """Non-trainable state that must be checkpointed (e.g. running statistics)."""
        return []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


class Conv2d(Layer):
    """3x3 same-padded, stride-1 cross-correlation with per-channel bias."""

    def __init__(self, name, c_in, c_out, rng, dtype=np.float32):
        std = np.sqrt(2.0 / (9 * c_in))
        self.weight = Parameter(f"{name}.weight",
                                (rng.standard_normal((3, 3, c_in, c_out)) * std).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.c_in, self.c_out = c_in, c_out
        self._xp = None

    def params(self):
        return [self.weight, self.bias]

    def _chunk(self, shape, itemsize):
        per = shape[1] * shape[2] * 9 * self.c_in * itemsize
        return max(1, _COL_BUDGET_BYTES // max(per, 1))

    @staticmethod
    def _cols(xp_chunk, F, T):
        win = sliding_window_view(xp_chunk, (3, 3), axis=(1, 2))  # b F T C 3 3
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, 9 * xp_chunk.shape[-1])

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise ValueError(f"{self.weight.name}: expected (B, F, T, {self.c_in}), got {x.shape}")
        B, F, T, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        wm = self.weight.value.reshape(9 * self.c_in, self.c_out)
        out = np.empty((B, F, T, self.c_out), dtype=np.result_type(x, wm))
        step = self._chunk(x.shape, x.itemsize)
        for b in range(0, B, step):
            cols = self._cols(xp[b:b + step], F, T)
            out[b:b + step] = (cols @ wm).reshape(-1, F, T, self.c_out)
        out += self.bias.value
        self._xp = xp
        return out

    def backward(self, dy):
        xp = self._xp
        B, F, T, _ = dy.shape
        wm = self.weight.value.reshape(9 * self.c_in, self.c_out)
        dw = np.zeros_like(wm)
        step = self._chunk(dy.shape, xp.itemsize)
        # narrowing layers: dx is cheaper as a correlation of dy with the flipped kernel
        transposed = self.c_in > self.c_out
        if transposed:
            dx = np.empty((B, F, T, self.c_in), dtype=dy.dtype)
            wf = self.weight.value[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * self.c_out,
                                                                              self.c_in)
            dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
        else:
            dxp = np.zeros_like(xp)
        for b in range(0, B, step):
            dyc = dy[b:b + step].reshape(-1, self.c_out)
            cols = self._cols(xp[b:b + step], F, T)
            dw += cols.T @ dyc
            del cols
            if transposed:
                dx[b:b + step] = (self._cols(dyp[b:b + step], F, T) @ wf).reshape(-1, F, T,
                                                                                  self.c_in)
                continue
            dcols = (dyc @ wm.T).reshape(-1, F, T, 3, 3, self.c_in)
            for i in range(3):
                for j in range(3):
                    dxp[b:b + step, i:i + F, j:j + T, :] += dcols[:, :, :, i, j, :]
        self.weight.grad += dw.reshape(self.weight.value.shape)
        self.bias.grad += dy.sum(axis=(0, 1, 2))
        return dx if transposed else dxp[:, 1:-1, 1:-1, :]


class BatchNorm(Layer):
    """Per-channel normalization over every axis except the last."""

    def __init__(self, name, channels, decay=0.99, eps=1e-5, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(f"{name}.running_mean", np.zeros(channels, dtype=dtype),
                                      trainable=False)
        self.running_var = Parameter(f"{name}.running_var", np.ones(channels, dtype=dtype),
                                     trainable=False)
        self.decay = decay
        self.eps = eps
        self._cache = None
        self._count = None

    def begin_recount(self):
        """Make running statistics the plain average of the following training batches."""
        self._count = 0

    def end_recount(self):
        self._count = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, train=False):
        C = x.shape[-1]
        xr = x.reshape(-1, C)
        n = xr.shape[0]
        ones = np.ones(n, dtype=x.dtype)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch norm in training mode needs a batch of at least 2")
            mean = ones @ xr / n
            xc = xr - mean
            var = ones @ (xc * xc) / n
            if self._count is None:
                d = self.decay
            else:
                self._count += 1
                d = 1.0 - 1.0 / self._count
            self.running_mean.value[...] = d * self.running_mean.value + (1 - d) * mean
            self.running_var.value[...] = d * self.running_var.value + (1 - d) * var
        else:
            xc = xr - self.running_mean.value
            var = self.running_var.value
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv
        self._cache = (xhat, inv, train, x.shape)
        return (xhat * self.gamma.value + self.beta.value).reshape(x.shape)

    def backward(self, dy):
        xhat, inv, train, shape = self._cache
        dr = dy.reshape(-1, shape[-1])
        n = dr.shape[0]
        ones = np.ones(n, dtype=dy.dtype)
        dgamma = ones @ (dr * xhat)
        dbeta = ones @ dr
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        if not train:
            return (dr * (self.gamma.value * inv)).reshape(shape)
        # d(loss)/d(xhat) = dy * gamma, so its column sums follow from dbeta and dgamma
        g = self.gamma.value
        dx = (g * inv / n) * (n * dr - dbeta - xhat * dgamma)
        return dx.reshape(shape)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout; identity outside training. ``rng`` is set by the trainer."""

    def __init__(self, rate=0.5, rng=None):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class MaxPoolTime(Layer):
    """Non-overlapping max over time pairs; an odd final frame is dropped."""

    def forward(self, x, train=False):
        B, F, T, C = x.shape
        if T < 2:
            raise ValueError("time pooling needs at least 2 frames")
        T2 = T // 2
        even, odd = x[:, :, 0:2 * T2:2], x[:, :, 1:2 * T2:2]
        self._first = even >= odd
        self._shape = x.shape
        return np.maximum(even, odd)

    def backward(self, dy):
        T2 = self._shape[2] // 2
        dx = np.zeros(self._shape, dtype=dy.dtype)
        dx[:, :, 0:2 * T2:2] = dy * self._first
        dx[:, :, 1:2 * T2:2] = dy * ~self._first
        return dx


class HeteroFreqMaxPool(Layer):
    """Three stride-2 frequency max-pools, concatenated along channels.

    (kernel, pad) = (2, 0), (3, 1), (4, 1); padding is -inf so it never wins.
    Each branch maps F to F/2, the output has three times the channels.
    """

    POOLS = ((2, 0), (3, 1), (4, 1))

    def forward(self, x, train=False):
        B, F, T, C = x.shape
        if F % 2:
            raise ValueError(f"frequency pooling needs an even number of bands, got {F}")
        F2 = F // 2
        outs, self._args = [], []
        for k, p in self.POOLS:
            xp = np.pad(x, ((0, 0), (p, p), (0, 0), (0, 0)), constant_values=-np.inf)
            best = xp[:, 0:2 * F2:2].copy()
            arg = np.zeros(best.shape, dtype=np.int8)
            for o in range(1, k):
                cand = xp[:, o:o + 2 * F2:2]
                win = cand > best  # ties keep the earliest offset
                np.copyto(best, cand, where=win)
                arg[win] = o
            outs.append(best)
            self._args.append(arg)
        self._shape = x.shape
        return np.concatenate(outs, axis=-1)

    def backward(self, dy):
        B, F, T, C = self._shape
        F2 = F // 2
        dx = np.zeros(self._shape, dtype=dy.dtype)
        for n, ((k, p), arg) in enumerate(zip(self.POOLS, self._args)):
            g = dy[..., n * C:(n + 1) * C]
            dxp = np.zeros((B, F + 2 * p, T, C), dtype=dy.dtype)
            for o in range(k):
                dxp[:, o:o + 2 * F2:2] += g * (arg == o)
            dx += dxp[:, p:p + F]
        return dx


class GlobalTimeAvgPool(Layer):
    """Mean over the whole time axis; output time length is 1."""

    def forward(self, x, train=False):
        self._T = x.shape[2]
        return x.mean(axis=2, keepdims=True)

    def backward(self, dy):
        return np.repeat(dy / self._T, self._T, axis=2)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    """Affine map y = x W^T + b with W stored as (out, in).

    ``init`` is "he" (fan-in, for ReLU inputs), "glorot" (fan-in, linear) or
    "small" (std 0.01, so untrained classifier heads start near uniform).
    """

    def __init__(self, name, n_in, n_out, rng, dtype=np.float32, init="he"):
        if init == "he":
            std = np.sqrt(2.0 / n_in)
        elif init == "glorot":
            std = np.sqrt(1.0 / n_in)
        elif init == "small":
            std = 0.01
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(f"{name}.weight",
                                (rng.standard_normal((n_out, n_in)) * std).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(n_out, dtype=dtype))
        self.n_in, self.n_out = n_in, n_out

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.weight.name}: expected (B, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        self.weight.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x, train=False, trace=None):
        for layer in self.layers:
            x = layer.forward(x, train)
            if trace is not None:
                trace.append((type(layer).__name__, x.shape[1:]))
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def dropouts(self):
        return [layer for layer in self.layers if isinstance(layer, Dropout)]
