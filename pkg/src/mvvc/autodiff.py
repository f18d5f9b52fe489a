"""Dense tensor layers with a fixed-sequence reverse-mode tape.

Tensors are plain ``numpy.ndarray`` values laid out channels-last:
volumes are ``(N, D, H, W, C)``, kernels ``(kd, kh, kw, Cin, Cout)``.
2D convolutions are expressed as 3D ones with a unit third axis, so a
single code path serves both network variants.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NumericalError, ShapeError

__all__ = [
    "TrainSchedule",
    "ParamSet",
    "lr_at",
    "momentum_step",
    "conv3d",
    "relu",
    "maxpool3d",
    "dense",
    "dropout",
    "softmax",
    "softmax_cross_entropy",
    "Conv3D",
    "MaxPool3D",
    "ReLU",
    "Flatten",
    "Dense",
    "Dropout",
    "Sequential",
]


# ---------------------------------------------------------------------------
# schedule / optimizer state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer and minibatch settings.

    None of the defaults come from published values; they are ordinary
    LeNet-era choices and are meant to be overridden from config.
    """

    base_lr: float = 0.01
    decay_rate: float = 0.95
    decay_steps: int = 1000
    momentum_mu: float = 0.9
    dropout_keep_prob: float = 0.5
    batch_size: int = 64
    total_steps: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("base_lr", "decay_rate", "momentum_mu", "dropout_keep_prob"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if not 0 <= self.momentum_mu < 1:
            raise ValueError("momentum_mu must lie in [0, 1)")
        if not 0 < self.dropout_keep_prob <= 1:
            raise ValueError("dropout_keep_prob must lie in (0, 1]")
        for name in ("decay_steps", "batch_size", "total_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be unsigned")


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Continuous exponential decay: ``base_lr * rate ** (step / decay_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.base_lr * schedule.decay_rate ** (step / schedule.decay_steps)


class ParamSet:
    """Named parameters plus a same-shaped momentum velocity per entry."""

    MAGIC = b"MVVC-NET"
    VERSION = 1

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.velocity: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        self.params[name] = value
        self.velocity[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.velocity[name] = self.velocity[name].copy()
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name in self.params:
            out.params[name] = self.params[name].astype(dtype)
            out.velocity[name] = self.velocity[name].astype(dtype)
        return out

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of parameters and velocities."""
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self.params[n], other.params[n])
            and np.array_equal(self.velocity[n], other.velocity[n])
            for n in self.params
        )

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        chunks = [self.MAGIC, struct.pack("<I", self.VERSION)]
        for name, value in self.params.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParamSet":
        data = Path(path).read_bytes()
        if data[:8] != cls.MAGIC:
            raise FormatError(f"{path}: bad model magic {data[:8]!r}")
        if len(data) < 12:
            raise FormatError(f"{path}: truncated header")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != cls.VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        pos = 12
        out = cls()
        try:
            while pos < len(data):
                (nlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = data[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", data, pos)
                pos += 4
                shape = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                count = int(np.prod(shape)) if rank else 1
                if pos + 4 * count > len(data):
                    raise FormatError(f"{path}: truncated record {name!r}")
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
                pos += 4 * count
                out.add(name, arr.reshape(shape).astype(dtype))
        except struct.error as exc:
            raise FormatError(f"{path}: truncated parameter record") from exc
        return out


def momentum_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float,
                  mu: float) -> ParamSet:
    """Classical (heavy-ball) momentum, in place: ``v = mu*v + g; p -= lr*v``."""
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params.params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        v = params.velocity[name]
        v *= mu
        v += g
        params.params[name] -= lr * v
    return params


# ---------------------------------------------------------------------------
# functional layers
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} (or batched {rank + 1}) input, got shape {x.shape}")


def _same_pads(kernel: Sequence[int]) -> list[tuple[int, int]]:
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def _im2col(x: np.ndarray, ksize: tuple[int, int, int]) -> np.ndarray:
    kd, kh, kw = ksize
    win = sliding_window_view(x, ksize, axis=(1, 2, 3))  # N, D', H', W', C, kd, kh, kw
    n, do, ho, wo, c = win.shape[:5]
    return win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * do * ho * wo, kd * kh * kw * c)


def _check_conv_shapes(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str):
    if kernels.ndim != 5:
        raise ShapeError(f"kernels must be rank 5 (kd, kh, kw, Cin, Cout), got {kernels.shape}")
    if x.shape[-1] != kernels.shape[3]:
        raise ShapeError(f"input channels (Cin) {x.shape[-1]} != kernel Cin {kernels.shape[3]}")
    if bias.shape != (kernels.shape[4],):
        raise ShapeError(f"bias shape {bias.shape} != (Cout,) = ({kernels.shape[4]},)")
    if padding not in ("valid", "same"):
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    if padding == "valid":
        for axis, name in zip(range(3), ("D", "H", "W")):
            if kernels.shape[axis] > x.shape[axis + 1]:
                raise ShapeError(
                    f"kernel extent {kernels.shape[axis]} exceeds input extent "
                    f"{x.shape[axis + 1]} along {name}"
                )


def conv3d(input: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           padding: str = "valid") -> np.ndarray:
    """Stride-1 3D convolution (cross-correlation) of ``(D,H,W,Cin)`` or batched input."""
    x, squeeze = _as_batch(np.asarray(input), 4)
    _check_conv_shapes(x, kernels, bias, padding)
    ksize = kernels.shape[:3]
    if padding == "same":
        x = np.pad(x, [(0, 0), *_same_pads(ksize), (0, 0)])
    cols = _im2col(x, ksize)
    n = x.shape[0]
    out_sp = tuple(x.shape[i + 1] - ksize[i] + 1 for i in range(3))
    y = cols @ kernels.reshape(-1, kernels.shape[4]) + bias
    y = y.reshape(n, *out_sp, kernels.shape[4])
    return y[0] if squeeze else y


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _pool_view(x: np.ndarray, window: tuple[int, int, int]):
    n, d, h, w, c = x.shape
    for ext, win, name in zip((d, h, w), window, ("D", "H", "W")):
        if win < 1:
            raise ShapeError(f"pool window along {name} must be >= 1")
        if win > ext:
            raise ShapeError(f"pool window {win} larger than input extent {ext} along {name}")
    pd, ph, pw = window
    do, ho, wo = d // pd, h // ph, w // pw
    xc = x[:, : do * pd, : ho * ph, : wo * pw]
    r = xc.reshape(n, do, pd, ho, ph, wo, pw, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return r.reshape(n, do, ho, wo, c, pd * ph * pw)


def maxpool3d(x: np.ndarray, window: Sequence[int]) -> np.ndarray:
    """Non-overlapping max pooling (stride = window, remainder dropped)."""
    xb, squeeze = _as_batch(np.asarray(x), 4)
    y = _pool_view(xb, tuple(window)).max(axis=-1)
    return y[0] if squeeze else y


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weights rows {weights.shape[0]}")
    return x @ weights + bias


def dropout(x: np.ndarray, keep_prob: float, rng: np.random.Generator | None,
            train: bool = True) -> np.ndarray:
    """Inverted dropout; identity when not training or keep_prob == 1."""
    if not 0 < keep_prob <= 1:
        raise ValueError("keep_prob must lie in (0, 1]")
    if not train or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit RNG stream")
    mask = rng.random(x.shape) < keep_prob
    return x * mask / keep_prob


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Sparse softmax cross entropy.

    Accepts ``(C,)`` logits with an integer label, or ``(N, C)`` logits with
    ``N`` labels; in the batched case the loss and gradient are batch means.
    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = lg.shape
    if lab.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= c):
        raise ValueError(f"label out of range [0, {c})")
    if not np.all(np.isfinite(lg)):
        raise NumericalError("non-finite logits")
    z = lg - lg.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), lab]))
    grad = softmax(lg)
    grad[np.arange(n), lab] -= 1
    grad /= n
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# layer objects for the tape
# ---------------------------------------------------------------------------


class Layer:
    name: str = ""
    param_names: tuple[str, ...] = ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def init(self, shape, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, params, train, rng):
        raise NotImplementedError

    def backward(self, dy, params, cache):
        raise NotImplementedError


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv3D(Layer):
    def __init__(self, name: str, kernel: Sequence[int], filters: int, padding: str = "valid"):
        self.name = name
        self.kernel = tuple(int(k) for k in kernel)
        self.filters = int(filters)
        self.padding = padding
        self.param_names = (f"{name}/kernel", f"{name}/bias")

    def output_shape(self, shape):
        if len(shape) != 4:
            raise ShapeError(f"layer {self.name}: expected (D, H, W, C) input, got {shape}")
        if self.padding == "same":
            return (*shape[:3], self.filters)
        out = []
        for ext, k, axis in zip(shape[:3], self.kernel, "DHW"):
            if k > ext:
                raise ShapeError(f"layer {self.name}: kernel {k} exceeds extent {ext} along {axis}")
            out.append(ext - k + 1)
        return (*out, self.filters)

    def init(self, shape, rng, dtype):
        cin = shape[3]
        fan_in = int(np.prod(self.kernel)) * cin
        return {
            self.param_names[0]: _fan_in_uniform(rng, (*self.kernel, cin, self.filters), fan_in, dtype),
            self.param_names[1]: np.zeros(self.filters, dtype=dtype),
        }

    def forward(self, x, params, train, rng):
        k = params[self.param_names[0]]
        b = params[self.param_names[1]]
        _check_conv_shapes(x, k, b, self.padding)
        pads = None
        if self.padding == "same":
            pads = _same_pads(self.kernel)
            x = np.pad(x, [(0, 0), *pads, (0, 0)])
        cols = _im2col(x, self.kernel)
        out_sp = tuple(x.shape[i + 1] - self.kernel[i] + 1 for i in range(3))
        y = (cols @ k.reshape(-1, self.filters) + b).reshape(x.shape[0], *out_sp, self.filters)
        return y, (cols, x.shape, pads)

    def backward(self, dy, params, cache, need_input_grad=True):
        cols, xshape, pads = cache
        k = params[self.param_names[0]]
        n, do, ho, wo, cout = dy.shape
        dy2 = dy.reshape(-1, cout)
        dk = (cols.T @ dy2).reshape(k.shape)
        db = dy2.sum(axis=0)
        if not need_input_grad:
            return None, {self.param_names[0]: dk, self.param_names[1]: db}
        kd, kh, kw = self.kernel
        cin = xshape[4]
        dcols = (dy2 @ k.reshape(-1, cout).T).reshape(n, do, ho, wo, kd, kh, kw, cin)
        dx = np.zeros(xshape, dtype=dy.dtype)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    dx[:, a : a + do, b : b + ho, c : c + wo, :] += dcols[:, :, :, :, a, b, c, :]
        if pads is not None:
            (d0, d1), (h0, h1), (w0, w1) = pads
            dx = dx[:, d0 : xshape[1] - d1, h0 : xshape[2] - h1, w0 : xshape[3] - w1, :]
        return dx, {self.param_names[0]: dk, self.param_names[1]: db}


class MaxPool3D(Layer):
    def __init__(self, window: Sequence[int], name: str = "pool"):
        self.window = tuple(int(w) for w in window)
        self.name = name

    def output_shape(self, shape):
        for ext, win, axis in zip(shape[:3], self.window, "DHW"):
            if win > ext:
                raise ShapeError(
                    f"layer {self.name}: pool window {win} larger than input extent {ext} along {axis}"
                )
        return (*(e // w for e, w in zip(shape[:3], self.window)), shape[3])

    def _slices(self, shape):
        pd, ph, pw = self.window
        do, ho, wo = shape[1] // pd, shape[2] // ph, shape[3] // pw
        for a in range(pd):
            for b in range(ph):
                for c in range(pw):
                    yield (slice(None), slice(a, a + do * pd, pd), slice(b, b + ho * ph, ph),
                           slice(c, c + wo * pw, pw))

    def forward(self, x, params, train, rng):
        _pool_view(x, self.window)  # shape checks
        sl = list(self._slices(x.shape))
        y = x[sl[0]].copy()
        for s in sl[1:]:
            np.maximum(y, x[s], out=y)
        return y, (x, y)

    def backward(self, dy, params, cache):
        # the gradient goes to the first maximal entry of each window
        x, y = cache
        dx = np.zeros(x.shape, dtype=dy.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        for s in self._slices(x.shape):
            hit = (x[s] == y) & ~taken
            dx[s] = dy * hit
            taken |= hit
        return dx, {}


class ReLU(Layer):
    name = "relu"

    def forward(self, x, params, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, params, mask):
        return dy * mask, {}


class Flatten(Layer):
    name = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, params, shape):
        return dy.reshape(shape), {}


class Dense(Layer):
    def __init__(self, name: str, units: int, init_scale: float = 1.0):
        self.name = name
        self.units = int(units)
        self.init_scale = float(init_scale)
        self.param_names = (f"{name}/weights", f"{name}/bias")

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"layer {self.name}: dense expects a flat input, got {shape}")
        return (self.units,)

    def init(self, shape, rng, dtype):
        return {
            self.param_names[0]: (self.init_scale
                                  * _fan_in_uniform(rng, (shape[0], self.units), shape[0], dtype)).astype(dtype),
            self.param_names[1]: np.zeros(self.units, dtype=dtype),
        }

    def forward(self, x, params, train, rng):
        return dense(x, params[self.param_names[0]], params[self.param_names[1]]), x

    def backward(self, dy, params, x):
        w = params[self.param_names[0]]
        return dy @ w.T, {self.param_names[0]: x.T @ dy, self.param_names[1]: dy.sum(axis=0)}


class Dropout(Layer):
    name = "dropout"

    def __init__(self, keep_prob: float):
        if not 0 < keep_prob <= 1:
            raise ValueError("keep_prob must lie in (0, 1]")
        self.keep_prob = float(keep_prob)

    def forward(self, x, params, train, rng):
        if not train or self.keep_prob == 1.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an explicit RNG stream")
        scale = (rng.random(x.shape) < self.keep_prob).astype(x.dtype) / x.dtype.type(self.keep_prob)
        return x * scale, scale

    def backward(self, dy, params, scale):
        return (dy if scale is None else dy * scale), {}


class Sequential:
    """Static feed-forward chain with a single-use tape for backward."""

    def __init__(self, layers: Iterable[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        self._tape = None

    @property
    def output_shape(self):
        return self.shapes[-1]

    def init_params(self, seed: int, dtype=np.float64) -> ParamSet:
        rng = np.random.default_rng(seed)
        params = ParamSet()
        for layer, shape in zip(self.layers, self.shapes):
            for name, value in layer.init(shape, rng, dtype).items():
                params.add(name, value)
        return params

    def forward(self, params: ParamSet, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None, record: bool = True) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} != network input {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, params.params, train, rng)
            caches.append(cache if record else None)
        self._tape = caches if record else None
        return x

    def backward(self, dout: np.ndarray, params: ParamSet) -> dict[str, np.ndarray]:
        """Gradients for every parameter; consumes the tape of the last forward."""
        if self._tape is None:
            raise RuntimeError("backward called before a recorded forward pass")
        grads = {name: np.zeros_like(value) for name, value in params.params.items()}
        last = len(self.layers) - 1
        for i, (layer, cache) in enumerate(zip(reversed(self.layers), reversed(self._tape))):
            if i == last and isinstance(layer, Conv3D):
                # the input gradient of the first layer is never needed
                dout, g = layer.backward(dout, params.params, cache, need_input_grad=False)
            else:
                dout, g = layer.backward(dout, params.params, cache)
            for name, value in g.items():
                grads[name] += value
        self._tape = None
        return grads

    def activation_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(type(l).__name__ if not l.name else l.name, s)
                for l, s in zip(self.layers, self.shapes[1:])]
