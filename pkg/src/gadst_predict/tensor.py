"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the forecasting model needs are provided. Every op builds a
``Tensor`` holding its parents and a closure that pushes the output gradient
back to them; :meth:`Tensor.backward` runs the closures in reverse topological
order.

Parameters are stored in float32 for training and float64 for gradient checks;
reductions accumulate in float64.
"""
from __future__ import annotations

import struct
import json
import hashlib
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor that requires it."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if grad is None else grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


LEAKY_SLOPE = 0.3


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), back)


def activation(kind: str, x: Tensor) -> Tensor:
    fns = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "leaky_relu": leaky_relu, "softmax": softmax}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](x)


# ----------------------------------------------------------------- shape / reduce


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if n % sections:
        raise ShapeError(f"cannot split axis of size {n} into {sections}")
    step = n // sections
    outs = []
    for s in range(sections):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(s * step, (s + 1) * step)
        sl = tuple(sl)

        def back(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        outs.append(_make(a.data[sl], (a,), back))
    return outs


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(y, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = _coerce(a, b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shapes do not conform: x {x.shape}, W {w.shape}, b {b.shape}")
    return add(matmul(x, w), b)


# ------------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C) patches with zero 'same' padding."""
    p = (k - 1) // 2
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    p = (k - 1) // 2
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += cols[:, :, :, i, j, :]
    return out[:, p:p + h, p:p + w, :]


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Raw same-padded cross-correlation on (N, H, W, Cin); returns (out, cache)."""
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    n, h, w, _ = x.shape
    cols = _im2col(x, k)
    out = cols @ kernel.reshape(-1, cout) + bias
    return out.reshape(n, h, w, cout), cols


def conv_backward(g: np.ndarray, cols: np.ndarray, x_shape, kernel: np.ndarray):
    k, _, cin, cout = kernel.shape
    g2 = g.reshape(-1, cout)
    dk = (cols.T @ g2).reshape(kernel.shape)
    db = g2.sum(axis=0)
    dx = _col2im(g2 @ kernel.reshape(-1, cout).T, x_shape, k)
    return dx, dk, db


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 'same' 2-D cross-correlation.

    ``x`` is (H, W, Cin) or (N, H, W, Cin); ``kernel`` is (K, K, Cin, Cout).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    out, cols = conv_forward(xd, kernel.data, bias.data)

    def back(g):
        gd = g[None] if squeeze else g
        dx, dk, db = conv_backward(gd, cols, xd.shape, kernel.data)
        return (dx[0] if squeeze else dx), dk, db

    return _make(out[0] if squeeze else out, (x, kernel, bias), back)


# ---------------------------------------------------------- normalization / dropout


class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradient)."""

    def __init__(self, features: int, momentum: float = 0.99, eps: float = 1e-3, dtype=np.float32):
        self.mean = np.zeros(features, dtype=dtype)
        self.var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-feature normalization over every axis but the last."""
    feats = x.shape[-1]
    x2 = x.data.reshape(-1, feats)
    if mode == "train":
        if x2.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs at least 2 rows")
        mu = x2.mean(axis=0, dtype=np.float64)
        var = x2.var(axis=0, dtype=np.float64)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)
    elif mode == "infer":
        mu, var = state.mean.astype(np.float64), state.var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = ((x2 - mu) * inv).astype(x.dtype)
    y = (xhat * gamma.data + beta.data).reshape(x.shape)
    train = mode == "train"

    def back(g):
        g2 = g.reshape(-1, feats)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        gx = g2 * gamma.data
        if train:
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        else:
            dx = gx * inv
        return dx.reshape(x.shape).astype(x.dtype), dgamma, dbeta

    return _make(y, (x, gamma, beta), back)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside train mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if mode != "train" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------- optimizer


class Adam:
    """Adam with elementwise gradient value clipping applied before the moment updates."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7,
                 clip_value: float | None = 1.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_value = clip_value
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64)
            if self.clip_value is not None:
                g = np.clip(g, -self.clip_value, self.clip_value)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.dtype)

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.update(params, {k: p.grad for k, p in params.items() if p.grad is not None})


def adam_update(params, grads, state: Adam) -> None:
    state.update(params, grads)


# ----------------------------------------------------------------- gradient check


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-3,
               floor: float = 1e-2, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare reverse-mode gradients with central differences.

    Returns the max relative error per parameter, where the error of one
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_coords`` samples a subset of coordinates of large parameters.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        worst = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            up = float(loss_fn().data)
            flat[i] = old - eps
            down = float(loss_fn().data)
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        report[name] = worst
    return report


# -------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GADSTCK1"


class CheckpointError(ValueError):
    pass


def save_arrays(arrays: Mapping[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Write named arrays as little-endian raw records behind a JSON manifest.

    Layout: magic (8 bytes) | manifest length (uint64 LE) | manifest JSON (utf-8) |
    records concatenated in manifest order. The manifest lists name, dtype,
    shape, byte offset and length of every record plus a sha256 of the record
    block and free-form ``meta``.
    """
    records, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        records.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    manifest = {"records": records, "sha256": hashlib.sha256(body).hexdigest(), "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + body)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    body = raw[16 + n:]
    if hashlib.sha256(body).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: record block checksum mismatch")
    out = {}
    for rec in manifest["records"]:
        dt = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != rec["nbytes"]:
            raise CheckpointError(f"{path}: record {rec['name']} size does not match its shape")
        chunk = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        out[rec["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out, manifest.get("meta", {})
