"""Geo-aware ConvLSTM: ConvLSTM gating on flattened quadtree frames.

Frames are arrays of shape (batch, L, channels) where L is the table length;
each quadnode's rows ``index_start:index_stop`` hold its payload in row-major
order. Convolutions run independently inside every node (zero padded at node
borders) with one kernel shared by all nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .quadtree import GeoIndexTable
from .tensor import Tensor, ShapeError

GATES = ("i", "f", "c", "o")


@lru_cache(maxsize=64)
def _groups(table: GeoIndexTable):
    return [(shape, idx) for shape, idx in table.shape_groups().items()]


def ga_conv(frame: Tensor, table: GeoIndexTable, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-quadnode same-padded convolution with shared weights.

    ``frame`` is (B, L, Cin) or (L, Cin); output keeps the leading shape with
    ``Cout`` channels. Nodes with equal data_shape are convolved together.
    """
    squeeze = frame.ndim == 2
    x = frame.data[None] if squeeze else frame.data
    if x.ndim != 3 or x.shape[1] != table.length:
        raise ShapeError(f"frame of shape {frame.shape} does not match table length {table.length}")
    cin, cout = kernel.shape[2], kernel.shape[3]
    if x.shape[2] != cin:
        raise ShapeError(f"frame has {x.shape[2]} channels, kernel expects {cin}")
    b = x.shape[0]
    out = np.empty((b, table.length, cout), dtype=x.dtype)
    caches = []
    for (h, w), idx in _groups(table):
        n = idx.shape[0]
        xs = x[:, idx].reshape(b * n, h, w, cin)
        y, cols = T.conv_forward(xs, kernel.data, bias.data)
        out[:, idx] = y.reshape(b, n, h * w, cout)
        caches.append(cols)

    def back(g):
        g = g[None] if squeeze else g
        dx = np.zeros_like(x)
        dk = np.zeros_like(kernel.data)
        db = np.zeros_like(bias.data)
        for ((h, w), idx), cols in zip(_groups(table), caches):
            n = idx.shape[0]
            gs = g[:, idx].reshape(b * n, h, w, cout)
            dxs, dkk, dbb = T.conv_backward(gs, cols, (b * n, h, w, cin), kernel.data)
            dx[:, idx] = dxs.reshape(b, n, h * w, cin)
            dk += dkk
            db += dbb
        return (dx[0] if squeeze else dx), dk, db

    return T._make(out[0] if squeeze else out, (frame, kernel, bias), back)


@dataclass
class GAState:
    h: Tensor
    c: Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class GAConvLSTMParams:
    """Kernels, biases and peepholes of one GA-ConvLSTM layer, keyed by gate."""

    def __init__(self, cin: int, filters: int, length: int, kernel: int = 3, dtype=np.float32,
                 rng: np.random.Generator | None = None):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.cin, self.filters, self.length, self.kernel = cin, filters, length, kernel
        self.tensors: dict[str, Tensor] = {}
        k = kernel
        for g in GATES:
            for src, c in (("x", cin), ("h", filters)):
                shape = (k, k, c, filters)
                data = (glorot_uniform(rng, shape, k * k * c, k * k * filters, dtype) if rng is not None
                        else np.zeros(shape, dtype))
                self.tensors[f"W_{src}{g}"] = Tensor(data, requires_grad=True)
            self.tensors[f"b_{g}"] = Tensor(np.zeros(filters, dtype), requires_grad=True)
        for g in ("i", "f", "o"):
            self.tensors[f"W_c{g}"] = Tensor(np.zeros((length, filters), dtype), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def stacked_kernel(self) -> tuple[Tensor, Tensor]:
        """One (K, K, Cin+F, 4F) kernel so input and recurrent convolutions share one pass.

        conv([x, h]; [[W_x], [W_h]]) == conv(x; W_x) + conv(h; W_h).
        """
        wx = T.concat([self.tensors[f"W_x{g}"] for g in GATES], axis=3)
        wh = T.concat([self.tensors[f"W_h{g}"] for g in GATES], axis=3)
        kern = T.concat([wx, wh], axis=2)
        bias = T.concat([self.tensors[f"b_{g}"] for g in GATES], axis=0)
        return kern, bias


def zero_state(batch: int | None, length: int, filters: int, dtype=np.float32) -> GAState:
    shape = (length, filters) if batch is None else (batch, length, filters)
    return GAState(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


def cell_step(x: Tensor, state: GAState, params: GAConvLSTMParams, table: GeoIndexTable,
              stacked: tuple[Tensor, Tensor] | None = None) -> GAState:
    """One ConvLSTM step with peepholes; all products are elementwise on frames."""
    if state.h.shape[-2] != table.length or state.h.shape[-1] != params.filters:
        raise ShapeError(f"state of shape {state.h.shape} does not match table/filters")
    kern, bias = stacked if stacked is not None else params.stacked_kernel()
    z = ga_conv(T.concat([x, state.h], axis=-1), table, kern, bias)
    zi, zf, zc, zo = T.split(z, 4, axis=-1)
    c_prev = state.c
    i = T.sigmoid(zi + params["W_ci"] * c_prev)
    f = T.sigmoid(zf + params["W_cf"] * c_prev)
    c = f * c_prev + i * T.tanh(zc)
    o = T.sigmoid(zo + params["W_co"] * c)
    h = o * T.tanh(c)
    return GAState(h, c)


def layer_forward(frames, params: GAConvLSTMParams, table: GeoIndexTable, return_sequences: bool = True,
                  initial_state: GAState | None = None):
    """Run ``cell_step`` over a sequence of frames.

    Returns (hidden sequence or final hidden, final state).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty input sequence")
    x0 = frames[0]
    batch = None if x0.ndim == 2 else x0.shape[0]
    state = initial_state or zero_state(batch, table.length, params.filters, x0.dtype)
    stacked = params.stacked_kernel()
    hs = []
    for x in frames:
        state = cell_step(x, state, params, table, stacked)
        hs.append(state.h)
    return (hs if return_sequences else hs[-1]), state
