"""GADST-Predict: two attention encoder-decoders over GA-ConvLSTM, fusion and external features."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .ga_convlstm import GAConvLSTMParams, GAState, cell_step, glorot_uniform, layer_forward, zero_state
from .ingest import HORIZON, SupervisedWindow
from .quadtree import GeoIndexTable, raster_to_frame, unflatten_to_raster
from .tensor import BatchNormState, CheckpointError, Tensor

log = logging.getLogger(__name__)

EXT_FEATURES = 2


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int, history):
        super().__init__(f"non-finite loss in epoch {epoch}; last finite epoch {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        self.history = history


@dataclass
class HyperConfig:
    filters: int = 40
    kernel: int = 3
    dropout: float = 0.25
    ext_units: int = 10
    batch_size: int = 16
    epochs: int = 300
    lambda1: float = 10.0
    lambda2: float = 100.0
    seed: int = 0
    enc_layers: int = 2
    dec_layers: int = 2
    attention_dim: int = 32
    horizon: int = HORIZON
    lr: float = 1e-3
    teacher_forcing: bool = False
    bn_momentum: float = 0.99
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("filters", "kernel", "ext_units", "batch_size", "epochs", "enc_layers", "dec_layers",
                     "attention_dim", "horizon"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# ---------------------------------------------------------------------- attention


def attend(scores: Tensor, annotations: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-weighted sum of annotations.

    ``scores`` is (B, Tx); ``annotations`` is (B, Tx, ...). Returns (context, alpha).
    """
    alpha = T.softmax(scores, axis=-1)
    extra = (1,) * (annotations.ndim - 2)
    weighted = annotations * T.reshape(alpha, alpha.shape + extra)
    return T.tsum(weighted, axis=1), alpha


def attention_context(s_prev: Tensor, annotations: Tensor, w_s: Tensor, w_h: Tensor, v: Tensor,
                      pooled_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Additive alignment scores ``v . tanh(W_s s + W_h h_j)`` followed by :func:`attend`.

    ``s_prev`` is (B, F); ``annotations`` is (B, Tx, L, F). Annotations are
    scored through their spatial mean so the alignment model has a fixed size.
    """
    if pooled_proj is None:
        pooled_proj = T.matmul(T.mean(annotations, axis=2), w_h)
    b, tx = annotations.shape[:2]
    q = T.reshape(T.matmul(s_prev, w_s), (b, 1, w_s.shape[1]))
    scores = T.reshape(T.matmul(T.tanh(q + pooled_proj), v), (b, tx))
    return attend(scores, annotations)


# ------------------------------------------------------------------------- model


@dataclass
class _Post:
    """Batch norm -> leaky ReLU -> dropout block following a recurrent layer."""
    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    def __call__(self, x: Tensor, mode: str, rate: float, rng) -> Tensor:
        y = T.batch_norm(x, self.gamma, self.beta, self.state, "train" if mode == "train" else "infer")
        y = T.leaky_relu(y)
        return T.dropout(y, rate, mode, rng)


class Component:
    """One attention encoder-decoder over a week of frames."""

    def __init__(self, prefix: str, hp: HyperConfig, length: int, rng: np.random.Generator | None):
        dt = hp.np_dtype
        f = hp.filters
        self.prefix = prefix
        self.hp = hp
        self.enc = [GAConvLSTMParams(1 if l == 0 else f, f, length, hp.kernel, dt, rng) for l in range(hp.enc_layers)]
        self.dec = [GAConvLSTMParams(f + 1 if l == 0 else f, f, length, hp.kernel, dt, rng)
                    for l in range(hp.dec_layers)]
        self.proj = GAConvLSTMParams(f, 1, length, hp.kernel, dt, rng)
        self.enc_post = [self._post(f, dt, hp.bn_momentum) for _ in self.enc]
        self.dec_post = [self._post(f, dt, hp.bn_momentum) for _ in self.dec]
        da = hp.attention_dim

        def init(shape):
            if rng is None:
                return Tensor(np.zeros(shape, dt), requires_grad=True)
            return Tensor(glorot_uniform(rng, shape, shape[0], shape[1], dt), requires_grad=True)

        self.w_s = init((f, da))
        self.w_h = init((f, da))
        self.v = init((da, 1))

    @staticmethod
    def _post(f, dt, momentum) -> _Post:
        return _Post(Tensor(np.ones(f, dt), requires_grad=True), Tensor(np.zeros(f, dt), requires_grad=True),
                     BatchNormState(f, momentum=momentum, dtype=dt))

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for kind, layers in (("enc", self.enc), ("dec", self.dec)):
            for l, p in enumerate(layers):
                for n, t in p.tensors.items():
                    out[f"{self.prefix}.{kind}{l}.{n}"] = t
        for n, t in self.proj.tensors.items():
            out[f"{self.prefix}.proj.{n}"] = t
        for kind, posts in (("enc", self.enc_post), ("dec", self.dec_post)):
            for l, p in enumerate(posts):
                out[f"{self.prefix}.{kind}{l}.bn.gamma"] = p.gamma
                out[f"{self.prefix}.{kind}{l}.bn.beta"] = p.beta
        out[f"{self.prefix}.att.W_s"] = self.w_s
        out[f"{self.prefix}.att.W_h"] = self.w_h
        out[f"{self.prefix}.att.v"] = self.v
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        out = {}
        for kind, posts in (("enc", self.enc_post), ("dec", self.dec_post)):
            for l, p in enumerate(posts):
                out[f"{self.prefix}.{kind}{l}.bn"] = p.state
        return out

    def forward(self, week: Tensor, table: GeoIndexTable, mode: str = "infer", rng=None,
                targets: Tensor | None = None, horizon: int | None = None, return_alphas: bool = False):
        """``week`` is (B, Tw, L); returns a list of ``horizon`` (B, L) predicted frames."""
        hp = self.hp
        horizon = horizon or hp.horizon
        if week.ndim != 3 or week.shape[2] != table.length:
            raise T.ShapeError(f"week of shape {week.shape} does not match table length {table.length}")
        b, tw, length = week.shape
        rate = hp.dropout
        seq = [T.reshape(s, (b, length, 1)) for s in T.split(week, tw, axis=1)]
        last_input = seq[-1]
        for params, post in zip(self.enc, self.enc_post):
            hs, _ = layer_forward(seq, params, table, return_sequences=True)
            block = post(T.stack(hs, axis=1), mode, rate, rng)
            seq = [T.reshape(s, (b, length, hp.filters)) for s in T.split(block, tw, axis=1)]
        annotations = T.stack(seq, axis=1)  # B, Tw, L, F
        pooled_proj = T.matmul(T.mean(annotations, axis=2), self.w_h)

        dt = week.dtype
        states = [zero_state(b, length, hp.filters, dt) for _ in self.dec]
        proj_state = zero_state(b, length, 1, dt)
        stacked = [p.stacked_kernel() for p in self.dec]
        proj_stacked = self.proj.stacked_kernel()
        s_prev = T.mean(seq[-1], axis=1)
        y_prev = last_input
        preds, alphas = [], []
        for i in range(horizon):
            context, alpha = attention_context(s_prev, annotations, self.w_s, self.w_h, self.v, pooled_proj)
            alphas.append(alpha)
            z = T.concat([context, y_prev], axis=-1)
            for l, (params, post) in enumerate(zip(self.dec, self.dec_post)):
                states[l] = cell_step(z, states[l], params, table, stacked[l])
                z = post(states[l].h, mode, rate, rng)
            s_prev = T.mean(states[-1].h, axis=1)
            proj_state = cell_step(z, proj_state, self.proj, table, proj_stacked)
            y = proj_state.h
            preds.append(T.reshape(y, (b, length)))
            if targets is not None and hp.teacher_forcing and mode == "train":
                y_prev = T.reshape(targets[:, i, :], (b, length, 1))
            else:
                y_prev = y
        return (preds, alphas) if return_alphas else preds


def fuse(y1: Tensor, y2: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Elementwise ``W1 * Y1 + W2 * Y2``."""
    if y1.shape != y2.shape:
        raise T.ShapeError(f"component outputs differ in shape: {y1.shape} vs {y2.shape}")
    return w1 * y1 + w2 * y2


def external_forward(ext: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Time-distributed dense -> ReLU -> dense -> ReLU on (B, H, features) -> (B, H, L)."""
    return T.relu(T.dense(T.relu(T.dense(ext, w1, b1)), w2, b2))


class GADSTModel:
    def __init__(self, hp: HyperConfig, table: GeoIndexTable, init: str = "glorot"):
        self.hp = hp
        self.table = table
        length = table.length
        dt = hp.np_dtype
        rng = np.random.default_rng(hp.seed) if init == "glorot" else None
        self.components = [Component("week_a", hp, length, rng), Component("week_b", hp, length, rng)]
        self.fusion_w1 = Tensor(np.full((hp.horizon, length), 0.5, dt), requires_grad=True)
        self.fusion_w2 = Tensor(np.full((hp.horizon, length), 0.5, dt), requires_grad=True)

        def dense_w(fi, fo):
            if rng is None:
                return Tensor(np.zeros((fi, fo), dt), requires_grad=True)
            return Tensor(glorot_uniform(rng, (fi, fo), fi, fo, dt), requires_grad=True)

        self.ext_w1 = dense_w(EXT_FEATURES, hp.ext_units)
        self.ext_b1 = Tensor(np.zeros(hp.ext_units, dt), requires_grad=True)
        self.ext_w2 = dense_w(hp.ext_units, length)
        self.ext_b2 = Tensor(np.zeros(length, dt), requires_grad=True)
        if init == "zeros":
            for p in self.params().values():
                p.data[...] = 0

    def params(self) -> dict[str, Tensor]:
        out = {}
        for c in self.components:
            out.update(c.named_params())
        out.update({"fusion.W1": self.fusion_w1, "fusion.W2": self.fusion_w2, "ext.W1": self.ext_w1,
                    "ext.b1": self.ext_b1, "ext.W2": self.ext_w2, "ext.b2": self.ext_b2})
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        out = {}
        for c in self.components:
            out.update(c.bn_states())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, copied."""
        out = {k: p.data.copy() for k, p in self.params().items()}
        for k, s in self.bn_states().items():
            out[f"{k}.running_mean"] = s.mean.copy()
            out[f"{k}.running_var"] = s.var.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params, bns = self.params(), self.bn_states()
        expected = set(params) | {f"{k}.running_{s}" for k in bns for s in ("mean", "var")}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:3]
            extra = sorted(set(arrays) - expected)[:3]
            raise CheckpointError(f"checkpoint tensors do not match model (missing {missing}, unexpected {extra})")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = arrays[k].astype(p.dtype).copy()
        for k, s in bns.items():
            for attr in ("mean", "var"):
                arr = arrays[f"{k}.running_{attr}"]
                if arr.shape != getattr(s, attr).shape:
                    raise CheckpointError(f"{k}.running_{attr}: shape mismatch")
                setattr(s, attr, arr.astype(s.mean.dtype).copy())

    def forward(self, week_a, week_b, ext, mode: str = "infer", rng=None, targets=None,
                return_parts: bool = False):
        """All inputs batched: weeks (B, 7, L), ext (B, H, 2). Returns (B, H, L)."""
        hp = self.hp
        dt = hp.np_dtype
        week_a, week_b, ext = (T.as_tensor(np.asarray(a, dtype=dt)) if not isinstance(a, Tensor) else a
                               for a in (week_a, week_b, ext))
        if targets is not None and not isinstance(targets, Tensor):
            targets = Tensor(np.asarray(targets, dtype=dt))
        y1 = T.stack(self.components[0].forward(week_a, self.table, mode, rng, targets), axis=1)
        y2 = T.stack(self.components[1].forward(week_b, self.table, mode, rng, targets), axis=1)
        fused = fuse(y1, y2, self.fusion_w1, self.fusion_w2)
        extra = external_forward(ext, self.ext_w1, self.ext_b1, self.ext_w2, self.ext_b2)
        out = fused + extra
        if return_parts:
            return out, {"y1": y1, "y2": y2, "fused": fused, "ext": extra}
        return out


def loss(y, y_hat: Tensor, lambda1: float = 10.0, lambda2: float = 100.0) -> Tensor:
    """``lambda1 * MSE + 100 * lambda2 * mean squared relative error``; cells with Y = 0 are
    left out of the relative term (and its count)."""
    y_hat = T.as_tensor(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise T.ShapeError(f"target {y.shape} and prediction {y_hat.shape} differ")
    diff = T.sub(y, y_hat)
    total = T.mul(T.tsum(T.square(diff)), lambda1 / y.size)
    mask = y != 0
    n_nz = int(mask.sum())
    if n_nz:
        inv = np.where(mask, 1.0 / np.where(mask, y, 1.0), 0.0).astype(y_hat.dtype)
        rel = T.mul(diff, inv)
        total = T.add(total, T.mul(T.tsum(T.square(rel)), 100.0 * lambda2 / n_nz))
    return total


# ---------------------------------------------------------------------- data prep


@dataclass
class WindowArrays:
    week_a: np.ndarray  # (n, 7, L)
    week_b: np.ndarray
    target: np.ndarray  # (n, H, L)
    ext: np.ndarray  # (n, H, 2)
    dates: list = field(default_factory=list)  # target dates per window

    def __len__(self):
        return self.week_a.shape[0]

    def subset(self, idx) -> "WindowArrays":
        idx = np.asarray(idx)
        return WindowArrays(self.week_a[idx], self.week_b[idx], self.target[idx], self.ext[idx],
                            [self.dates[i] for i in idx] if self.dates else [])


def windows_to_arrays(windows: Sequence[SupervisedWindow], table: GeoIndexTable, horizon: int = HORIZON,
                      dtype=np.float32) -> WindowArrays:
    def frames(rs):
        return raster_to_frame(np.stack([r.counts for r in rs]), table)

    wa = np.stack([frames(w.week_a) for w in windows]).astype(dtype)
    wb = np.stack([frames(w.week_b) for w in windows]).astype(dtype)
    tg = np.stack([frames(w.target[:horizon]) for w in windows]).astype(dtype)
    ex = np.array([[e.as_vector() for e in w.ext[:horizon]] for w in windows], dtype=dtype)
    dates = [[r.date for r in w.target[:horizon]] for w in windows]
    return WindowArrays(wa, wb, tg, ex, dates)


# -------------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def to_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])


def evaluate_loss(model: GADSTModel, data: WindowArrays, batch_size: int | None = None) -> float:
    """Mean loss over windows in infer mode, batch by batch (weighted by batch size)."""
    hp = model.hp
    bs = batch_size or hp.batch_size
    total, n = 0.0, len(data)
    for s in range(0, n, bs):
        part = data.subset(range(s, min(n, s + bs)))
        out = model.forward(part.week_a, part.week_b, part.ext, "infer")
        total += float(loss(part.target, out, hp.lambda1, hp.lambda2).data) * len(part)
    return total / n


def fit(model: GADSTModel, train: WindowArrays, val: WindowArrays | None = None,
        epochs: int | None = None, progress=None) -> History:
    """Mini-batch Adam training; keeps the weights of the best validation epoch.

    Without validation data the training loss picks the best epoch.
    """
    hp = model.hp
    epochs = hp.epochs if epochs is None else epochs
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(train) == 0:
        raise ValueError("no training windows")
    shuffle_rng = np.random.default_rng([hp.seed, 1])
    drop_rng = np.random.default_rng([hp.seed, 2])
    opt = T.Adam(lr=hp.lr, beta1=0.9, beta2=0.999, eps=1e-7, clip_value=1.0)
    params = model.params()
    history = History()
    best, best_score = None, np.inf
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), hp.batch_size):
            part = train.subset(order[s:s + hp.batch_size])
            for p in params.values():
                p.zero_grad()
            out = model.forward(part.week_a, part.week_b, part.ext, "train", drop_rng, targets=part.target)
            l = loss(part.target, out, hp.lambda1, hp.lambda2)
            value = float(l.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, epoch - 1, history)
            l.backward()
            opt.step(params)
            total += value * len(part)
        train_loss = total / len(train)
        val_loss = evaluate_loss(model, val) if val is not None and len(val) else float("nan")
        if not np.isfinite(train_loss) or (val is not None and len(val) and not np.isfinite(val_loss)):
            raise TrainingDivergedError(epoch, epoch - 1, history)
        history.records.append(EpochRecord(epoch, train_loss, val_loss))
        score = val_loss if np.isfinite(val_loss) else train_loss
        if score < best_score:
            best_score, best = score, model.state_arrays()
            history.best_epoch = epoch
        log.info("epoch %d train_loss=%.6g val_loss=%.6g", epoch, train_loss, val_loss)
        if progress is not None:
            progress(history.records[-1])
    if best is not None:
        model.load_state_arrays(best)
    return history


# ------------------------------------------------------------------------ inference


def predict(model: GADSTModel, window: SupervisedWindow, scale_max: float = 1.0) -> np.ndarray:
    """Forecast ``horizon`` rasters (count space, clamped at zero) for one window."""
    hp = model.hp
    arr = windows_to_arrays([window], model.table, hp.horizon, hp.np_dtype)
    return predict_arrays(model, arr, scale_max)[0]


def predict_arrays(model: GADSTModel, data: WindowArrays, scale_max: float = 1.0,
                   batch_size: int | None = None) -> np.ndarray:
    """(n, H, M, N) predictions in count space."""
    if model.table.shape is None:
        raise ValueError("model table has no grid shape")
    bs = batch_size or model.hp.batch_size
    outs = []
    for s in range(0, len(data), bs):
        part = data.subset(range(s, min(len(data), s + bs)))
        if part.week_a.shape[-1] != model.table.length:
            raise T.ShapeError("window frames do not match the model's geo-index table")
        outs.append(model.forward(part.week_a, part.week_b, part.ext, "infer").data)
    frames = np.concatenate(outs).astype(np.float64)
    rasters = unflatten_to_raster(frames, model.table)
    return np.maximum(rasters, 0.0) * scale_max


# ----------------------------------------------------------------------- checkpoints


def save_checkpoint(model: GADSTModel, path, extra: dict | None = None) -> None:
    meta = {"hyper": dataclasses.asdict(model.hp), "table": model.table.dumps(),
            "grid": list(model.table.shape) if model.table.shape else None}
    if extra:
        meta["extra"] = extra
    T.save_arrays(model.state_arrays(), path, meta)


def load_checkpoint(path) -> tuple[GADSTModel, dict]:
    arrays, meta = T.load_arrays(path)
    try:
        hp = HyperConfig(**meta["hyper"])
        table = GeoIndexTable.loads(meta["table"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid manifest metadata ({exc})") from exc
    if meta.get("grid"):
        table = GeoIndexTable(table.entries, tuple(meta["grid"]))
    model = GADSTModel(hp, table, init="zeros")
    model.load_state_arrays(arrays)
    return model, meta.get("extra", {})


def clone(model: GADSTModel) -> GADSTModel:
    return copy.deepcopy(model)
