"""Small convolutional network for slice stacks, written against numpy.

Four conv layers (16 filters each: 3x3, 3x3, 3x1, 3x1) with max pooling, then
dense layers of 256, 32 and 1 units. Hidden layers use a leaky rectifier and
the output a sigmoid. Trained with binary cross-entropy, RMSprop, inverted
dropout on the inputs of the three dense layers, and early stopping on
validation loss.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

CLAMP = 1e-7
MAGIC = b"HCNN"
VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class CnnArchitecture:
    conv_filters: tuple[int, ...] = (16, 16, 16, 16)
    conv_kernels: tuple[tuple[int, int], ...] = ((3, 3), (3, 3), (3, 1), (3, 1))
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 1), (2, 1))
    dense_units: tuple[int, ...] = (256, 32, 1)
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not len(self.conv_filters) == len(self.conv_kernels) == len(self.pools):
            raise ValueError("conv_filters, conv_kernels and pools must align")
        if self.dense_units[-1] != 1:
            raise ValueError("the output layer must have a single unit")

    def layer_shapes(self, input_shape: tuple[int, int]) -> list[tuple[int, int, int]]:
        """(channels, time, bands) after each conv+pool block, input first."""
        h, w = input_shape
        shapes = [(1, h, w)]
        for f, (ph, pw) in zip(self.conv_filters, self.pools):
            h, w = h // ph, w // pw
            if h < 1 or w < 1:
                raise ValueError(f"input {input_shape} too small for the pooling stack")
            shapes.append((f, h, w))
        return shapes

    def flat_size(self, input_shape: tuple[int, int]) -> int:
        c, h, w = self.layer_shapes(input_shape)[-1]
        return c * h * w


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 145
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    dropout_rate: float = 0.5
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class CnnModel:
    params: dict[str, np.ndarray]
    arch: CnnArchitecture
    input_shape: tuple[int, int]

    def param_names(self) -> list[str]:
        return list(self.params)


def init_model(arch: CnnArchitecture, input_shape: tuple[int, int], seed: int = 0) -> CnnModel:
    """He-style uniform init, bound sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = 1
    for k, (f, (kh, kw)) in enumerate(zip(arch.conv_filters, arch.conv_kernels), start=1):
        bound = math.sqrt(6.0 / (c_in * kh * kw))
        params[f"conv{k}_w"] = rng.uniform(-bound, bound, (f, c_in, kh, kw))
        params[f"conv{k}_b"] = np.zeros(f)
        c_in = f
    n_in = arch.flat_size(input_shape)
    for k, units in enumerate(arch.dense_units, start=1):
        bound = math.sqrt(6.0 / n_in)
        params[f"dense{k}_w"] = rng.uniform(-bound, bound, (n_in, units))
        params[f"dense{k}_b"] = np.zeros(units)
        n_in = units
    return CnnModel(params, arch, tuple(input_shape))


# -- layers ---------------------------------------------------------------------

def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 same-padded cross-correlation. Returns (out, windows)."""
    _, _, kh, kw = w.shape
    windows = np.lib.stride_tricks.sliding_window_view(_pad_same(x, kh, kw), (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, F)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], windows


def conv_backward(dout: np.ndarray, windows: np.ndarray, w: np.ndarray, x_shape):
    _, _, kh, kw = w.shape
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    b, c, h, wd = x_shape
    dxp = np.zeros((b, c, h + kh - 1, wd + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + h, j:j + wd] += np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return dxp[:, :, ph:ph + h, pw:pw + wd], dw, db


def maxpool_forward(x: np.ndarray, pool: tuple[int, int]):
    ph, pw = pool
    b, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    crop = x[:, :, :ho * ph, :wo * pw].reshape(b, c, ho, ph, wo, pw)
    blocks = crop.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, pool: tuple[int, int], x_shape):
    ph, pw = pool
    b, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    blocks = np.zeros((b, c, ho, wo, ph * pw))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * ph, :wo * pw] = blocks.reshape(b, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, ho * ph, wo * pw)
    return dx


def leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss(score, label) -> np.ndarray:
    """Binary cross-entropy with the score clamped to [1e-7, 1 - 1e-7]."""
    s = np.clip(np.asarray(score, dtype=np.float64), CLAMP, 1 - CLAMP)
    y = np.asarray(label, dtype=np.float64)
    return -(y * np.log(s) + (1 - y) * np.log(1 - s))


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x[:, None, :, :]


def dropout_masks(model: CnnModel, batch: int, rate: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Inverted-dropout masks for the inputs of each dense layer."""
    sizes = [model.arch.flat_size(model.input_shape)] + list(model.arch.dense_units[:-1])
    keep = 1.0 - rate
    return [(rng.random((batch, n)) < keep) / keep for n in sizes]


def _forward(model: CnnModel, x: np.ndarray, masks=None):
    p, arch = model.params, model.arch
    if tuple(x.shape[-2:]) != tuple(model.input_shape):
        raise ValueError(f"input shape {x.shape[-2:]} does not match model {model.input_shape}")
    a = _as_batch(x)
    cache = []
    for k, pool in enumerate(arch.pools, start=1):
        z, windows = conv_forward(a, p[f"conv{k}_w"], p[f"conv{k}_b"])
        h = leaky(z, arch.leaky_slope)
        pooled, arg = maxpool_forward(h, pool)
        cache.append((a.shape, windows, z, arg, h.shape))
        a = pooled
    flat_shape = a.shape
    a = a.reshape(len(a), -1)
    dense = []
    n_dense = len(arch.dense_units)
    for k in range(1, n_dense + 1):
        a_in = a * masks[k - 1] if masks is not None else a
        z = a_in @ p[f"dense{k}_w"] + p[f"dense{k}_b"]
        dense.append((a_in, z))
        a = leaky(z, arch.leaky_slope) if k < n_dense else z
    logit = a[:, 0]
    return sigmoid(logit), (cache, flat_shape, dense)


def forward(model: CnnModel, x) -> np.ndarray | float:
    """Inference scores in (0, 1); a single 2-D input gives a float."""
    x = np.asarray(x, dtype=np.float64)
    s, _ = _forward(model, x)
    return float(s[0]) if x.ndim == 2 else s


def batch_loss(model: CnnModel, x, labels, masks=None) -> float:
    s, _ = _forward(model, np.asarray(x, dtype=np.float64), masks)
    return float(loss(s, labels).mean())


def backward(model: CnnModel, x, labels, masks=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient for every parameter."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    s, (cache, flat_shape, dense) = _forward(model, x, masks)
    p, arch = model.params, model.arch
    n = len(s)
    inside = (s > CLAMP) & (s < 1 - CLAMP)
    dlogit = np.where(inside, s - y, 0.0) / n
    grads: dict[str, np.ndarray] = {}

    d = dlogit[:, None]
    n_dense = len(arch.dense_units)
    for k in range(n_dense, 0, -1):
        a_in, z = dense[k - 1]
        if k < n_dense:
            d = d * np.where(z > 0, 1.0, arch.leaky_slope)
        grads[f"dense{k}_w"] = a_in.T @ d
        grads[f"dense{k}_b"] = d.sum(axis=0)
        d = d @ p[f"dense{k}_w"].T
        if masks is not None:
            d = d * masks[k - 1]
    d = d.reshape(flat_shape)
    for k in range(len(arch.pools), 0, -1):
        x_shape, windows, z, arg, h_shape = cache[k - 1]
        d = maxpool_backward(d, arg, arch.pools[k - 1], h_shape)
        d = d * np.where(z > 0, 1.0, arch.leaky_slope)
        d, grads[f"conv{k}_w"], grads[f"conv{k}_b"] = conv_backward(d, windows, p[f"conv{k}_w"], x_shape)
    ordered = {name: grads[name] for name in p}
    return float(loss(s, y).mean()), ordered


def rmsprop_step(params: dict, grads: dict, state: dict, lr: float = 1e-3, rho: float = 0.9,
                 eps: float = 1e-8) -> tuple[dict, dict]:
    """In-place RMSprop update; returns ``(params, state)``."""
    for name, g in grads.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = rho * v + (1 - rho) * g * g
        state[name] = v
        params[name] = params[name] - lr * g / (np.sqrt(v) + eps)
    return params, state


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once
    ``patience`` consecutive epochs have failed to improve on it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainingLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _eval_loss(model: CnnModel, x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        total += float(loss(forward(model, x[i:i + chunk]), y[i:i + chunk]).sum())
    return total / len(x)


def predict(model: CnnModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([np.atleast_1d(forward(model, x[i:i + chunk])) for i in range(0, len(x), chunk)])


def train(train_set: tuple[np.ndarray, np.ndarray], val_set: tuple[np.ndarray, np.ndarray],
          arch: CnnArchitecture = CnnArchitecture(), cfg: TrainConfig = TrainConfig()) -> tuple[CnnModel, TrainingLog]:
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be nonempty")
    model = init_model(arch, x_tr.shape[1:], cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state: dict[str, np.ndarray] = {}
    stopper = EarlyStopping(cfg.patience)
    best = {k: v.copy() for k, v in model.params.items()}
    log = TrainingLog()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_tr))
        seen = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = dropout_masks(model, len(idx), cfg.dropout_rate, rng) if cfg.dropout_rate > 0 else None
            batch_loss_value, grads = backward(model, x_tr[idx], y_tr[idx], masks)
            if not math.isfinite(batch_loss_value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            seen += batch_loss_value * len(idx)
            rmsprop_step(model.params, grads, state, cfg.lr, cfg.rho, cfg.eps)
        val = _eval_loss(model, x_va, y_va)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        log.epochs.append(epoch)
        log.train_loss.append(seen / len(x_tr))
        log.val_loss.append(val)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best = {k: v.copy() for k, v in model.params.items()}
        if stop:
            break
    model.params = best
    log.best_epoch = stopper.best_epoch
    return model, log


def save_model(path, model: CnnModel) -> None:
    desc = {
        "arch": asdict(model.arch),
        "input_shape": list(model.input_shape),
        "params": [[name, list(a.shape)] for name, a in model.params.items()],
    }
    blob = json.dumps(desc).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for a in model.params.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path) -> CnnModel:
    with open(path, "rb") as fh:
        magic, version, n = struct.unpack("<4sII", fh.read(12))
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"{path}: not a CNN model file (v{VERSION})")
        desc = json.loads(fh.read(n))
        params = {}
        for name, shape in desc["params"]:
            count = int(np.prod(shape))
            params[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    a = desc["arch"]
    arch = CnnArchitecture(
        tuple(a["conv_filters"]), tuple(tuple(k) for k in a["conv_kernels"]),
        tuple(tuple(k) for k in a["pools"]), tuple(a["dense_units"]), a["leaky_slope"])
    return CnnModel(params, arch, tuple(desc["input_shape"]))
