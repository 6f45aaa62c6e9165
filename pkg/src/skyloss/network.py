"""Small numpy CNN that maps a raster to K path-loss distributions at once.

Architecture: a stack of conv blocks (3x3 conv, stride 1, zero padding 1,
ReLU, 2x2 max-pool), a flatten, dense layers with ReLU between them, and a
final dense layer of ``26 K`` logits. Each altitude's 26 logits go through
their own softmax. Training minimizes soft-label cross-entropy with SGD and
classical momentum. Everything runs in float64.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ConsistencyError, TrainingError
from .histogram import N_BINS, MultiAltitudeTarget, mse_per_altitude

log = logging.getLogger(__name__)

EPS = 1e-12
CHECKPOINT_MAGIC = b"SKYCKPT1"


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple = (3, 64, 64)
    conv_channels: tuple = (8, 16, 32, 32)
    dense_widths: tuple = (256, 104)
    altitudes: tuple = (40.0, 80.0, 120.0, 300.0)
    n_bins: int = N_BINS

    @property
    def k(self) -> int:
        return len(self.altitudes)

    @property
    def output_width(self) -> int:
        return self.n_bins * self.k

    def validate(self) -> None:
        c, h, w = self.input_shape
        if min(c, h, w) <= 0:
            raise ConfigurationError(f"bad input shape {self.input_shape}")
        factor = 2 ** len(self.conv_channels)
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input {h}x{w} is not divisible by {factor} for {len(self.conv_channels)} pools"
            )
        if any(ch <= 0 for ch in self.conv_channels) or any(d <= 0 for d in self.dense_widths):
            raise ConfigurationError("layer widths must be positive")
        if not self.dense_widths or self.dense_widths[-1] != self.output_width:
            raise ConfigurationError(
                f"final dense width must be {self.output_width} (26 x {self.k} altitudes)"
            )

    def shape_trace(self) -> list:
        """``(layer name, output shape without batch)`` for every layer."""
        c, h, w = self.input_shape
        trace = [("input", (c, h, w))]
        for i, out in enumerate(self.conv_channels):
            trace.append((f"conv{i}", (out, h, w)))
            h, w, c = h // 2, w // 2, out
            trace.append((f"pool{i}", (c, h, w)))
        width = c * h * w
        trace.append(("flatten", (width,)))
        for i, d in enumerate(self.dense_widths):
            trace.append((f"dense{i}", (d,)))
        trace.append(("block_softmax", (self.k, self.n_bins)))
        return trace

    def param_shapes(self) -> list:
        """``(name, shape)`` in declaration order, which is also checkpoint order."""
        shapes = []
        c = self.input_shape[0]
        for i, out in enumerate(self.conv_channels):
            shapes += [(f"conv{i}.weight", (out, c, 3, 3)), (f"conv{i}.bias", (out,))]
            c = out
        fan_in = self.shape_trace()[2 * len(self.conv_channels) + 1][1][0]
        for i, d in enumerate(self.dense_widths):
            shapes += [(f"dense{i}.weight", (fan_in, d)), (f"dense{i}.bias", (d,))]
            fan_in = d
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "dense_widths": list(self.dense_widths),
            "altitudes": list(self.altitudes),
            "n_bins": self.n_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_channels=tuple(d["conv_channels"]),
            dense_widths=tuple(d["dense_widths"]),
            altitudes=tuple(float(a) for a in d["altitudes"]),
            n_bins=int(d.get("n_bins", N_BINS)),
        )

    @classmethod
    def default(cls, input_shape=(3, 64, 64), altitudes=(40.0, 80.0, 120.0, 300.0)) -> "ModelSpec":
        return cls(
            input_shape=tuple(input_shape),
            conv_channels=(8, 16, 32, 32),
            dense_widths=(256, N_BINS * len(altitudes)),
            altitudes=tuple(float(a) for a in altitudes),
        )


def init_params(spec: ModelSpec, seed: int) -> list:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = []
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        limit = math.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=shape))
    return params


# ---------------------------------------------------------------- layers


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _col2im(dcols, shape):
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + h, kj : kj + w] += d[..., ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def conv_forward(x, weight, bias):
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def conv_backward(dout, cols, x_shape, weight):
    out_c = weight.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, out_c)
    w2 = weight.reshape(out_c, -1)
    dw = (d.T @ cols).reshape(weight.shape)
    db = d.sum(axis=0)
    dx = _col2im(d @ w2, x_shape)
    return dx, dw, db


def _pool_windows(a):
    n, c, h, w = a.shape
    return (
        a.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def pool_forward(a):
    """2x2 max-pool; gradient is routed to the first maximum of each window."""
    win = _pool_windows(a)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout, idx, a_shape):
    n, c, h, w = a_shape
    d = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(a_shape)


def block_softmax(logits, k):
    z = logits.reshape(logits.shape[0], k, -1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- model


def _check_input(spec, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ConsistencyError(
            f"input shape {x.shape[1:]} does not match model input {tuple(spec.input_shape)}"
        )


def _forward(spec, params, x):
    _check_input(spec, x)
    caches = []
    h = np.asarray(x, dtype=np.float64)
    it = iter(params)
    for _ in spec.conv_channels:
        weight, bias = next(it), next(it)
        z, cols = conv_forward(h, weight, bias)
        a = np.maximum(z, 0.0)
        pooled, idx = pool_forward(a)
        caches.append(("conv", h.shape, cols, z, idx))
        h = pooled
    flat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    n_dense = len(spec.dense_widths)
    for i in range(n_dense):
        weight, bias = next(it), next(it)
        z = h @ weight + bias
        caches.append(("dense", h, z))
        h = np.maximum(z, 0.0) if i < n_dense - 1 else z
    probs = block_softmax(h, spec.k)
    return probs, (caches, flat_shape)


def cross_entropy(pred, target) -> float:
    """Batch mean of ``sum_blocks sum_bins -t log(p + eps)``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ConsistencyError(f"prediction {pred.shape} and target {target.shape} differ")
    if np.any(target < 0):
        raise ConsistencyError("target has negative mass")
    n = pred.shape[0] if pred.ndim == 3 else 1
    return float(-(target * np.log(pred + EPS)).sum() / n)


def _backward(spec, params, probs, target, cache):
    caches, flat_shape = cache
    n = probs.shape[0]
    g = -target / (probs + EPS)
    dz = probs * (g - (probs * g).sum(axis=-1, keepdims=True)) / n
    dh = dz.reshape(n, -1)
    grads = [None] * len(params)
    pi = len(params)
    n_dense = len(spec.dense_widths)
    for i in reversed(range(n_dense)):
        _, h_in, z = caches[len(spec.conv_channels) + i]
        if i < n_dense - 1:
            dh = dh * (z > 0)
        pi -= 2
        grads[pi] = h_in.T @ dh
        grads[pi + 1] = dh.sum(axis=0)
        dh = dh @ params[pi].T
    dh = dh.reshape(flat_shape)
    for i in reversed(range(len(spec.conv_channels))):
        _, x_shape, cols, z, idx = caches[i]
        da = pool_backward(dh, idx, z.shape) * (z > 0)
        pi -= 2
        dh, grads[pi], grads[pi + 1] = conv_backward(da, cols, x_shape, params[pi])
    return grads


@dataclass
class Model:
    spec: ModelSpec
    params: list = field(repr=False)
    seed: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        return cls(spec, init_params(spec, seed), seed=seed, epoch=0)

    def forward(self, x) -> np.ndarray:
        """Block-softmax probabilities ``(N, K, 26)`` for a batch ``(N, C, H, W)``."""
        return _forward(self.spec, self.params, x)[0]

    def loss_and_grads(self, x, target):
        probs, cache = _forward(self.spec, self.params, x)
        target = np.asarray(target, dtype=float).reshape(probs.shape)
        loss = cross_entropy(probs, target)
        return loss, _backward(self.spec, self.params, probs, target, cache)

    def predict(self, x, batch_size: int = 32) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.k, self.spec.n_bins))


def forward(model: Model, image) -> MultiAltitudeTarget:
    """Predict the distributions of a single raster."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    probs = model.forward(data[None])
    return MultiAltitudeTarget(tuple(model.spec.altitudes), probs[0])


def loss(pred, target) -> float:
    return cross_entropy(
        getattr(pred, "distributions", pred), getattr(target, "distributions", target)
    )


def backward(model: Model, image, target) -> list:
    """Gradients of :func:`loss` w.r.t. every parameter, in declaration order."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    t = np.asarray(getattr(target, "distributions", target), dtype=float)
    if data.ndim == 3:
        data, t = data[None], t[None]
    return model.loss_and_grads(data, t)[1]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.7
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """``v <- mu v - lr g``; ``theta <- theta + v``, in place."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g
        p += v


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    images: np.ndarray,
    targets: np.ndarray,
    split: tuple,
    config: TrainConfig = TrainConfig(),
    spec: Optional[ModelSpec] = None,
    model: Optional[Model] = None,
):
    """Fit a model with minibatch SGD + momentum.

    Parameters
    ----------
    images : ndarray, shape (N, C, H, W)
    targets : ndarray, shape (N, K, 26)
    split : (train_indices, test_indices)
    config : TrainConfig
    spec : ModelSpec, optional
        Architecture for a fresh model; defaults to :meth:`ModelSpec.default`.
    model : Model, optional
        Continue from this model instead of initializing a new one.

    Returns
    -------
    model : Model
    history : list of dict
        One entry per epoch with ``epoch``, ``train_loss`` and ``test_mse``
        (per-altitude array, empty when there is no test split).
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    train_idx = np.asarray(split[0], dtype=np.int64)
    test_idx = np.asarray(split[1], dtype=np.int64)
    if train_idx.size == 0:
        raise ConfigurationError("training split is empty")
    if model is None:
        if spec is None:
            spec = ModelSpec.default(images.shape[1:])
        model = Model.create(spec, seed=config.seed)
    if targets.shape[1:] != (model.spec.k, model.spec.n_bins):
        raise ConsistencyError(f"targets {targets.shape[1:]} do not match model output")

    velocity = [np.zeros_like(p) for p in model.params]
    history = []
    for epoch in range(model.epoch + 1, model.epoch + config.epochs + 1):
        order = train_idx[epoch_order(train_idx.size, config.seed, epoch)]
        total = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            batch_loss, grads = model.loss_and_grads(images[batch], targets[batch])
            if not math.isfinite(batch_loss):
                raise TrainingError("loss is not finite", epoch)
            sgd_momentum_step(model.params, grads, velocity, config.learning_rate, config.momentum)
            total += batch_loss * batch.size
        model.epoch = epoch
        train_loss = total / order.size
        if not math.isfinite(train_loss) or not all(np.isfinite(p).all() for p in model.params):
            raise TrainingError("parameters diverged", epoch)
        test_mse = (
            mse_per_altitude(targets[test_idx], model.predict(images[test_idx]))
            if test_idx.size
            else np.zeros(0)
        )
        history.append({"epoch": epoch, "train_loss": train_loss, "test_mse": test_mse})
        log.debug("epoch %d train_loss %.6f test_mse %s", epoch, train_loss, test_mse)
    return model, history


def write_history_csv(path, history: Sequence[dict], altitudes: Sequence[float]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(["epoch", "train_loss"] + [f"test_mse_{a:g}m" for a in altitudes]) + "\n")
        for h in history:
            row = [str(h["epoch"]), repr(float(h["train_loss"]))]
            row += [repr(float(v)) for v in h["test_mse"]]
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: Model) -> bytes:
    header = json.dumps(
        {"spec": model.spec.to_dict(), "seed": model.seed, "epoch": model.epoch}, sort_keys=True
    ).encode()
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + body


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    return checkpoint_from_bytes(raw)


def checkpoint_from_bytes(raw: bytes) -> Model:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConsistencyError("not a skyloss checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    offset = 16 + hlen
    params = []
    expected = offset + 8 * sum(int(np.prod(shape)) for _, shape in spec.param_shapes())
    if expected != len(raw):
        raise ConsistencyError("checkpoint size does not match its spec")
    for _, shape in spec.param_shapes():
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params.append(arr.astype(np.float64).reshape(shape))
        offset += 8 * count
    return Model(spec, params, seed=int(header["seed"]), epoch=int(header["epoch"]))
