"""Target classifier (doubling as the noise feature extractor) and the
denoising autoencoder, both built on :mod:`noisec.numcore`."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .formats import decode_nsck, encode_nsck

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes, self.split)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    sigma: float = 0.0
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr < 0 or self.sigma < 0:
            raise ValueError(f"invalid training config {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierArch:
    input_shape: tuple[int, int, int]
    num_classes: int
    feature_dim: int
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)

    def conv_output_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        for s in self.strides:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return self.channels[-1], h, w


class Classifier:
    """Conv blocks -> ReLU feature layer -> linear output layer.

    One forward pass yields both the logits and the penultimate feature vector.
    """

    def __init__(self, arch: ClassifierArch, params: Params):
        self.arch = arch
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def tensors(self, requires_grad: bool = False) -> dict[str, nc.Tensor]:
        return {k: nc.Tensor(v, requires_grad) for k, v in self.params.items()}

    def forward(self, x, p: dict[str, nc.Tensor] | None = None) -> tuple[nc.Tensor, nc.Tensor]:
        x = nc.as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {self.arch.input_shape}")
        p = p or self.tensors()
        h = x
        for i, s in enumerate(self.arch.strides):
            h = nc.relu(nc.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=s, padding=1))
        feats = nc.relu(nc.linear(nc.flatten(h), p["feat.w"], p["feat.b"]))
        logits = nc.linear(feats, p["out.w"], p["out.b"])
        return logits, feats

    def head(self, feats: np.ndarray) -> np.ndarray:
        """Apply the output layer to feature vectors."""
        return nc.linear(nc.Tensor(feats), nc.Tensor(self.params["out.w"]), nc.Tensor(self.params["out.b"])).data

    def infer(self, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Logits and features for a batch of images, no tape."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        logits, feats = [], []
        for sl in _batches(len(x), batch_size):
            lg, ft = self.forward(x[sl])
            logits.append(lg.data)
            feats.append(ft.data)
        lg, ft = np.concatenate(logits), np.concatenate(feats)
        return (lg[0], ft[0]) if single else (lg, ft)

    def state_dict(self) -> Params:
        a = self.arch
        meta = {
            "arch.input_shape": np.array(a.input_shape, np.float32),
            "arch.num_classes": np.array([a.num_classes], np.float32),
            "arch.feature_dim": np.array([a.feature_dim], np.float32),
            "arch.channels": np.array(a.channels, np.float32),
            "arch.strides": np.array(a.strides, np.float32),
        }
        return {**meta, **self.params}


def build_classifier(
    input_shape, num_classes: int, feature_dim: int = 256, seed: int = 0, channels=(16, 32, 64), strides=None
) -> Classifier:
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape) <= 0:
        raise ValueError(f"input shape must be (C, H, W), got {input_shape}")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if feature_dim < num_classes:
        raise ValueError(f"feature_dim ({feature_dim}) must be >= class count ({num_classes})")
    channels = tuple(channels)
    strides = tuple(strides) if strides is not None else (1,) + (2,) * (len(channels) - 1)
    if len(strides) != len(channels):
        raise ValueError("channels and strides differ in length")
    arch = ClassifierArch(input_shape, num_classes, feature_dim, channels, strides)
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = input_shape[0]
    for i, c in enumerate(channels):
        params[f"conv{i}.w"] = _he(rng, (c, c_in, 3, 3), c_in * 9)
        params[f"conv{i}.b"] = np.zeros(c, np.float32)
        c_in = c
    flat = int(np.prod(arch.conv_output_shape()))
    params["feat.w"] = _he(rng, (feature_dim, flat), flat)
    params["feat.b"] = np.zeros(feature_dim, np.float32)
    params["out.w"] = (rng.standard_normal((num_classes, feature_dim)) * np.sqrt(1.0 / feature_dim)).astype(np.float32)
    params["out.b"] = np.zeros(num_classes, np.float32)
    return Classifier(arch, params)


def predict(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Softmax confidence vector(s)."""
    logits, _ = model.infer(x)
    return nc.softmax(logits)


def features(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer feature vector(s)."""
    return model.infer(x)[1]


def accuracy(model: Classifier, data: LabeledDataset) -> float:
    if not len(data):
        return float("nan")
    logits, _ = model.infer(data.images)
    return float(np.mean(logits.argmax(axis=1) == data.labels))


class _Optimizer:
    """SGD (optionally with heavy-ball momentum) or Adam over a parameter dict.

    Parameters are replaced, never modified in place, so arrays handed out
    earlier (e.g. to a checkpoint) stay valid.
    """

    def __init__(self, params: Params, config: TrainConfig):
        self.params = params
        self.kind = config.optimizer
        self.lr, self.momentum = np.float32(config.lr), np.float32(config.momentum)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if self.kind == "adam" else {}
        self.t = 0

    def step(self, live: dict[str, nc.Tensor]):
        self.t += 1
        for k, tensor in live.items():
            g = tensor.grad
            if g is None:
                continue
            if self.kind == "sgd":
                m = self.m[k]
                m *= self.momentum
                m += g
                self.params[k] = self.params[k] - self.lr * m
                continue
            m, v = self.m[k], self.v[k]
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            mhat = m / np.float32(1 - 0.9**self.t)
            vhat = v / np.float32(1 - 0.999**self.t)
            self.params[k] = self.params[k] - self.lr * mhat / (np.sqrt(vhat) + np.float32(1e-8))


def train_classifier(model: Classifier, data: LabeledDataset, config: TrainConfig) -> TrainHistory:
    """Minibatch SGD on cross-entropy. Mutates ``model.params`` in place."""
    if not len(data):
        raise ValueError("empty training set")
    if data.image_shape != model.arch.input_shape:
        raise ValueError(f"dataset images {data.image_shape} do not match model input {model.arch.input_shape}")
    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(model.params, config)
    hist = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total, correct = 0.0, 0
        for sl in _batches(len(data), config.batch_size):
            idx = order[sl]
            xb, yb = data.images[idx], data.labels[idx]
            try:
                p = model.tensors(requires_grad=True)
                logits, _ = model.forward(xb, p)
                loss = nc.cross_entropy(logits, yb)
                nc.backward(loss)
            except nc.NumericError as err:
                raise nc.NumericError(f"classifier training diverged in epoch {epoch}: {err}") from err
            opt.step(p)
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        hist.loss.append(total / len(data))
        hist.accuracy.append(correct / len(data))
        log.info("classifier epoch %d loss %.4f acc %.3f", epoch, hist.loss[-1], hist.accuracy[-1])
    if config.epochs == 0:
        hist.accuracy.append(accuracy(model, data))
    return hist


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AutoencoderArch:
    input_shape: tuple[int, int, int]
    bottleneck: int
    channels: tuple[int, int, int] = (16, 32, 64)

    @property
    def encoder_strides(self) -> tuple[int, ...]:
        return (1, 1, 2, 1, 2, 1)

    def encoder_channels(self) -> tuple[int, ...]:
        a, b, c = self.channels
        return (a, a, b, b, c, c)

    def grid(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        return self.channels[2], h // 4, w // 4


class Autoencoder:
    """Six conv layers -> linear bottleneck -> linear -> six transposed convs.

    Same proportions as the reference CIFAR-10 design (32/32/64/64/128/128,
    bottleneck = input_dim / 3) with configurable channel widths.
    """

    def __init__(self, arch: AutoencoderArch, params: Params):
        self.arch = arch
        self.params = params

    def tensors(self, requires_grad: bool = False) -> dict[str, nc.Tensor]:
        return {k: nc.Tensor(v, requires_grad) for k, v in self.params.items()}

    def forward(self, x, p: dict[str, nc.Tensor] | None = None) -> nc.Tensor:
        """Raw decoder output (unclamped)."""
        x = nc.as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match autoencoder input {self.arch.input_shape}")
        p = p or self.tensors()
        h = x
        for i, s in enumerate(self.arch.encoder_strides):
            h = nc.relu(nc.conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=s))
        z = nc.linear(nc.flatten(h), p["bottleneck.w"], p["bottleneck.b"])
        h = nc.relu(nc.linear(z, p["expand.w"], p["expand.b"]))
        h = nc.reshape(h, (x.shape[0],) + self.arch.grid())
        for i, s in enumerate(_DECODER_STRIDES):
            h = nc.conv_transpose2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=s, output_padding=s - 1)
            if i < len(_DECODER_STRIDES) - 1:
                h = nc.relu(h)
        return h

    def state_dict(self) -> Params:
        a = self.arch
        meta = {
            "arch.input_shape": np.array(a.input_shape, np.float32),
            "arch.bottleneck": np.array([a.bottleneck], np.float32),
            "arch.channels": np.array(a.channels, np.float32),
        }
        return {**meta, **self.params}


_DECODER_STRIDES = (1, 2, 1, 2, 1, 1)


def build_autoencoder(input_shape, bottleneck: int | None = None, channels=(16, 32, 64), seed: int = 0) -> Autoencoder:
    c, h, w = (int(v) for v in input_shape)
    if h % 4 or w % 4:
        raise ValueError("autoencoder needs spatial sides divisible by 4")
    bottleneck = bottleneck or (c * h * w) // 3
    arch = AutoencoderArch((c, h, w), int(bottleneck), tuple(channels))
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = c
    for i, co in enumerate(arch.encoder_channels()):
        params[f"enc{i}.w"] = _he(rng, (co, c_in, 3, 3), c_in * 9)
        params[f"enc{i}.b"] = np.zeros(co, np.float32)
        c_in = co
    flat = int(np.prod(arch.grid()))
    params["bottleneck.w"] = (rng.standard_normal((arch.bottleneck, flat)) * np.sqrt(1.0 / flat)).astype(np.float32)
    params["bottleneck.b"] = np.zeros(arch.bottleneck, np.float32)
    params["expand.w"] = _he(rng, (flat, arch.bottleneck), arch.bottleneck)
    params["expand.b"] = np.zeros(flat, np.float32)
    a, b, cc = arch.channels
    dec_channels = (cc, b, b, a, a, c)
    c_in = cc
    for i, co in enumerate(dec_channels):
        # transposed-conv fan-in: each output pixel sees ~c_in*9/stride^2 inputs
        fan = c_in * 9 // (_DECODER_STRIDES[i] ** 2)
        scale = np.sqrt(2.0 / fan) if i < len(dec_channels) - 1 else np.sqrt(1.0 / fan)
        params[f"dec{i}.w"] = (rng.standard_normal((c_in, co, 3, 3)) * scale).astype(np.float32)
        params[f"dec{i}.b"] = np.zeros(co, np.float32)
        c_in = co
    return Autoencoder(arch, params)


def train_autoencoder(
    data: LabeledDataset,
    config: TrainConfig,
    ae: Autoencoder | None = None,
    channels=(16, 32, 64),
    bottleneck: int | None = None,
) -> tuple[Autoencoder, list[float]]:
    """Denoising training: minimise MSE(A(x + N(0, sigma^2)), x).

    Corruption is re-sampled for every minibatch.  Returns the model and the
    per-epoch mean training loss.
    """
    if not len(data):
        raise ValueError("empty training set")
    ae = ae or build_autoencoder(data.image_shape, bottleneck, channels, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = _Optimizer(ae.params, config)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for sl in _batches(len(data), config.batch_size):
            clean = data.images[order[sl]]
            noisy = clean
            if config.sigma > 0:
                noisy = clean + rng.normal(0.0, config.sigma, clean.shape).astype(np.float32)
            try:
                p = ae.tensors(requires_grad=True)
                loss = nc.mse(ae.forward(noisy, p), clean)
                nc.backward(loss)
            except nc.NumericError as err:
                raise nc.NumericError(f"autoencoder training diverged in epoch {epoch}: {err}") from err
            opt.step(p)
            total += loss.item() * len(clean)
        losses.append(total / len(data))
        log.info("autoencoder epoch %d mse %.5f", epoch, losses[-1])
    return ae, losses


def reconstruct(ae: Autoencoder, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """A(x), clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = np.concatenate([np.clip(ae.forward(x[sl]).data, 0.0, 1.0) for sl in _batches(len(x), batch_size)])
    return out[0] if single else out


def recon_noise(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    """Reconstruction residual x - A(x); deliberately not clamped."""
    x = np.asarray(x, dtype=np.float32)
    return x - reconstruct(ae, x)


def reconstruction_mse(ae: Autoencoder, data: LabeledDataset) -> float:
    return float(np.mean((reconstruct(ae, data.images) - data.images) ** 2))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: Classifier | Autoencoder, config_hash: str | None = None) -> bytes:
    return encode_nsck(model.state_dict(), config_hash)


def model_from_entries(entries: Params) -> Classifier | Autoencoder:
    ints = lambda k: tuple(int(v) for v in entries.pop(k))  # noqa: E731
    if "arch.bottleneck" in entries:
        arch = AutoencoderArch(ints("arch.input_shape"), ints("arch.bottleneck")[0], ints("arch.channels"))
        return Autoencoder(arch, entries)
    if "arch.num_classes" in entries:
        arch = ClassifierArch(
            ints("arch.input_shape"),
            ints("arch.num_classes")[0],
            ints("arch.feature_dim")[0],
            ints("arch.channels"),
            ints("arch.strides"),
        )
        return Classifier(arch, entries)
    raise ValueError("checkpoint carries no architecture record")


def save_checkpoint(model: Classifier | Autoencoder, path, config_hash: str | None = None) -> bytes:
    raw = checkpoint_bytes(model, config_hash)
    Path(path).write_bytes(raw)
    return raw


def load_checkpoint(path) -> Classifier | Autoencoder:
    entries, _ = decode_nsck(Path(path).read_bytes())
    return model_from_entries(entries)


def arch_summary(model: Classifier | Autoencoder) -> dict:
    return {"kind": type(model).__name__, **asdict(model.arch)}
