"""A small convolutional binary classifier (normal vs. diseased) in plain numpy.

Architecture::

    conv(3->8, 3x3, pad 1) - relu - maxpool2
    conv(8->16, 3x3, pad 1) - relu - maxpool2
    conv(16->32, 3x3, pad 1) - relu - global average pool
    dense(32->2)

Class index 0 is *normal*, 1 is *diseased*.  Besides logits the model exposes
gradients with respect to its input image, which is what mask optimisation needs.

Two interchangeable backends evaluate the network: ``"numpy"`` runs the
reference kernels of :mod:`hspi.tensor`; ``"torch"`` (used by default when
PyTorch is installed) runs the same network through ``torch.nn.functional``,
which is several times faster on CPU for the inner mask-training loop.
Training always uses the numpy kernels.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import CheckpointError, CheckpointVersionError, ConfigError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

NORMAL, DISEASED = 0, 1
CLASS_NAMES = ("normal", "diseased")

MAGIC = b"HSPC"
FORMAT_VERSION = 1

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "dense_w", "dense_b")


@dataclass
class ClassifierModel:
    input_size: tuple[int, int] = (64, 64)
    channels: tuple[int, int, int] = (8, 16, 32)
    n_classes: int = 2
    params: dict[str, np.ndarray] = field(default_factory=dict)
    _torch: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ConfigError(f"input size must be divisible by 4, got {h}x{w}")
        self.input_size = (int(h), int(w))
        self.channels = tuple(int(c) for c in self.channels)
        if not self.params:
            self.params = _zero_params(self.channels, self.n_classes, np.float32)

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def architecture(self) -> dict:
        return {
            "name": "conv3-gap-dense",
            "input": [self.input_size[0], self.input_size[1], 3],
            "channels": list(self.channels),
            "n_classes": self.n_classes,
        }

    def astype(self, dtype) -> "ClassifierModel":
        """Copy of the model with parameters cast to ``dtype`` (float64 for gradient checks)."""
        return ClassifierModel(
            self.input_size,
            self.channels,
            self.n_classes,
            {k: v.astype(dtype) for k, v in self.params.items()},
        )

    def copy(self) -> "ClassifierModel":
        return self.astype(self.dtype)


def _zero_params(channels, n_classes, dtype) -> dict[str, np.ndarray]:
    c1, c2, c3 = channels
    shapes = {
        "conv1_w": (3, 3, 3, c1),
        "conv1_b": (c1,),
        "conv2_w": (3, 3, c1, c2),
        "conv2_b": (c2,),
        "conv3_w": (3, 3, c2, c3),
        "conv3_b": (c3,),
        "dense_w": (c3, n_classes),
        "dense_b": (n_classes,),
    }
    return {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}


def init_model(seed: int = 0, input_size=(64, 64), channels=(8, 16, 32)) -> ClassifierModel:
    """He-normal conv weights, zero biases and a zero-initialised dense head."""
    rng = np.random.default_rng(seed)
    model = ClassifierModel(tuple(input_size), tuple(channels))
    for name in ("conv1_w", "conv2_w", "conv3_w"):
        w = model.params[name]
        fan_in = w.shape[0] * w.shape[1] * w.shape[2]
        model.params[name] = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return model


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _as_batch(model: ClassifierModel, images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    h, w = model.input_size
    if images.ndim != 4 or images.shape[1:] != (h, w, 3):
        raise ShapeError(f"expected image(s) of shape {h}x{w}x3, got {images.shape}")
    return images.astype(model.dtype, copy=False), single


def _forward(model: ClassifierModel, x: np.ndarray):
    # relu commutes with max pooling, so pooling first is the same function with cheaper relus
    p = model.params
    caches = []
    z = x
    for k in (1, 2):
        z, c = T.conv2d_forward(z, p[f"conv{k}_w"], p[f"conv{k}_b"])
        caches.append(c)
        z, c = T.maxpool2_forward(z)
        caches.append(c)
        z, c = T.relu_forward(z)
        caches.append(c)
    z, c = T.conv2d_forward(z, p["conv3_w"], p["conv3_b"])
    caches.append(c)
    z, c = T.relu_forward(z)
    caches.append(c)
    z, c = T.global_avg_pool_forward(z)
    caches.append(c)
    z, c = T.dense_forward(z, p["dense_w"], p["dense_b"])
    caches.append(c)
    return z, caches


def _backward(caches, dlogits: np.ndarray, param_grads: bool):
    (c1, p1, r1, c2, p2, r2, c3, r3, gap, fc) = caches
    grads = {}
    d, grads["dense_w"], grads["dense_b"] = T.dense_backward(dlogits, fc, param_grads)
    d = T.global_avg_pool_backward(d, gap)
    d = T.relu_backward(d, r3)
    d, grads["conv3_w"], grads["conv3_b"] = T.conv2d_backward(d, c3, param_grads)
    d = T.relu_backward(d, r2)
    d = T.maxpool2_backward(d, p2)
    d, grads["conv2_w"], grads["conv2_b"] = T.conv2d_backward(d, c2, param_grads)
    d = T.relu_backward(d, r1)
    d = T.maxpool2_backward(d, p1)
    d, grads["conv1_w"], grads["conv1_b"] = T.conv2d_backward(d, c1, param_grads)
    return d, grads


try:
    import torch
    import torch.nn.functional as F
except ImportError:  # pragma: no cover - torch is optional
    torch = None

DEFAULT_BACKEND = "torch" if torch is not None else "numpy"


def _resolve_backend(backend: str | None) -> str:
    backend = backend or DEFAULT_BACKEND
    if backend not in ("numpy", "torch"):
        raise ConfigError(f"unknown backend {backend!r}")
    if backend == "torch" and torch is None:
        raise ConfigError("the torch backend needs PyTorch installed")
    return backend


def _torch_params(model: ClassifierModel) -> dict:
    key = tuple((k, v.ctypes.data, v.dtype.str) for k, v in model.params.items())
    if model._torch.get("key") != key:
        tp = {}
        for k, v in model.params.items():
            if v.ndim == 4:
                v = v.transpose(3, 2, 0, 1)  # kh x kw x C x O -> O x C x kh x kw
            tp[k] = torch.from_numpy(np.ascontiguousarray(v))
        model._torch.clear()
        model._torch.update(key=key, params=tp)
    return model._torch["params"]


def _torch_forward(model: ClassifierModel, x):
    p = _torch_params(model)
    z = x
    for k in (1, 2):
        z = F.relu(F.max_pool2d(F.conv2d(z, p[f"conv{k}_w"], p[f"conv{k}_b"], padding=1), 2))
    z = F.relu(F.conv2d(z, p["conv3_w"], p["conv3_b"], padding=1)).mean(dim=(2, 3))
    return z @ p["dense_w"] + p["dense_b"]


def _torch_input(x: np.ndarray, requires_grad: bool):
    t = torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2)  # NCHW view, channels-last memory
    return t.requires_grad_(requires_grad)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(prob: np.ndarray, dprob: np.ndarray) -> np.ndarray:
    return prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))


def forward_logits(
    model: ClassifierModel, images: np.ndarray, softmax: bool = False, backend: str | None = None
) -> np.ndarray:
    """Class scores for one image (``H x W x 3``) or a batch (``N x H x W x 3``).

    Scores are pre-softmax logits unless ``softmax`` is set.
    """
    x, single = _as_batch(model, images)
    if _resolve_backend(backend) == "torch":
        T._check_finite(x, "classifier input")
        with torch.no_grad():
            z = _torch_forward(model, _torch_input(x, False)).numpy()
    else:
        z, _ = _forward(model, x)
    if softmax:
        z = _softmax(z)
    return z[0] if single else z


def predict(model: ClassifierModel, images: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Argmax class index (0 normal, 1 diseased)."""
    return np.argmax(forward_logits(model, images, backend=backend), axis=-1)


def value_and_input_gradient(
    model: ClassifierModel,
    images: np.ndarray,
    upstream_fn: Callable[[np.ndarray], np.ndarray],
    softmax: bool = False,
    backend: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One forward and one backward pass for a batch.

    ``upstream_fn`` maps the ``N x K`` scores to the gradient of some scalar
    with respect to them; the returned input gradient is that scalar's
    gradient with respect to ``images``.
    """
    x, single = _as_batch(model, images)
    if _resolve_backend(backend) == "torch":
        T._check_finite(x, "classifier input")
        xt = _torch_input(x, True)
        zt = _torch_forward(model, xt)
        z = zt.detach().numpy()
        out = _softmax(z) if softmax else z
        up = np.asarray(upstream_fn(out[0] if single else out), dtype=z.dtype).reshape(out.shape)
        if softmax:
            up = _softmax_backward(out, up)
        (gt,) = torch.autograd.grad(zt, xt, grad_outputs=torch.from_numpy(np.ascontiguousarray(up)))
        dx = gt.permute(0, 2, 3, 1).numpy()
        return (out[0], dx[0]) if single else (out, dx)
    z, caches = _forward(model, x)
    out = _softmax(z) if softmax else z
    up = np.asarray(upstream_fn(out[0] if single else out), dtype=z.dtype)
    up = up.reshape(out.shape)
    if softmax:
        up = _softmax_backward(out, up)
    dx, _ = _backward(caches, up, param_grads=False)
    return (out[0], dx[0]) if single else (out, dx)


def input_gradient(
    model: ClassifierModel,
    images: np.ndarray,
    upstream: np.ndarray,
    softmax: bool = False,
    backend: str | None = None,
) -> np.ndarray:
    """Gradient of ``<upstream, f(images)>`` with respect to the images."""
    upstream = np.asarray(upstream)
    x, single = _as_batch(model, images)
    expected = (model.n_classes,) if single else (x.shape[0], model.n_classes)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape}, expected {expected}")
    _, dx = value_and_input_gradient(model, images, lambda _: upstream, softmax, backend)
    return dx


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 25
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    # each training image is multiplied by a gain drawn from this range, so the
    # network judges contrast rather than absolute brightness (masks dim images)
    brightness: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.brightness = tuple(float(v) for v in self.brightness)
        if not 0 < self.brightness[0] <= self.brightness[1]:
            raise ConfigError(f"brightness range {self.brightness} must satisfy 0 < low <= high")
        for name in ("epochs", "batch_size", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.seed < 0:
            raise ConfigError("weight_decay and seed must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class Checkpoint:
    model: ClassifierModel
    metadata: dict = field(default_factory=dict)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def accuracy(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, batch: int = 100) -> float:
    preds = np.concatenate(
        [predict(model, images[i : i + batch], backend="numpy") for i in range(0, len(images), batch)]
    )
    return float(np.mean(preds == labels))


def train(
    model: ClassifierModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    test: tuple[np.ndarray, np.ndarray] | None = None,
) -> Checkpoint:
    """Mini-batch SGD with momentum on the cross-entropy loss.

    The model is updated in place and also returned inside the checkpoint,
    along with train/test accuracy and the per-epoch mean loss.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.intp)
    if len(images) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    if len(images) > 1 and len(np.unique(labels)) < 2:
        raise ConfigError("training data must contain both classes")

    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, _ = _as_batch(model, images[idx])
            lo, hi = config.brightness
            if hi > lo or lo != 1.0:
                x = x * rng.uniform(lo, hi, size=(len(idx), 1, 1, 1)).astype(x.dtype)
            z, caches = _forward(model, x)
            loss, dz = cross_entropy(z, labels[idx])
            _, grads = _backward(caches, dz.astype(model.dtype), param_grads=True)
            for k, p in model.params.items():
                g = grads[k] + config.weight_decay * p
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * g
                p += velocity[k].astype(p.dtype)
                if not np.isfinite(p).all():
                    raise NonFiniteError(f"parameter {k} became non-finite at epoch {epoch}")
            losses.append(loss * len(idx))
        history.append(sum(losses) / len(images))
        log.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1])

    meta = {
        "seed": config.seed,
        "train_config": {**vars(config), "brightness": list(config.brightness)},
        "loss_history": history,
        "train_accuracy": accuracy(model, images, labels),
    }
    if test is not None:
        meta["test_accuracy"] = accuracy(model, np.asarray(test[0], np.float32), np.asarray(test[1]))
    return Checkpoint(model, meta)


# --------------------------------------------------------------------------
# checkpoint file format
# --------------------------------------------------------------------------
#   b"HSPC" | u32 version | u32 header length | JSON header | float32 LE parameter blob


def save(checkpoint: Checkpoint | ClassifierModel, path) -> None:
    if isinstance(checkpoint, ClassifierModel):
        checkpoint = Checkpoint(checkpoint)
    model = checkpoint.model
    header = {
        "architecture": model.architecture(),
        "params": [[k, list(model.params[k].shape)] for k in PARAM_ORDER],
        "metadata": checkpoint.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(model.params[k].astype("<f4").tobytes() for k in PARAM_ORDER)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a classifier checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        arch = header["architecture"]
        specs = header["params"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if arch.get("name") != "conv3-gap-dense":
        raise CheckpointError(f"{path}: unknown architecture {arch.get('name')!r}")

    offset = 12 + hlen
    params = {}
    for name, shape in specs:
        count = int(np.prod(shape))
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated parameter blob at {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after parameter blob")
    if set(params) != set(PARAM_ORDER):
        raise CheckpointError(f"{path}: parameter set {sorted(params)} does not match architecture")
    model = ClassifierModel(tuple(arch["input"][:2]), tuple(arch["channels"]), arch["n_classes"], params)
    return Checkpoint(model, header.get("metadata", {}))


def load(path) -> ClassifierModel:
    return load_checkpoint(path).model
