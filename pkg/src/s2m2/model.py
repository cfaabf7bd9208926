"""Backbone feature extractor, cosine classifier, rotation head and checkpoints.

Layer indices of the backbone: 0 is the input batch (B, C, H, W); 1..n are the
post-ReLU activations of conv blocks 1..n in (B, H, W, C) layout; n + 1 is the
pooled feature matrix (B, d).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, UsageError
from .tensor import Tensor, conv2d_nhwc, l2_normalize, matmul

CKPT_MAGIC = b"FSM1"
CKPT_VERSION = 1


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Backbone:
    """Stack of conv(3x3) + bias + ReLU blocks followed by global average pooling."""

    def __init__(self, image_shape=(1, 32, 32), channels=(16, 32, 64, 64), strides=(2, 1, 2, 1),
                 kernel_size: int = 3, mixup_layers=(0, 1, 2, 3), seed: int = 0):
        if len(channels) != len(strides):
            raise DimensionError("one stride per conv block is required")
        self.image_shape = tuple(int(v) for v in image_shape)
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.kernel_size = int(kernel_size)
        self.mixup_layers = tuple(int(l) for l in mixup_layers)
        for l in self.mixup_layers:
            if not 0 <= l <= self.n_blocks:
                raise UsageError(f"mixup layer {l} is not a hidden layer (0..{self.n_blocks})")

        rng = np.random.default_rng([seed, 7])
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = self.image_shape[0]
        for n, c_out in enumerate(self.channels, 1):
            fan_in = c_in * self.kernel_size ** 2
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.kernel_size, self.kernel_size, c_in, c_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"block{n}.weight"))
            self.biases.append(Tensor(np.zeros(c_out), requires_grad=True, name=f"block{n}.bias"))
            c_in = c_out

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def feature_layer(self) -> int:
        return self.n_blocks + 1

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def layer_shape(self, l: int) -> tuple:
        """Per-example shape emitted at layer ``l``."""
        c, h, w = self.image_shape
        if l == 0:
            return (c, h, w)
        if l == self.feature_layer:
            return (self.feature_dim,)
        pad = self.kernel_size - 1
        for s, c_out in zip(self.strides[:l], self.channels[:l]):
            h = (h + pad - self.kernel_size) // s + 1
            w = (w + pad - self.kernel_size) // s + 1
            c = c_out
        return (h, w, c)

    def _check_layer(self, l: int) -> None:
        if not isinstance(l, (int, np.integer)) or not 0 <= l <= self.feature_layer:
            raise UsageError(f"layer {l!r} is not tappable; valid layers are 0..{self.feature_layer}")

    def _run(self, h: Tensor, start: int, stop: int) -> Tensor:
        if start == 0 and stop > 0:
            h = h.transpose(0, 2, 3, 1)
        for b in range(start, min(stop, self.n_blocks)):
            h = conv2d_nhwc(h, self.weights[b], stride=self.strides[b], padding="same")
            h = (h + self.biases[b]).relu()
        if stop == self.feature_layer and start < stop:
            h = h.mean(axis=(1, 2))
        return h

    def forward_to_layer(self, x, l: int) -> Tensor:
        self._check_layer(l)
        x = _as_input(x)
        if x.shape[1:] != self.image_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != backbone image shape {self.image_shape}")
        return self._run(x, 0, l)

    def forward_from_layer(self, h, l: int) -> Tensor:
        self._check_layer(l)
        h = _as_input(h)
        if tuple(h.shape[1:]) != self.layer_shape(l):
            raise DimensionError(f"hidden shape {h.shape[1:]} does not match layer {l} "
                                 f"shape {self.layer_shape(l)}")
        return self._run(h, l, self.feature_layer)

    def features(self, x) -> Tensor:
        return self.forward_to_layer(x, self.feature_layer)

    __call__ = features

    def config(self) -> dict:
        return dict(image_shape=self.image_shape, channels=self.channels, strides=self.strides,
                    kernel_size=self.kernel_size, mixup_layers=self.mixup_layers)


class CosineClassifier:
    """Scaled cosine similarity between features and per-class weight vectors."""

    def __init__(self, n_classes: int, dim: int, scale: float = 10.0, seed=0):
        rng = np.random.default_rng(seed)
        self.scale = float(scale)
        self.weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (n_classes, dim)),
                             requires_grad=True, name="classifier.weight")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def __call__(self, z) -> Tensor:
        return cosine_logits(self, z)


class RotationHead:
    """Linear layer predicting which rotation was applied."""

    def __init__(self, n_angles: int, dim: int, seed=0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_angles, dim)), requires_grad=True,
                             name="rotation.weight")
        self.bias = Tensor(np.zeros(n_angles), requires_grad=True, name="rotation.bias")

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, z) -> Tensor:
        return linear_logits(self, z)


def cosine_logits(classifier: CosineClassifier, z) -> Tensor:
    z = _as_input(z)
    if z.ndim != 2 or z.shape[1] != classifier.weight.shape[1]:
        raise DimensionError(f"features {z.shape} do not match classifier dim {classifier.weight.shape[1]}")
    return matmul(l2_normalize(z, axis=1), l2_normalize(classifier.weight, axis=1).T) * classifier.scale


def linear_logits(head: RotationHead, z) -> Tensor:
    z = _as_input(z)
    if z.ndim != 2 or z.shape[1] != head.weight.shape[1]:
        raise DimensionError(f"features {z.shape} do not match head dim {head.weight.shape[1]}")
    return matmul(z, head.weight.T) + head.bias


@dataclass
class FewShotModel:
    """Backbone plus base-class classifier and optional rotation head."""

    backbone: Backbone
    classifier: CosineClassifier
    rotation_head: RotationHead | None = None
    metadata: dict = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(t.name, t) for t in self.backbone.parameters()]
        named.append(("classifier.weight", self.classifier.weight))
        if self.rotation_head is not None:
            named += [("rotation.weight", self.rotation_head.weight), ("rotation.bias", self.rotation_head.bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def restore(self, state: list[np.ndarray]) -> None:
        for t, value in zip(self.parameters(), state):
            t.data = value.copy()

    def logits(self, x) -> Tensor:
        return self.classifier(self.backbone(x))


def parameter_hash(params) -> str:
    """SHA-256 over shapes and raw bytes of a parameter list."""
    digest = hashlib.sha256()
    for t in params:
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        digest.update(repr(data.shape).encode())
        digest.update(np.ascontiguousarray(data, dtype=np.float64).tobytes())
    return digest.hexdigest()


# -- checkpoint format -------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def save_checkpoint(model: FewShotModel, path, extra: dict | None = None) -> None:
    named = model.named_parameters()
    header = dict(names=[n for n, _ in named],
                  image_shape=model.backbone.image_shape,
                  channels=model.backbone.channels,
                  strides=model.backbone.strides,
                  kernel_size=model.backbone.kernel_size,
                  mixup_layers=model.backbone.mixup_layers,
                  scale=repr(model.classifier.scale))
    header.update(model.metadata)
    header.update(extra or {})
    text = "".join(f"{k} = {_format_value(v)}\n" for k, v in header.items()).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named))]
    for _, t in named:
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[list[np.ndarray], dict]:
    """Raw tensors (file order) and the header key/value strings."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError("truncated checkpoint", offset=pos)
        values = struct.unpack_from(fmt, blob, pos)
        pos += size
        return values

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    tensors = []
    for _ in range(count):
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(blob):
            raise FormatError("truncated tensor data", offset=pos)
        tensors.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    (length,) = take("<I")
    if pos + length != len(blob):
        raise FormatError("header length does not match file size", offset=pos)
    header = {}
    for line in blob[pos:].decode().splitlines():
        key, _, value = line.partition(" = ")
        header[key] = value
    return tensors, header


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v)


def load_checkpoint(path) -> FewShotModel:
    tensors, header = read_checkpoint(path)
    names = header["names"].split(",")
    if len(names) != len(tensors):
        raise FormatError("checkpoint names do not match tensor count")
    values = dict(zip(names, tensors))
    backbone = Backbone(_ints(header["image_shape"]), _ints(header["channels"]), _ints(header["strides"]),
                        int(header["kernel_size"]), _ints(header["mixup_layers"]))
    for t in backbone.parameters():
        t.data = values[t.name]
    w = values["classifier.weight"]
    classifier = CosineClassifier(w.shape[0], w.shape[1], scale=float(header["scale"]))
    classifier.weight.data = w
    head = None
    if "rotation.weight" in values:
        rw = values["rotation.weight"]
        head = RotationHead(rw.shape[0], rw.shape[1])
        head.weight.data = rw
        head.bias.data = values["rotation.bias"]
    reserved = {"names", "image_shape", "channels", "strides", "kernel_size", "mixup_layers", "scale"}
    meta = {k: v for k, v in header.items() if k not in reserved}
    return FewShotModel(backbone, classifier, head, meta)
