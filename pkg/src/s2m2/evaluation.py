"""Episodic N-way K-shot evaluation, robustness probes, saliency and feature export."""

from __future__ import annotations

import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PERTURBATIONS, ImageDataset, perturb
from .errors import ConfigurationError, FormatError, ValidationError
from .model import Backbone, CosineClassifier, FewShotModel
from .optim import Adam
from .tensor import Tensor, no_grad, softmax_cross_entropy

FEATURE_MAGIC = b"FSF1"


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    tasks: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1 or self.tasks < 1:
            raise ValidationError(f"invalid episode spec {self}")


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 100
    lr: float = 1e-2
    scale: float = 10.0


@dataclass
class Episode:
    classes: np.ndarray
    support: np.ndarray
    query: np.ndarray
    support_labels: np.ndarray
    query_labels: np.ndarray


def episode_rng(seed: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(task_index)]))


def sample_episode(labels, classes, spec: EpisodeSpec, task_index: int) -> Episode:
    """Draw one task; depends only on (spec.seed, task_index)."""
    labels = np.asarray(labels)
    classes = np.array(sorted(int(c) for c in classes))
    if spec.n_way > len(classes):
        raise ConfigurationError(f"{spec.n_way}-way episodes need {spec.n_way} classes, have {len(classes)}")
    rng = episode_rng(spec.seed, task_index)
    chosen = rng.choice(classes, spec.n_way, replace=False)
    per_class = spec.k_shot + spec.n_query
    support, query = [], []
    for c in chosen:
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            raise ConfigurationError(f"class {c} has {len(pool)} images; episodes need {per_class}")
        picked = rng.choice(pool, per_class, replace=False)
        support.append(picked[:spec.k_shot])
        query.append(picked[spec.k_shot:])
    local = np.arange(spec.n_way)
    return Episode(chosen, np.concatenate(support), np.concatenate(query),
                   np.repeat(local, spec.k_shot), np.repeat(local, spec.n_query))


def embed(backbone: Backbone, images, batch_size: int = 256) -> np.ndarray:
    """Features of ``images`` under the frozen backbone, no graph recorded."""
    images = np.asarray(images)
    with no_grad():
        chunks = [backbone.features(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, backbone.feature_dim))


def fit_cosine_classifier(features, labels, n_way: int, config: AdaptConfig = AdaptConfig(),
                          seed=0) -> CosineClassifier:
    """Train a fresh N-way cosine classifier on fixed features (full batch, Adam)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    clf = CosineClassifier(n_way, features.shape[1], scale=config.scale, seed=seed)
    opt = Adam(clf.parameters(), lr=config.lr)
    z = Tensor(features)
    for _ in range(config.steps):
        opt.zero_grad()
        softmax_cross_entropy(clf(z), labels).backward()
        opt.step()
    return clf


def predict(classifier: CosineClassifier, features) -> np.ndarray:
    with no_grad():
        return np.argmax(classifier(Tensor(features)).data, axis=1)


def adapt(backbone: Backbone, images, labels, n_way: int, config: AdaptConfig = AdaptConfig(),
          seed=0) -> CosineClassifier:
    """Novel-class classifier on top of the frozen backbone."""
    return fit_cosine_classifier(embed(backbone, images), labels, n_way, config, seed)


def ci95(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    if len(acc) < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(len(acc)))


@dataclass
class EvalReport:
    accuracies: np.ndarray
    spec: EpisodeSpec
    dataset: str = ""
    checkpoint: str = ""
    wall_ms: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return ci95(self.accuracies)

    def to_record(self) -> dict:
        return dict(n_way=self.spec.n_way, k_shot=self.spec.k_shot, q=self.spec.n_query,
                    tasks=self.spec.tasks, mean=self.mean, ci95=self.ci95, seed=self.spec.seed,
                    dataset=self.dataset, backbone_checkpoint=self.checkpoint, wall_ms=self.wall_ms)


def _run_task(features, labels, classes, spec, config, t) -> float:
    ep = sample_episode(labels, classes, spec, t)
    clf = fit_cosine_classifier(features[ep.support], ep.support_labels, spec.n_way, config,
                                seed=[spec.seed, t, 1])
    return float(np.mean(predict(clf, features[ep.query]) == ep.query_labels))


def evaluate(backbone: Backbone, dataset: ImageDataset, classes, spec: EpisodeSpec,
             config: AdaptConfig = AdaptConfig(), n_jobs: int = 1, dataset_name: str = "",
             checkpoint_name: str = "") -> EvalReport:
    """Mean query accuracy over ``spec.tasks`` episodes drawn from ``classes``.

    The backbone is frozen, so every candidate image is embedded once up front;
    tasks then only fit and score a cosine classifier. Results are reduced in
    task order, so ``n_jobs`` never changes the report.
    """
    start = time.perf_counter()
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ConfigurationError("no classes to evaluate on")
    idx = dataset.indices_of(classes)
    features = np.zeros((len(dataset), backbone.feature_dim))
    features[idx] = embed(backbone, dataset.images[idx])
    labels = np.full(len(dataset), -1)
    labels[idx] = dataset.labels[idx]

    def job(t):
        return _run_task(features, labels, classes, spec, config, t)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            accs = list(pool.map(job, range(spec.tasks)))
    else:
        accs = [job(t) for t in range(spec.tasks)]
    return EvalReport(np.array(accs), spec, dataset_name, checkpoint_name,
                      wall_ms=(time.perf_counter() - start) * 1000.0)


# -- input-gradient probes ----------------------------------------------------

def _forward_of(model):
    if isinstance(model, FewShotModel):
        return model.logits, model.parameters()
    return model, []


def input_gradient(model, x, y) -> np.ndarray:
    """d CE(model(x), y) / dx for a batch ``x``; parameter grads are left zeroed."""
    forward, params = _forward_of(model)
    xt = Tensor(x, requires_grad=True)
    softmax_cross_entropy(forward(xt), np.asarray(y)).backward()
    for p in params:
        p.zero_grad()
    return xt.grad


def fgsm_attack(model, x, y, epsilon: float) -> np.ndarray:
    """clip(x + epsilon * sign(grad_x CE), 0, 1)."""
    if epsilon < 0:
        raise ValidationError(f"epsilon must be non-negative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    return np.clip(x + epsilon * np.sign(input_gradient(model, x, y)), 0.0, 1.0)


def accuracy(model, x, y, batch_size: int = 256) -> float:
    forward, _ = _forward_of(model)
    x, y = np.asarray(x), np.asarray(y)
    correct = 0
    with no_grad():
        for i in range(0, len(x), batch_size):
            correct += int(np.sum(np.argmax(forward(x[i:i + batch_size]).data, axis=1) == y[i:i + batch_size]))
    return correct / len(x)


@dataclass
class RobustnessTable:
    severities: tuple
    rows: list = field(default_factory=list)  # (name, [accuracy per column])

    def row(self, name: str) -> list:
        return dict(self.rows)[name]


def robustness_eval(model, x, y, kinds=PERTURBATIONS, severities=(0, 1, 2, 3, 4, 5),
                    epsilon: float = 1.0 / 255.0, batch_size: int = 100) -> RobustnessTable:
    """Accuracy on clean, FGSM-attacked and corrupted copies of (x, y).

    The clean and FGSM rows hold a single value; each corruption row holds one
    accuracy per severity (severity 0 being the identity).
    """
    x, y = np.asarray(x), np.asarray(y)
    table = RobustnessTable(tuple(severities))
    table.rows.append(("clean", [accuracy(model, x, y)]))
    adv = np.concatenate([fgsm_attack(model, x[i:i + batch_size], y[i:i + batch_size], epsilon)
                          for i in range(0, len(x), batch_size)])
    table.rows.append(("fgsm", [accuracy(model, adv, y)]))
    for kind in kinds:
        table.rows.append((kind, [accuracy(model, perturb(x, kind, s), y) for s in severities]))
    return table


def saliency_mask(model, image, label: int, percentile: float = 1.0) -> np.ndarray:
    """Boolean (H, W) mask of the top ``percentile`` % pixels by |grad| (max over channels).

    Exactly ceil(percentile/100 * H * W) pixels are set; ties go to the
    earlier pixel in row-major order.
    """
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    image = np.asarray(image, dtype=np.float64)
    grad = input_gradient(model, image[None], [label])[0]
    magnitude = np.abs(grad).max(axis=0)
    h, w = magnitude.shape
    count = min(h * w, math.ceil(percentile * h * w / 100.0 - 1e-9))
    order = np.argsort(-magnitude.ravel(), kind="stable")
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(h, w)


# -- feature export ------------------------------------------------------------

@dataclass
class FeatureDump:
    class_ids: np.ndarray
    features: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def export_features(backbone: Backbone, dataset: ImageDataset, classes=None) -> FeatureDump:
    idx = np.arange(len(dataset)) if classes is None else dataset.indices_of(classes)
    feats = embed(backbone, dataset.images[idx]) if len(idx) else np.zeros((0, backbone.feature_dim))
    return FeatureDump(dataset.labels[idx].copy(), feats.astype(np.float32))


def save_features(dump: FeatureDump, path) -> None:
    n, dim = dump.features.shape
    records = np.empty(n, dtype=np.dtype([("label", "<u4"), ("feature", "<f4", (dim,))]))
    records["label"] = dump.class_ids
    records["feature"] = dump.features
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", n, dim) + records.tobytes())


def load_features(path) -> FeatureDump:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature-dump magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError("truncated header", offset=len(blob))
    n, dim = struct.unpack_from("<II", blob, 4)
    dtype = np.dtype([("label", "<u4"), ("feature", "<f4", (dim,))])
    if len(blob) != 12 + n * dtype.itemsize:
        raise FormatError("feature dump size does not match its header", offset=min(len(blob), 12 + n * dtype.itemsize))
    records = np.frombuffer(blob, dtype=dtype, offset=12, count=n)
    return FeatureDump(records["label"].astype(np.int64), records["feature"].copy())
