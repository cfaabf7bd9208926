"""Training objectives: mixing, Manifold Mixup, rotation and exemplar self-supervision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RotationConfig, augment_exemplar
from .errors import DimensionError, UsageError, ValidationError
from .model import Backbone, CosineClassifier, RotationHead, cosine_logits, linear_logits
from .tensor import Tensor, pairwise_sq_distances, softmax_cross_entropy

SELFSUP_VARIANTS = ("rotation", "exemplar", "none")


@dataclass
class MixupSpec:
    alpha: float = 2.0
    layers: tuple = (0, 1, 2, 3)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"mixup alpha must be positive, got {self.alpha}")
        if not self.layers:
            raise ValidationError("mixup needs at least one eligible layer")
        self.layers = tuple(int(l) for l in self.layers)


@dataclass
class SelfSupSpec:
    variant: str = "rotation"
    rotation: RotationConfig = field(default_factory=RotationConfig)
    copies: int = 4

    def __post_init__(self):
        if self.variant not in SELFSUP_VARIANTS:
            raise ValidationError(f"unknown self-supervision variant {self.variant!r}")
        if self.copies < 2:
            raise ValidationError("exemplar training needs at least 2 copies per image")


def mix(a, b, lam: float) -> Tensor:
    """lam * a + (1 - lam) * b."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot mix shapes {a.shape} and {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixing coefficient {lam} outside [0, 1]")
    return a * lam + b * (1.0 - lam)


def sample_mix_coefficient(spec: MixupSpec, rng: np.random.Generator) -> float:
    # Beta(a, a) as a ratio of two Gamma(a) draws
    g1 = rng.standard_gamma(spec.alpha)
    g2 = rng.standard_gamma(spec.alpha)
    return float(g1 / (g1 + g2))


def manifold_mixup_loss(backbone: Backbone, classifier: CosineClassifier, x, y, spec: MixupSpec,
                        rng: np.random.Generator | None = None, *, layer: int | None = None,
                        lam: float | None = None, perm=None) -> Tensor:
    """Cross-entropy on hidden states mixed at one randomly chosen layer.

    ``layer``, ``lam`` and ``perm`` override the random draws (in that order
    of consumption from ``rng``: layer, permutation, coefficient).
    """
    y = np.asarray(y)
    if len(y) < 2:
        raise UsageError("manifold mixup needs a batch of at least 2 examples")
    if layer is None:
        layer = int(spec.layers[rng.integers(len(spec.layers))])
    if perm is None:
        perm = rng.permutation(len(y))
    if lam is None:
        lam = sample_mix_coefficient(spec, rng)
    hidden = backbone.forward_to_layer(x, layer)
    mixed = mix(hidden, hidden.take(perm, axis=0), lam)
    logits = cosine_logits(classifier, backbone.forward_from_layer(mixed, layer))
    return softmax_cross_entropy(logits, y) * lam + softmax_cross_entropy(logits, y[perm]) * (1.0 - lam)


def rotation_loss(backbone: Backbone, head: RotationHead, x, rotation: RotationConfig,
                  features: Tensor | None = None) -> Tensor:
    """Mean CE of the rotation head over every image at every angle.

    ``features`` may carry precomputed features of ``rotation.expand(x)``.
    A single-angle configuration is a one-class problem with loss 0.
    """
    rotated, labels = rotation.expand(np.asarray(x))
    if len(rotation) == 1:
        return Tensor(0.0)
    if features is None:
        features = backbone.features(rotated)
    return softmax_cross_entropy(linear_logits(head, features), labels)


def rotated_class_loss(backbone: Backbone, classifier: CosineClassifier, x, y, rotation: RotationConfig,
                       features: Tensor | None = None) -> Tensor:
    """Class CE averaged over the batch and every rotation; labels survive rotation."""
    y = np.asarray(y)
    if features is None:
        features = backbone.features(rotation.expand(np.asarray(x))[0])
    return softmax_cross_entropy(cosine_logits(classifier, features), np.tile(y, len(rotation)))


def exemplar_copies(x, rng: np.random.Generator, copies: int = 4) -> np.ndarray:
    """``copies`` augmented views per image, source-major: [x0 v1..vk, x1 v1..vk, ...]."""
    x = np.asarray(x)
    return np.stack([augment_exemplar(img, rng) for img in x for _ in range(copies)])


def hard_triplet_soft_margin(embeddings: Tensor, sources) -> Tensor:
    """mean over anchors of ln(1 + exp(max positive distance - min negative distance)).

    Positives share the anchor's source id (the anchor itself excluded);
    negatives are everything else. Distances are Euclidean.
    """
    sources = np.asarray(sources)
    same = sources[:, None] == sources[None, :]
    positive = same & ~np.eye(len(sources), dtype=bool)
    if not positive.any(axis=1).all():
        raise UsageError("every anchor needs at least one positive copy")
    if same.all(axis=1).any():
        raise UsageError("exemplar loss needs at least 2 distinct source images")
    dist = pairwise_sq_distances(embeddings).clamp_min(1e-12).sqrt()
    d_pos = dist.masked_fill(~positive, -np.inf).max(axis=1)
    d_neg = dist.masked_fill(same, np.inf).min(axis=1)
    return (d_pos - d_neg).softplus().mean()


def exemplar_loss(backbone: Backbone, x, rng: np.random.Generator, copies: int = 4,
                  views: np.ndarray | None = None) -> Tensor:
    """Hard-batch soft-margin triplet loss over augmented copies of each image."""
    n_sources = len(x) if views is None else len(views) // copies
    if n_sources < 2:
        raise UsageError("exemplar loss needs at least 2 distinct source images")
    if views is None:
        views = exemplar_copies(x, rng, copies)
    return hard_triplet_soft_margin(backbone.features(views), np.repeat(np.arange(n_sources), copies))


def phase_loss(phase: int, l_class=None, l_ss=None, l_mm=None):
    """Phase 1: L_class + L_ss.  Phase 2: L_mm + 0.5 (L_class + L_ss)."""
    if phase not in (1, 2):
        raise UsageError(f"phase must be 1 or 2, got {phase}")
    if l_class is None or l_ss is None:
        raise UsageError("both the classification and self-supervision terms are required")
    if phase == 1:
        return l_class + l_ss
    if l_mm is None:
        raise UsageError("phase 2 requires the manifold mixup term")
    return l_mm + (l_class + l_ss) * 0.5
