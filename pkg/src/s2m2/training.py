"""Two-phase backbone training: self-supervised training, then Manifold Mixup fine-tuning."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ImageDataset, SplitSpec
from .errors import ConfigurationError, NonFiniteError, ValidationError
from .evaluation import AdaptConfig, EpisodeSpec, accuracy, evaluate
from .losses import (MixupSpec, SelfSupSpec, exemplar_copies, exemplar_loss, manifold_mixup_loss,
                     phase_loss, rotated_class_loss, rotation_loss)
from .model import Backbone, CosineClassifier, FewShotModel, RotationHead, cosine_logits
from .optim import make_optimizer
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    max_epochs: int = 400
    batch_size: int = 32
    lr: float | None = None
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    selfsup: SelfSupSpec = field(default_factory=SelfSupSpec)
    mixup: MixupSpec = field(default_factory=MixupSpec)
    phase2: bool = True
    phase2_max_epochs: int = 10
    val_episodes: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 5, 15, 100, 0))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    scale: float = 10.0
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 1, 2, 1)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch size must be at least 2")
        if self.lr is not None and not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if not 1 <= self.epochs <= self.max_epochs:
            raise ValidationError(f"epochs must be in 1..{self.max_epochs}, got {self.epochs}")
        if self.phase2_max_epochs < 1:
            raise ValidationError("phase 2 needs at least one epoch")


def method_name(selfsup: str, phase2: bool) -> str:
    """Conventional name of the (self-supervision, fine-tuning) combination."""
    names = {("none", False): "baseline++", ("rotation", False): "rotation",
             ("exemplar", False): "exemplar", ("none", True): "manifold_mixup",
             ("rotation", True): "s2m2_r", ("exemplar", True): "s2m2_e"}
    return names[(selfsup, phase2)]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    val_acc_prev: float = 0.0
    val_acc_list: list = field(default_factory=list)
    history: list = field(default_factory=list)   # one record per epoch
    step_log: list = field(default_factory=list)  # per-step loss terms

    @property
    def phase2_epochs(self) -> int:
        return sum(1 for r in self.history if r["phase"] == 2)


def phase_rng(seed: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1000 + phase]))


def build_model(image_shape, n_base: int, config: TrainConfig) -> FewShotModel:
    backbone = Backbone(image_shape, config.channels, config.strides, mixup_layers=config.mixup.layers,
                        seed=config.seed)
    classifier = CosineClassifier(n_base, backbone.feature_dim, scale=config.scale, seed=[config.seed, 2])
    head = None
    if config.selfsup.variant == "rotation":
        head = RotationHead(len(config.selfsup.rotation), backbone.feature_dim, seed=[config.seed, 3])
    return FewShotModel(backbone, classifier, head)


def loss_terms(model: FewShotModel, x, y, config: TrainConfig, phase: int, rng: np.random.Generator) -> dict:
    """The loss components of one batch; keys l_class, l_ss and (phase 2) l_mm."""
    variant = config.selfsup.variant
    backbone, classifier = model.backbone, model.classifier
    terms = {}
    if phase == 2:
        terms["l_mm"] = manifold_mixup_loss(backbone, classifier, x, y, config.mixup, rng)
    if variant == "rotation":
        rotation = config.selfsup.rotation
        feats = backbone.features(rotation.expand(x)[0])
        terms["l_class"] = rotated_class_loss(backbone, classifier, x, y, rotation, features=feats)
        terms["l_ss"] = rotation_loss(backbone, model.rotation_head, x, rotation, features=feats)
    else:
        terms["l_class"] = softmax_cross_entropy(cosine_logits(classifier, backbone.features(x)), y)
        if variant == "exemplar":
            views = exemplar_copies(x, rng, config.selfsup.copies)
            terms["l_ss"] = exemplar_loss(backbone, x, rng, config.selfsup.copies, views=views)
        else:
            terms["l_ss"] = 0.0
    return terms


def _value(term) -> float:
    return float(term) if isinstance(term, float) else term.item()


def run_epoch(model: FewShotModel, optimizer, x_all: np.ndarray, y_all: np.ndarray, config: TrainConfig,
              phase: int, rng: np.random.Generator, state: TrainState) -> float:
    """One shuffled pass; returns the mean total loss over its steps."""
    order = rng.permutation(len(y_all))
    totals = []
    for step, start in enumerate(range(0, len(order), config.batch_size), 1):
        idx = order[start:start + config.batch_size]
        if len(idx) < 2:
            continue
        x, y = x_all[idx], y_all[idx]
        terms = loss_terms(model, x, y, config, phase, rng)
        loss = phase_loss(phase, terms["l_class"], terms["l_ss"], terms.get("l_mm"))
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} in phase {phase}, epoch {state.epoch}, step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.step += 1
        record = {k: _value(v) for k, v in terms.items()}
        record.update(phase=phase, epoch=state.epoch, step=state.step, loss=value)
        state.step_log.append(record)
        totals.append(value)
    return float(np.mean(totals))


def _epoch_record(state: TrainState, phase: int, mean_loss: float, started: float, val_acc=None) -> dict:
    steps = [r for r in state.step_log if r["phase"] == phase and r["epoch"] == state.epoch]
    record = dict(phase=phase, epoch=state.epoch, mean_loss=mean_loss)
    for key in ("l_class", "l_ss", "l_mm"):
        if steps and key in steps[0]:
            record[f"mean_{key}"] = float(np.mean([r[key] for r in steps]))
    if val_acc is not None:
        record["val_acc"] = val_acc
    record["wall_ms"] = round((time.perf_counter() - started) * 1000.0, 3)
    return record


def train_phase1(model: FewShotModel, x: np.ndarray, y: np.ndarray, config: TrainConfig,
                 state: TrainState | None = None) -> TrainState:
    """Classification plus self-supervision, ``config.epochs`` epochs."""
    if len(y) == 0:
        raise ConfigurationError("no base-class training images")
    state = state or TrainState()
    rng = phase_rng(config.seed, 1)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.lr, config.momentum)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        state.epoch = epoch
        mean_loss = run_epoch(model, optimizer, x, y, config, 1, rng, state)
        state.history.append(_epoch_record(state, 1, mean_loss, started))
        log.info("phase 1 epoch %d loss %.4f", epoch, mean_loss)
    return state


def validation_accuracy(backbone: Backbone, dataset: ImageDataset, val_classes, spec: EpisodeSpec,
                        config: AdaptConfig = AdaptConfig(), n_jobs: int = 1) -> float:
    """Mean query accuracy over ``spec.tasks`` episodes from the validation classes."""
    if len(val_classes) == 0:
        raise ConfigurationError("validation split is empty")
    return evaluate(backbone, dataset, val_classes, spec, config, n_jobs=n_jobs).mean


def finetune_phase2(model: FewShotModel, x: np.ndarray, y: np.ndarray, config: TrainConfig,
                    val_fn, state: TrainState | None = None) -> TrainState:
    """Manifold Mixup fine-tuning while validation accuracy strictly improves.

    ``val_fn(model) -> float`` scores the model after each epoch. The loop
    stops at the first epoch that does not beat the previous one and rolls the
    parameters back to the last improving epoch. The optimizer starts fresh.
    """
    state = state or TrainState()
    rng = phase_rng(config.seed, 2)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.lr, config.momentum)
    state.val_acc_prev = 0.0
    kept = None
    for epoch in range(1, config.phase2_max_epochs + 1):
        started = time.perf_counter()
        state.epoch = epoch
        mean_loss = run_epoch(model, optimizer, x, y, config, 2, rng, state)
        val_acc = float(val_fn(model))
        state.val_acc_list.append(val_acc)
        state.history.append(_epoch_record(state, 2, mean_loss, started, val_acc))
        log.info("phase 2 epoch %d loss %.4f val_acc %.4f", epoch, mean_loss, val_acc)
        if val_acc > state.val_acc_prev:
            state.val_acc_prev = val_acc
            kept = model.snapshot()
            continue
        if kept is not None:
            model.restore(kept)
        break
    return state


def base_data(dataset: ImageDataset, classes) -> tuple[np.ndarray, np.ndarray]:
    """Images of ``classes`` with labels remapped to 0..len(classes)-1."""
    classes = np.array(sorted(classes))
    idx = dataset.indices_of(classes)
    return dataset.images[idx], np.searchsorted(classes, dataset.labels[idx])


@dataclass
class TrainResult:
    model: FewShotModel
    state: TrainState
    method: str

    def report_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=False) for r in self.state.history]


def run_s2m2(dataset: ImageDataset, splits: SplitSpec, config: TrainConfig, val_fn=None,
             model: FewShotModel | None = None, n_jobs: int = 1) -> TrainResult:
    """Phase 1 then (optionally) phase 2 on the base classes of ``splits``.

    Passing an already phase-1-trained ``model`` skips phase 1. Validation
    episodes use min(N, number of validation classes) ways.
    """
    if not splits.base:
        raise ConfigurationError("base split is empty")
    x, y = base_data(dataset, splits.base)
    state = TrainState()
    if model is None:
        model = build_model(dataset.images.shape[1:], len(splits.base), config)
        train_phase1(model, x, y, config, state)
    if config.phase2:
        if val_fn is None:
            if not splits.val:
                raise ConfigurationError("phase 2 needs validation classes (or an explicit val_fn)")
            spec = config.val_episodes
            if spec.n_way > len(splits.val):
                log.warning("validation uses %d-way episodes: only %d validation classes",
                            len(splits.val), len(splits.val))
                spec = replace(spec, n_way=len(splits.val))
            val_fn = lambda m: validation_accuracy(m.backbone, dataset, splits.val, spec,  # noqa: E731
                                                   config.adapt, n_jobs)
        finetune_phase2(model, x, y, config, val_fn, state)
    model.metadata.update(method=method_name(config.selfsup.variant, config.phase2), seed=config.seed)
    return TrainResult(model, state, method_name(config.selfsup.variant, config.phase2))


def base_accuracy(model: FewShotModel, dataset: ImageDataset, classes) -> float:
    x, y = base_data(dataset, classes)
    return accuracy(model, x, y)
