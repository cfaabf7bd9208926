"""Central finite-difference checks of every differentiable op and training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import RotationConfig
from .losses import (MixupSpec, exemplar_loss, hard_triplet_soft_margin, manifold_mixup_loss, mix,
                     phase_loss, rotated_class_loss, rotation_loss)
from .model import Backbone, CosineClassifier, RotationHead, cosine_logits, linear_logits
from .tensor import (Tensor, concat, conv2d, conv2d_nhwc, l2_normalize, matmul, pairwise_sq_distances,
                     softmax_cross_entropy)

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i| + |n_i|, floor)."""
    diff = np.abs(analytic - numeric)
    return float(np.max(diff / np.maximum(np.abs(analytic) + np.abs(numeric), floor), initial=0.0))


def check_gradients(name: str, loss_fn, params, step: float = STEP) -> CheckResult:
    """Compare backprop gradients of the scalar ``loss_fn()`` against central differences.

    ``params`` are leaf tensors whose ``.data`` is perturbed in place.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst, count = 0.0, 0
    for p, grad in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = loss_fn().item()
            flat[i] = saved - step
            down = loss_fn().item()
            flat[i] = saved
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        worst = max(worst, relative_error(grad, numeric))
        count += flat.size
    for p in params:
        p.zero_grad()
    return CheckResult(name, worst, count)


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 2.0, size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear functional exercises the full Jacobian of non-scalar ops
    return (out * weights).sum()


def op_checks(rng: np.random.Generator) -> list:
    """(name, loss_fn, params) triples for the tensor primitives."""
    checks = []

    def add(name, fn, *params):
        checks.append((name, fn, list(params)))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w34 = rng.normal(size=(3, 4))
    add("add(broadcast)", lambda: _weighted(a + b, w34), a, b)
    add("sub(broadcast)", lambda: _weighted(a - b, w34), a, b)
    add("mul(broadcast)", lambda: _weighted(a * b, w34), a, b)
    pos = _leaf(rng, 4, low=0.5)
    add("div(broadcast)", lambda: _weighted(a / pos, w34), a, pos)
    add("rdiv", lambda: _weighted(1.0 / pos, w34[0]), pos)
    add("neg", lambda: _weighted(-a, w34), a)

    m, n = _leaf(rng, 3, 5), _leaf(rng, 5, 2)
    w32 = rng.normal(size=(3, 2))
    add("matmul", lambda: _weighted(matmul(m, n), w32), m, n)

    c = _leaf(rng, 3, 4)
    add("relu", lambda: _weighted(c.relu(), w34), c)
    add("exp", lambda: _weighted(c.exp(), w34), c)
    add("softplus", lambda: _weighted(c.softplus(), w34), c)
    cp = _leaf(rng, 3, 4, low=0.3)
    add("log", lambda: _weighted(cp.log(), w34), cp)
    add("sqrt", lambda: _weighted(cp.sqrt(), w34), cp)
    add("clamp_min", lambda: _weighted(c.clamp_min(0.1), w34), c)
    mask = rng.random((3, 4)) < 0.4
    add("masked_fill", lambda: _weighted(c.masked_fill(mask, 2.5), w34), c)

    d = _leaf(rng, 2, 3, 4)
    add("sum(axis)", lambda w=rng.normal(size=(2, 4)): _weighted(d.sum(axis=1), w), d)
    add("mean(axes,keepdims)", lambda w=rng.normal(size=(1, 3, 1)): _weighted(d.mean(axis=(0, 2), keepdims=True), w), d)
    add("max(axis)", lambda w=rng.normal(size=(2, 3)): _weighted(d.max(axis=2), w), d)
    add("min(axis)", lambda w=rng.normal(size=(3, 4)): _weighted(d.min(axis=0), w), d)
    add("reshape", lambda w=rng.normal(size=(6, 4)): _weighted(d.reshape(6, 4), w), d)
    add("transpose", lambda w=rng.normal(size=(4, 2, 3)): _weighted(d.transpose(2, 0, 1), w), d)
    add("take(repeats)", lambda w=rng.normal(size=(3, 3, 4)): _weighted(d.take([1, 0, 1], axis=0), w), d)
    e = _leaf(rng, 2, 2, 4)
    add("concat", lambda w=rng.normal(size=(2, 5, 4)): _weighted(concat([d, e], axis=1), w), d, e)

    x = _leaf(rng, 2, 6, 6, 3)
    k = _leaf(rng, 3, 3, 3, 4)
    add("conv2d_nhwc(same,s1)", lambda w=rng.normal(size=(2, 6, 6, 4)): _weighted(conv2d_nhwc(x, k, 1, "same"), w), x, k)
    add("conv2d_nhwc(same,s2)", lambda w=rng.normal(size=(2, 3, 3, 4)): _weighted(conv2d_nhwc(x, k, 2, "same"), w), x, k)
    k2 = _leaf(rng, 2, 2, 3, 2)
    add("conv2d_nhwc(valid,even)", lambda w=rng.normal(size=(2, 5, 5, 2)): _weighted(conv2d_nhwc(x, k2, 1, "valid"), w), x, k2)
    xc = _leaf(rng, 2, 5, 5)
    kc = _leaf(rng, 3, 2, 3, 3)
    add("conv2d(CHW,valid)", lambda w=rng.normal(size=(3, 3, 3)): _weighted(conv2d(xc, kc), w), xc, kc)
    add("conv2d(CHW,same)", lambda w=rng.normal(size=(3, 5, 5)): _weighted(conv2d(xc, kc, padding="same"), w), xc, kc)

    v = _leaf(rng, 4, 5)
    add("l2_normalize", lambda w=rng.normal(size=(4, 5)): _weighted(l2_normalize(v), w), v)
    add("pairwise_sq_distances", lambda w=rng.normal(size=(4, 4)): _weighted(pairwise_sq_distances(v), w), v)

    logits = _leaf(rng, 4, 5)
    hard = rng.integers(0, 5, size=4)
    soft = rng.dirichlet(np.ones(5), size=4)
    add("softmax_cross_entropy(hard)", lambda: softmax_cross_entropy(logits, hard), logits)
    add("softmax_cross_entropy(soft)", lambda: softmax_cross_entropy(logits, soft), logits)
    return checks


def loss_checks(rng: np.random.Generator) -> list:
    """(name, loss_fn, params) triples for the model heads and training losses."""
    checks = []
    backbone = Backbone((1, 8, 8), channels=(2, 3, 4, 4), strides=(2, 1, 2, 1), seed=3)
    # small positive biases keep the ReLUs away from their kink
    for bias in backbone.biases:
        bias.data[:] = rng.uniform(0.05, 0.2, size=bias.shape)
    classifier = CosineClassifier(3, backbone.feature_dim, seed=4)
    head = RotationHead(4, backbone.feature_dim, seed=5)
    rotation = RotationConfig()
    bparams = backbone.parameters()
    x = Tensor(rng.uniform(0, 1, size=(4, 1, 8, 8)), requires_grad=True)
    y = np.array([0, 1, 2, 1])

    z = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    checks.append(("cosine_logits", lambda: softmax_cross_entropy(cosine_logits(classifier, z), y),
                   [z, classifier.weight]))
    checks.append(("linear_logits", lambda: softmax_cross_entropy(linear_logits(head, z), [0, 1, 2, 3]),
                   [z, head.weight, head.bias]))
    a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    wmix = rng.normal(size=(3, 4))
    checks.append(("mix", lambda: _weighted(mix(a, b, 0.3), wmix), [a, b]))

    perm = np.array([2, 0, 3, 1])
    spec = MixupSpec(2.0, (0, 1, 2, 3))
    for layer in spec.layers:
        checks.append((f"manifold_mixup_loss(layer={layer})",
                       lambda layer=layer: manifold_mixup_loss(backbone, classifier, x, y, spec, layer=layer,
                                                               lam=0.37, perm=perm),
                       bparams + [classifier.weight, x]))
    checks.append(("rotation_loss", lambda: rotation_loss(backbone, head, x.data, rotation),
                   bparams + head.parameters()))
    checks.append(("rotated_class_loss", lambda: rotated_class_loss(backbone, classifier, x.data, y, rotation),
                   bparams + [classifier.weight]))

    emb = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    sources = np.repeat(np.arange(2), 4)
    checks.append(("hard_triplet_soft_margin", lambda: hard_triplet_soft_margin(emb, sources), [emb]))
    views = rng.uniform(0, 1, size=(8, 1, 8, 8))
    checks.append(("exemplar_loss", lambda: exemplar_loss(backbone, None, None, 4, views=views), bparams))

    def phase1():
        feats = backbone.features(rotation.expand(x.data)[0])
        return phase_loss(1, rotated_class_loss(backbone, classifier, x.data, y, rotation, feats),
                          rotation_loss(backbone, head, x.data, rotation, feats))

    def phase2():
        return phase_loss(2, softmax_cross_entropy(cosine_logits(classifier, backbone.features(x.data)), y),
                          rotation_loss(backbone, head, x.data, rotation),
                          manifold_mixup_loss(backbone, classifier, x.data, y, spec, layer=2, lam=0.61, perm=perm))

    allp = bparams + [classifier.weight] + head.parameters()
    checks.append(("phase_loss(1)", phase1, allp))
    checks.append(("phase_loss(2)", phase2, allp))
    return checks


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check_gradients(name, fn, params) for name, fn, params in op_checks(rng) + loss_checks(rng)]


def summarize(results: list[CheckResult], elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    worst = max(r.max_rel_error for r in results)
    lines.append(f"max relative error: {worst:.3e} ({len(results)} checks)")
    if elapsed is not None:
        lines.append(f"elapsed: {elapsed:.1f} s")
    return "\n".join(lines)


def main(seed: int = 0) -> tuple[float, str]:
    start = time.perf_counter()
    results = run_suite(seed)
    return max(r.max_rel_error for r in results), summarize(results, time.perf_counter() - start)
