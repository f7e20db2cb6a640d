"""Training losses for the transformation module and the output head.

The two contrastive losses share one form: for an anchor pseudo-feature and
a pool of sampled final-layer features,

    L(anchor) = - sum_{p in positives} log[ exp(sim(anchor, p)/tau) / s ]
    s         = sum over the whole pool of exp(sim/tau)

where similarity is the dot product of (by default L2-normalized) linear
projections. The class loss keys positives by class, the domain loss by the
training domain of the originating task. The combined loss weights them by
lambda. Output alignment is plain cross-entropy on sampled plus synthesized
features. Optimization is Adam with a cosine-decaying learning rate.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm


class EmptyPositiveSetError(ValueError):
    pass


@dataclass
class LossBatch:
    """Anchors (graph nodes) plus a constant candidate pool with tags."""

    anchors: list  # graph tensors, each (1, m)
    anchor_classes: np.ndarray
    anchor_domains: np.ndarray
    pool: np.ndarray  # (n_pool, m) constants
    pool_classes: np.ndarray
    pool_domains: np.ndarray  # training domain of each pool member's task
    tau: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        self.anchor_classes = np.asarray(self.anchor_classes)
        self.anchor_domains = np.asarray(self.anchor_domains)
        self.pool_classes = np.asarray(self.pool_classes)
        self.pool_domains = np.asarray(self.pool_domains)
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"loss weight must lie in [0, 1], got {self.lam}")


def _project(features, proj_weight, normalize):
    """Linear projection, optionally L2-normalized per row."""
    z = dm.matmul(features, proj_weight)
    if not normalize:
        return z
    sq = dm.tensor_sum(dm.mul(z, z), axis=1, keepdims=True)
    norm = dm.sqrt(dm.add(sq, dm.constant(1e-12)))
    return dm.div(z, norm)


def _contrastive(batch, proj_weight, positives_mask, normalize, mean_over_positives):
    counts = positives_mask.sum(axis=1)
    if np.any(counts < 1):
        raise EmptyPositiveSetError("every anchor needs at least one positive in the pool")
    anchors = dm.concat_rows(batch.anchors)
    a_proj = _project(anchors, proj_weight, normalize)
    p_proj = _project(dm.constant(batch.pool), proj_weight, normalize)
    sims = dm.scale(dm.matmul(a_proj, dm.transpose(p_proj)), 1.0 / batch.tau)
    lse = dm.logsumexp_rows(sims)  # (n_anchor, 1)
    # per anchor: count * logsumexp - sum of positive similarities
    pos_sum = dm.tensor_sum(dm.mul(sims, dm.constant(positives_mask)), axis=1, keepdims=True)
    per_anchor = dm.sub(dm.mul(lse, dm.constant(counts[:, None])), pos_sum)
    if mean_over_positives:
        per_anchor = dm.div(per_anchor, dm.constant(counts[:, None]))
    return dm.scale(dm.tensor_sum(per_anchor), 1.0 / len(batch.anchors))


def loss_cls(batch, params, normalize=True, mean_over_positives=False):
    """Semantic contrastive loss: positives share the anchor's class."""
    mask = (batch.pool_classes[None, :] == batch.anchor_classes[:, None]).astype(float)
    return _contrastive(batch, params.p_cls, mask, normalize, mean_over_positives)


def loss_dom(batch, params, normalize=True, mean_over_positives=False):
    """Domain contrastive loss: positives share the anchor's target domain."""
    mask = (batch.pool_domains[None, :] == batch.anchor_domains[:, None]).astype(float)
    return _contrastive(batch, params.p_dom, mask, normalize, mean_over_positives)


def loss_dot(batch, params, normalize=True, mean_over_positives=False):
    """(1 - lambda) * class loss + lambda * domain loss."""
    lc = loss_cls(batch, params, normalize, mean_over_positives)
    ld = loss_dom(batch, params, normalize, mean_over_positives)
    return dm.add(dm.scale(lc, 1.0 - batch.lam), dm.scale(ld, batch.lam))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over rows of a logits tensor."""
    labels = np.asarray(labels, dtype=np.intp)
    lse = dm.logsumexp_rows(logits)
    picked = dm.gather_rows(logits, labels)
    return dm.scale(dm.tensor_sum(dm.sub(lse, picked)), 1.0 / logits.data.shape[0])


def head_logits(weight, bias, features):
    """Linear head logits for a (n, m) feature tensor or array."""
    feats = features if isinstance(features, dm.Tensor) else dm.constant(features)
    return dm.add(dm.matmul(feats, dm.transpose(weight)), bias)


def loss_oa(weight, bias, sampled, sampled_labels, pseudo, pseudo_labels):
    """Output alignment: CE on sampled features plus CE on pseudo features.

    ``pseudo`` may be a graph tensor (differentiable through the generator)
    or a plain array (generator treated as a constant, the phase-3 contract).
    """
    n_classes = weight.data.shape[0]
    for lab in (np.asarray(sampled_labels), np.asarray(pseudo_labels)):
        if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise dm.ContractError("label outside the head's output range")
    ce_real = cross_entropy(head_logits(weight, bias, sampled), sampled_labels)
    ce_pseudo = cross_entropy(head_logits(weight, bias, pseudo), pseudo_labels)
    return dm.add(ce_real, ce_pseudo)


@dataclass
class OptimizerState:
    """Adam accumulators plus the cosine learning-rate schedule."""

    lr_max: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epoch_span: int = 1
    epoch: int = 0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self):
        frac = min(self.epoch / max(self.epoch_span, 1), 1.0)
        return 0.5 * self.lr_max * (1.0 + math.cos(math.pi * frac))


def step(params, grads, state):
    """One Adam update in place over a list of parameter tensors.

    ``grads`` maps parameter tensor -> gradient array; parameters missing
    from the map are treated as having zero gradient (moments still decay).
    """
    state.step_count += 1
    t = state.step_count
    lr = state.lr()
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise dm.ShapeError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        key = p._id
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
