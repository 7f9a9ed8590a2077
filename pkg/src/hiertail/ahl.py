"""Adaptive hierarchical loss (AHL) and the cross-entropy baseline.

Leaf probabilities come from a Gumbel-disturbed softmax over location logits.
Coarser levels are obtained by summing children into parents, and the loss is
a weighted sum of ``-log p(child | parent)`` along the true leaf's root path,
with one Softplus-parameterised weight per hierarchy node.

All gradients are closed form. For a sample with true leaf ``i`` and any leaf
``j`` whose lowest common ancestor with ``i`` sits at depth ``d``::

    dL/dz_j = (p_j * (w_1 + sum_{h=1}^{d} (w_{h+1} - w_h) / S_h) - w_H * [j == i]) / (H * tau)

where ``S_h`` is the probability mass under the true leaf's level-``h``
ancestor (the ``h = H`` term of the sum only applies to ``j == i``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from hiertail.hierarchy import LabelHierarchy

PROB_FLOOR = 1e-12
UNDERFLOW = 1e-300


class NonPositiveTau(ValueError):
    pass


class HierarchyMismatch(ValueError):
    pass


class DegenerateParent(ArithmeticError):
    pass


class ConflictingFlags(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(np.expm1(y))


# -- Gumbel-softmax --------------------------------------------------------


def gumbel_from_uniform(a):
    """Map Uniform(0, 1) draws to standard Gumbel draws."""
    return -np.log(-np.log(a))


def sample_gumbel(count, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel noise of shape ``count`` (an int or a shape tuple)."""
    a = rng.random(count)
    # rng.random is on [0, 1); the endpoint 0 would map to -inf
    a = np.where(a > 0.0, a, np.finfo(np.float64).tiny)
    return gumbel_from_uniform(a)


@dataclass
class LeafDistribution:
    """Leaf probabilities, optionally batched along the first axis.

    ``level_probs[h]`` holds the aggregated distribution on level ``h``
    (index 0 is the root, always 1); it is filled by :func:`aggregate_levels`.
    """

    probs: np.ndarray
    tau: float = 1.0
    noise: np.ndarray | None = None
    level_probs: tuple[np.ndarray, ...] | None = None

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]


def softmax(u: np.ndarray) -> np.ndarray:
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax(logits, tau: float = 1.0, noise=None) -> LeafDistribution:
    if not tau > 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    g = np.zeros_like(z) if noise is None else np.asarray(noise, dtype=np.float64)
    if g.shape != z.shape:
        raise ValueError(f"noise shape {g.shape} does not match logits {z.shape}")
    return LeafDistribution(probs=softmax((z + g) / tau), tau=float(tau), noise=g)


def _sum_to_parents(x: np.ndarray, hierarchy: LabelHierarchy, h: int) -> np.ndarray:
    order, starts = hierarchy.child_groups(h)
    return np.add.reduceat(x[..., order], starts, axis=-1)


def aggregate_levels(dist: LeafDistribution, hierarchy: LabelHierarchy) -> LeafDistribution:
    """Return a copy of ``dist`` with per-level probabilities filled in."""
    if dist.n_classes != hierarchy.n_leaves:
        raise HierarchyMismatch(
            f"{dist.n_classes} leaf probabilities for a hierarchy with {hierarchy.n_leaves} leaves"
        )
    levels = [None] * (hierarchy.depth + 1)
    levels[hierarchy.depth] = dist.probs
    for h in range(hierarchy.depth, 1, -1):
        levels[h - 1] = _sum_to_parents(levels[h], hierarchy, h)
    levels[0] = np.ones(dist.probs.shape[:-1] + (1,))
    return replace(dist, level_probs=tuple(levels))


def path_sums(dist: LeafDistribution, hierarchy: LabelHierarchy, true_leaf) -> np.ndarray:
    """``S^0..S^H`` along each true leaf's root path, shape ``(..., H + 1)``."""
    if dist.level_probs is None:
        dist = aggregate_levels(dist, hierarchy)
    targets = np.asarray(true_leaf)
    anc = hierarchy.ancestors
    if dist.probs.ndim == 1:
        s = np.array([dist.level_probs[h][anc[h, targets]] if h else 1.0
                      for h in range(hierarchy.depth + 1)])
    else:
        rows = np.arange(dist.probs.shape[0])
        s = np.empty((rows.size, hierarchy.depth + 1))
        s[:, 0] = 1.0
        for h in range(1, hierarchy.depth + 1):
            s[:, h] = dist.level_probs[h][rows, anc[h, targets]]
    # rounding in the softmax normaliser can push a full-mass sum one ulp above 1
    return np.minimum(s, 1.0)


def conditional_path_probs(dist: LeafDistribution, hierarchy: LabelHierarchy, true_leaf):
    """Conditionals ``p(y^h | y^(h-1))`` for h = 1..H, and the path sums ``S``.

    Returns ``(ratios, s_sums)``; the product of ``ratios`` telescopes to the
    true leaf's probability.
    """
    if np.ndim(true_leaf) == 0:
        hierarchy._check_leaf(true_leaf)
    s = path_sums(dist, hierarchy, true_leaf)
    parents = s[..., :-1]
    if np.any(parents < UNDERFLOW):
        raise DegenerateParent("ancestor probability mass underflowed")
    ratios = np.maximum(s[..., 1:], PROB_FLOOR) / np.maximum(parents, PROB_FLOOR)
    return ratios, s


# -- adaptive weights ------------------------------------------------------


def default_level_weights(depth: int) -> np.ndarray:
    """Initial weights coarse to fine: ``k / H`` for k = 1..H.

    For four levels this is (0.25, 0.5, 0.75, 1.0).
    """
    return np.arange(1, depth + 1) / depth


@dataclass
class AdaptiveWeights:
    """One learnable pre-activation ``theta`` per hierarchy node.

    ``theta[h - 1]`` holds the parameters of level ``h``; the effective weight
    of a node is ``softplus(theta)``.
    """

    theta: list[np.ndarray]

    @classmethod
    def init(cls, hierarchy: LabelHierarchy, level_values: Sequence[float] | None = None):
        if level_values is None:
            level_values = default_level_weights(hierarchy.depth)
        if len(level_values) != hierarchy.depth:
            raise HierarchyMismatch(f"need {hierarchy.depth} level weights, got {len(level_values)}")
        if min(level_values) <= 0:
            raise ValueError("initial weights must be positive")
        theta = [np.full(hierarchy.class_count(h), inverse_softplus(c))
                 for h, c in zip(range(1, hierarchy.depth + 1), level_values)]
        return cls(theta)

    @classmethod
    def uniform(cls, hierarchy: LabelHierarchy, value: float = 1.0):
        return cls.init(hierarchy, [value] * hierarchy.depth)

    @property
    def depth(self) -> int:
        return len(self.theta)

    def values(self, h: int) -> np.ndarray:
        return softplus(self.theta[h - 1])

    def weight(self, node) -> float:
        h, i = node
        return float(softplus(self.theta[h - 1][i]))

    def path_theta(self, hierarchy: LabelHierarchy, true_leaf) -> np.ndarray:
        """Theta of the true leaf's ancestors, shape ``(..., H)`` coarse to fine."""
        anc = hierarchy.ancestors
        return np.stack([self.theta[h - 1][anc[h, true_leaf]]
                         for h in range(1, hierarchy.depth + 1)], axis=-1)

    def copy(self) -> "AdaptiveWeights":
        return AdaptiveWeights([t.copy() for t in self.theta])


# -- losses ----------------------------------------------------------------


@dataclass
class LossOutput:
    """Loss value with gradients w.r.t. logits and node parameters.

    ``grad_theta`` maps ``(level, index)`` to a gradient; it only holds entries
    for ancestors of the true leaf and is empty when weights are frozen.
    """

    value: float
    grad_logits: np.ndarray
    grad_theta: dict[tuple[int, int], float] = field(default_factory=dict)


@dataclass
class BatchLoss:
    """Batch-mean loss with dense per-level parameter gradients (or ``None``)."""

    value: float
    grad_logits: np.ndarray
    grad_theta: list[np.ndarray] | None = None
    per_sample: np.ndarray | None = None


def hierarchical_loss(probs, tau: float, targets, hierarchy: LabelHierarchy,
                      weights: AdaptiveWeights, *, learn_weights: bool = True) -> BatchLoss:
    """Batch AHL on leaf probabilities ``probs`` of shape ``(B, C)``.

    Gradients are w.r.t. the logits that produced ``probs`` at temperature
    ``tau`` and are scaled for the batch mean.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, c = probs.shape
    depth = hierarchy.depth
    if c != hierarchy.n_leaves:
        raise HierarchyMismatch(f"{c} leaf probabilities for {hierarchy.n_leaves} leaves")
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError("target leaf out of range")
    if not tau > 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")

    anc = hierarchy.ancestors
    rows = np.arange(n)
    s = np.empty((n, depth + 1))
    s[:, 0] = 1.0
    level = probs
    for h in range(depth, 0, -1):
        s[:, h] = level[rows, anc[h, targets]]
        if h > 1:
            level = _sum_to_parents(level, hierarchy, h)
    np.minimum(s, 1.0, out=s)
    if np.any(s[:, 1:depth] < UNDERFLOW):
        raise DegenerateParent("ancestor probability mass underflowed")

    active = s >= PROB_FLOOR
    log_s = np.log(np.maximum(s, PROB_FLOOR))
    log_ratio = log_s[:, 1:] - log_s[:, :-1]
    theta = weights.path_theta(hierarchy, targets)
    w = softplus(theta)
    per_sample = -(w * log_ratio).sum(axis=1) / depth
    value = float(per_sample.mean()) if n else 0.0

    # loss = -(1/H) * sum_h a_h * log S_h with a_h = w_h - w_{h+1}, a_H = w_H
    a = w.copy()
    a[:, :-1] -= w[:, 1:]
    a = a * active[:, 1:]
    per_level = a / np.maximum(s[:, 1:], PROB_FLOOR)
    # accumulate on-path coefficients top-down over the (small) coarse levels,
    # then broadcast to leaves with a single gather
    if depth > 1:
        acc = np.zeros((n, hierarchy.class_count(1)))
        acc[rows, anc[1, targets]] = per_level[:, 0]
        for h in range(2, depth):
            acc = acc[:, hierarchy.parent_array(h)]
            acc[rows, anc[h, targets]] += per_level[:, h - 1]
        coef = acc[:, anc[depth - 1]]
    else:
        coef = np.zeros((n, c))
    coef[rows, targets] += per_level[:, -1]
    base = a.sum(axis=1)
    grad_logits = -probs * (coef - base[:, None]) / (depth * tau * max(n, 1))

    grad_theta = None
    if learn_weights:
        g = -log_ratio * expit(theta) / (depth * max(n, 1))
        grad_theta = [np.zeros_like(t) for t in weights.theta]
        for h in range(1, depth + 1):
            np.add.at(grad_theta[h - 1], anc[h, targets], g[:, h - 1])
    return BatchLoss(value, grad_logits, grad_theta, per_sample)


def cross_entropy_loss(probs, tau: float, targets) -> BatchLoss:
    """Batch-mean ``-log p(true)`` with gradient ``(p - onehot) / tau``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n = probs.shape[0]
    rows = np.arange(n)
    per_sample = -np.log(np.maximum(probs[rows, targets], PROB_FLOOR))
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad /= tau * max(n, 1)
    return BatchLoss(float(per_sample.mean()) if n else 0.0, grad, None, per_sample)


def _sparse_theta(grad_theta, hierarchy: LabelHierarchy, true_leaf) -> dict:
    out = {}
    for t in np.atleast_1d(true_leaf):
        for h, i in enumerate(hierarchy.path(int(t)), start=1):
            out[(h, i)] = float(grad_theta[h - 1][i])
    return out


def ahl_forward(dist: LeafDistribution, weights: AdaptiveWeights,
                hierarchy: LabelHierarchy, true_leaf) -> float:
    if np.ndim(true_leaf) == 0:
        hierarchy._check_leaf(true_leaf)
    return hierarchical_loss(dist.probs, dist.tau, true_leaf, hierarchy, weights,
                             learn_weights=False).value


def ahl_backward(dist: LeafDistribution, weights: AdaptiveWeights, hierarchy: LabelHierarchy,
                 true_leaf, *, learn_weights: bool = True) -> LossOutput:
    if np.ndim(true_leaf) == 0:
        hierarchy._check_leaf(true_leaf)
    out = hierarchical_loss(dist.probs, dist.tau, true_leaf, hierarchy, weights,
                            learn_weights=learn_weights)
    grad = out.grad_logits[0] if dist.probs.ndim == 1 else out.grad_logits
    sparse = _sparse_theta(out.grad_theta, hierarchy, true_leaf) if learn_weights else {}
    return LossOutput(out.value, grad, sparse)


def ce_forward_backward(dist: LeafDistribution, true_leaf) -> LossOutput:
    out = cross_entropy_loss(dist.probs, dist.tau, true_leaf)
    grad = out.grad_logits[0] if dist.probs.ndim == 1 else out.grad_logits
    return LossOutput(out.value, grad, {})


# -- loss configuration and ablations ---------------------------------------

ABLATIONS = ("no_exploitation", "no_exploration", "no_gumbel", "no_adaptive")


@dataclass(frozen=True)
class LossConfig:
    name: str = "ahl"
    hierarchical: bool = True
    gumbel: bool = True
    adaptive: bool = True
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise NonPositiveTau(f"tau must be positive, got {self.tau}")


def ablation_config(flags=(), tau: float = 1.0) -> LossConfig:
    """Loss configuration for the full AHL or one of its ablations.

    ``flags`` is an iterable of flag names or a mapping of name -> bool.
    """
    if isinstance(flags, dict):
        flags = [k for k, v in flags.items() if v]
    elif isinstance(flags, str):
        flags = [flags]
    flags = list(flags)
    unknown = set(flags) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flag(s): {sorted(unknown)}")
    if len(flags) > 1:
        raise ConflictingFlags(f"at most one ablation flag may be set, got {flags}")
    if not flags:
        return LossConfig("ahl", True, True, True, tau)
    flag = flags[0]
    if flag == "no_exploitation":
        return LossConfig(flag, hierarchical=False, gumbel=True, adaptive=False, tau=tau)
    if flag == "no_exploration":
        return LossConfig(flag, hierarchical=True, gumbel=False, adaptive=False, tau=tau)
    if flag == "no_gumbel":
        return LossConfig(flag, hierarchical=True, gumbel=False, adaptive=True, tau=tau)
    return LossConfig(flag, hierarchical=True, gumbel=True, adaptive=False, tau=tau)


def loss_config(mode: str, tau: float = 1.0) -> LossConfig:
    """``ahl``, ``ce`` or an ablation flag name."""
    if mode == "ce":
        return LossConfig("ce", hierarchical=False, gumbel=False, adaptive=False, tau=tau)
    if mode == "ahl":
        return ablation_config((), tau)
    return ablation_config([mode], tau)


def compute_loss(config: LossConfig, logits, targets, hierarchy: LabelHierarchy | None,
                 weights: AdaptiveWeights | None, rng: np.random.Generator | None = None) -> BatchLoss:
    """Training-time loss; Gumbel noise is drawn from ``rng`` only if enabled."""
    logits = np.atleast_2d(logits)
    noise = sample_gumbel(logits.shape, rng) if config.gumbel else None
    dist = gumbel_softmax(logits, config.tau, noise)
    if config.hierarchical:
        return hierarchical_loss(dist.probs, config.tau, targets, hierarchy, weights,
                                 learn_weights=config.adaptive)
    return cross_entropy_loss(dist.probs, config.tau, targets)
