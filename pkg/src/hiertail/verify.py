"""Self-checks: finite-difference gradients and oracle identities.

Each check returns ``(name, passed, detail)``; ``run_all`` runs them over
random instances on a given hierarchy (or a small generated one).
"""

from __future__ import annotations

import numpy as np

from hiertail.ahl import (
    AdaptiveWeights,
    aggregate_levels,
    conditional_path_probs,
    cross_entropy_loss,
    gumbel_softmax,
    hierarchical_loss,
)
from hiertail.hierarchy import LabelHierarchy
from hiertail.metrics import rank_of_true

FD_STEP = 1e-6
FD_RTOL = 1e-5
FD_ATOL = 1e-8


def fd_close(analytic, numeric, rtol: float = FD_RTOL, atol: float = FD_ATOL) -> bool:
    """Elementwise ``|a - n| <= max(rtol * |n|, atol)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= np.maximum(rtol * np.abs(n), atol)))


def central_difference(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (f(xp) - f(xm)) / (2 * step)
    return grad


def small_hierarchy(rng: np.random.Generator) -> LabelHierarchy:
    from hiertail.synth import SynthConfig, generate_hierarchy

    cfg = SynthConfig(n_needs=2, n_activities=4, n_categories=7, n_locations=16)
    return generate_hierarchy(cfg, rng)


def random_instance(hierarchy: LabelHierarchy, rng: np.random.Generator, batch: int = 2):
    n = hierarchy.n_leaves
    logits = rng.uniform(-3, 3, size=(batch, n))
    noise = rng.gumbel(size=(batch, n))
    targets = rng.integers(0, n, size=batch)
    tau = float(rng.uniform(0.3, 2.0))
    weights = AdaptiveWeights([rng.normal(0.0, 1.0, size=t.size)
                               for t in AdaptiveWeights.init(hierarchy).theta])
    return logits, noise, targets, tau, weights


def check_ahl_logit_gradient(hierarchy, logits, noise, targets, tau, weights) -> bool:
    def f(z):
        return hierarchical_loss(gumbel_softmax(z, tau, noise).probs, tau, targets,
                                 hierarchy, weights, learn_weights=False).value

    out = hierarchical_loss(gumbel_softmax(logits, tau, noise).probs, tau, targets, hierarchy, weights)
    return fd_close(out.grad_logits, central_difference(f, logits))


def check_ahl_theta_gradient(hierarchy, logits, noise, targets, tau, weights) -> bool:
    probs = gumbel_softmax(logits, tau, noise).probs
    out = hierarchical_loss(probs, tau, targets, hierarchy, weights)
    for h in range(1, hierarchy.depth + 1):
        def f(th, h=h):
            trial = weights.copy()
            trial.theta[h - 1] = th
            return hierarchical_loss(probs, tau, targets, hierarchy, trial, learn_weights=False).value

        if not fd_close(out.grad_theta[h - 1], central_difference(f, weights.theta[h - 1])):
            return False
    return True


def check_ce_gradient(logits, noise, targets, tau) -> bool:
    def f(z):
        return cross_entropy_loss(gumbel_softmax(z, tau, noise).probs, tau, targets).value

    out = cross_entropy_loss(gumbel_softmax(logits, tau, noise).probs, tau, targets)
    return fd_close(out.grad_logits, central_difference(f, logits))


def check_level_normalisation(hierarchy, logits, noise, tau) -> bool:
    dist = aggregate_levels(gumbel_softmax(logits, tau, noise), hierarchy)
    return all(np.allclose(lp.sum(axis=-1), 1.0, rtol=0, atol=1e-12) for lp in dist.level_probs)


def check_telescoping(hierarchy, logits, noise, targets, tau) -> bool:
    dist = gumbel_softmax(logits, tau, noise)
    ratios, _ = conditional_path_probs(dist, hierarchy, targets)
    leaf = dist.probs[np.arange(len(targets)), targets]
    return bool(np.allclose(ratios.prod(axis=-1), leaf, rtol=1e-12, atol=1e-300))


def check_rank_oracle(rng: np.random.Generator, n: int = 50, batch: int = 20) -> bool:
    scores = rng.normal(size=(batch, n))
    truth = rng.integers(0, n, size=batch)
    brute = np.array([1 + sum(s[j] > s[t] or (s[j] == s[t] and j < t) for j in range(n))
                      for s, t in zip(scores, truth)])
    return bool(np.array_equal(rank_of_true(scores, truth), brute))


def run_all(hierarchy: LabelHierarchy | None = None, instances: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    if hierarchy is None:
        hierarchy = small_hierarchy(rng)
    elif hierarchy.n_leaves > 64:
        # finite differences over every logit are quadratic; keep a sub-tree
        keep = sorted(rng.choice(hierarchy.names(hierarchy.depth), size=64, replace=False))
        hierarchy = hierarchy.restrict(keep)
    counts = {k: 0 for k in ("ahl_logits", "ahl_theta", "ce_logits", "normalisation",
                             "telescoping", "rank_oracle")}
    fd_instances = max(1, min(instances, 50))
    for i in range(instances):
        logits, noise, targets, tau, weights = random_instance(hierarchy, rng)
        if i < fd_instances:
            counts["ahl_logits"] += check_ahl_logit_gradient(hierarchy, logits, noise, targets, tau, weights)
            counts["ahl_theta"] += check_ahl_theta_gradient(hierarchy, logits, noise, targets, tau, weights)
            counts["ce_logits"] += check_ce_gradient(logits, noise, targets, tau)
        counts["normalisation"] += check_level_normalisation(hierarchy, logits, noise, tau)
        counts["telescoping"] += check_telescoping(hierarchy, logits, noise, targets, tau)
        counts["rank_oracle"] += check_rank_oracle(rng)
    results = []
    for name, passed in counts.items():
        total = fd_instances if name in ("ahl_logits", "ahl_theta", "ce_logits") else instances
        results.append((name, passed == total, f"{passed}/{total} instances"))
    return results
