"""Reference backbone, Adam and the training loop.

The backbone is deliberately small: the mean of the prefix's location
embeddings plus a user embedding, followed by a linear layer over locations.
Any model producing a logit vector per (user, prefix) plugs into the same
loss contract.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hiertail.ahl import AdaptiveWeights, LossConfig, compute_loss, loss_config, softplus
from hiertail.hierarchy import LabelHierarchy
from hiertail.ingest import CheckinDataset, Trajectory
from hiertail.metrics import DEFAULT_KS, evaluate, mrr_at_k, rank_of_true

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HTL1"


class EmptyTrainSplit(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class BackboneParams:
    loc_emb: np.ndarray
    user_emb: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    BLOCKS = ("loc_emb", "user_emb", "out_w", "out_b")

    @classmethod
    def init(cls, n_locations: int, n_users: int, dim: int, rng: np.random.Generator):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        return cls(
            loc_emb=rng.normal(0.0, 0.1, (n_locations, dim)),
            user_emb=rng.normal(0.0, 0.1, (n_users, dim)),
            out_w=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, n_locations)),
            out_b=np.zeros(n_locations),
        )

    @classmethod
    def zeros(cls, n_locations: int, n_users: int, dim: int):
        return cls(np.zeros((n_locations, dim)), np.zeros((n_users, dim)),
                   np.zeros((dim, n_locations)), np.zeros(n_locations))

    @property
    def dim(self) -> int:
        return self.loc_emb.shape[1]

    @property
    def n_locations(self) -> int:
        return self.loc_emb.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.BLOCKS}

    def copy(self) -> "BackboneParams":
        return BackboneParams(*(getattr(self, k).copy() for k in self.BLOCKS))


# -- (prefix, next) pairs -----------------------------------------------------


@dataclass
class PairSet:
    """Every (prefix, next location) pair from a set of trajectories.

    Prefixes are stored flat: ``prefix_flat[offsets[i]:offsets[i + 1]]`` is
    the prefix of pair ``i``.
    """

    users: np.ndarray
    targets: np.ndarray
    prefix_flat: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def prefix(self, i: int) -> np.ndarray:
        return self.prefix_flat[self.offsets[i]:self.offsets[i + 1]]

    def gather(self, idx: np.ndarray):
        """Users, flat prefixes, segment starts and lengths for pairs ``idx``."""
        idx = np.asarray(idx)
        lengths = self.offsets[idx + 1] - self.offsets[idx]
        starts = np.zeros(len(idx), dtype=np.int64)
        np.cumsum(lengths[:-1], out=starts[1:])
        pos = np.arange(lengths.sum()) - np.repeat(starts, lengths) + np.repeat(self.offsets[idx], lengths)
        return self.users[idx], self.prefix_flat[pos], starts, lengths


def expand_pairs(trajectories: Sequence[Trajectory]) -> PairSet:
    users, targets, flat, offsets = [], [], [], [0]
    for traj in trajectories:
        locs = traj.locations
        for t in range(1, len(locs)):
            users.append(traj.user_index)
            targets.append(locs[t])
            flat.extend(locs[:t])
            offsets.append(len(flat))
    return PairSet(np.array(users, dtype=np.int64), np.array(targets, dtype=np.int64),
                   np.array(flat, dtype=np.int64), np.array(offsets, dtype=np.int64))


# -- backbone ---------------------------------------------------------------


def forward_batch(params: BackboneParams, users, flat, starts, lengths):
    pooled = np.add.reduceat(params.loc_emb[flat], starts, axis=0) / lengths[:, None]
    hidden = pooled + params.user_emb[users]
    return hidden @ params.out_w + params.out_b, hidden


def backward_batch(params: BackboneParams, users, flat, lengths, hidden, grad_logits):
    g_hidden = grad_logits @ params.out_w.T
    g_user = np.zeros_like(params.user_emb)
    np.add.at(g_user, users, g_hidden)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    g_loc = np.zeros_like(params.loc_emb)
    np.add.at(g_loc, flat, g_hidden[seg] / lengths[seg, None])
    return {
        "loc_emb": g_loc,
        "user_emb": g_user,
        "out_w": hidden.T @ grad_logits,
        "out_b": grad_logits.sum(axis=0),
    }


def _single(params: BackboneParams, user_index: int, prefix):
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ValueError("prefix must be a non-empty sequence of location indices")
    if not 0 <= user_index < params.n_users:
        raise IndexError(f"user {user_index} outside [0, {params.n_users})")
    if prefix.min() < 0 or prefix.max() >= params.n_locations:
        raise IndexError(f"prefix location outside [0, {params.n_locations})")
    return (np.array([user_index]), prefix, np.array([0]), np.array([prefix.size]))


def backbone_forward(params: BackboneParams, user_index: int, prefix) -> np.ndarray:
    users, flat, starts, lengths = _single(params, user_index, prefix)
    return forward_batch(params, users, flat, starts, lengths)[0][0]


def backbone_backward(params: BackboneParams, user_index: int, prefix, grad_logits) -> dict:
    users, flat, starts, lengths = _single(params, user_index, prefix)
    _, hidden = forward_batch(params, users, flat, starts, lengths)
    g = np.asarray(grad_logits, dtype=np.float64)[None, :]
    return backward_batch(params, users, flat, lengths, hidden, g)


def score_fn(params: BackboneParams, pairs: PairSet):
    """Evaluation scorer over ``pairs``; logits rank the same as noise-free probabilities."""
    def scores(idx):
        users, flat, starts, lengths = pairs.gather(idx)
        return forward_batch(params, users, flat, starts, lengths)[0]
    return scores


# -- optimisation -------------------------------------------------------------


class Adam:
    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 42
    loss: str = "ahl"
    tau: float = 1.0
    dim: int = 32
    level_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.dim < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and dim >= 1 are required")
        self.adam_betas = tuple(self.adam_betas)
        loss_config(self.loss, self.tau)  # validates the mode and tau

    def loss_config(self) -> LossConfig:
        return loss_config(self.loss, self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        if self.level_weights is not None:
            d["level_weights"] = list(self.level_weights)
        return d


@dataclass
class TrainResult:
    params: BackboneParams
    weights: AdaptiveWeights
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _theta_keys(depth: int) -> list[str]:
    return [f"theta_{h}" for h in range(1, depth + 1)]


def val_mrr(params: BackboneParams, pairs: PairSet, k: int = 5, batch_size: int = 1024) -> float:
    if len(pairs) == 0:
        return 0.0
    scorer = score_fn(params, pairs)
    total = 0.0
    for a in range(0, len(pairs), batch_size):
        idx = np.arange(a, min(a + batch_size, len(pairs)))
        total += mrr_at_k(rank_of_true(scorer(idx), pairs.targets[idx]), k).sum()
    return float(total / len(pairs))


def train(dataset: CheckinDataset, hierarchy: LabelHierarchy, config: TrainConfig, *,
          record_steps: bool = False, timing: bool = False) -> TrainResult:
    """Minibatch Adam over (prefix, next) pairs of the training split.

    Returns the snapshot with the best validation MRR@5 (the last epoch when
    there is no validation data).
    """
    if hierarchy.n_leaves != dataset.n_locations:
        raise ValueError(
            f"hierarchy has {hierarchy.n_leaves} leaves but the dataset has {dataset.n_locations} locations"
        )
    train_pairs = expand_pairs(dataset.split("train"))
    if len(train_pairs) == 0:
        raise EmptyTrainSplit("training split has no (prefix, next) pairs")
    val_pairs = expand_pairs(dataset.split("val"))

    init_seq, order_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
    params = BackboneParams.init(dataset.n_locations, dataset.n_users, config.dim,
                                 np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    noise_rng = np.random.default_rng(noise_seq)
    weights = AdaptiveWeights.init(hierarchy, config.level_weights)
    lcfg = config.loss_config()
    learn_theta = lcfg.hierarchical and lcfg.adaptive
    opt = Adam(config.learning_rate, config.adam_betas)

    tensors = params.as_dict()
    theta_keys = _theta_keys(hierarchy.depth)
    if learn_theta:
        tensors.update(zip(theta_keys, weights.theta))

    result = TrainResult(params.copy(), weights.copy())
    best = -np.inf
    n = len(train_pairs)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        perm = order_rng.permutation(n)
        loss_sum = 0.0
        for a in range(0, n, config.batch_size):
            idx = perm[a:a + config.batch_size]
            users, flat, starts, lengths = train_pairs.gather(idx)
            logits, hidden = forward_batch(params, users, flat, starts, lengths)
            out = compute_loss(lcfg, logits, train_pairs.targets[idx], hierarchy, weights, noise_rng)
            grads = backward_batch(params, users, flat, lengths, hidden, out.grad_logits)
            if learn_theta:
                grads.update(zip(theta_keys, out.grad_theta))
            opt.step(tensors, grads)
            loss_sum += out.value * len(idx)
            if record_steps:
                result.step_losses.append(out.value)

        for h in range(1, hierarchy.depth + 1):
            if not np.all(weights.values(h) > 0):
                raise FloatingPointError(f"non-positive adaptive weight on level {h}")
        score = val_mrr(params, val_pairs)
        result.log.append({"epoch": epoch, "train_loss": loss_sum / n, "val_mrr5": score})
        if timing:
            log.info("epoch %d: %.2fs", epoch, time.perf_counter() - started)
        if len(val_pairs) == 0 or score > best:
            best = score
            result.params = params.copy()
            result.weights = weights.copy()
            result.best_epoch = epoch
    return result


def evaluate_model(params: BackboneParams, dataset: CheckinDataset, hierarchy: LabelHierarchy,
                   split: str = "test", ks: Sequence[int] = DEFAULT_KS, threads: int = 1,
                   oracle: bool = False):
    pairs = expand_pairs(dataset.split(split))
    scorer = score_fn(params, pairs)
    if oracle:
        def scorer(idx):
            s = np.zeros((len(idx), dataset.n_locations))
            s[np.arange(len(idx)), pairs.targets[idx]] = 1.0
            return s
    return evaluate(scorer, pairs.targets, hierarchy, dataset.head_mask(), ks, threads=threads)


def format_epoch_log(entries: list[dict]) -> str:
    lines = ["epoch\ttrain_loss\tval_mrr5"]
    for e in entries:
        lines.append(f"{e['epoch']}\t{e['train_loss']:.17g}\t{e['val_mrr5']:.17g}")
    return "\n".join(lines) + "\n"


def weight_summary(weights: AdaptiveWeights, bins: int = 10) -> list[dict]:
    """Per-level distribution of the effective node weights."""
    out = []
    for h in range(1, weights.depth + 1):
        w = weights.values(h)
        counts, edges = np.histogram(w, bins=bins)
        out.append({
            "level": h,
            "nodes": int(w.size),
            "mean": float(w.mean()),
            "std": float(w.std()),
            "min": float(w.min()),
            "max": float(w.max()),
            "histogram": counts.tolist(),
            "bin_edges": edges.tolist(),
        })
    return out


# -- checkpoint container ---------------------------------------------------
#
# Layout (little endian):
#   4 bytes  magic "HTL1"
#   5 x u32  d, |P|, |U|, H, reserved (0)
#   H x u32  class count per level, coarse to fine
#   f64 blocks in order: loc_emb (|P| x d), user_emb (|U| x d), out_w (d x |P|),
#            out_b (|P|), theta level 1 .. theta level H


def save_checkpoint(path, params: BackboneParams, weights: AdaptiveWeights) -> None:
    counts = [t.size for t in weights.theta]
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<5I{len(counts)}I", params.dim, params.n_locations, params.n_users, len(counts), 0, *counts
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for block in (*params.as_dict().values(), *weights.theta):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[BackboneParams, AdaptiveWeights]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        d, n_loc, n_user, depth, _ = struct.unpack_from("<5I", data, 4)
        counts = struct.unpack_from(f"<{depth}I", data, 24)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    offset = 24 + 4 * depth
    shapes = [(n_loc, d), (n_user, d), (d, n_loc), (n_loc,)] + [(c,) for c in counts]
    expected = offset + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    blocks = []
    for shape in shapes:
        size = int(np.prod(shape))
        blocks.append(np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64))
        offset += 8 * size
    return BackboneParams(*blocks[:4]), AdaptiveWeights(list(blocks[4:]))
