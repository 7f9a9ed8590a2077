"""Ranking metrics (MRR@k, NDCG@k) with head/tail breakdown and hierarchical distance."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from hiertail.hierarchy import InvalidLeaf, LabelHierarchy

DEFAULT_KS = (1, 5, 10, 20)
GROUPS = ("total", "head", "tail")


class EmptySplit(ValueError):
    pass


def rank_of_true(scores, true_leaf):
    """1-based rank of the true leaf; ties go to the lower index.

    Accepts a single score vector with an integer label, or a ``(B, C)``
    score matrix with ``B`` labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    scores = np.atleast_2d(scores)
    targets = np.atleast_1d(np.asarray(true_leaf))
    n, c = scores.shape
    if targets.shape != (n,) or not np.issubdtype(targets.dtype, np.integer):
        raise InvalidLeaf("one integer label per score row is required")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise InvalidLeaf(f"label outside [0, {c})")
    true_scores = scores[np.arange(n), targets][:, None]
    ahead = (scores > true_scores).sum(axis=1)
    tied_before = ((scores == true_scores) & (np.arange(c)[None, :] < targets[:, None])).sum(axis=1)
    ranks = 1 + ahead + tied_before
    return int(ranks[0]) if single else ranks


def mrr_at_k(rank, k: int):
    rank = np.asarray(rank)
    out = np.where(rank <= k, 1.0 / rank, 0.0)
    return float(out) if out.ndim == 0 else out


def ndcg_at_k(rank, k: int):
    rank = np.asarray(rank)
    out = np.where(rank <= k, 1.0 / np.log2(1.0 + rank), 0.0)
    return float(out) if out.ndim == 0 else out


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores per row, best first, ties by index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


@dataclass
class EvalReport:
    """Per-group ranking metrics and hierarchical distance statistics.

    ``mrr[k][group]`` and ``ndcg[k][group]`` are means over predictions whose
    true next location falls in ``group``.
    """

    ks: tuple[int, ...]
    mrr: dict[int, dict[str, float]]
    ndcg: dict[int, dict[str, float]]
    counts: dict[str, int]
    mean_distance: dict[str, float]
    distance_histogram: dict[str, list[int]]
    level_match_rate: dict[str, dict[int, float]]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mrr": {str(k): v for k, v in self.mrr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "counts": self.counts,
            "hier_distance": {
                "mean": self.mean_distance,
                "histogram": self.distance_histogram,
                "level_match_rate": {g: {str(h): r for h, r in v.items()}
                                     for g, v in self.level_match_rate.items()},
            },
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        ks = tuple(sorted(int(k) for k in d["mrr"]))
        hd = d["hier_distance"]
        return cls(
            ks=ks,
            mrr={int(k): v for k, v in d["mrr"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            counts=d["counts"],
            mean_distance=hd["mean"],
            distance_histogram=hd["histogram"],
            level_match_rate={g: {int(h): r for h, r in v.items()}
                              for g, v in hd["level_match_rate"].items()},
            meta=d.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        lines = ["metric\tk\tgroup\tvalue"]
        for name, table in (("mrr", self.mrr), ("ndcg", self.ndcg)):
            for k in self.ks:
                for g in GROUPS:
                    lines.append(f"{name}\t{k}\t{g}\t{table[k][g]:.6f}")
        for g in GROUPS:
            lines.append(f"hier_distance_mean\t\t{g}\t{self.mean_distance[g]:.6f}")
        for g in GROUPS:
            lines.append(f"count\t\t{g}\t{self.counts[g]}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        """Plain-text table: one row per group, MRR@k and NDCG@k columns."""
        cols = [f"MRR@{k}" for k in self.ks] + [f"NDCG@{k}" for k in self.ks] + ["HDist", "N"]
        head = f"{'group':<7}" + "".join(f"{c:>9}" for c in cols)
        rows = [head, "-" * len(head)]
        for g in GROUPS:
            vals = [self.mrr[k][g] for k in self.ks] + [self.ndcg[k][g] for k in self.ks]
            row = f"{g:<7}" + "".join(f"{v:>9.4f}" for v in vals)
            row += f"{self.mean_distance[g]:>9.3f}{self.counts[g]:>9d}"
            rows.append(row)
        return "\n".join(rows)


def evaluate_ranks(ranks, targets, top1, hierarchy: LabelHierarchy, head_mask,
                   ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    """Assemble a report from per-prediction ranks and top-1 predictions."""
    ranks = np.asarray(ranks)
    targets = np.asarray(targets)
    if ranks.size == 0:
        raise EmptySplit("no predictions to evaluate")
    ks = tuple(sorted(int(k) for k in ks))
    in_head = np.asarray(head_mask, dtype=bool)[targets]
    masks = {"total": np.ones_like(in_head), "head": in_head, "tail": ~in_head}
    counts = {g: int(m.sum()) for g, m in masks.items()}

    def group_mean(values):
        return {g: float(values[m].sum() / counts[g]) if counts[g] else 0.0
                for g, m in masks.items()}

    mrr = {k: group_mean(mrr_at_k(ranks, k)) for k in ks}
    ndcg = {k: group_mean(ndcg_at_k(ranks, k)) for k in ks}

    depth = hierarchy.depth
    lca = hierarchy.lca_depth(targets, np.asarray(top1))
    dist = depth - lca
    mean_distance = group_mean(dist.astype(np.float64))
    histogram = {g: np.bincount(dist[m], minlength=depth + 1).tolist() for g, m in masks.items()}
    level_match = {g: {h: float((lca[m] >= h).sum() / counts[g]) if counts[g] else 0.0
                       for h in range(1, depth + 1)} for g, m in masks.items()}
    meta = {
        "averaging": "per-prediction",
        "grouping": "true next location",
        "tie_break": "lower location index ranks first",
        "hier_distance": "depth - depth(LCA(true, top-1))",
    }
    return EvalReport(ks, mrr, ndcg, counts, mean_distance, histogram, level_match, meta)


def evaluate(score_fn: Callable[[np.ndarray], np.ndarray], targets, hierarchy: LabelHierarchy,
             head_mask, ks: Sequence[int] = DEFAULT_KS, batch_size: int = 1024,
             threads: int = 1) -> EvalReport:
    """Score every prediction with ``score_fn`` and report metrics.

    ``score_fn(idx)`` returns a ``(len(idx), C)`` score matrix for the
    predictions at positions ``idx``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise EmptySplit("no predictions to evaluate")
    chunks = [np.arange(a, min(a + batch_size, targets.size))
              for a in range(0, targets.size, batch_size)]

    def run(idx):
        scores = score_fn(idx)
        return rank_of_true(scores, targets[idx]), np.argmax(scores, axis=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    ranks = np.concatenate([p[0] for p in parts])
    top1 = np.concatenate([p[1] for p in parts])
    return evaluate_ranks(ranks, targets, top1, hierarchy, head_mask, ks)
