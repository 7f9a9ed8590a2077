"""Acceptance criteria, one test per criterion.

Every test records a single ``CRITERION n: PASS|FAIL`` line; the lines are
printed in the terminal summary (see conftest) and when this file is run as a
script.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest

from conftest import random_tree, record
from hiertail.ahl import (
    AdaptiveWeights,
    ablation_config,
    aggregate_levels,
    compute_loss,
    conditional_path_probs,
    cross_entropy_loss,
    gumbel_softmax,
    hierarchical_loss,
    path_sums,
    sample_gumbel,
)
from hiertail.ingest import (
    CheckinDataset,
    filter_records,
    head_size,
    parse_checkins,
    partition_head_tail,
    prepare_dataset,
    segment_user,
    split_counts,
)
from hiertail.metrics import mrr_at_k, ndcg_at_k, rank_of_true
from hiertail.synth import SynthConfig, generate_corpus
from hiertail.hierarchy import build_hierarchy
from hiertail.trainer import TrainConfig, evaluate_model, train
from hiertail.verify import central_difference, fd_close

RESULTS: dict[int, str] = {}


def _record(n: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    RESULTS[n] = line
    print(line)
    assert ok, line


def _instance(rng, hierarchy, batch=1, tau=None):
    c = hierarchy.n_leaves
    logits = rng.uniform(-5, 5, size=(batch, c))
    noise = rng.gumbel(size=(batch, c))
    targets = rng.integers(0, c, size=batch)
    tau = float(rng.choice([0.5, 1.0, 2.0])) if tau is None else tau
    return logits, noise, targets, tau


def test_criterion_01_gradient_oracle():
    rng = np.random.default_rng(1)
    started = time.perf_counter()
    n_inst, bad = 200, 0
    for i in range(n_inst):
        h = random_tree(rng, int(rng.choice([2, 3, 4])), max_leaves=50)
        logits, noise, targets, tau = _instance(rng, h)
        weights = AdaptiveWeights([rng.normal(0, 1, size=t.size) for t in AdaptiveWeights.init(h).theta])
        probs = gumbel_softmax(logits, tau, noise).probs
        out = hierarchical_loss(probs, tau, targets, h, weights)

        def f_logits(z):
            return hierarchical_loss(gumbel_softmax(z, tau, noise).probs, tau, targets, h, weights,
                                     learn_weights=False).value

        ok = fd_close(out.grad_logits, central_difference(f_logits, logits))
        for lv in range(1, h.depth + 1):
            def f_theta(th, lv=lv):
                trial = weights.copy()
                trial.theta[lv - 1] = th
                return hierarchical_loss(probs, tau, targets, h, trial, learn_weights=False).value

            ok &= fd_close(out.grad_theta[lv - 1], central_difference(f_theta, weights.theta[lv - 1]))
        bad += not ok
    elapsed = time.perf_counter() - started
    _record(1, "closed-form gradients match central differences", bad == 0 and elapsed < 30,
            f"{n_inst - bad}/{n_inst} instances, {elapsed:.1f}s")


def test_criterion_02_telescoping_and_ce_equivalence():
    rng = np.random.default_rng(2)
    worst_tel, worst_ce = 0.0, 0.0
    for _ in range(1000):
        h = random_tree(rng, int(rng.choice([2, 3, 4])))
        logits, noise, targets, tau = _instance(rng, h)
        dist = gumbel_softmax(logits, tau, noise)
        ratios, _ = conditional_path_probs(dist, h, targets)
        worst_tel = max(worst_tel, abs(ratios.prod() - dist.probs[0, targets[0]]))
        ahl = hierarchical_loss(dist.probs, tau, targets, h, AdaptiveWeights.uniform(h, 1.0)).value
        ce = cross_entropy_loss(dist.probs, tau, targets).value
        worst_ce = max(worst_ce, abs(ahl * h.depth - ce))
    _record(2, "telescoping identity and unit-weight AHL*H == CE",
            worst_tel <= 1e-12 and worst_ce <= 1e-10,
            f"max telescoping err {worst_tel:.1e}, max CE err {worst_ce:.1e}")


def test_criterion_03_normalisation_and_monotonicity():
    rng = np.random.default_rng(3)
    worst, monotone = 0.0, True
    for _ in range(1000):
        h = random_tree(rng, int(rng.choice([2, 3, 4])))
        logits, noise, targets, tau = _instance(rng, h)
        dist = aggregate_levels(gumbel_softmax(logits, tau, noise), h)
        for lp in dist.level_probs:
            worst = max(worst, float(np.abs(lp.sum(axis=-1) - 1.0).max()))
        s = path_sums(dist, h, targets)
        monotone &= bool(np.all(s[:, :-1] >= s[:, 1:]))
    _record(3, "level sums equal 1 and S is monotone", worst <= 1e-9 and monotone,
            f"max sum err {worst:.1e}, monotone={monotone}")


def test_criterion_04_ce_gradient():
    rng = np.random.default_rng(4)
    exact, fd_ok = True, True
    for _ in range(200):
        c = int(rng.integers(2, 51))
        logits = rng.uniform(-5, 5, size=(1, c))
        noise = rng.gumbel(size=(1, c))
        t = rng.integers(0, c, size=1)
        probs = gumbel_softmax(logits, 1.0, noise).probs
        out = cross_entropy_loss(probs, 1.0, t)
        exact &= bool(out.grad_logits[0, t[0]] == probs[0, t[0]] - 1.0)

        def f(z):
            return cross_entropy_loss(gumbel_softmax(z, 1.0, noise).probs, 1.0, t).value

        mask = np.ones(c, dtype=bool)
        mask[t[0]] = False
        fd = central_difference(f, logits)
        fd_ok &= fd_close(out.grad_logits[0, mask], fd[0, mask], rtol=1e-6)
    _record(4, "CE gradient: p - 1 exactly on the true class, FD elsewhere", exact and fd_ok,
            f"exact={exact}, fd={fd_ok}")


def test_criterion_05_gumbel_sampler():
    g = sample_gumbel(10**6, np.random.default_rng(5))
    mean, var = float(g.mean()), float(g.var())
    target_var = math.pi ** 2 / 6
    ok = abs(mean - 0.5772) <= 0.01 and abs(var - target_var) <= 0.02 * target_var
    _record(5, "Gumbel sampler moments", ok, f"mean {mean:.4f}, var {var:.4f}")


def _brute_rank(scores, t):
    order = sorted(range(len(scores)), key=lambda j: -scores[j])  # stable: ties by index
    return order.index(t) + 1


def test_criterion_06_metrics_oracle():
    rng = np.random.default_rng(6)
    n, c = 10**4, 20
    # small integer scores so ties are common
    scores = rng.integers(0, 8, size=(n, c)).astype(float)
    truth = rng.integers(0, c, size=n)
    ranks = rank_of_true(scores, truth)
    brute = np.array([_brute_rank(s.tolist(), int(t)) for s, t in zip(scores, truth)])
    match = bool(np.array_equal(ranks, brute))
    for k in (1, 5, 10, 20):
        want_mrr = np.array([1 / r if r <= k else 0.0 for r in brute])
        want_ndcg = np.array([1 / math.log2(r + 1) if r <= k else 0.0 for r in brute])
        match &= bool(np.allclose(mrr_at_k(ranks, k), want_mrr, rtol=0, atol=1e-15))
        match &= bool(np.allclose(ndcg_at_k(ranks, k), want_ndcg, rtol=0, atol=1e-15))
    ndcg1 = bool(np.array_equal(ndcg_at_k(ranks, 1), mrr_at_k(ranks, 1)))

    C = 10
    rand_scores = rng.normal(size=(n, C))
    rand_truth = rng.integers(0, C, size=n)
    observed = float(mrr_at_k(rank_of_true(rand_scores, rand_truth), C).mean())
    r = np.arange(1, C + 1)
    expected = float((1.0 / r).sum() / C)
    sigma = math.sqrt(float((1.0 / r ** 2).mean() - expected ** 2) / n)
    uniform_ok = abs(observed - expected) <= 3 * sigma
    _record(6, "ranking metrics match brute force; uniform MRR@C = H_C/C",
            match and ndcg1 and uniform_ok,
            f"brute={match}, ndcg1==mrr1 {ndcg1}, MRR@10 {observed:.4f} vs {expected:.4f} (3sd {3 * sigma:.4f})")


def test_criterion_07_lca_oracle():
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(100):
        h = random_tree(rng, int(rng.integers(1, 5)))
        a = rng.integers(0, h.n_leaves, size=100)
        b = rng.integers(0, h.n_leaves, size=100)
        vec = h.lca_depth(a, b)
        for x, y, v in zip(a.tolist(), b.tolist(), vec.tolist()):
            pa, pb = h.path(x), h.path(y)
            prefix = 0
            while prefix < h.depth and pa[prefix] == pb[prefix]:
                prefix += 1
            ok &= v == prefix and h.hierarchical_distance(x, y) == h.depth - prefix
            ok &= h.lowest_common_ancestor(x, y)[1] == prefix
    _record(7, "LCA depth and hierarchical distance match path-prefix oracle", ok, "10^4 pairs")


def _filter_oracle(records, min_visits, min_checkins):
    kept = list(records)
    while True:
        locs = Counter(r.loc_id for r in kept)
        users = Counter(r.user_id for r in kept)
        bad_loc = next((l for l in sorted(locs) if locs[l] < min_visits), None)
        if bad_loc is not None:
            kept = [r for r in kept if r.loc_id != bad_loc]
            continue
        bad_user = next((u for u in sorted(users) if users[u] < min_checkins), None)
        if bad_user is not None:
            kept = [r for r in kept if r.user_id != bad_user]
            continue
        return kept


def _segment_oracle(ts, window):
    spans, anchor, current = [], None, []
    for i, t in enumerate(ts):
        if anchor is None or t - anchor >= window:
            if len(current) >= 2:
                spans.append((current[0], current[-1] + 1))
            anchor, current = t, []
        current.append(i)
    if len(current) >= 2:
        spans.append((current[0], current[-1] + 1))
    return spans


def test_criterion_08_pipeline_protocol():
    rng = np.random.default_rng(8)
    checks = {}

    # filtering: cascade where dropping a location pushes a user under the threshold
    recs = [record("u1", "A", i) for i in range(3)] + [record("u1", "B", 10 + i) for i in range(1)]
    recs += [record("u2", "A", 20 + i) for i in range(2)] + [record("u2", "C", 30 + i) for i in range(3)]
    recs += [record("u3", "C", 40)]
    got = filter_records(recs, min_visits=3, min_checkins=3)
    fixed = _filter_oracle(recs, 3, 3)
    same = Counter(map(tuple, map(lambda r: (r.user_id, r.loc_id, r.timestamp), got)))
    checks["filter_cascade"] = same == Counter((r.user_id, r.loc_id, r.timestamp) for r in fixed)
    for _ in range(200):
        rs = [record(f"u{rng.integers(6)}", f"l{rng.integers(8)}", i) for i in range(int(rng.integers(0, 60)))]
        mv, mc = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        a = sorted((r.user_id, r.loc_id, r.timestamp) for r in filter_records(rs, mv, mc))
        b = sorted((r.user_id, r.loc_id, r.timestamp) for r in _filter_oracle(rs, mv, mc))
        checks["filter_random"] = checks.get("filter_random", True) and a == b

    # segmentation
    ok = segment_user([0, 100, 86399, 86400, 90000, 200000]) == [(0, 3), (3, 5)]
    for _ in range(500):
        ts = np.sort(rng.integers(0, 5 * 86400, size=int(rng.integers(0, 40)))).tolist()
        ok &= segment_user(ts, 86400) == _segment_oracle(ts, 86400)
    checks["segmentation"] = ok

    # 8:1:1 floor rule, per user, chronological
    ok = split_counts(10) == (8, 1, 1) and split_counts(7) == (5, 0, 2) and split_counts(1) == (0, 0, 1)
    for n in range(0, 200):
        tr, va, te = split_counts(n)
        ok &= tr == math.floor(n * 8 / 10) and va == math.floor(n / 10) and tr + va + te == n
    day = 86400
    rows = []
    for k in range(10):
        rows += [record("u", "a", k * day), record("u", "b", k * day + 60)]
    ds = prepare_dataset(rows, min_visits=1, min_checkins=1)
    ok &= Counter(ds.splits) == {"train": 8, "val": 1, "test": 1}
    starts = [t.start for t in ds.trajectories]
    ok &= [s for s, tag in zip(starts, ds.splits) if tag == "test"] == [max(starts)]
    checks["split"] = ok

    # head = ceil(0.2 |P|), ties by ascending location index
    ok = head_size(7240) == 1448 and head_size(10) == 2 and head_size(11) == 3 and head_size(1) == 1
    counts = np.array([5, 9, 2, 9, 5, 1, 2, 2, 2, 2, 2])  # 5s tie at the boundary
    base = CheckinDataset([], [f"l{i}" for i in range(len(counts))], [], np.zeros((len(counts), 2)),
                          np.zeros(len(counts), dtype=np.int64), np.zeros((0, 4), dtype=np.int64), counts)
    part = partition_head_tail(base)
    ok &= part.head_set == frozenset({0, 1, 3}) and len(part.tail_set) == 8
    checks["head_tail"] = ok

    _record(8, "filter fixed point, 24h segmentation, 8:1:1 floor split, head size and ties",
            all(checks.values()), ", ".join(f"{k}={v}" for k, v in checks.items()))


# -- criterion 9: directional synthetic benchmark ---------------------------

BENCH_SEEDS = (42, 43, 44, 45, 46)
BENCH_TRAIN = dict(epochs=15, batch_size=256, learning_rate=1e-3, dim=32, tau=1.0)


@pytest.fixture(scope="module")
def reference_benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    paths = generate_corpus(SynthConfig(seed=42), out)
    dataset = prepare_dataset(parse_checkins(paths["checkins"]))
    full = build_hierarchy(paths["loc2cat"], paths["cat2act"], paths["act2need"])
    return dataset, full.restrict(dataset.loc_ids)


def test_criterion_09_directional_benchmark(reference_benchmark):
    dataset, hierarchy = reference_benchmark
    started = time.perf_counter()
    rows = []
    for seed in BENCH_SEEDS:
        res = {}
        for loss in ("ce", "ahl"):
            fit = train(dataset, hierarchy, TrainConfig(seed=seed, loss=loss, **BENCH_TRAIN))
            rep = evaluate_model(fit.params, dataset, hierarchy, "test", ks=(5,))
            res[loss] = (rep.mrr[5]["head"], rep.mrr[5]["tail"])
        rows.append((seed, res))
    elapsed = time.perf_counter() - started

    tail_wins = sum(r["ahl"][1] >= r["ce"][1] for _, r in rows)
    head_ce = float(np.mean([r["ce"][0] for _, r in rows]))
    head_ahl = float(np.mean([r["ahl"][0] for _, r in rows]))
    degradation = (head_ce - head_ahl) / head_ce
    per_seed = "; ".join(
        f"{s}: tail {r['ahl'][1]:.4f}/{r['ce'][1]:.4f} head {r['ahl'][0]:.4f}/{r['ce'][0]:.4f}"
        for s, r in rows
    )
    print(f"criterion 9 per seed (AHL/CE): {per_seed}")
    ties = sum(r["ahl"][1] == r["ce"][1] for _, r in rows)
    worst = max((r["ce"][0] - r["ahl"][0]) / r["ce"][0] for _, r in rows)
    _record(9, "AHL tail MRR@5 >= CE in >= 4/5 seeds, mean head MRR@5 drop < 10%",
            tail_wins >= 4 and degradation < 0.10 and elapsed < 600,
            f"tail wins {tail_wins}/5 ({ties} exact ties), mean head drop {100 * degradation:.2f}%, "
            f"worst seed {100 * worst:.2f}%, {elapsed:.0f}s")


def test_criterion_10_ablation_contract():
    rng = np.random.default_rng(10)
    h = random_tree(rng, 4)
    logits, _, targets, tau = _instance(rng, h, batch=8)
    weights = AdaptiveWeights.init(h)
    checks = {}

    out = compute_loss(ablation_config("no_adaptive", tau), logits, targets, h, weights,
                       np.random.default_rng(0))
    checks["no_adaptive_empty"] = out.grad_theta is None

    for flag in ("no_gumbel", "no_exploration"):
        cfg = ablation_config(flag, tau)
        a = compute_loss(cfg, logits, targets, h, weights, np.random.default_rng(1))
        b = compute_loss(cfg, logits, targets, h, weights, np.random.default_rng(999))
        c = compute_loss(cfg, logits, targets, h, weights, None)
        checks[flag] = (a.value == b.value == c.value
                        and np.array_equal(a.grad_logits, b.grad_logits)
                        and np.array_equal(a.grad_logits, c.grad_logits))

    cfg = ablation_config("no_exploitation", tau)
    got = compute_loss(cfg, logits, targets, h, weights, np.random.default_rng(3))
    noise = sample_gumbel(logits.shape, np.random.default_rng(3))
    want = cross_entropy_loss(gumbel_softmax(logits, tau, noise).probs, tau, targets)
    checks["no_exploitation_is_ce"] = abs(got.value - want.value) <= 1e-10 and got.grad_theta is None

    _record(10, "ablation flags", all(checks.values()), ", ".join(f"{k}={v}" for k, v in checks.items()))


def test_criterion_11_determinism(tmp_path):
    from hiertail.cli import main

    data = tmp_path / "data"
    small = ["--n-users", "40", "--n-locations", "120", "--n-categories", "20",
             "--n-activities", "6", "--n-needs", "3"]
    assert main(["synth", "--output-dir", str(data), *small]) == 0
    common = ["--data", str(data / "checkins.csv"), "--loc2cat", str(data / "loc2cat.tsv"),
              "--cat2act", str(data / "cat2act.tsv"), "--act2need", str(data / "act2need.tsv"),
              "--epochs", "3", "--dim", "8", "--seed", "7"]
    for run in ("a", "b"):
        assert main(["train", *common, "--output-dir", str(tmp_path / run)]) == 0
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("epochs.tsv", "checkpoint.htl", "meta.json"))
    _record(11, "identical config and seed give byte-identical logs and checkpoints", same)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
