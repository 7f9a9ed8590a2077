import numpy as np
import pytest

from hiertail.ingest import parse_checkins
from hiertail.hierarchy import build_hierarchy
from hiertail.synth import EPOCH_START, InfeasibleConfig, SynthConfig, generate_corpus, generate_hierarchy, zipf_weights


def test_zipf_weights():
    w = zipf_weights(4, 1.0)
    assert w.sum() == pytest.approx(1.0)
    assert w.tolist() == pytest.approx(np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))


def test_hierarchy_sizes_and_coverage():
    cfg = SynthConfig(n_needs=3, n_activities=10, n_categories=30, n_locations=100)
    h = generate_hierarchy(cfg, np.random.default_rng(0))
    assert h.class_counts == (3, 10, 30, 100)
    for lv in range(2, 5):
        assert h.transition_matrix(lv).sum(axis=0).min() >= 1


@pytest.mark.parametrize("kwargs", [
    dict(n_needs=5, n_activities=3),
    dict(zipf_exponent=0.0),
    dict(checkins_min=10, checkins_max=5),
    dict(need_bias=1.5),
    dict(n_users=0),
])
def test_infeasible(kwargs):
    with pytest.raises(InfeasibleConfig):
        SynthConfig(**kwargs).validate()


def test_corpus_is_reproducible_and_consistent(tmp_path):
    cfg = SynthConfig(n_users=10, n_locations=40, n_categories=8, n_activities=4, n_needs=2,
                      checkins_min=20, checkins_max=30, days=10, seed=9)
    a = generate_corpus(cfg, tmp_path / "a")
    b = generate_corpus(cfg, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    recs = parse_checkins(a["checkins"])
    h = build_hierarchy(a["loc2cat"], a["cat2act"], a["act2need"])
    loc2cat = dict(zip(h.names(4), (h.names(3)[i] for i in h.ancestors[3])))
    assert all(loc2cat[r.loc_id] == r.category for r in recs)
    per_user = {}
    for r in recs:
        per_user.setdefault(r.user_id, []).append(r.timestamp)
    assert len(per_user) == 10
    for ts in per_user.values():
        assert 20 <= len(ts) <= 30
        assert ts == sorted(ts)
        assert EPOCH_START <= ts[0] and ts[-1] < EPOCH_START + 10 * 86400


def test_popularity_is_heavy_tailed(tmp_path):
    cfg = SynthConfig(n_users=50, n_locations=200, n_categories=20, n_activities=5, n_needs=2, seed=1)
    recs = parse_checkins(generate_corpus(cfg, tmp_path)["checkins"])
    counts = np.sort(np.bincount([int(r.loc_id[4:]) for r in recs], minlength=200))[::-1]
    assert counts[:40].sum() > 0.5 * counts.sum()
