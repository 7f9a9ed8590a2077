import numpy as np
import pytest

from hiertail.hierarchy import LabelHierarchy
from hiertail.ingest import CheckinRecord


def random_tree(rng: np.random.Generator, depth: int, max_leaves: int = 50) -> LabelHierarchy:
    """Random hierarchy with non-decreasing level sizes and no childless nodes."""
    sizes = [int(rng.integers(1, 4))]
    for h in range(1, depth):
        remaining = depth - h
        hi = max(sizes[-1], max_leaves // (2 ** (remaining - 1)))
        sizes.append(int(rng.integers(sizes[-1], hi + 1)))
    names = [[f"l{h}_{i:03d}" for i in range(n)] for h, n in enumerate(sizes, start=1)]
    parents = []
    for upper, lower in zip(sizes, sizes[1:]):
        arr = np.concatenate([np.arange(upper), rng.integers(0, upper, size=lower - upper)])
        parents.append(rng.permutation(arr))
    return LabelHierarchy(names, parents)


def record(user, loc, ts, cat="c", lat=0.0, lon=0.0):
    return CheckinRecord(str(user), str(loc), lat, lon, cat, int(ts))


TINY = dict(n_users=30, n_locations=80, n_categories=16, n_activities=5, n_needs=3,
            checkins_min=60, checkins_max=90, days=30)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus on disk: paths, prepared dataset, aligned hierarchy."""
    from hiertail.hierarchy import build_hierarchy
    from hiertail.ingest import parse_checkins, prepare_dataset
    from hiertail.synth import SynthConfig, generate_corpus

    out = tmp_path_factory.mktemp("tiny")
    paths = generate_corpus(SynthConfig(seed=3, **TINY), out)
    dataset = prepare_dataset(parse_checkins(paths["checkins"]), min_visits=5, min_checkins=20)
    hierarchy = build_hierarchy(paths["loc2cat"], paths["cat2act"], paths["act2need"])
    return paths, dataset, hierarchy.restrict(dataset.loc_ids)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_tree():
    # need0 -> act0 -> {cat0 -> {a, b}, cat1 -> {c}} ; need1 -> act1 -> cat2 -> {d, e}
    return LabelHierarchy.from_edges([
        {"a": "cat0", "b": "cat0", "c": "cat1", "d": "cat2", "e": "cat2"},
        {"cat0": "act0", "cat1": "act0", "cat2": "act1"},
        {"act0": "need0", "act1": "need1"},
    ])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
