"""Synthetic long-tailed check-in corpora with a known label hierarchy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from hiertail.hierarchy import LabelHierarchy, write_hierarchy
from hiertail.ingest import DAY_SECONDS, CheckinRecord, write_checkins

EPOCH_START = 1_577_836_800  # 2020-01-01T00:00:00Z


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    n_locations: int = 2000
    n_categories: int = 300
    n_activities: int = 10
    n_needs: int = 3
    zipf_exponent: float = 1.1
    checkins_min: int = 120
    checkins_max: int = 240
    days: int = 90
    need_bias: float = 0.7
    seed: int = 42

    def validate(self) -> None:
        sizes = (self.n_needs, self.n_activities, self.n_categories, self.n_locations)
        if min(sizes) < 1:
            raise InfeasibleConfig("every level needs at least one class")
        if list(sizes) != sorted(sizes):
            raise InfeasibleConfig(
                "need n_needs <= n_activities <= n_categories <= n_locations, got "
                f"{self.n_needs}/{self.n_activities}/{self.n_categories}/{self.n_locations}"
            )
        if not self.zipf_exponent > 0:
            raise InfeasibleConfig("zipf_exponent must be positive")
        if self.n_users < 1:
            raise InfeasibleConfig("n_users must be positive")
        if not 1 <= self.checkins_min <= self.checkins_max:
            raise InfeasibleConfig("need 1 <= checkins_min <= checkins_max")
        if self.days < 1:
            raise InfeasibleConfig("days must be positive")
        if not 0.0 <= self.need_bias <= 1.0:
            raise InfeasibleConfig("need_bias must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _names(prefix: str, n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _assign_parents(n_children: int, n_parents: int, rng: np.random.Generator) -> np.ndarray:
    # the first n_parents children cover every parent once; the rest attach uniformly
    parents = np.concatenate([
        rng.permutation(n_parents),
        rng.integers(0, n_parents, size=n_children - n_parents),
    ])
    return rng.permutation(parents)


def generate_hierarchy(config: SynthConfig, rng: np.random.Generator) -> LabelHierarchy:
    config.validate()
    sizes = (config.n_needs, config.n_activities, config.n_categories, config.n_locations)
    prefixes = ("need_", "act_", "cat_", "loc_")
    names = [_names(p, n) for p, n in zip(prefixes, sizes)]
    parents = [_assign_parents(sizes[h], sizes[h - 1], rng) for h in range(1, 4)]
    return LabelHierarchy(names, parents)


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -s
    return w / w.sum()


def _cdf(weights: np.ndarray) -> np.ndarray:
    c = np.cumsum(weights)
    c /= c[-1]
    c[-1] = 1.0
    return c


def generate_checkins(config: SynthConfig, hierarchy: LabelHierarchy,
                      rng: np.random.Generator) -> list[CheckinRecord]:
    """Draw check-ins: Zipf location popularity mixed with a per-user need preference.

    Each user picks a favourite need class; each check-in comes from the
    locations under that need with probability ``need_bias`` and from the
    whole city otherwise, both following the same Zipf popularity.
    """
    config.validate()
    if hierarchy.depth != 4 or hierarchy.n_leaves != config.n_locations:
        raise InfeasibleConfig("hierarchy does not match the configuration")
    n_loc = hierarchy.n_leaves
    popularity = np.empty(n_loc)
    popularity[rng.permutation(n_loc)] = zipf_weights(n_loc, config.zipf_exponent)
    global_cdf = _cdf(popularity)

    need_of = hierarchy.ancestors[1]
    need_members = [np.flatnonzero(need_of == k) for k in range(hierarchy.class_count(1))]
    need_cdfs = [_cdf(popularity[m]) for m in need_members]

    coords = rng.random((n_loc, 2))
    loc_names = hierarchy.names(4)
    cat_names = hierarchy.names(3)
    loc_cat = hierarchy.ancestors[3]
    user_names = _names("user_", config.n_users)
    span = config.days * DAY_SECONDS

    records = []
    for user in user_names:
        count = int(rng.integers(config.checkins_min, config.checkins_max + 1))
        need = int(rng.integers(hierarchy.class_count(1)))
        biased = rng.random(count) < config.need_bias
        u = rng.random(count)
        locs = np.searchsorted(global_cdf, u, side="right")
        members = need_members[need]
        locs[biased] = members[np.searchsorted(need_cdfs[need], u[biased], side="right")]
        times = np.sort(EPOCH_START + rng.integers(0, span, size=count))
        for loc, t in zip(locs, times):
            records.append(CheckinRecord(
                user, loc_names[loc], float(coords[loc, 0]), float(coords[loc, 1]),
                cat_names[loc_cat[loc]], int(t),
            ))
    return records


def generate_corpus(config: SynthConfig, out_dir) -> dict[str, Path]:
    """Write ``checkins.csv`` plus the three hierarchy mapping files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    hierarchy = generate_hierarchy(config, rng)
    records = generate_checkins(config, hierarchy, rng)
    paths = dict(zip(("loc2cat", "cat2act", "act2need"), write_hierarchy(hierarchy, out_dir)))
    paths["checkins"] = out_dir / "checkins.csv"
    write_checkins(paths["checkins"], records)
    return paths
