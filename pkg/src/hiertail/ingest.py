"""Check-in parsing and the preprocessing protocol.

Pipeline: ``parse_checkins`` -> ``filter_and_index`` -> ``segment_trajectories``
-> ``chronological_split`` -> ``partition_head_tail``. ``prepare_dataset`` runs
all of them in order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

COLUMNS = ("user_id", "loc_id", "lat", "lon", "category", "timestamp_utc")
DAY_SECONDS = 86400
MIN_LOCATION_VISITS = 15
MIN_USER_CHECKINS = 100
SPLIT_RATIOS = (0.8, 0.1, 0.1)
HEAD_FRACTION = 0.2
SPLIT_NAMES = ("train", "val", "test")


class IngestError(Exception):
    pass


class SchemaError(IngestError):
    pass


class RecordError(IngestError, ValueError):
    """A malformed row; ``lineno`` is 1-based and counts the header."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptyAfterFilter(IngestError):
    pass


@dataclass(frozen=True)
class CheckinRecord:
    user_id: str
    loc_id: str
    lat: float
    lon: float
    category: str
    timestamp: int


@dataclass(frozen=True)
class Trajectory:
    user_index: int
    locations: tuple[int, ...]
    categories: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def start(self) -> int:
        return self.timestamps[0]

    @property
    def points(self) -> list[tuple[int, int, int]]:
        return list(zip(self.locations, self.categories, self.timestamps))


@dataclass
class CheckinDataset:
    """Filtered and indexed check-ins; later stages fill the remaining fields.

    ``checkins`` is an ``(n, 4)`` integer array of (user, location, category,
    timestamp), sorted by user then time (file order breaks ties).
    """

    user_ids: list[str]
    loc_ids: list[str]
    category_names: list[str]
    loc_coords: np.ndarray
    loc_category: np.ndarray
    checkins: np.ndarray
    visit_counts: np.ndarray
    trajectories: list[Trajectory] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)
    head_set: frozenset[int] = frozenset()
    tail_set: frozenset[int] = frozenset()
    dropped_unseen: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_locations(self) -> int:
        return len(self.loc_ids)

    def split(self, name: str) -> list[Trajectory]:
        return [t for t, s in zip(self.trajectories, self.splits) if s == name]

    def head_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_locations, dtype=bool)
        mask[list(self.head_set)] = True
        return mask

    def loc2cat(self) -> dict[str, str]:
        return {lid: self.category_names[c] for lid, c in zip(self.loc_ids, self.loc_category)}

    def stats(self) -> dict:
        per_split = Counter(self.splits)
        return {
            "checkins": int(len(self.checkins)),
            "users": self.n_users,
            "locations": self.n_locations,
            "categories": len(self.category_names),
            "trajectories": len(self.trajectories),
            "trajectories_per_split": {s: per_split.get(s, 0) for s in SPLIT_NAMES},
            "dropped_unseen_trajectories": self.dropped_unseen,
            "head_locations": len(self.head_set),
            "tail_locations": len(self.tail_set),
            "head_tail_basis": "visit counts over the full filtered dataset, before splitting",
        }


# -- parsing ----------------------------------------------------------------


def _parse_row(row: dict, lineno: int) -> CheckinRecord:
    try:
        lat = float(row["lat"])
        lon = float(row["lon"])
    except (TypeError, ValueError):
        raise RecordError("unparsable coordinate", lineno) from None
    ts_raw = row["timestamp_utc"]
    try:
        ts = int(ts_raw)
    except (TypeError, ValueError):
        try:
            ts_f = float(ts_raw)
        except (TypeError, ValueError):
            raise RecordError(f"unparsable timestamp {ts_raw!r}", lineno) from None
        if not ts_f.is_integer():
            raise RecordError(f"timestamp {ts_raw!r} is not whole seconds", lineno)
        ts = int(ts_f)
    if not (-90.0 <= lat <= 90.0) or math.isnan(lat):
        raise RecordError(f"latitude {lat} outside [-90, 90]", lineno)
    if not (-180.0 <= lon <= 180.0) or math.isnan(lon):
        raise RecordError(f"longitude {lon} outside [-180, 180]", lineno)
    if ts < 0:
        raise RecordError(f"negative timestamp {ts}", lineno)
    user, loc = str(row["user_id"]), str(row["loc_id"])
    if not user or not loc:
        raise RecordError("empty user_id or loc_id", lineno)
    return CheckinRecord(user, loc, lat, lon, str(row["category"]), ts)


def _iter_rows(path: Path, fmt: str):
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise SchemaError(f"{path}: missing header row")
            missing = [c for c in COLUMNS if c not in reader.fieldnames]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {missing}")
            for row in reader:
                yield reader.line_num, row
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordError(f"invalid JSON ({exc.msg})", lineno) from None
                if not isinstance(row, dict):
                    raise RecordError("expected a JSON object", lineno)
                missing = [c for c in COLUMNS if c not in row]
                if missing:
                    raise SchemaError(f"{path}:{lineno}: missing key(s) {missing}")
                yield lineno, row
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_checkins(path, fmt: str | None = None, strict: bool = True) -> list[CheckinRecord]:
    """Read check-ins from CSV or JSONL (format inferred from the suffix if omitted).

    With ``strict=False`` malformed rows are skipped and their count logged
    instead of raising.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv"
    records = []
    bad = 0
    for lineno, row in _iter_rows(path, fmt):
        try:
            records.append(_parse_row(row, lineno))
        except RecordError:
            if strict:
                raise
            bad += 1
    if bad:
        log.warning("%s: skipped %d malformed row(s)", path, bad)
    return records


def write_checkins(path, records: Iterable[CheckinRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in records:
            writer.writerow([r.user_id, r.loc_id, repr(r.lat), repr(r.lon), r.category, r.timestamp])


# -- filtering --------------------------------------------------------------


def filter_records(records: Sequence[CheckinRecord], min_visits: int = MIN_LOCATION_VISITS,
                   min_checkins: int = MIN_USER_CHECKINS) -> list[CheckinRecord]:
    """Drop sparse locations, then sparse users, repeating until nothing changes."""
    kept = list(records)
    while True:
        loc_counts = Counter(r.loc_id for r in kept)
        stage = [r for r in kept if loc_counts[r.loc_id] >= min_visits]
        user_counts = Counter(r.user_id for r in stage)
        stage = [r for r in stage if user_counts[r.user_id] >= min_checkins]
        if len(stage) == len(kept):
            return stage
        kept = stage


def filter_and_index(records: Sequence[CheckinRecord], min_visits: int = MIN_LOCATION_VISITS,
                     min_checkins: int = MIN_USER_CHECKINS) -> CheckinDataset:
    """Apply the visit/check-in thresholds to a fixed point and assign dense indices.

    Indices follow lexicographic id order. A location's coordinates and
    category are taken from its first surviving record.
    """
    if not records:
        raise EmptyAfterFilter("no records to filter")
    kept = filter_records(records, min_visits, min_checkins)
    if not kept:
        raise EmptyAfterFilter(
            f"no check-ins survive the filters (>= {min_visits} visits per location, "
            f">= {min_checkins} check-ins per user)"
        )
    user_ids = sorted({r.user_id for r in kept})
    loc_ids = sorted({r.loc_id for r in kept})
    uidx = {u: i for i, u in enumerate(user_ids)}
    lidx = {l: i for i, l in enumerate(loc_ids)}

    first: dict[str, CheckinRecord] = {}
    for r in kept:
        first.setdefault(r.loc_id, r)
    category_names = sorted({first[l].category for l in loc_ids})
    cidx = {c: i for i, c in enumerate(category_names)}
    coords = np.array([[first[l].lat, first[l].lon] for l in loc_ids], dtype=np.float64)
    loc_category = np.array([cidx[first[l].category] for l in loc_ids], dtype=np.int64)

    rows = np.array(
        [(uidx[r.user_id], lidx[r.loc_id], loc_category[lidx[r.loc_id]], r.timestamp) for r in kept],
        dtype=np.int64,
    ).reshape(-1, 4)
    order = np.lexsort((np.arange(len(rows)), rows[:, 3], rows[:, 0]))
    rows = rows[order]
    visit_counts = np.bincount(rows[:, 1], minlength=len(loc_ids))
    return CheckinDataset(user_ids, loc_ids, category_names, coords, loc_category, rows, visit_counts)


# -- segmentation, splitting, head/tail -------------------------------------


def segment_user(timestamps: Sequence[int], window: int = DAY_SECONDS) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` index ranges of each window with at least two points.

    A new window opens at the first check-in that is ``window`` seconds or more
    after the current window's first check-in.
    """
    spans = []
    start = 0
    for k in range(1, len(timestamps) + 1):
        if k == len(timestamps) or timestamps[k] - timestamps[start] >= window:
            if k - start >= 2:
                spans.append((start, k))
            start = k
    return spans


def segment_trajectories(dataset: CheckinDataset, window: int = DAY_SECONDS) -> CheckinDataset:
    rows = dataset.checkins
    trajectories = []
    users, first = np.unique(rows[:, 0], return_index=True)
    bounds = list(first) + [len(rows)]
    for k, u in enumerate(users):
        block = rows[bounds[k]:bounds[k + 1]]
        for a, b in segment_user(block[:, 3].tolist(), window):
            seg = block[a:b]
            trajectories.append(Trajectory(
                int(u), tuple(seg[:, 1].tolist()), tuple(seg[:, 2].tolist()), tuple(seg[:, 3].tolist())
            ))
    return replace(dataset, trajectories=trajectories, splits=[], dropped_unseen=0)


def split_counts(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> tuple[int, int, int]:
    """Floor for train and val, remainder to test (exact rational arithmetic)."""
    r_train, r_val = Fraction(str(ratios[0])), Fraction(str(ratios[1]))
    n_train = math.floor(n * r_train)
    n_val = math.floor(n * r_val)
    return n_train, n_val, n - n_train - n_val


def chronological_split(dataset: CheckinDataset, ratios: Sequence[float] = SPLIT_RATIOS) -> CheckinDataset:
    """Per-user 8:1:1 split by trajectory start, then drop val/test trajectories
    that mention a user or location never seen in training."""
    by_user: dict[int, list[Trajectory]] = {}
    for t in dataset.trajectories:
        by_user.setdefault(t.user_index, []).append(t)
    tagged: list[tuple[Trajectory, str]] = []
    for u in sorted(by_user):
        trajs = sorted(by_user[u], key=lambda t: t.start)
        n_train, n_val, _ = split_counts(len(trajs), ratios)
        for k, t in enumerate(trajs):
            tag = "train" if k < n_train else "val" if k < n_train + n_val else "test"
            tagged.append((t, tag))

    seen_users = {t.user_index for t, s in tagged if s == "train"}
    seen_locs = {l for t, s in tagged if s == "train" for l in t.locations}
    kept, tags, dropped = [], [], 0
    for t, s in tagged:
        if s != "train" and (t.user_index not in seen_users or not seen_locs.issuperset(t.locations)):
            dropped += 1
            continue
        kept.append(t)
        tags.append(s)
    return replace(dataset, trajectories=kept, splits=tags, dropped_unseen=dropped)


def head_size(n_locations: int, fraction: float = HEAD_FRACTION) -> int:
    return math.ceil(n_locations * Fraction(str(fraction)))


def partition_head_tail(dataset: CheckinDataset, fraction: float = HEAD_FRACTION) -> CheckinDataset:
    """Top ``ceil(fraction * |P|)`` locations by visit count form the head.

    Ties are broken by ascending location index.
    """
    counts = dataset.visit_counts
    order = np.lexsort((np.arange(len(counts)), -counts))
    k = head_size(len(counts), fraction)
    head = frozenset(order[:k].tolist())
    tail = frozenset(order[k:].tolist())
    return replace(dataset, head_set=head, tail_set=tail)


def prepare_dataset(records: Sequence[CheckinRecord], *, min_visits: int = MIN_LOCATION_VISITS,
                    min_checkins: int = MIN_USER_CHECKINS, window: int = DAY_SECONDS,
                    ratios: Sequence[float] = SPLIT_RATIOS,
                    head_fraction: float = HEAD_FRACTION) -> CheckinDataset:
    ds = filter_and_index(records, min_visits, min_checkins)
    ds = segment_trajectories(ds, window)
    ds = chronological_split(ds, ratios)
    return partition_head_tail(ds, head_fraction)


# -- snapshots --------------------------------------------------------------


def save_snapshot(dataset: CheckinDataset, directory) -> Path:
    """Persist ``records.bin`` (npz), ``stats.json``, ``splits.tsv`` and ``head_tail.tsv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lengths = np.array([len(t) for t in dataset.trajectories], dtype=np.int64)
    flat = [p for t in dataset.trajectories for p in t.points]
    with open(directory / "records.bin", "wb") as fh:
        np.savez(
            fh,
            checkins=dataset.checkins,
            loc_coords=dataset.loc_coords,
            loc_category=dataset.loc_category,
            visit_counts=dataset.visit_counts,
            traj_users=np.array([t.user_index for t in dataset.trajectories], dtype=np.int64),
            traj_lengths=lengths,
            traj_points=np.array(flat, dtype=np.int64).reshape(-1, 3),
            user_ids=np.array(dataset.user_ids, dtype=str),
            loc_ids=np.array(dataset.loc_ids, dtype=str),
            category_names=np.array(dataset.category_names, dtype=str),
        )
    with open(directory / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(dataset.stats(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "splits.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("trajectory\tuser_id\tstart_utc\tlength\tsplit\n")
        for k, (t, s) in enumerate(zip(dataset.trajectories, dataset.splits)):
            fh.write(f"{k}\t{dataset.user_ids[t.user_index]}\t{t.start}\t{len(t)}\t{s}\n")
    head = dataset.head_mask()
    with open(directory / "head_tail.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("loc_id\tvisits\tgroup\n")
        for i, lid in enumerate(dataset.loc_ids):
            fh.write(f"{lid}\t{dataset.visit_counts[i]}\t{'head' if head[i] else 'tail'}\n")
    return directory


def load_snapshot(directory) -> CheckinDataset:
    directory = Path(directory)
    with np.load(directory / "records.bin") as z:
        arrays = {k: z[k] for k in z.files}
    with open(directory / "splits.tsv", encoding="utf-8") as fh:
        next(fh)
        splits = [line.rstrip("\n").split("\t")[4] for line in fh if line.strip()]
    with open(directory / "head_tail.tsv", encoding="utf-8") as fh:
        next(fh)
        groups = [line.rstrip("\n").split("\t")[2] for line in fh if line.strip()]
    with open(directory / "stats.json", encoding="utf-8") as fh:
        stats = json.load(fh)

    trajectories = []
    pos = 0
    points = arrays["traj_points"]
    for u, n in zip(arrays["traj_users"], arrays["traj_lengths"]):
        seg = points[pos:pos + n]
        pos += n
        trajectories.append(Trajectory(int(u), tuple(seg[:, 0].tolist()),
                                       tuple(seg[:, 1].tolist()), tuple(seg[:, 2].tolist())))
    if len(splits) != len(trajectories):
        raise IngestError(f"{directory}: splits.tsv does not match records.bin")
    head = frozenset(i for i, g in enumerate(groups) if g == "head")
    return CheckinDataset(
        user_ids=arrays["user_ids"].tolist(),
        loc_ids=arrays["loc_ids"].tolist(),
        category_names=arrays["category_names"].tolist(),
        loc_coords=arrays["loc_coords"],
        loc_category=arrays["loc_category"],
        checkins=arrays["checkins"],
        visit_counts=arrays["visit_counts"],
        trajectories=trajectories,
        splits=splits,
        head_set=head,
        tail_set=frozenset(range(len(groups))) - head,
        dropped_unseen=int(stats.get("dropped_unseen_trajectories", 0)),
    )
