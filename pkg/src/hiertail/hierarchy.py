"""Label hierarchy over locations: Need -> Activity -> Category -> Location.

Levels are numbered 1..H from coarse to fine; level 0 is the implicit root and
level H holds the leaves (locations). Nodes are addressed as ``(level, index)``
tuples. Within each level, indices follow lexicographic order of class names.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LEVEL_NAMES = ("need", "activity", "category", "location")
MAPPING_FILES = ("loc2cat.tsv", "cat2act.tsv", "act2need.tsv")


class HierarchyError(ValueError):
    pass


class DuplicateChild(HierarchyError):
    pass


class OrphanNode(HierarchyError):
    pass


class EmptyLevel(HierarchyError):
    pass


class ChildlessNode(HierarchyError):
    """An internal node with no children (its leaf set would be empty)."""


class InvalidLeaf(HierarchyError, IndexError):
    pass


class InvalidNode(HierarchyError, KeyError):
    pass


@dataclass(frozen=True)
class HierarchyLevel:
    index: int
    class_names: tuple[str, ...]

    @property
    def class_count(self) -> int:
        return len(self.class_names)


Node = tuple[int, int]


class LabelHierarchy:
    """Immutable tree of class labels with per-level parent pointers.

    Parameters
    ----------
    level_names : sequence of name lists, coarsest level first.
    parents : for levels 2..H, an integer array mapping each class to its
        parent index on the level above. Level 1 hangs off the root.
    """

    def __init__(self, level_names: Sequence[Sequence[str]], parents: Sequence[Sequence[int]]):
        if len(level_names) < 1:
            raise EmptyLevel("hierarchy needs at least one level")
        if len(parents) != len(level_names) - 1:
            raise HierarchyError(
                f"expected {len(level_names) - 1} parent arrays, got {len(parents)}"
            )
        self.levels = tuple(
            HierarchyLevel(h + 1, tuple(names)) for h, names in enumerate(level_names)
        )
        for level in self.levels:
            if level.class_count == 0:
                raise EmptyLevel(f"level {level.index} has no classes")
            if len(set(level.class_names)) != level.class_count:
                raise HierarchyError(f"level {level.index} has repeated class names")

        self.depth = len(self.levels)
        # _parent[h][i] is the parent index (on level h-1) of node (h, i)
        self._parent: dict[int, np.ndarray] = {1: np.zeros(self.levels[0].class_count, dtype=np.int64)}
        for h in range(2, self.depth + 1):
            arr = np.asarray(parents[h - 2], dtype=np.int64)
            if arr.shape != (self.class_count(h),):
                raise HierarchyError(f"parent array for level {h} has shape {arr.shape}")
            upper = self.class_count(h - 1)
            if arr.size and (arr.min() < 0 or arr.max() >= upper):
                raise OrphanNode(f"level {h} references a parent outside level {h - 1}")
            for h_idx in np.setdiff1d(np.arange(upper), arr):
                raise ChildlessNode(
                    f"node {self.levels[h - 2].class_names[h_idx]!r} on level {h - 1} has no children"
                )
            arr.setflags(write=False)
            self._parent[h] = arr

        # ancestors[h, leaf] = index of the leaf's ancestor on level h (row 0 is the root)
        anc = np.zeros((self.depth + 1, self.n_leaves), dtype=np.int64)
        anc[self.depth] = np.arange(self.n_leaves)
        for h in range(self.depth, 1, -1):
            anc[h - 1] = self._parent[h][anc[h]]
        anc.setflags(write=False)
        self.ancestors = anc
        self._leaf_sets = self._build_leaf_sets()
        self._leaf_lookup = {n: i for i, n in enumerate(self.names(self.depth))}
        self._groups: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for h in range(2, self.depth + 1):
            order = np.argsort(self._parent[h], kind="stable")
            starts = np.searchsorted(self._parent[h][order], np.arange(self.class_count(h - 1)))
            self._groups[h] = (order, starts)

    # -- construction helpers -------------------------------------------

    @classmethod
    def from_edges(cls, edges: Sequence[Mapping[str, str]]) -> "LabelHierarchy":
        """Build from child->parent maps ordered fine to coarse.

        ``edges[0]`` maps leaves to their parents, ``edges[-1]`` maps level-2
        classes to level-1 classes. Class names on each level are the children
        of the corresponding map, sorted lexicographically.
        """
        if not edges:
            raise EmptyLevel("no mapping levels supplied")
        fine_to_coarse = []
        for k, mapping in enumerate(edges):
            if not mapping:
                raise EmptyLevel(f"mapping {k} is empty")
            fine_to_coarse.append(sorted(mapping))
        # coarsest level: the parent names of the last map
        top = sorted(set(edges[-1].values()))
        fine_to_coarse.append(top)
        names = fine_to_coarse[::-1]

        parents = []
        for h in range(2, len(names) + 1):
            mapping = edges[len(names) - h]
            index = {name: i for i, name in enumerate(names[h - 2])}
            arr = []
            for child in names[h - 1]:
                parent = mapping[child]
                if parent not in index:
                    raise OrphanNode(f"{child!r} maps to unknown parent {parent!r}")
                arr.append(index[parent])
            parents.append(arr)
        return cls(names, parents)

    def _build_leaf_sets(self) -> dict[Node, frozenset[int]]:
        sets: dict[Node, frozenset[int]] = {}
        for h in range(1, self.depth + 1):
            order = np.argsort(self.ancestors[h], kind="stable")
            bounds = np.searchsorted(self.ancestors[h][order], np.arange(self.class_count(h) + 1))
            for i in range(self.class_count(h)):
                sets[(h, i)] = frozenset(order[bounds[i]:bounds[i + 1]].tolist())
        sets[(0, 0)] = frozenset(range(self.n_leaves))
        for h in range(1, self.depth):
            merged: dict[int, set[int]] = {}
            for c in range(self.class_count(h + 1)):
                p = int(self._parent[h + 1][c])
                leaves = sets[(h + 1, c)]
                bucket = merged.setdefault(p, set())
                if bucket & leaves:
                    raise HierarchyError(f"overlapping leaf sets under node {(h, p)}")
                bucket |= leaves
            for p, leaves in merged.items():
                if leaves != sets[(h, p)]:
                    raise HierarchyError(f"leaf set of node {(h, p)} is not the union of its children")
        return sets

    # -- structure ------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return self.levels[-1].class_count

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(level.class_count for level in self.levels)

    @property
    def n_nodes(self) -> int:
        return sum(self.class_counts)

    def class_count(self, h: int) -> int:
        return self.levels[h - 1].class_count

    def names(self, h: int) -> tuple[str, ...]:
        return self.levels[h - 1].class_names

    def leaf_index(self, name: str) -> int:
        try:
            return self._leaf_lookup[name]
        except KeyError:
            raise InvalidLeaf(f"unknown leaf name {name!r}") from None

    def parent_array(self, h: int) -> np.ndarray:
        """Parent index on level ``h-1`` for every class on level ``h``."""
        return self._parent[h]

    def child_groups(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        """Column order and segment starts that group level-``h`` classes by parent.

        ``np.add.reduceat(x[..., order], starts, axis=-1)`` sums children into parents.
        """
        return self._groups[h]

    def parent_of(self, node: Node) -> Node:
        h, i = self._check_node(node)
        if h == 0:
            raise InvalidNode("the root has no parent")
        return (h - 1, int(self._parent[h][i]))

    def transition_matrix(self, h: int) -> np.ndarray:
        """Binary ``C^h x C^(h-1)`` child-to-parent matrix for ``2 <= h <= H``."""
        if not 2 <= h <= self.depth:
            raise InvalidNode(f"no transition matrix into level {h}")
        t = np.zeros((self.class_count(h), self.class_count(h - 1)), dtype=np.int8)
        t[np.arange(self.class_count(h)), self._parent[h]] = 1
        return t

    def level_indicator(self, h: int) -> np.ndarray:
        """``C^H x C^h`` float matrix with a one at (leaf, ancestor on level h)."""
        m = np.zeros((self.n_leaves, self.class_count(h)))
        m[np.arange(self.n_leaves), self.ancestors[h]] = 1.0
        return m

    def path(self, leaf: int) -> tuple[int, ...]:
        """Ancestor indices on levels 1..H (the last entry is the leaf itself)."""
        leaf = self._check_leaf(leaf)
        return tuple(int(x) for x in self.ancestors[1:, leaf])

    def leaves_of(self, node: Node) -> frozenset[int]:
        return self._leaf_sets[self._check_node(node)]

    def node_depth(self, node: Node) -> int:
        return self._check_node(node)[0]

    # -- queries --------------------------------------------------------

    def lowest_common_ancestor(self, leaf_a: int, leaf_b: int) -> tuple[Node, int]:
        """Deepest node shared by both root paths, and its depth (root = 0)."""
        a = self._check_leaf(leaf_a)
        b = self._check_leaf(leaf_b)
        depth = int(self.lca_depth(np.array([a]), np.array([b]))[0])
        return (depth, int(self.ancestors[depth, a])), depth

    def lca_depth(self, leaves_a, leaves_b) -> np.ndarray:
        """Vectorised LCA depth for paired leaf arrays (no bounds checking)."""
        a = np.asarray(leaves_a)
        b = np.asarray(leaves_b)
        # agreement on level h implies agreement on every level above it
        return (self.ancestors[1:, a] == self.ancestors[1:, b]).sum(axis=0)

    def hierarchical_distance(self, truth: int, predicted: int) -> int:
        return self.depth - self.lowest_common_ancestor(truth, predicted)[1]

    def _check_leaf(self, leaf) -> int:
        if isinstance(leaf, (bool, np.bool_)) or not isinstance(leaf, (int, np.integer)):
            raise InvalidLeaf(f"leaf must be an integer index, got {leaf!r}")
        if not 0 <= leaf < self.n_leaves:
            raise InvalidLeaf(f"leaf {leaf} outside [0, {self.n_leaves})")
        return int(leaf)

    def _check_node(self, node) -> Node:
        try:
            h, i = node
        except (TypeError, ValueError):
            raise InvalidNode(f"node must be a (level, index) pair, got {node!r}") from None
        if h == 0 and i == 0:
            return (0, 0)
        if not 1 <= h <= self.depth or not 0 <= i < self.class_count(h):
            raise InvalidNode(f"no node {node!r}")
        return (int(h), int(i))

    # -- derived hierarchies and persistence ----------------------------

    def edges(self) -> list[dict[str, str]]:
        """Child->parent name maps, fine to coarse (inverse of ``from_edges``)."""
        out = []
        for h in range(self.depth, 1, -1):
            up = self.names(h - 1)
            out.append({name: up[p] for name, p in zip(self.names(h), self._parent[h])})
        return out

    def restrict(self, leaf_names: Iterable[str]) -> "LabelHierarchy":
        """Sub-hierarchy keeping only the given leaves; empty branches are pruned."""
        keep = set(leaf_names)
        missing = keep.difference(self.names(self.depth))
        if missing:
            raise InvalidLeaf(f"{len(missing)} leaves not in hierarchy, e.g. {sorted(missing)[0]!r}")
        edges = self.edges()
        pruned = []
        for mapping in edges:
            mapping = {c: p for c, p in mapping.items() if c in keep}
            pruned.append(mapping)
            keep = set(mapping.values())
        return LabelHierarchy.from_edges(pruned)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelHierarchy):
            return NotImplemented
        return self.levels == other.levels and all(
            np.array_equal(self._parent[h], other._parent[h]) for h in range(1, self.depth + 1)
        )

    def __repr__(self) -> str:
        return f"LabelHierarchy(class_counts={self.class_counts})"


def read_mapping(path) -> dict[str, str]:
    """Parse a ``child<TAB>parent`` file. Comments (``#``) and blank lines are skipped."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise HierarchyError(f"{path}:{lineno}: expected 'child<TAB>parent'")
            child, parent = parts
            if child in mapping:
                raise DuplicateChild(
                    f"{path}:{lineno}: {child!r} already mapped to {mapping[child]!r}"
                )
            mapping[child] = parent
    if not mapping:
        raise EmptyLevel(f"{path}: no mappings")
    return mapping


def write_mapping(path, mapping: Mapping[str, str], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for child in sorted(mapping):
            fh.write(f"{child}\t{mapping[child]}\n")


def build_hierarchy(loc_to_cat, cat_to_act, act_to_need) -> LabelHierarchy:
    """Build the four-level hierarchy from its three mapping files."""
    return LabelHierarchy.from_edges(
        [read_mapping(loc_to_cat), read_mapping(cat_to_act), read_mapping(act_to_need)]
    )


def write_hierarchy(hierarchy: LabelHierarchy, directory) -> list[Path]:
    """Emit ``loc2cat.tsv``, ``cat2act.tsv`` and ``act2need.tsv`` into ``directory``."""
    if hierarchy.depth != 4:
        raise HierarchyError("mapping files describe a four-level hierarchy")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    headers = ("location -> category", "category -> activity", "activity -> need")
    for fname, mapping, header in zip(MAPPING_FILES, hierarchy.edges(), headers):
        path = directory / fname
        write_mapping(path, mapping, header)
        paths.append(path)
    return paths
