"""Hierarchical CU partition maps (HCPM) for a 64x64 CTU.

Cell layout (21 cells, also the on-disk byte order)::

    0           level 1, the whole CTU
    1 + i       level 2, quadrant i = 2*row + col
    5 + 4*i + j level 3, sub-block j of quadrant i (same raster rule)

Labels are stored as one byte: 0 = NotSplit, 1 = Split, 255 = Null.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np

CTU_SIZE = 64
N_CELLS = 21
LEVEL_SLICES = (slice(0, 1), slice(1, 5), slice(5, 21))
LEVEL_SIZES = (1, 4, 16)
CU_EDGES = (64, 32, 16, 8)


class Label(IntEnum):
    NOT_SPLIT = 0
    SPLIT = 1
    NULL = 255


class Decision(IntEnum):
    NOT_SPLIT = 0
    SPLIT = 1
    UNCERTAIN = 2


class MalformedHcpm(ValueError):
    pass


def level_of(cell: int) -> int:
    """1-based HCPM level of a cell index."""
    return 1 if cell == 0 else (2 if cell < 5 else 3)


def cell_rect(cell: int) -> tuple[int, int, int]:
    """``(x, y, size)`` of the CU a cell's decision applies to."""
    if cell == 0:
        return 0, 0, 64
    if cell < 5:
        i = cell - 1
        return 32 * (i % 2), 32 * (i // 2), 32
    i, j = divmod(cell - 5, 4)
    return 32 * (i % 2) + 16 * (j % 2), 32 * (i // 2) + 16 * (j // 2), 16


def validate_labels(labels) -> None:
    """Raise :class:`MalformedHcpm` unless ``labels`` obey the null-nesting rules."""
    lab = [int(v) for v in labels]
    if len(lab) != N_CELLS:
        raise MalformedHcpm(f"expected {N_CELLS} labels, got {len(lab)}")
    if any(v not in (0, 1, 255) for v in lab):
        raise MalformedHcpm("labels must be 0, 1 or 255")
    if lab[0] == Label.NULL:
        raise MalformedHcpm("level-1 label cannot be null")
    for i in range(4):
        parent_split = lab[0] == Label.SPLIT
        if (lab[1 + i] == Label.NULL) == parent_split:
            raise MalformedHcpm(f"level-2 cell {i} nullness disagrees with level 1")
        for j in range(4):
            sub_split = lab[1 + i] == Label.SPLIT
            if (lab[5 + 4 * i + j] == Label.NULL) == sub_split:
                raise MalformedHcpm(f"level-3 cell {i},{j} nullness disagrees with level 2")


@dataclass(frozen=True)
class Hcpm:
    labels: tuple

    def __post_init__(self):
        validate_labels(self.labels)
        object.__setattr__(self, "labels", tuple(Label(int(v)) for v in self.labels))

    @property
    def level1(self) -> Label:
        return self.labels[0]

    @property
    def level2(self) -> tuple:
        return self.labels[1:5]

    @property
    def level3(self) -> tuple:
        """4 x 4 nested as ``[quadrant][sub-block]``."""
        return tuple(self.labels[5 + 4 * i: 9 + 4 * i] for i in range(4))

    def to_bytes(self) -> bytes:
        return bytes(int(v) for v in self.labels)

    @classmethod
    def from_bytes(cls, data) -> "Hcpm":
        return cls(tuple(data))

    def as_array(self) -> np.ndarray:
        return np.array([int(v) for v in self.labels], dtype=np.uint8)


@dataclass(frozen=True)
class PartitionTree:
    """Quad-tree over one CTU. ``children is None`` marks a leaf CU."""

    children: Optional[tuple] = None

    def __post_init__(self):
        if self.children is not None:
            if len(self.children) != 4:
                raise ValueError("internal nodes need exactly four children")
            if self.height() > 3:
                raise ValueError("partition deeper than 8x8 CUs")

    @classmethod
    def leaf(cls) -> "PartitionTree":
        return cls(None)

    @classmethod
    def split(cls, *children) -> "PartitionTree":
        return cls(tuple(children))

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def height(self) -> int:
        if self.children is None:
            return 0
        return 1 + max(c.height() for c in self.children)

    def leaves(self, x=0, y=0, size=CTU_SIZE) -> Iterator[tuple[int, int, int]]:
        """Leaf CUs as ``(x, y, size)`` in z-order."""
        if self.children is None:
            yield x, y, size
            return
        h = size // 2
        for q, child in enumerate(self.children):
            yield from child.leaves(x + h * (q % 2), y + h * (q // 2), h)

    def n_splits(self) -> int:
        if self.children is None:
            return 0
        return 1 + sum(c.n_splits() for c in self.children)


def hcpm_to_tree(h: Hcpm) -> PartitionTree:
    validate_labels(h.labels)
    lab = h.labels
    if lab[0] != Label.SPLIT:
        return PartitionTree.leaf()
    quads = []
    for i in range(4):
        if lab[1 + i] != Label.SPLIT:
            quads.append(PartitionTree.leaf())
            continue
        subs = []
        for j in range(4):
            if lab[5 + 4 * i + j] == Label.SPLIT:
                subs.append(PartitionTree.split(*[PartitionTree.leaf()] * 4))
            else:
                subs.append(PartitionTree.leaf())
        quads.append(PartitionTree.split(*subs))
    return PartitionTree.split(*quads)


def tree_to_hcpm(t: PartitionTree) -> Hcpm:
    lab = [Label.NULL] * N_CELLS
    lab[0] = Label.SPLIT if not t.is_leaf else Label.NOT_SPLIT
    if not t.is_leaf:
        for i, q in enumerate(t.children):
            lab[1 + i] = Label.SPLIT if not q.is_leaf else Label.NOT_SPLIT
            if not q.is_leaf:
                for j, s in enumerate(q.children):
                    lab[5 + 4 * i + j] = Label.SPLIT if not s.is_leaf else Label.NOT_SPLIT
    return Hcpm(tuple(lab))


def depth_map(h: Hcpm) -> np.ndarray:
    """CU depth (0-3) of each 16x16 unit, as a 4x4 spatial array."""
    out = np.zeros((4, 4), dtype=np.int8)
    for x, y, size in hcpm_to_tree(h).leaves():
        d = CU_EDGES.index(size)
        out[y // 16: (y + size + 15) // 16, x // 16: (x + size + 15) // 16] = d
    return out


# -- combinatorics ---------------------------------------------------------------

def count_partition_patterns(max_depth: int) -> int:
    """Number of distinct legal partitions when CUs may split ``max_depth`` times."""
    if max_depth not in (1, 2, 3):
        raise ValueError("max_depth must be 1, 2 or 3")
    n = 1
    for _ in range(max_depth):
        n = 1 + n ** 4
    return n


def enumerate_hcpm_arrays() -> np.ndarray:
    """All valid label vectors, by brute force over the 2**21 binary assignments.

    Each binary assignment is canonicalised by nulling cells beneath a
    NotSplit decision; the distinct results are exactly the legal HCPMs.
    Returns a ``(n, 21)`` uint8 array sorted lexicographically.
    """
    codes = np.arange(1 << N_CELLS, dtype=np.uint32)
    bits = ((codes[:, None] >> np.arange(N_CELLS, dtype=np.uint32)) & 1).astype(np.uint8)
    l1 = bits[:, 0:1]
    l2_valid = np.repeat(l1, 4, axis=1)
    l3_valid = np.repeat(l2_valid * bits[:, 1:5], 4, axis=1)
    valid = np.concatenate([np.ones_like(l1), l2_valid, l3_valid], axis=1)
    # one base-3 digit per cell (Null -> 2), cell 0 most significant, so the
    # integer order is the lexicographic row order
    digits = np.where(valid == 1, bits, 2).astype(np.int64)
    keys = np.unique(digits @ (3 ** np.arange(N_CELLS - 1, -1, -1, dtype=np.int64)))
    rows = (keys[:, None] // 3 ** np.arange(N_CELLS - 1, -1, -1, dtype=np.int64)) % 3
    return np.where(rows == 2, Label.NULL, rows).astype(np.uint8)


# -- bi-threshold decisions --------------------------------------------------------

@dataclass(frozen=True)
class ThresholdSet:
    """Per-level ``(lower, upper)`` thresholds, index 0 is level 1."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        for lo, up in zip(self.lower, self.upper):
            if not 0.0 <= lo <= up <= 1.0:
                raise ValueError(f"bad threshold pair [{lo}, {up}]")

    @classmethod
    def single(cls, alpha=0.5) -> "ThresholdSet":
        return cls((alpha,) * 3, (alpha,) * 3)

    def for_level(self, level: int) -> tuple[float, float]:
        return self.lower[level - 1], self.upper[level - 1]


def thresholds_from_width(d: float) -> ThresholdSet:
    """Symmetric thresholds whose uncertain zone widens with ``d`` and with level."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"uncertain-zone width must be in [0, 1], got {d}")
    half = [0.5 * d ** (2.0 - 0.5 * level) for level in (1, 2, 3)]
    return ThresholdSet(tuple(0.5 - w for w in half), tuple(0.5 + w for w in half))


def decide(p: float, lower: float, upper: float) -> Decision:
    """One cell: ``p > upper`` splits, ``p < lower`` does not, the closed zone
    in between is uncertain. A collapsed zone (``lower == upper``) sends ties
    to Split."""
    if p > upper or (p == upper and lower == upper):
        return Decision.SPLIT
    if p < lower:
        return Decision.NOT_SPLIT
    return Decision.UNCERTAIN


@dataclass(frozen=True)
class HcpmProb:
    prob: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=np.float64).reshape(N_CELLS)
        v = np.asarray(self.valid, dtype=bool).reshape(N_CELLS)
        if np.any((p[v] < 0) | (p[v] > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "prob", p)
        object.__setattr__(self, "valid", v)

    @classmethod
    def from_hcpm(cls, h: Hcpm) -> "HcpmProb":
        lab = h.as_array()
        return cls(np.where(lab == 1, 1.0, 0.0), lab != Label.NULL)


def binarize(p: HcpmProb, t: ThresholdSet) -> np.ndarray:
    """Per-cell :class:`Decision` codes (int8); invalid cells get -1."""
    out = np.full(N_CELLS, -1, dtype=np.int8)
    for cell in range(N_CELLS):
        if p.valid[cell]:
            lo, up = t.for_level(level_of(cell))
            out[cell] = decide(p.prob[cell], lo, up)
    return out


def binarize_batch(prob: np.ndarray, t: ThresholdSet) -> np.ndarray:
    """Vectorised :func:`binarize` over ``(..., 21)`` probabilities (no validity)."""
    lo = np.empty(N_CELLS)
    up = np.empty(N_CELLS)
    for level, sl in enumerate(LEVEL_SLICES, start=1):
        lo[sl], up[sl] = t.for_level(level)
    prob = np.asarray(prob, dtype=np.float64)
    out = np.full(prob.shape, Decision.UNCERTAIN, dtype=np.int8)
    out[prob < lo] = Decision.NOT_SPLIT
    out[(prob > up) | ((prob == up) & (lo == up))] = Decision.SPLIT
    return out


def all_trees() -> Iterator[PartitionTree]:
    """Every legal partition tree (83,522 of them)."""
    leaf = PartitionTree.leaf()
    full16 = PartitionTree.split(leaf, leaf, leaf, leaf)
    q_opts = [leaf] + [PartitionTree.split(*c) for c in itertools.product((leaf, full16), repeat=4)]
    yield leaf
    for quads in itertools.product(q_opts, repeat=4):
        yield PartitionTree.split(*quads)
