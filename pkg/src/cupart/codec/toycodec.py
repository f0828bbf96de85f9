"""A toy quad-tree encoder used as the RDO oracle and as the prediction-guided
encoder.

Cost model per CU (intra on the luma block, inter on ``current - reference``):

* distortion ``D``: sum of squared error against the block's own mean (DC prediction)
* rate ``R = header_bits + coef_scale * log2(1 + SAD)``, SAD taken about the mean
* ``lambda = 0.85 * 2 ** ((QP - 12) / 3)``

A split additionally costs ``lambda * split_flag_bits``. The cost of a whole
partition is therefore the sum of its leaf costs plus one flag term per split
node; that is the quantity both the oracle and the guided encoder minimise and
report.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..hcpm import (
    CTU_SIZE,
    Decision,
    Hcpm,
    HcpmProb,
    PartitionTree,
    ThresholdSet,
    binarize,
    hcpm_to_tree,
)
from . import kernels


@dataclass(frozen=True)
class CostModel:
    header_bits: float = 32.0
    split_flag_bits: float = 1.0
    coef_scale: float = 0.3
    lambda_scale: float = 0.85

    def lagrangian(self, qp) -> float:
        return self.lambda_scale * 2.0 ** ((qp - 12) / 3.0)


COST_MODEL = CostModel()


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RdCost:
    distortion: float
    rate: float
    lam: float

    @property
    def j(self) -> float:
        return self.distortion + self.lam * self.rate


@dataclass
class Frame:
    width: int
    height: int
    luma: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.width % CTU_SIZE or self.height % CTU_SIZE:
            raise GeometryError(f"frame {self.width}x{self.height} is not CTU aligned")
        self.luma = np.asarray(self.luma, dtype=np.uint8).reshape(self.height, self.width)

    @classmethod
    def from_array(cls, arr) -> "Frame":
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)

    @property
    def ctus_x(self) -> int:
        return self.width // CTU_SIZE

    @property
    def n_ctus(self) -> int:
        return self.ctus_x * (self.height // CTU_SIZE)

    def ctu_origin(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.n_ctus:
            raise GeometryError(f"CTU index {index} outside frame")
        return CTU_SIZE * (index % self.ctus_x), CTU_SIZE * (index // self.ctus_x)

    def ctu(self, index: int) -> np.ndarray:
        x, y = self.ctu_origin(index)
        return self.luma[y:y + CTU_SIZE, x:x + CTU_SIZE]


@dataclass
class EncodeStats:
    precoded_cu_count: int = 0
    rd_total: float = 0.0
    labels: list = field(default_factory=list)
    per_ctu_count: list = field(default_factory=list)
    per_ctu_j: list = field(default_factory=list)

    @property
    def trees(self) -> list:
        return [hcpm_to_tree(Hcpm(tuple(lab))) for lab in self.labels]


def _signed_block(frame: Frame, ctu_index: int, mode: str, reference: Frame | None) -> np.ndarray:
    """The int32 block the cost model works on for one CTU."""
    cur = frame.ctu(ctu_index).astype(np.int32)
    if mode == "intra":
        return np.ascontiguousarray(cur)
    if mode != "inter":
        raise ValueError(f"unknown mode {mode!r}")
    if reference is None:
        raise ValueError("inter mode needs a reference frame")
    if (reference.width, reference.height) != (frame.width, frame.height):
        raise GeometryError("reference frame has different dimensions")
    return np.ascontiguousarray(cur - reference.ctu(ctu_index).astype(np.int32))


def residue_block(stored: np.ndarray) -> np.ndarray:
    """Signed residual from an offset-128 stored residue block."""
    return np.ascontiguousarray(np.asarray(stored, dtype=np.int32) - 128)


def cu_cost(frame: Frame, cu_rect, qp, mode="intra", reference: Frame | None = None,
            model: CostModel = COST_MODEL) -> RdCost:
    """RD cost of coding ``cu_rect = (x, y, size)`` (frame coordinates) as one CU."""
    x, y, size = cu_rect
    if size not in (8, 16, 32, 64) or x % size or y % size:
        raise GeometryError(f"CU {cu_rect} is not an aligned square")
    if x + size > frame.width or y + size > frame.height or x < 0 or y < 0:
        raise GeometryError(f"CU {cu_rect} lies outside the frame")
    cur = frame.luma[y:y + size, x:x + size].astype(np.int32)
    if mode == "inter":
        if reference is None:
            raise ValueError("inter mode needs a reference frame")
        cur = cur - reference.luma[y:y + size, x:x + size].astype(np.int32)
    elif mode != "intra":
        raise ValueError(f"unknown mode {mode!r}")
    sse, sad = kernels.cu_stats(np.ascontiguousarray(cur), 0, 0, size)
    rate = model.header_bits + model.coef_scale * math.log2(1.0 + sad)
    return RdCost(sse, rate, model.lagrangian(qp))


def oracle_block(block: np.ndarray, qp, model: CostModel = COST_MODEL):
    """Exhaustive RDO on one signed 64x64 block: ``(J, labels, count)``."""
    return kernels.oracle_ctu(block, model.lagrangian(qp), model.header_bits,
                              model.split_flag_bits, model.coef_scale)


def guided_block(block: np.ndarray, decisions, qp, model: CostModel = COST_MODEL):
    return kernels.guided_ctu(block, np.asarray(decisions, dtype=np.int8), model.lagrangian(qp),
                              model.header_bits, model.split_flag_bits, model.coef_scale)


def oracle_rdo(frame: Frame, ctu_index: int, qp, mode="intra", reference: Frame | None = None,
               model: CostModel = COST_MODEL):
    """Brute-force RDO for one CTU.

    Returns ``(PartitionTree, total J, evaluated CU count)``; the count is
    always 85.
    """
    block = _signed_block(frame, ctu_index, mode, reference)
    j, labels, count = oracle_block(block, qp, model)
    return hcpm_to_tree(Hcpm(tuple(labels))), j, count


def partition_cost(block: np.ndarray, tree: PartitionTree, qp, model: CostModel = COST_MODEL) -> float:
    """Cost of a given partition, summed in the same order as the recursion."""
    lam = model.lagrangian(qp)

    def walk(t, x, y, size):
        if t.is_leaf:
            return kernels.leaf_cost(block, x, y, size, lam, model.header_bits, model.coef_scale)
        h = size // 2
        js = 0.0
        for q, c in enumerate(t.children):
            jc = walk(c, x + h * (q % 2), y + h * (q // 2), h)
            js = jc if q == 0 else js + jc
        return js + lam * model.split_flag_bits

    return walk(tree, 0, 0, CTU_SIZE)


def precode_residue(frame_t: Frame, frame_prev: Frame | None) -> Frame:
    """Residue of ``frame_t`` against the co-located previous frame.

    Stored offset by +128 and clamped to 8 bits. With no previous frame the
    reference is all zeros.
    """
    cur = frame_t.luma.astype(np.int16)
    if frame_prev is None:
        ref = np.zeros_like(cur)
    else:
        if (frame_prev.width, frame_prev.height) != (frame_t.width, frame_t.height):
            raise GeometryError("frames differ in size")
        ref = frame_prev.luma.astype(np.int16)
    res = np.clip(cur - ref + 128, 0, 255).astype(np.uint8)
    return Frame(frame_t.width, frame_t.height, res)


def encode_with_prediction(frame: Frame, qp, mode, probs, thresholds: ThresholdSet,
                           reference: Frame | None = None,
                           model: CostModel = COST_MODEL) -> EncodeStats:
    """Encode every CTU of ``frame`` following predicted split probabilities.

    ``probs`` holds one :class:`HcpmProb` per CTU. Confident cells are taken
    as final; cells inside the uncertain zone compare the parent CU with its
    four children.
    """
    if probs is None or len(probs) != frame.n_ctus:
        raise ValueError("need exactly one probability map per CTU")
    stats = EncodeStats()
    for idx, p in enumerate(probs):
        if p is None:
            raise ValueError(f"missing probability map for CTU {idx}")
        dec = binarize(p, thresholds)
        block = _signed_block(frame, idx, mode, reference)
        j, labels, count = guided_block(block, dec, qp, model)
        stats.rd_total += j
        stats.precoded_cu_count += count
        stats.labels.append(labels)
        stats.per_ctu_count.append(count)
        stats.per_ctu_j.append(j)
    return stats


def encode_oracle(frame: Frame, qp, mode="intra", reference: Frame | None = None,
                  model: CostModel = COST_MODEL) -> EncodeStats:
    stats = EncodeStats()
    for idx in range(frame.n_ctus):
        j, labels, count = oracle_block(_signed_block(frame, idx, mode, reference), qp, model)
        stats.rd_total += j
        stats.precoded_cu_count += count
        stats.labels.append(labels)
        stats.per_ctu_count.append(count)
        stats.per_ctu_j.append(j)
    return stats


# -- CPHY raw frame container ----------------------------------------------------

CPHY_MAGIC = b"CPHY"
_CPHY_HEADER = struct.Struct("<4sIII")


def write_cphy(path, frames) -> None:
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to write")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as f:
        f.write(_CPHY_HEADER.pack(CPHY_MAGIC, w, h, len(frames)))
        for fr in frames:
            if (fr.width, fr.height) != (w, h):
                raise GeometryError("all frames in a CPHY file must share dimensions")
            f.write(np.ascontiguousarray(fr.luma, dtype=np.uint8).tobytes())


def read_cphy(path) -> list[Frame]:
    data = Path(path).read_bytes()
    if len(data) < _CPHY_HEADER.size:
        raise ValueError(f"{path}: truncated CPHY header")
    magic, w, h, n = _CPHY_HEADER.unpack_from(data)
    if magic != CPHY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    need = _CPHY_HEADER.size + w * h * n
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    planes = np.frombuffer(data, dtype=np.uint8, offset=_CPHY_HEADER.size).reshape(n, h, w)
    return [Frame(w, h, planes[i].copy()) for i in range(n)]


__all__ = [
    "COST_MODEL", "CostModel", "Decision", "EncodeStats", "Frame", "GeometryError", "RdCost",
    "cu_cost", "encode_oracle", "encode_with_prediction", "guided_block", "oracle_block",
    "oracle_rdo", "partition_cost", "precode_residue", "read_cphy", "residue_block", "write_cphy",
]
