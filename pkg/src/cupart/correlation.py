"""Temporal correlation of CU depth between co-located 16x16 units."""

from __future__ import annotations

import numpy as np


def unit_depths(labels) -> np.ndarray:
    """Depth (0-3) of each 16x16 unit from label vectors.

    ``labels`` has shape ``(..., 21)``; the result has shape ``(..., 16)``
    ordered quadrant-major (unit ``4i + j``). Depth 3 means the unit is
    coded as four 8x8 CUs, which is why 8x8 units are not measured separately.
    """
    lab = np.asarray(labels)
    s = (lab == 1).astype(np.int8)
    l1 = s[..., :1]
    l2 = np.repeat(s[..., 1:5], 4, axis=-1)
    l3 = s[..., 5:21]
    return l1 + l1 * l2 + l1 * l2 * l3


def _pearson(a, b):
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if den == 0:
        return None
    return float((da * db).sum() / den)


def depth_correlation(sequences, gop_distances=(1, 2, 3, 4), gop=4) -> dict:
    """Pearson CC and MSE between unit depths ``k * gop`` frames apart.

    ``sequences`` is an iterable of depth arrays shaped ``(frames, ...)``;
    every pair of frames at each distance, pooled over all sequences,
    contributes its co-located units. CC is ``None`` when either side is
    constant.
    """
    seqs = [np.asarray(s).reshape(len(s), -1) for s in sequences]
    if not seqs or max(len(s) for s in seqs) < 2:
        raise ValueError("need at least one sequence with two frames")
    out = {}
    for k in gop_distances:
        step = int(k) * gop
        if step <= 0:
            raise ValueError("distances must be positive")
        xs, ys = [], []
        for s in seqs:
            if len(s) > step:
                xs.append(s[:-step].ravel())
                ys.append(s[step:].ravel())
        if not xs:
            out[int(k)] = {"cc": None, "mse": None, "n": 0}
            continue
        x, y = np.concatenate(xs), np.concatenate(ys)
        out[int(k)] = {"cc": _pearson(x, y), "mse": float(np.mean((x.astype(float) - y) ** 2)),
                       "n": int(x.size)}
    return out


def frame_pair_stats(a, b) -> dict:
    """CC and MSE between two depth maps."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return {"cc": _pearson(a, b), "mse": float(np.mean((a.astype(float) - b) ** 2))}


def is_non_increasing(values, tol=0.0) -> bool:
    v = [x for x in values if x is not None]
    return all(b <= a + tol for a, b in zip(v, v[1:]))
