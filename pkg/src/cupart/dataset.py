"""Synthetic sources, oracle labelling and the CPHS record database.

CPHS layout (little-endian): magic ``CPHS``, u16 version, u8 mode, u32 record
count, then fixed 4127-byte records::

    block[4096]  u8   64x64 luma (or offset-128 residue), row-major
    qp           u8
    labels[21]   u8   0 NotSplit / 1 Split / 255 Null
    frame_index  u32  global over the database
    ctu_index    u32  raster index within the frame
    mode         u8   0 intra, 1 inter (residue block), 2 inter (original block)

A JSON manifest next to the database records the per-source layout: records
of one source are stored frame by frame, then QP, then CTU.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import Frame, oracle_block, precode_residue, read_cphy, write_cphy
from .hcpm import LEVEL_SLICES, validate_labels

log = logging.getLogger(__name__)

MAGIC = b"CPHS"
VERSION = 1
MODE_INTRA, MODE_INTER_RESIDUE, MODE_INTER_ORIGINAL = 0, 1, 2
DEFAULT_QPS = (22, 27, 32, 37)
RECORD_DTYPE = np.dtype([
    ("block", "u1", (4096,)),
    ("qp", "u1"),
    ("labels", "u1", (21,)),
    ("frame_index", "<u4"),
    ("ctu_index", "<u4"),
    ("mode", "u1"),
])
_HEADER = struct.Struct("<4sHBI")
assert RECORD_DTYPE.itemsize == 4127


class DataError(RuntimeError):
    pass


# -- synthetic content ---------------------------------------------------------------

def _texture(rng, size, density):
    """One square region: flat, or (with probability ``density``) textured."""
    base = rng.uniform(30, 220)
    if rng.random() >= density:
        return np.full((size, size), base)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = rng.integers(3)
    if kind == 0:  # oriented grating
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3, 32)
        amp = rng.uniform(8, 60)
        phase = rng.uniform(0, 2 * np.pi)
        return base + amp * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    if kind == 1:  # gaussian noise
        return base + rng.normal(0, rng.uniform(4, 40), (size, size))
    slope = rng.uniform(10, 80) / size
    theta = rng.uniform(0, 2 * np.pi)
    return base + slope * ((xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta))


def _fill_quadtree(img, rng, x, y, size, density):
    if size > 8 and rng.random() < 0.55 * density:
        h = size // 2
        for q in range(4):
            _fill_quadtree(img, rng, x + h * (q % 2), y + h * (q // 2), h, density)
        return
    img[y:y + size, x:x + size] = _texture(rng, size, density)


def synthetic_still(rng, w, h, density=0.5) -> np.ndarray:
    """Quad-tree mosaic of flat/grating/noise/gradient regions plus a few
    unaligned textured rectangles; returns uint8 ``h x w``."""
    if w % 64 or h % 64:
        raise ValueError("width and height must be multiples of 64")
    img = np.zeros((h, w))
    for y in range(0, h, 64):
        for x in range(0, w, 64):
            _fill_quadtree(img, rng, x, y, 64, density)
    n_rect = rng.poisson(density * w * h / 16384.0) if density > 0 else 0
    for _ in range(n_rect):
        s = int(rng.integers(12, 48))
        x0, y0 = int(rng.integers(0, w - s)), int(rng.integers(0, h - s))
        img[y0:y0 + s, x0:x0 + s] = _texture(rng, s, 1.0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _shift_crop(canvas, ox, oy, w, h):
    """Bilinear crop of ``canvas`` at sub-pixel offset ``(ox, oy)``."""
    ix, iy = int(np.floor(ox)), int(np.floor(oy))
    fx, fy = ox - ix, oy - iy
    c = canvas[iy:iy + h + 1, ix:ix + w + 1].astype(np.float64)
    top = c[:h, :w] * (1 - fx) + c[:h, 1:w + 1] * fx
    bot = c[1:h + 1, :w] * (1 - fx) + c[1:h + 1, 1:w + 1] * fx
    return top * (1 - fy) + bot * fy


def synthetic_sequence(rng, w, h, frames=30, density=0.5) -> list:
    """A panning still with a few independently translating sprites."""
    margin = 64
    canvas = synthetic_still(rng, w + 2 * margin, h + 2 * margin, density).astype(np.float64)
    sprite_src = synthetic_still(rng, 64, 64, max(density, 0.5)).astype(np.float64)
    vel = rng.uniform(-1.5, 1.5, 2)
    sprites = []
    for _ in range(int(rng.integers(1, 4))):
        s = int(rng.integers(16, 48))
        sprites.append((s, rng.uniform(0, w - s), rng.uniform(0, h - s), rng.uniform(-2, 2, 2),
                        sprite_src[:s, :s]))
    out = []
    for t in range(frames):
        ox, oy = np.clip(margin + vel * t + rng.normal(0, 0.25, 2), 0, 2 * margin - 1)
        fr = _shift_crop(canvas, ox, oy, w, h)
        for s, sx, sy, v, patch in sprites:
            px = int(np.clip(np.rint(sx + v[0] * t), 0, w - s))
            py = int(np.clip(np.rint(sy + v[1] * t), 0, h - s))
            fr[py:py + s, px:px + s] = patch
        out.append(Frame(w, h, np.clip(np.rint(fr), 0, 255).astype(np.uint8)))
    return out


def gen_synthetic(seed, count, w, h, kind="stills", out_dir=".", frames=30, density=0.5) -> list:
    """Write ``count`` CPHY files (one still each, or one sequence each)."""
    if w % 64 or h % 64:
        raise ValueError("width and height must be multiples of 64")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        if kind == "stills":
            fr = [Frame(w, h, synthetic_still(rng, w, h, density))]
        elif kind == "sequence":
            fr = synthetic_sequence(rng, w, h, frames, density)
        else:
            raise ValueError(f"unknown kind {kind!r}")
        path = out_dir / f"{kind}_{seed}_{i:04d}.cphy"
        write_cphy(path, fr)
        paths.append(path)
    return paths


# -- database construction -------------------------------------------------------------

def _cost_blocks(frame: Frame, prev, mode) -> np.ndarray:
    """Signed int32 blocks the cost model labels, one per CTU.

    Inter blocks are the clamped residue (stored value minus 128), so a
    database record alone determines its own labels.
    """
    src = precode_residue(frame, prev) if mode == "inter" else frame
    blocks = np.stack([src.ctu(i) for i in range(frame.n_ctus)]).astype(np.int32)
    return blocks - 128 if mode == "inter" else blocks


def _label_blocks(blocks, qp):
    out = np.empty((len(blocks), 21), dtype=np.uint8)
    for i, b in enumerate(blocks):
        _, labels, _ = oracle_block(np.ascontiguousarray(b), qp)
        out[i] = labels
    return out


def class_balance(labels, qps) -> dict:
    labels = np.asarray(labels)
    qps = np.asarray(qps)

    def frac(lab):
        valid = lab != 255
        return float((lab == 1).sum() / valid.sum()) if valid.any() else None

    return {
        "split_fraction": frac(labels),
        "per_level": [frac(labels[:, sl]) for sl in LEVEL_SLICES],
        "per_qp": {str(int(q)): frac(labels[qps == q]) for q in np.unique(qps)},
        "level1_per_qp": {str(int(q)): frac(labels[qps == q][:, :1]) for q in np.unique(qps)},
    }


def build_db(sources, qps=DEFAULT_QPS, mode="intra", out="db.cphs", input_kind=None) -> dict:
    """Label every CTU of every source at every QP and write CPHS + manifest.

    ``input_kind`` selects what inter records store: ``"residue"`` (default)
    or ``"original"``.
    """
    if mode not in ("intra", "inter"):
        raise ValueError(f"unknown mode {mode!r}")
    input_kind = input_kind or ("original" if mode == "intra" else "residue")
    rec_mode = {("intra", "original"): MODE_INTRA, ("inter", "residue"): MODE_INTER_RESIDUE,
                ("inter", "original"): MODE_INTER_ORIGINAL}.get((mode, input_kind))
    if rec_mode is None:
        raise ValueError(f"input {input_kind!r} is not valid in {mode} mode")
    qps = [int(q) for q in qps]
    chunks = []
    src_entries = []
    frame_counter = 0
    record_counter = 0
    for src in sources:
        try:
            frames = read_cphy(src)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable source %s: %s", src, exc)
            continue
        if mode == "inter" and len(frames) < 2:
            log.warning("skipping %s: inter mode needs at least 2 frames", src)
            continue
        n_ctus = frames[0].n_ctus
        start = record_counter
        prev = None
        for f_idx, fr in enumerate(frames):
            if mode == "inter":
                stored = precode_residue(fr, prev) if input_kind == "residue" else fr
            else:
                stored = fr
            blocks = np.stack([stored.ctu(i).reshape(-1) for i in range(n_ctus)])
            signed = _cost_blocks(fr, prev, mode)
            for qp in qps:
                rec = np.zeros(n_ctus, dtype=RECORD_DTYPE)
                rec["block"] = blocks
                rec["qp"] = qp
                rec["labels"] = _label_blocks(signed, qp)
                rec["frame_index"] = frame_counter + f_idx
                rec["ctu_index"] = np.arange(n_ctus)
                rec["mode"] = rec_mode
                chunks.append(rec)
                record_counter += n_ctus
            prev = fr
        src_entries.append({
            "name": Path(src).stem, "path": str(src), "width": frames[0].width,
            "height": frames[0].height, "frames": len(frames), "ctus_per_frame": n_ctus,
            "frame_start": frame_counter, "record_start": start,
            "record_count": record_counter - start, "split": None,
        })
        frame_counter += len(frames)
    if record_counter == 0:
        raise DataError("no CTUs found in the given sources")
    records = np.concatenate(chunks)
    write_records(out, records, rec_mode)
    manifest = {
        "format": "CPHS", "version": VERSION, "database": Path(out).name, "mode": mode,
        "input": input_kind, "qps": qps, "record_count": int(record_counter),
        "sources": src_entries,
        "per_qp_counts": {str(q): int((records["qp"] == q).sum()) for q in qps},
        "class_balance": class_balance(records["labels"], records["qp"]),
    }
    write_manifest(manifest_path_for(out), manifest)
    return manifest


def manifest_path_for(db_path) -> Path:
    return Path(db_path).with_suffix(".json")


def write_manifest(path, manifest) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    m = json.loads(Path(path).read_text())
    if m.get("format") != "CPHS":
        raise DataError(f"{path} is not a CPHS manifest")
    m["_dir"] = str(Path(path).resolve().parent)
    return m


def write_records(path, records, mode) -> None:
    records = np.asarray(records, dtype=RECORD_DTYPE)
    for lab in records["labels"]:
        validate_labels(lab)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, mode, len(records)))
        f.write(records.tobytes())


def read_records(path):
    """Returns ``(mode, records)`` with ``records`` a structured array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, mode, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + count * RECORD_DTYPE.itemsize:
        raise DataError(f"{path}: size does not match {count} records")
    return mode, np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=_HEADER.size)


# -- splitting ------------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def split_db(manifest: dict, ratios=(0.8, 0.1, 0.1), seed=0) -> dict:
    """Assign whole sources to train/val/test. Returns ``{name: manifest}``."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    sources = manifest["sources"]
    n = len(sources)
    wanted = sum(1 for r in ratios if r > 0)
    if n < wanted:
        raise DataError(f"{n} sources cannot fill {wanted} splits")
    raw = np.array(ratios) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    for i in range(3):  # every requested split gets a source
        if ratios[i] > 0 and counts[i] == 0:
            counts[i] = 1
            counts[int(np.argmax(counts))] -= 1
    order = np.random.default_rng(seed).permutation(n)
    out = {}
    pos = 0
    for name, c in zip(SPLIT_NAMES, counts):
        picked = sorted(int(i) for i in order[pos:pos + c])
        pos += c
        m = {k: v for k, v in manifest.items() if not k.startswith("_")}
        m["sources"] = [dict(sources[i], split=name) for i in picked]
        m["record_count"] = sum(s["record_count"] for s in m["sources"])
        m["split"] = name
        m["split_seed"] = seed
        out[name] = m
    return out


# -- loading views -------------------------------------------------------------------------

@dataclass
class DbView:
    manifest: dict
    mode_byte: int
    records: np.ndarray  # selected records, manifest source order

    @property
    def blocks(self) -> np.ndarray:
        return self.records["block"].reshape(-1, 64, 64)

    @property
    def qps(self) -> np.ndarray:
        return self.records["qp"].astype(np.int64)

    @property
    def labels(self) -> np.ndarray:
        return self.records["labels"]

    def __len__(self) -> int:
        return len(self.records)

    def source_slices(self):
        """``(source entry, slice into self.records)`` per source."""
        pos = 0
        for s in self.manifest["sources"]:
            yield s, slice(pos, pos + s["record_count"])
            pos += s["record_count"]

    def sequences(self):
        """Index arrays (into ``self.records``) of co-located CTU sequences.

        Yields ``(qp, ctu_index, indices_over_frames)`` per source.
        """
        n_q = len(self.manifest["qps"])
        for s, sl in self.source_slices():
            c = s["ctus_per_frame"]
            grid = np.arange(sl.start, sl.stop).reshape(s["frames"], n_q, c)
            for qi, qp in enumerate(self.manifest["qps"]):
                for ctu in range(c):
                    yield qp, ctu, grid[:, qi, ctu]

    def signed_blocks(self) -> np.ndarray:
        """The int32 blocks the cost model sees for each record."""
        blocks = self.blocks.astype(np.int32)
        if self.mode_byte == MODE_INTRA:
            return blocks
        if self.mode_byte == MODE_INTER_RESIDUE:
            return blocks - 128
        out = np.empty_like(blocks)
        n_q = len(self.manifest["qps"])
        for s, sl in self.source_slices():
            c = s["ctus_per_frame"]
            g = blocks[sl].reshape(s["frames"], n_q * c, 64, 64)
            prev = np.concatenate([np.zeros_like(g[:1]), g[:-1]])
            out[sl] = (np.clip(g - prev, -128, 127)).reshape(-1, 64, 64)
        return out


def load_view(manifest_path) -> DbView:
    m = read_manifest(manifest_path)
    db_path = Path(m["_dir"]) / m["database"]
    mode_byte, records = read_records(db_path)
    parts = [records[s["record_start"]: s["record_start"] + s["record_count"]] for s in m["sources"]]
    if not parts:
        raise DataError(f"{manifest_path} selects no sources")
    return DbView(m, mode_byte, np.concatenate(parts))


def save_split_manifests(manifest_path, splits: dict) -> dict:
    """Write ``<stem>.<split>.json`` next to the manifest; returns the paths."""
    base = Path(manifest_path)
    paths = {}
    for name, m in splits.items():
        p = base.with_name(f"{base.stem}.{name}.json")
        write_manifest(p, m)
        paths[name] = p
    return paths
