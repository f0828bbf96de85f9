import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cupart import hcpm
from cupart.codec import (COST_MODEL, Frame, GeometryError, cu_cost, encode_oracle,
                          encode_with_prediction, guided_block, kernels, oracle_block,
                          oracle_rdo, partition_cost, precode_residue, read_cphy, write_cphy)
from cupart.codec import _pykernels
from cupart.hcpm import Decision, Hcpm, HcpmProb

BACKENDS = kernels.available_backends()


def noise_block(seed, lo=0, hi=256):
    return np.random.default_rng(seed).integers(lo, hi, (64, 64)).astype(np.int32)


def half_flat_block(seed=42):
    rng = np.random.default_rng(seed)
    g = np.zeros((64, 64), np.int32)
    g[:, :32] = 200
    g[32:, 32:] = rng.integers(0, 256, (32, 32))
    return g


def test_lagrangian_values():
    lam = [COST_MODEL.lagrangian(q) for q in (22, 27, 32, 37)]
    assert lam == pytest.approx([8.567463139285138, 27.2, 86.35461722707007, 274.1588204571245],
                                rel=1e-15)


def test_cu_stats_exact():
    b = noise_block(1)
    for size, x, y in ((64, 0, 0), (16, 16, 48), (8, 56, 8)):
        sse, sad = kernels.cu_stats(b, x, y, size)
        blk = b[y:y + size, x:x + size].astype(float)
        assert sse == pytest.approx(((blk - blk.mean()) ** 2).sum(), rel=1e-12)
        assert sad == pytest.approx(np.abs(blk - blk.mean()).sum(), rel=1e-12)
    flat = np.full((64, 64), 77, np.int32)
    assert kernels.cu_stats(flat, 0, 0, 64) == (0.0, 0.0)


def test_cu_cost_formula():
    fr = Frame.from_array(noise_block(2).astype(np.uint8))
    c = cu_cost(fr, (16, 32, 16), 27)
    blk = fr.luma[32:48, 16:32].astype(float)
    sad = np.abs(blk - blk.mean()).sum()
    assert c.lam == pytest.approx(27.2)
    assert c.rate == pytest.approx(32 + 0.3 * math.log2(1 + sad))
    assert c.j == pytest.approx(c.distortion + 27.2 * c.rate)
    with pytest.raises(GeometryError):
        cu_cost(fr, (8, 0, 16), 27)
    with pytest.raises(GeometryError):
        cu_cost(fr, (64, 0, 64), 27)
    with pytest.raises(ValueError):
        cu_cost(fr, (0, 0, 64), 27, mode="inter")


def test_frozen_oracle_values():
    j, labels, n = oracle_block(noise_block(42), 22)
    assert j == 22021050.38673102 and n == 85
    assert labels.tolist() == [1] * 21
    j, labels, n = oracle_block(half_flat_block(), 37)
    assert j == 5630763.156216838
    assert labels.tolist() == [1, 0, 0, 0, 0] + [255] * 16
    # independent float check: three flat quadrants, one noisy, one split flag
    lam = COST_MODEL.lagrangian(37)
    q = half_flat_block()[32:, 32:].astype(float)
    noisy = ((q - q.mean()) ** 2).sum() + lam * (32 + 0.3 * math.log2(1 + np.abs(q - q.mean()).sum()))
    assert j == pytest.approx(3 * 32 * lam + noisy + lam, rel=1e-12)


def test_flat_ctu_not_split():
    flat = np.full((64, 64), 128, np.int32)
    for qp in (22, 37):
        j, labels, n = oracle_block(flat, qp)
        assert labels[0] == 0 and n == 85
        assert j == pytest.approx(COST_MODEL.lagrangian(qp) * 32)


def test_oracle_rdo_tree_and_cost():
    fr = Frame.from_array(np.tile(half_flat_block().astype(np.uint8), (1, 2)))
    for idx in range(fr.n_ctus):
        tree, j, n = oracle_rdo(fr, idx, 32)
        assert n == 85
        assert partition_cost(fr.ctu(idx).astype(np.int32), tree, 32) == j


def test_oracle_is_exhaustive_minimum_small():
    block = half_flat_block(5)
    j, labels, _ = oracle_block(block, 27)
    best = min(partition_cost(block, t, 27) for t in hcpm.all_trees())
    assert j == best
    assert partition_cost(block, hcpm.hcpm_to_tree(Hcpm(tuple(labels))), 27) == j


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([22, 27, 32, 37]), st.integers(0, 3))
def test_backends_bitwise_equal(seed, qp, style):
    rng = np.random.default_rng(seed)
    if style == 0:
        b = rng.integers(0, 256, (64, 64))
    elif style == 1:
        b = rng.integers(-128, 128, (64, 64))
    else:
        b = np.kron(rng.integers(0, 256, (8, 8)), np.ones((8, 8))) + rng.integers(0, 3 * style, (64, 64))
    b = np.ascontiguousarray(b, dtype=np.int32)
    lam = COST_MODEL.lagrangian(qp)
    c, p = BACKENDS["cython"], BACKENDS["python"]
    jc, lc, nc = c.oracle_ctu(b, lam, 32, 1, 0.3)
    jp, lp, np_ = p.oracle_ctu(b, lam, 32, 1, 0.3)
    assert jc == jp and nc == np_ == 85
    np.testing.assert_array_equal(lc, lp)
    dec = rng.integers(0, 3, 21).astype(np.int8)
    assert c.guided_ctu(b, dec, lam, 32, 1, 0.3)[0] == p.guided_ctu(b, dec, lam, 32, 1, 0.3)[0]
    assert c.cu_stats(b, 8, 16, 8) == p.cu_stats(b, 8, 16, 8)


def test_guided_all_uncertain_equals_oracle():
    b = noise_block(7)
    dec = np.full(21, Decision.UNCERTAIN, np.int8)
    for qp in (22, 37):
        assert guided_block(b, dec, qp)[0] == oracle_block(b, qp)[0]
        assert guided_block(b, dec, qp)[2] == 85


def test_guided_fixed_decisions():
    b = half_flat_block()
    j, labels, n = guided_block(b, np.zeros(21, np.int8), 22)
    assert n == 1 and labels[0] == 0
    j, labels, n = guided_block(b, np.ones(21, np.int8), 22)
    assert n == 64 and labels.tolist() == [1] * 21
    with pytest.raises(ValueError):
        guided_block(b, np.full(21, -1, np.int8), 22)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([22, 37]))
def test_guided_with_oracle_labels_reproduces_oracle(seed, qp):
    rng = np.random.default_rng(seed)
    b = np.kron(rng.integers(0, 256, (4, 4)), np.ones((16, 16))).astype(np.int32)
    b += rng.integers(0, 40, (64, 64)).astype(np.int32) * (rng.random((64, 64)) < 0.5)
    j, labels, _ = oracle_block(b, qp)
    dec = hcpm.binarize(HcpmProb.from_hcpm(Hcpm(tuple(labels))), hcpm.thresholds_from_width(0.0))
    jg, lg, n = guided_block(b, dec, qp)
    assert jg == j
    np.testing.assert_array_equal(lg, labels)
    assert n == len(list(hcpm.hcpm_to_tree(Hcpm(tuple(labels))).leaves()))


def test_python_backend_guided_count_bounds():
    b = noise_block(3)
    rng = np.random.default_rng(0)
    lam = COST_MODEL.lagrangian(27)
    for _ in range(20):
        dec = rng.integers(0, 2, 21).astype(np.int8)
        _, _, n = _pykernels.guided_ctu(b, dec, lam, 32, 1, 0.3)
        assert 1 <= n <= 64


def test_encode_with_prediction_d1_matches_oracle():
    fr = Frame.from_array(np.hstack([half_flat_block(), noise_block(9)]).astype(np.uint8))
    probs = [HcpmProb(np.random.default_rng(i).random(21), np.ones(21, bool)) for i in range(2)]
    st_pred = encode_with_prediction(fr, 32, "intra", probs, hcpm.thresholds_from_width(1.0))
    st_orc = encode_oracle(fr, 32)
    assert st_pred.rd_total == st_orc.rd_total
    assert st_pred.trees == st_orc.trees
    assert st_orc.precoded_cu_count == 170
    with pytest.raises(ValueError):
        encode_with_prediction(fr, 32, "intra", probs[:1], hcpm.thresholds_from_width(1.0))


def test_inter_mode_uses_reference():
    a = Frame.from_array(noise_block(1).astype(np.uint8))
    tree, j, _ = oracle_rdo(a, 0, 22, "inter", a)
    assert tree.is_leaf and j == pytest.approx(32 * COST_MODEL.lagrangian(22))
    with pytest.raises(ValueError):
        oracle_rdo(a, 0, 22, "inter", None)


def test_precode_residue():
    prev = Frame.from_array(np.full((64, 128), 100, np.uint8))
    cur = Frame.from_array(np.full((64, 128), 250, np.uint8))
    assert np.all(precode_residue(cur, prev).luma == 255)  # 150 + 128 clamps
    assert np.all(precode_residue(prev, cur).luma == 0)
    assert np.all(precode_residue(prev, prev).luma == 128)
    assert np.all(precode_residue(Frame.from_array(np.full((64, 64), 20, np.uint8)), None).luma == 148)
    with pytest.raises(GeometryError):
        precode_residue(cur, Frame.from_array(np.zeros((64, 64), np.uint8)))


def test_frame_geometry():
    with pytest.raises(GeometryError):
        Frame.from_array(np.zeros((64, 100), np.uint8))
    fr = Frame.from_array(np.arange(128 * 192, dtype=np.int64).reshape(128, 192).astype(np.uint8))
    assert fr.n_ctus == 6
    assert fr.ctu_origin(4) == (64, 64)
    np.testing.assert_array_equal(fr.ctu(4), fr.luma[64:128, 64:128])


def test_cphy_round_trip(tmp_path):
    frames = [Frame.from_array(noise_block(i).astype(np.uint8)) for i in range(3)]
    write_cphy(tmp_path / "a.cphy", frames)
    back = read_cphy(tmp_path / "a.cphy")
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.luma, b.luma)
    (tmp_path / "bad.cphy").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        read_cphy(tmp_path / "bad.cphy")
