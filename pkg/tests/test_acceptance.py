"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N ... PASS|FAIL`` line (also collected
into the terminal summary) and then asserts the outcome.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from cupart import cli, cnn, dataset, evaluation, hcpm, lstm, nn, tables
from cupart.cli import lstm_windows
from cupart.codec import (COST_MODEL, Frame, encode_oracle, encode_with_prediction, kernels,
                          oracle_block, oracle_rdo, partition_cost, read_cphy)
from cupart.correlation import depth_correlation, is_non_increasing, unit_depths
from cupart.hcpm import Decision, HcpmProb, thresholds_from_width

QPS = (22, 27, 32, 37)


def verdict(n, title, ok, detail=""):
    line = f"criterion {n:2d} {title:32s} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- shared trained setups ------------------------------------------------------------------

@pytest.fixture(scope="module")
def intra(tmp_path_factory):
    """64 training stills (4096 CTU records), 16 held-out stills, trained CNN."""
    d = tmp_path_factory.mktemp("acc_intra")
    tr = dataset.gen_synthetic(101, 64, 256, 256, "stills", d / "train")
    te = dataset.gen_synthetic(102, 16, 256, 256, "stills", d / "test")
    dataset.build_db(tr, out=d / "train.cphs")
    dataset.build_db(te, out=d / "test.cphs")
    train, test = dataset.load_view(d / "train.json"), dataset.load_view(d / "test.json")
    model = cnn.EthCnn.init(seed=0)
    t0 = time.perf_counter()
    res = cnn.train(model, train.blocks, train.qps, train.labels, cnn.TrainConfig(iters=1500, batch=64))
    return {"train": train, "test": test, "model": model, "test_src": te,
            "train_s": time.perf_counter() - t0, "losses": res.losses}


@pytest.fixture(scope="module")
def inter(tmp_path_factory):
    """Translating sequences: 24 train / 8 test, 30 frames of 128x128, residue input."""
    d = tmp_path_factory.mktemp("acc_inter")
    tr = dataset.gen_synthetic(31, 24, 128, 128, "sequence", d / "train", frames=30)
    te = dataset.gen_synthetic(32, 8, 128, 128, "sequence", d / "test", frames=30)
    dataset.build_db(tr, mode="inter", out=d / "train.cphs")
    dataset.build_db(te, mode="inter", out=d / "test.cphs")
    return {"train": dataset.load_view(d / "train.json"), "test": dataset.load_view(d / "test.json")}


# -- 1 ----------------------------------------------------------------------------------------

def test_c01_table_fidelity():
    t0 = time.perf_counter()
    rows = tables.verify_tables(cnn.CnnArch(), lstm.LstmArch())
    rep, lrep = cnn.flop_report(), lstm.lstm_flop_report()
    dt = time.perf_counter() - t0
    totals = (rep.total_params, rep.total_adds, rep.total_mults) == (1287189, 1497584, 1552149)
    ok = all(r["ok"] for r in rows) and totals and lrep.total_params == 757929 and dt < 1.0
    verdict(1, "table fidelity", ok, f"{len(rows)} rows, {dt:.3f}s")


# -- 2 ----------------------------------------------------------------------------------------

def test_c02_combinatorics():
    t0 = time.perf_counter()
    n = hcpm.count_partition_patterns(3)
    arrays = hcpm.enumerate_hcpm_arrays()
    unique = len({a.tobytes() for a in arrays})
    trees = sum(1 for _ in hcpm.all_trees())
    rng = np.random.default_rng(0)
    counts = {oracle_block(rng.integers(0, 256, (64, 64)).astype(np.int32), q)[2] for q in QPS}
    fr = Frame.from_array(rng.integers(0, 256, (64, 128)).astype(np.uint8))
    counts |= {oracle_rdo(fr, i, 27)[2] for i in range(2)}
    dt = time.perf_counter() - t0
    ok = n == 83522 == len(arrays) == unique == trees and counts == {85} and dt < 10
    verdict(2, "combinatorics", ok, f"patterns={n} enumerated={unique} evals={sorted(counts)} {dt:.1f}s")


# -- 3 ----------------------------------------------------------------------------------------

def _all_partition_costs(block, qp):
    """Cost of all 83,522 partitions, added in the same order as partition_cost."""
    lam = COST_MODEL.lagrangian(qp)
    h, c, flag = COST_MODEL.header_bits, COST_MODEL.coef_scale, lam * COST_MODEL.split_flag_bits

    def leaf(x, y, s):
        return kernels.leaf_cost(block, x, y, s, lam, h, c)

    def sum4(a, b, cc, d):
        return ((a + b) + cc) + d + flag

    def quad(x0, y0):  # 17 options for one 32x32 quadrant
        opts16 = []
        for q in range(4):
            x, y = x0 + 16 * (q % 2), y0 + 16 * (q // 2)
            split8 = sum4(*(leaf(x + 8 * (k % 2), y + 8 * (k // 2), 8) for k in range(4)))
            opts16.append(np.array([leaf(x, y, 16), split8]))
        a, b, cc, d = np.meshgrid(*opts16, indexing="ij")
        return np.concatenate([[leaf(x0, y0, 32)], sum4(a, b, cc, d).ravel()])

    qs = [quad(32 * (q % 2), 32 * (q // 2)) for q in range(4)]
    a, b, cc, d = np.meshgrid(*qs, indexing="ij")
    return np.concatenate([[leaf(0, 0, 64)], sum4(a, b, cc, d).ravel()])


def test_c03_oracle_optimality(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    src = dataset.gen_synthetic(303, 3, 256, 256, "stills", tmp_path)
    ctus = [f.ctu(i) for p in src for f in read_cphy(p) for i in range(f.n_ctus)]
    picks = rng.choice(len(ctus), 10, replace=False)
    bad, n_checked = [], 0
    for qp in QPS:
        blocks = [ctus[i].astype(np.int32) for i in picks]
        blocks += [rng.integers(0, 256, (64, 64)).astype(np.int32) for _ in range(2)]
        for b in blocks:
            j, labels, _ = oracle_block(b, qp)
            costs = _all_partition_costs(b, qp)
            n_checked += 1
            if len(costs) != 83522 or costs.min() != j:
                bad.append((qp, j, costs.min()))
    # brute force through the tree objects for one CTU, no vectorisation
    b = ctus[picks[0]].astype(np.int32)
    direct = min(partition_cost(b, t, 32) for t in hcpm.all_trees())
    same = direct == oracle_block(b, 32)[0] == _all_partition_costs(b, 32).min()
    dt = time.perf_counter() - t0
    ok = not bad and same and dt < 120
    verdict(3, "oracle optimality", ok, f"{n_checked} CTUs x 83522 partitions, {len(bad)} mismatches, {dt:.1f}s")


# -- 4 ----------------------------------------------------------------------------------------

def _random_labels(rng, shape):
    out = np.full(shape + (21,), 255, np.uint8)
    l1 = rng.integers(0, 2, shape)
    out[..., 0] = l1
    for i in range(4):
        l2 = rng.integers(0, 2, shape)
        out[..., 1 + i] = np.where(l1 == 1, l2, 255)
        for j in range(4):
            out[..., 5 + 4 * i + j] = np.where((l1 == 1) & (l2 == 1), rng.integers(0, 2, shape), 255)
    return out


def test_c04_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    m = cnn.EthCnn.init(seed=4, dtype=np.float64)
    x = rng.integers(0, 256, (4, 64, 64)).astype(np.uint8)
    qps = np.array([22, 27, 32, 37])
    lab = _random_labels(rng, (4,))
    lab[0] = 1  # make sure every head sees a label
    _, g = m.loss_and_grads(x, qps, lab)
    err_c = nn.grad_check(lambda: m.loss(x, qps, lab), m.params, g, n_coords=200, seed=4)
    T = 5
    lm = lstm.EthLstm.init(seed=4, dtype=np.float64)
    for k in lm.params:
        if k.startswith("b_"):
            lm.params[k][:] = rng.normal(0, 0.1, lm.params[k].shape)
    fs = [rng.uniform(0, 1, (3, T, hd)) for hd in lstm.HIDDEN]
    lq = np.array([22, 32, 37])
    orders = np.tile(np.arange(T), (3, 1))
    ll = _random_labels(rng, (3, T))
    ll[0, :] = 1
    _, lg = lm.loss_and_grads(fs, lq, orders, ll)
    err_l = nn.grad_check(lambda: lm.loss(fs, lq, orders, ll), lm.params, lg, n_coords=200, seed=5)
    dt = time.perf_counter() - t0
    ok = err_c < 1e-3 and err_l < 1e-3 and dt < 300
    verdict(4, "gradient correctness", ok, f"cnn {err_c:.2e}, lstm(T={T}) {err_l:.2e}, {dt:.1f}s")


# -- 5 ----------------------------------------------------------------------------------------

def _expected_valid(dec):
    """Cells that must still be emitted given decisions on the full output."""
    v = np.ones(dec.shape, bool)
    stop1 = dec[..., 0] == Decision.NOT_SPLIT
    v[..., 1:] &= ~stop1[..., None]
    for i in range(4):
        stop2 = stop1 | (dec[..., 1 + i] == Decision.NOT_SPLIT)
        v[..., 5 + 4 * i:9 + 4 * i] &= ~stop2[..., None]
    return v


def test_c05_early_termination_equivalence():
    rng = np.random.default_rng(5)
    pairs = changed = wrong_mask = skipped = 0
    for w in range(100):
        m = cnn.EthCnn.init(seed=1000 + w)
        for k in ("out_1", "out_2", "out_3"):
            m.params[k] *= rng.uniform(1, 40)  # spread probabilities so decisions vary
        t = thresholds_from_width(rng.choice([0.0, 0.2, 0.5]))
        x = rng.integers(0, 256, (10, 64, 64)).astype(np.uint8)
        q = rng.choice(QPS, 10)
        p0, _ = m.predict(x, q, early_term=False)
        p1, v1 = m.predict(x, q, early_term=True, thresholds=t)
        exp = _expected_valid(hcpm.binarize_batch(p0, t))
        changed += int((p0[v1] != p1[v1]).sum())
        wrong_mask += int((v1 != exp).sum())
        skipped += int((~v1).sum())
        pairs += 10
    lpairs = 0
    for w in range(20):
        lm = lstm.EthLstm.init(seed=2000 + w)
        for k in ("out_1", "out_2", "out_3"):
            lm.params[k] *= rng.uniform(1, 40)
        fs = [rng.uniform(0, 1, (10, 5, hd)).astype(np.float32) for hd in lstm.HIDDEN]
        q = rng.choice(QPS, 10)
        orders = np.tile(np.arange(5), (10, 1))
        t = thresholds_from_width(0.0)
        p0, _, _ = lm.forward_sequence(fs, q, orders)
        p1, v1, _ = lm.forward_sequence(fs, q, orders, early_term=True, thresholds=t)
        exp = _expected_valid(hcpm.binarize_batch(p0.reshape(-1, 21), t)).reshape(v1.shape)
        changed += int((p0[v1] != p1[v1]).sum())
        wrong_mask += int((v1 != exp).sum())
        lpairs += 10
    ok = pairs >= 1000 and changed == 0 and wrong_mask == 0 and skipped > 0
    verdict(5, "early-termination equivalence", ok,
            f"{pairs} cnn + {lpairs} lstm pairs, {skipped} cells skipped, "
            f"{changed} changed, {wrong_mask} mask errors")


# -- 6 ----------------------------------------------------------------------------------------

def test_c06_degenerate_threshold(intra, inter):
    model, t1 = intra["model"], thresholds_from_width(1.0)
    bad = n = 0
    for path in intra["test_src"]:
        fr = read_cphy(path)[0]
        blocks = np.stack([fr.ctu(i) for i in range(fr.n_ctus)])
        for qp in QPS:
            p, v = model.predict(blocks, [qp] * len(blocks))
            probs = [HcpmProb(pp.astype(np.float64), vv) for pp, vv in zip(p, v)]
            a = encode_with_prediction(fr, qp, "intra", probs, t1)
            b = encode_oracle(fr, qp)
            bad += a.rd_total != b.rd_total or a.trees != b.trees
            n += fr.n_ctus
    # inter frames, random probabilities
    rng = np.random.default_rng(6)
    src = inter["test"].manifest["sources"][0]["path"]
    frames = read_cphy(src)
    for k in range(1, 6):
        probs = [HcpmProb(rng.random(21), np.ones(21, bool)) for _ in range(frames[k].n_ctus)]
        a = encode_with_prediction(frames[k], 27, "inter", probs, t1, reference=frames[k - 1])
        b = encode_oracle(frames[k], 27, "inter", reference=frames[k - 1])
        bad += a.rd_total != b.rd_total or a.trees != b.trees
        n += frames[k].n_ctus
    verdict(6, "degenerate-threshold identity", bad == 0, f"{n} CTUs, {bad} frame mismatches")


# -- 7 ----------------------------------------------------------------------------------------

def test_c07_crd_monotonicity(intra):
    view = intra["test"]
    p, v = evaluation.predict_view(view, intra["model"], early_term=False)
    d_values = [round(0.1 * i, 1) for i in range(11)]
    pts = evaluation.sweep(view, p, v, d_values)
    bad = evaluation.sweep_violations(pts)
    detail = " ".join(f"d={x['d']}:{x['rd_delta_pct']:.2f}%/{x['cu_reduction_pct']:.1f}%"
                      for x in pts[::5])
    verdict(7, "CRD monotonicity", not bad, f"{len(bad)} violations; {detail}")


# -- 8 ----------------------------------------------------------------------------------------

def test_c08_learning_signal(intra):
    test = intra["test"]
    p, v = evaluation.predict_view(test, intra["model"], early_term=False)
    acc = evaluation.level_accuracy(p, v, test.labels)
    l1 = test.labels[:, 0]
    majority = max(l1.mean(), 1 - l1.mean())
    # single-sample overfit, on the record with the most labelled cells
    train = intra["train"]
    k = int(np.argmax((train.labels != 255).sum(axis=1)))
    x, q, lab = train.blocks[k:k + 1], train.qps[k:k + 1], train.labels[k:k + 1]
    m = cnn.EthCnn.init(seed=8)
    cnn.train(m, x, q, lab, cnn.TrainConfig(iters=1500, batch=1, lr=0.01))
    overfit = m.loss(x, q, lab)
    ok = (len(intra["train"]) == 4096 and acc[0] >= majority + 0.10 and overfit < 0.01
          and intra["train_s"] < 1800)
    verdict(8, "learning signal", ok,
            f"level-1 acc {acc[0]:.3f} vs majority {majority:.3f}; levels {[round(a, 3) for a in acc]}; "
            f"overfit loss {overfit:.2e}; train {intra['train_s']:.0f}s")


# -- 9 ----------------------------------------------------------------------------------------

def test_c09_temporal_dependency(inter):
    t0 = time.perf_counter()
    train, test = inter["train"], inter["test"]
    trends, ccs = [], {}
    n_q = len(train.manifest["qps"])
    for qi, qp in enumerate(train.manifest["qps"]):
        seqs = [unit_depths(train.labels[sl].reshape(s["frames"], n_q, s["ctus_per_frame"], 21)[:, qi])
                for s, sl in train.source_slices()]
        res = depth_correlation(seqs, (1, 2, 3, 4), gop=4)
        ccs[qp] = [round(r["cc"], 3) for r in res.values()]
        trends.append(is_non_increasing([r["cc"] for r in res.values()]))
    c = cnn.EthCnn.init(seed=0)
    cnn.train(c, train.blocks, train.qps, train.labels, cnn.TrainConfig(iters=1000, batch=64))
    wf, wq, wo, wl = lstm_windows(train, c.features(train.blocks), 20, 10)
    lm = lstm.EthLstm.init(seed=0)
    lstm.train_sequences(lm, wf, wq, wo, wl, lstm.LstmTrainConfig(iters=500, batch=64, lr=0.1))
    acc_c = evaluation.level_accuracy(*evaluation.predict_view(test, c, early_term=False), test.labels)
    acc_l = evaluation.level_accuracy(*evaluation.predict_view(test, c, lm, early_term=False), test.labels)
    dt = time.perf_counter() - t0
    ok = all(trends) and acc_l[0] >= acc_c[0] and dt < 2700
    verdict(9, "temporal-dependency signal", ok,
            f"CC per QP {ccs}; level-1 cnn {acc_c[0]:.3f} vs cnn+lstm {acc_l[0]:.3f}; {dt:.0f}s")


# -- 10 ---------------------------------------------------------------------------------------

def test_c10_complexity_bounds(intra):
    view, model = intra["test"], intra["model"]
    t0 = thresholds_from_width(0.0)
    p, v = evaluation.predict_view(view, model, early_term=True, thresholds=t0)
    dec = evaluation.encode_decisions(p, v, t0)
    _, counts = evaluation.guided_costs(view.signed_blocks(), view.qps, dec)
    sav = cnn.measure_early_term_savings(model, view.blocks, view.qps)
    ok = counts.min() >= 1 and counts.max() <= 64 and sav[37] >= sav[22]
    verdict(10, "complexity-saving bounds", ok,
            f"counts in [{counts.min()}, {counts.max()}] over {len(counts)} CTUs; "
            f"head-FLOP savings QP22 {100 * sav[22]:.1f}% QP37 {100 * sav[37]:.1f}%")


# -- 11 ---------------------------------------------------------------------------------------

def _pipeline(d):
    steps = [["gen-data", "--seed", "7", "--count", "3", "--width", "128", "--height", "128",
              "--out", d / "src"],
             ["build-db", d / "src", "--out", d / "db.cphs"],
             ["train-cnn", "--db", d / "db.json", "--iters", "20", "--batch", "16", "--seed", "7",
              "--out", d / "cnn.ethm", "--report", d / "train.json"],
             ["eval", "--db", d / "db.json", "--model", d / "cnn.ethm", "--d", "0.3",
              "--out", d / "eval.json"],
             ["gen-data", "--seed", "8", "--count", "2", "--kind", "sequence", "--frames", "12",
              "--width", "128", "--height", "64", "--out", d / "seq"],
             ["build-db", d / "seq", "--mode", "inter", "--out", d / "inter.cphs"],
             ["train-cnn", "--db", d / "inter.json", "--iters", "10", "--batch", "16",
              "--out", d / "icnn.ethm"],
             ["train-lstm", "--db", d / "inter.json", "--model", d / "icnn.ethm", "--iters", "5",
              "--batch", "4", "--window", "8", "--overlap", "4", "--out", d / "lstm.ethm"],
             ["eval", "--db", d / "inter.json", "--model", d / "icnn.ethm", "--model", d / "lstm.ethm",
              "--out", d / "ieval.json"]]
    for s in steps:
        assert cli.main([str(a) for a in s]) == 0, s


def test_c11_determinism(tmp_path, capsys):
    for run in ("a", "b"):
        _pipeline(tmp_path / run)
    capsys.readouterr()
    same = []
    for name in ("db.cphs", "db.json", "inter.cphs", "cnn.ethm", "icnn.ethm", "lstm.ethm"):
        a, b = (tmp_path / r / name for r in ("a", "b"))
        # manifests record absolute source paths, which differ between the two runs
        if name.endswith(".json"):
            ja, jb = json.loads(a.read_text()), json.loads(b.read_text())
            for s in ja["sources"] + jb["sources"]:
                s.pop("path")
            same.append(ja == jb)
        else:
            same.append(a.read_bytes() == b.read_bytes())
    for name in ("eval.json", "ieval.json", "train.json"):
        ja, jb = (evaluation.strip_timing(json.loads((tmp_path / r / name).read_text())) for r in ("a", "b"))
        ja.pop("model", None), jb.pop("model", None)
        same.append(json.dumps(ja, sort_keys=True) == json.dumps(jb, sort_keys=True))
    verdict(11, "determinism", all(same), f"{sum(same)}/{len(same)} artefacts identical")
