"""Prediction over databases, accuracy, RD/complexity deltas, sweeps, timing."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from .codec import guided_block, kernels, oracle_block
from .dataset import DbView
from .hcpm import LEVEL_SLICES, N_CELLS, Decision, ThresholdSet, binarize_batch, thresholds_from_width
from .lstm import EthLstm

FULL_COUNT = 85
REPORT_VERSION = 1


class ModeMismatch(ValueError):
    pass


# -- prediction ------------------------------------------------------------------------

def predict_view(view: DbView, cnn: cnn_mod.EthCnn, lstm: EthLstm | None = None,
                 early_term=True, thresholds: ThresholdSet | None = None, batch=256):
    """``(prob, valid)`` for every record of ``view``, in record order.

    With an LSTM, every co-located CTU sequence of a source runs through it
    frame by frame, fed by the CNN's first-layer features.
    """
    blocks = view.blocks
    qps = view.qps
    if lstm is None:
        return cnn_mod.predict_batched(cnn, blocks, qps, early_term, thresholds, batch)
    feats = cnn.features(blocks, batch)
    prob = np.zeros((len(view), N_CELLS), np.float32)
    valid = np.zeros((len(view), N_CELLS), bool)
    n_q = len(view.manifest["qps"])
    for s, sl in view.source_slices():
        f_n, c = s["frames"], s["ctus_per_frame"]
        # (F, Q*C) grid of record indices -> sequences along frames
        idx = np.arange(sl.start, sl.stop).reshape(f_n, n_q * c).T
        seq_feats = [f[idx] for f in feats]
        orders = np.tile(np.arange(f_n), (idx.shape[0], 1))
        p, v, _ = lstm.forward_sequence(seq_feats, qps[idx[:, 0]], orders, early_term, thresholds)
        prob[idx] = p
        valid[idx] = v
    return prob, valid


def oracle_prediction(labels):
    """Treat ground-truth labels as a (perfectly confident) prediction."""
    labels = np.asarray(labels)
    return (labels == 1).astype(np.float32), labels != 255


def constant_prediction(n, value=0.5):
    return np.full((n, N_CELLS), value, np.float32), np.ones((n, N_CELLS), bool)


# -- metrics ------------------------------------------------------------------------------

def hard_labels(prob, valid, thresholds: ThresholdSet | None = None):
    """0/1 predictions at a single threshold; invalid cells count as NotSplit."""
    t = thresholds or ThresholdSet.single(0.5)
    dec = binarize_batch(prob, t)
    return ((dec == Decision.SPLIT) & valid).astype(np.uint8)


def level_accuracy(prob, valid, labels) -> list:
    """Per-level accuracy over cells whose ground truth is not Null."""
    labels = np.asarray(labels)
    pred = hard_labels(prob, valid)
    out = []
    for sl in LEVEL_SLICES:
        m = labels[:, sl] != 255
        out.append(float((pred[:, sl][m] == labels[:, sl][m]).mean()) if m.any() else None)
    return out


def encode_decisions(prob, valid, thresholds: ThresholdSet) -> np.ndarray:
    """Decision codes for the guided encoder; cells without a probability fall
    back to Uncertain (full local check)."""
    dec = binarize_batch(prob, thresholds)
    dec[~np.asarray(valid)] = Decision.UNCERTAIN
    return dec


def oracle_costs(signed_blocks, qps) -> np.ndarray:
    return np.array([oracle_block(b, int(q))[0] for b, q in zip(signed_blocks, qps)])


def guided_costs(signed_blocks, qps, decisions):
    js = np.empty(len(qps))
    counts = np.empty(len(qps), np.int64)
    for i, (b, q, d) in enumerate(zip(signed_blocks, qps, decisions)):
        js[i], _, counts[i] = guided_block(b, d, int(q))
    return js, counts


def _rd_summary(j_pred, j_oracle, counts) -> dict:
    tot_p, tot_o = float(j_pred.sum()), float(j_oracle.sum())
    return {
        "n_ctus": int(len(counts)),
        "rd_total_pred": tot_p,
        "rd_total_oracle": tot_o,
        "rd_delta_pct": 100.0 * (tot_p - tot_o) / tot_o if tot_o else 0.0,
        "precoded_cu_count": int(counts.sum()),
        "precoded_cu_mean": float(counts.mean()) if len(counts) else 0.0,
        "cu_reduction_pct": 100.0 * (1.0 - counts.mean() / FULL_COUNT) if len(counts) else 0.0,
        "min_count": int(counts.min()) if len(counts) else None,
        "max_count": int(counts.max()) if len(counts) else None,
    }


def evaluate(view: DbView, prob, valid, d=0.0, j_oracle=None, signed=None) -> dict:
    """Accuracy plus RD/complexity deltas, overall and per QP (no timing)."""
    signed = view.signed_blocks() if signed is None else signed
    qps = view.qps
    labels = view.labels
    if j_oracle is None:
        j_oracle = oracle_costs(signed, qps)
    dec = encode_decisions(prob, valid, thresholds_from_width(d))
    j_pred, counts = guided_costs(signed, qps, dec)
    per_qp = {}
    for q in np.unique(qps):
        m = qps == q
        per_qp[str(int(q))] = {"accuracy": level_accuracy(prob[m], valid[m], labels[m]),
                               **_rd_summary(j_pred[m], j_oracle[m], counts[m])}
    return {"version": REPORT_VERSION, "d": float(d),
            "accuracy": level_accuracy(prob, valid, labels),
            **_rd_summary(j_pred, j_oracle, counts), "per_qp": per_qp}


def time_per_ctu(fn, n, repeats=1):
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / (repeats * max(n, 1))


# -- sweep ------------------------------------------------------------------------------------

SWEEP_FIELDS = ("d", "qp", "rd_delta_pct", "cu_reduction_pct", "precoded_cu_count",
                "rd_total_pred", "rd_total_oracle")


def sweep(view: DbView, prob, valid, d_values) -> list:
    d_values = sorted(float(d) for d in d_values)
    if not d_values:
        raise ValueError("empty d list")
    if d_values[0] < 0 or d_values[-1] > 1:
        raise ValueError("d values must lie in [0, 1]")
    signed = view.signed_blocks()
    j_oracle = oracle_costs(signed, view.qps)
    points = []
    for d in d_values:
        rep = evaluate(view, prob, valid, d, j_oracle, signed)
        points.append({"d": d, "rd_delta_pct": rep["rd_delta_pct"],
                       "cu_reduction_pct": rep["cu_reduction_pct"],
                       "precoded_cu_count": rep["precoded_cu_count"],
                       "rd_total_pred": rep["rd_total_pred"],
                       "rd_total_oracle": rep["rd_total_oracle"],
                       "per_qp": {q: {k: v[k] for k in SWEEP_FIELDS[2:]}
                                  for q, v in rep["per_qp"].items()}})
    return points


def sweep_violations(points) -> list:
    """Places where RD delta grows or the pre-coded count shrinks as d grows."""
    bad = []
    keys = ["all"] + sorted(points[0]["per_qp"]) if points else []
    for key in keys:
        series = [p if key == "all" else p["per_qp"][key] for p in points]
        for a, b, pa, pb in zip(series, series[1:], points, points[1:]):
            if b["rd_total_pred"] > a["rd_total_pred"]:
                bad.append(f"qp {key}: rd grows from d={pa['d']} to d={pb['d']}")
            if b["precoded_cu_count"] < a["precoded_cu_count"]:
                bad.append(f"qp {key}: CU count drops from d={pa['d']} to d={pb['d']}")
    return bad


def write_sweep_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({"qp": "all", **{k: p[k] for k in SWEEP_FIELDS if k != "qp"}})
            for q, v in p["per_qp"].items():
                w.writerow({"d": p["d"], "qp": q, **v})


def read_sweep_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append({"d": float(r["d"]), "qp": r["qp"],
                         "rd_delta_pct": float(r["rd_delta_pct"]),
                         "cu_reduction_pct": float(r["cu_reduction_pct"]),
                         "precoded_cu_count": int(r["precoded_cu_count"]),
                         "rd_total_pred": float(r["rd_total_pred"]),
                         "rd_total_oracle": float(r["rd_total_oracle"])})
    return rows


# -- timing -----------------------------------------------------------------------------------

def bench(view: DbView, cnn: cnn_mod.EthCnn, lstm: EthLstm | None = None, d=0.0,
          repeats=5, max_ctus=256, early_term=True) -> dict:
    """Wall-clock per CTU for inference, oracle RDO and the guided encode."""
    n = min(len(view), max_ctus)
    signed = view.signed_blocks()[:n]
    qps = view.qps[:n]
    blocks = view.blocks[:n]
    t = thresholds_from_width(d)

    def infer():
        if lstm is None:
            return cnn_mod.predict_batched(cnn, blocks, qps, early_term, t)
        return predict_view(view, cnn, lstm, early_term, t)

    prob, valid = infer()
    dec = encode_decisions(prob[:n], valid[:n], t)
    n_inf = len(view) if lstm is not None else n
    samples = {"inference": [], "oracle": [], "guided": []}
    for _ in range(repeats):
        samples["inference"].append(time_per_ctu(infer, n_inf))
        samples["oracle"].append(time_per_ctu(lambda: oracle_costs(signed, qps), n))
        samples["guided"].append(time_per_ctu(lambda: guided_costs(signed, qps, dec), n))
    single = time_per_ctu(lambda: cnn.predict(blocks[:1], qps[:1], early_term, t), 1, repeats=20)
    out = {"backend": kernels.BACKEND, "n_ctus": n, "repeats": repeats}
    for k, v in samples.items():
        v = np.array(v)
        out[f"{k}_s_per_ctu"] = float(np.median(v))
        out[f"{k}_cv"] = float(v.std() / v.mean()) if v.mean() > 0 else 0.0
    inf, gui, ora = out["inference_s_per_ctu"], out["guided_s_per_ctu"], out["oracle_s_per_ctu"]
    out["inference_share"] = inf / (inf + gui)
    out["predicted_path_s_per_ctu"] = inf + gui
    out["predicted_faster_than_oracle"] = bool(inf + gui < ora)
    out["single_ctu_inference_s"] = single
    out["single_vs_batched_ratio"] = single / inf if inf > 0 else None
    return out


def strip_timing(report):
    """Drop wall-clock fields so reports can be compared byte for byte."""
    if isinstance(report, dict):
        return {k: strip_timing(v) for k, v in report.items() if k != "timing"}
    if isinstance(report, list):
        return [strip_timing(v) for v in report]
    return report


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
