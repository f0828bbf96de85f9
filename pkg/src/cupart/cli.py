"""``cupart`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import dataset, evaluation, lstm as lstm_mod, modelio, tables
from .correlation import depth_correlation, is_non_increasing, unit_depths
from .dataset import DataError

log = logging.getLogger("cupart")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
ABLATIONS = ("orig-input", "residue-input", "cnn-only", "cnn-lstm", "no-early-term")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _qp_list(text):
    try:
        qps = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad QP list {text!r}")
    if not qps or any(not 0 <= q <= 51 for q in qps):
        raise argparse.ArgumentTypeError("QPs must be integers in [0, 51]")
    return qps


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# -- subcommands ---------------------------------------------------------------------------

def cmd_gen_data(a):
    paths = dataset.gen_synthetic(a.seed, a.count, a.width, a.height, a.kind, a.out or ".",
                                  frames=a.frames, density=a.density)
    _emit({"files": [str(p) for p in paths]})


def _expand_sources(items):
    out = []
    for item in items:
        p = Path(item)
        out.extend(sorted(p.glob("*.cphy")) if p.is_dir() else [p])
    return out


def cmd_build_db(a):
    input_kind = {"orig-input": "original", "residue-input": "residue"}.get(a.ablation)
    out = a.out or "db.cphs"
    m = dataset.build_db(_expand_sources(a.sources), a.qp_list, a.mode, out, input_kind)
    _emit({k: m[k] for k in ("record_count", "per_qp_counts", "class_balance", "mode", "input")}
          | {"manifest": str(dataset.manifest_path_for(out))})


def cmd_split_db(a):
    m = dataset.read_manifest(_need_db(a))
    splits = dataset.split_db(m, a.ratios, a.seed)
    paths = dataset.save_split_manifests(a.db, splits)
    _emit({name: {"manifest": str(p), "sources": len(splits[name]["sources"]),
                  "records": splits[name]["record_count"]} for name, p in paths.items()})


def _need_db(a):
    if not a.db:
        raise UsageError("--db is required")
    return a.db


def _progress(every):
    def cb(it, loss):
        if every and (it + 1) % every == 0:
            log.info("iter %d loss %.5f", it + 1, loss)
    return cb


def cmd_train_cnn(a):
    view = dataset.load_view(_need_db(a))
    model = cnn_mod.EthCnn.init(seed=a.seed)
    cfg = cnn_mod.TrainConfig(iters=a.iters, batch=a.batch, lr=a.lr, seed=a.seed)
    t0 = time.perf_counter()
    res = cnn_mod.train(model, view.blocks, view.qps, view.labels, cfg, _progress(a.log_every))
    out = a.out or "cnn.ethm"
    modelio.save_model(out, model, view.mode_byte)
    report = {"model": out, "iters": a.iters, "records": len(view),
              "loss_first": res.losses[0], "loss_last": float(np.mean(res.losses[-50:])),
              "timing": {"train_s": time.perf_counter() - t0}}
    if a.val:
        vv = dataset.load_view(a.val)
        p, v = evaluation.predict_view(vv, model, early_term=False)
        report["val_accuracy"] = evaluation.level_accuracy(p, v, vv.labels)
    _emit(report, a.report)


def _load_models(paths, view=None):
    """``(cnn, lstm | None)``; checks that models match the database mode."""
    cnn = lstm = None
    for p in paths or []:
        m, head = modelio.load_model(p)
        if view is not None and head["data_mode"] != view.mode_byte:
            raise evaluation.ModeMismatch(
                f"{p} was trained on mode-{head['data_mode']} records, database has mode {view.mode_byte}")
        if isinstance(m, cnn_mod.EthCnn):
            cnn = m
        else:
            lstm = m
    if cnn is None:
        raise UsageError("a CNN model is required (--model)")
    return cnn, lstm


def lstm_windows(view, feats, length, overlap):
    """Cut every co-located CTU sequence into training windows."""
    idx_rows = []
    for _, _, idx in view.sequences():
        for s in lstm_mod.window_starts(len(idx), length, overlap):
            idx_rows.append(idx[s:s + length])
    if not idx_rows:
        raise DataError("no sequence is long enough for one training window")
    idx = np.array(idx_rows)
    orders = np.tile(np.arange(length), (len(idx), 1))
    return [f[idx] for f in feats], view.qps[idx[:, 0]], orders, view.labels[idx]


def cmd_train_lstm(a):
    view = dataset.load_view(_need_db(a))
    if view.mode_byte == dataset.MODE_INTRA:
        raise DataError("the LSTM needs an inter database")
    cnn, _ = _load_models(a.model, view)
    feats = cnn.features(view.blocks)
    wf, wq, wo, wl = lstm_windows(view, feats, a.window, a.overlap)
    model = lstm_mod.EthLstm.init(seed=a.seed)
    cfg = lstm_mod.LstmTrainConfig(iters=a.iters, batch=a.batch, lr=a.lr, seed=a.seed)
    t0 = time.perf_counter()
    losses = lstm_mod.train_sequences(model, wf, wq, wo, wl, cfg, _progress(a.log_every))
    out = a.out or "lstm.ethm"
    modelio.save_model(out, model, view.mode_byte)
    report = {"model": out, "iters": a.iters, "windows": int(len(wl)),
              "loss_first": losses[0], "loss_last": float(np.mean(losses[-50:])),
              "timing": {"train_s": time.perf_counter() - t0}}
    _emit(report, a.report)


def _predict(a, view, early_term=True):
    thresholds = evaluation.thresholds_from_width(a.d)
    if a.model == ["oracle"]:
        return evaluation.oracle_prediction(view.labels), 0.0
    cnn, lstm = _load_models(a.model, view)
    if a.ablation == "cnn-only":
        lstm = None
    elif a.ablation == "cnn-lstm" and lstm is None:
        raise UsageError("--ablation cnn-lstm needs an LSTM model")
    t0 = time.perf_counter()
    early_term = early_term and a.ablation != "no-early-term"
    pv = evaluation.predict_view(view, cnn, lstm, early_term, thresholds)
    return pv, time.perf_counter() - t0


def cmd_eval(a):
    view = dataset.load_view(_need_db(a))
    (prob, valid), t_pred = _predict(a, view)
    t0 = time.perf_counter()
    rep = evaluation.evaluate(view, prob, valid, a.d)
    rep["timing"] = {"predict_s_per_ctu": t_pred / len(view),
                     "encode_s_per_ctu": (time.perf_counter() - t0) / len(view)}
    rep["ablation"] = a.ablation
    _emit(rep, a.out)


def cmd_sweep(a):
    view = dataset.load_view(_need_db(a))
    d_values = a.d_values or [round(0.1 * i, 1) for i in range(11)]
    # full probabilities once; each d then applies its own thresholds
    (prob, valid), _ = _predict(a, view, early_term=False)
    points = evaluation.sweep(view, prob, valid, d_values)
    bad = evaluation.sweep_violations(points)
    if a.csv:
        evaluation.write_sweep_csv(a.csv, points)
    _emit({"version": evaluation.REPORT_VERSION, "points": points, "violations": bad}, a.out)
    return EXIT_VERIFY if bad else EXIT_OK


def cmd_bench(a):
    view = dataset.load_view(_need_db(a))
    cnn, lstm = _load_models(a.model, view)
    if a.ablation == "cnn-only":
        lstm = None
    rep = evaluation.bench(view, cnn, lstm, a.d, repeats=a.repeats, max_ctus=a.max_ctus,
                           early_term=a.ablation != "no-early-term")
    _emit({"timing": rep}, a.out)


def cmd_verify_tables(a):
    cnn_arch, lstm_arch = cnn_mod.CnnArch(), lstm_mod.LstmArch()
    if a.perturb == "bias":
        cnn_arch, lstm_arch = cnn_mod.CnnArch(bias=True), lstm_mod.LstmArch(bias=True)
    elif a.perturb == "hidden63":
        cnn_arch = cnn_mod.CnnArch(hidden1=(63, 128, 256))
        lstm_arch = lstm_mod.LstmArch(hidden=(63, 128, 256))
    rows = tables.verify_tables(cnn_arch, lstm_arch)
    print(tables.format_rows(rows), file=sys.stderr)
    ok = all(r["ok"] for r in rows)
    if a.out:
        Path(a.out).write_text(json.dumps({"ok": ok, "rows": rows}, indent=2) + "\n")
    print(json.dumps({"ok": ok, "failed": [f"{r['table']}:{r['row']}" for r in rows if not r["ok"]]}))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_depth_corr(a):
    view = dataset.load_view(_need_db(a))
    qps = view.manifest["qps"]
    out = {"gop": a.gop, "distances": a.distances, "per_qp": {}}
    n_q = len(qps)
    trend_ok = True
    for qi, qp in enumerate(qps):
        seqs = []
        for s, sl in view.source_slices():
            lab = view.labels[sl].reshape(s["frames"], n_q, s["ctus_per_frame"], 21)[:, qi]
            seqs.append(unit_depths(lab))
        res = depth_correlation(seqs, a.distances, a.gop)
        out["per_qp"][str(qp)] = {str(k): v for k, v in res.items()}
        trend_ok &= is_non_increasing([v["cc"] for v in res.values()])
    out["cc_non_increasing"] = bool(trend_ok)
    _emit(out, a.out)
    return EXIT_VERIFY if a.check_trend and not trend_ok else EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--qp-list", type=_qp_list, default=list(dataset.DEFAULT_QPS),
                   help="comma-separated QPs (default 22,27,32,37)")
    g.add_argument("--mode", choices=("intra", "inter"), default="intra")
    g.add_argument("--d", type=_unit_float, default=0.0, help="uncertain-zone width in [0, 1]")
    g.add_argument("--model", action="append", help="ETHM model file (repeat for CNN + LSTM)")
    g.add_argument("--db", help="database manifest (.json)")
    g.add_argument("--out", help="output path")
    g.add_argument("--ablation", choices=ABLATIONS)
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cupart", description="Learned CU partition prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic CPHY sources")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--kind", choices=("stills", "sequence"), default="stills")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--density", type=_unit_float, default=0.5)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("build-db", parents=[common], help="label sources and write a CPHS database")
    s.add_argument("sources", nargs="+", help="CPHY files or directories")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("split-db", parents=[common], help="source-level train/val/test split")
    s.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.set_defaults(func=cmd_split_db)

    for name, func, iters, lr in (("train-cnn", cmd_train_cnn, 2000, 0.01),
                                  ("train-lstm", cmd_train_lstm, 1000, 0.1)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--iters", type=int, default=iters)
        s.add_argument("--batch", type=int, default=64)
        s.add_argument("--lr", type=float, default=lr)
        s.add_argument("--report", help="write the JSON report here too")
        s.add_argument("--log-every", type=int, default=100)
        s.set_defaults(func=func)
        if name == "train-cnn":
            s.add_argument("--val", help="validation manifest for a final accuracy")
        else:
            s.add_argument("--window", type=int, default=20)
            s.add_argument("--overlap", type=int, default=10)

    s = sub.add_parser("eval", parents=[common], help="accuracy, RD delta and CU reduction")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="CRD sweep over uncertain-zone widths")
    s.add_argument("--d-values", type=_unit_float, nargs="+")
    s.add_argument("--csv", help="write sweep points as CSV")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("bench", parents=[common], help="wall-clock timing per CTU")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--max-ctus", type=int, default=256)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("verify-tables", parents=[common], help="check parameter/FLOP tables")
    s.add_argument("--perturb", choices=("bias", "hidden63"),
                   help="deliberately alter the architecture (self-test)")
    s.set_defaults(func=cmd_verify_tables)

    s = sub.add_parser("depth-corr", parents=[common], help="temporal CU depth correlation")
    s.add_argument("--distances", type=int, nargs="+", default=[1, 2, 3, 4])
    s.add_argument("--gop", type=int, default=lstm_mod.GOP)
    s.add_argument("--check-trend", action="store_true",
                   help="exit 3 if CC rises with distance at any QP")
    s.set_defaults(func=cmd_depth_corr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except UsageError as exc:
        print(f"cupart: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, evaluation.ModeMismatch, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"cupart: {exc}", file=sys.stderr)
        return EXIT_DATA
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
