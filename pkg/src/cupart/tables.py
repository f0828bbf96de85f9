"""Reference parameter/operation tables and a row-by-row comparison."""

from __future__ import annotations

from .cnn import CnnArch, FlopReport, flop_report
from .lstm import LstmArch, lstm_flop_report

# (row, params, adds, mults)
CNN_TABLE = (
    ("C1-1", 256, 3840, 4096),
    ("C1-2", 256, 15360, 16384),
    ("C1-3", 256, 61440, 65536),
    ("C2-1", 1536, 4608, 6144),
    ("C2-2", 1536, 18432, 24576),
    ("C2-3", 1536, 73728, 98304),
    ("C3-1", 3072, 2304, 3072),
    ("C3-2", 3072, 9216, 12288),
    ("C3-3", 3072, 36864, 49152),
    ("f1-1", 172032, 171968, 172032),
    ("f1-2", 344064, 343936, 344064),
    ("f1-3", 688128, 687872, 688128),
    ("f2-1", 3120, 3072, 3120),
    ("f2-2", 12384, 12288, 12384),
    ("f2-3", 49344, 49152, 49344),
    ("y1", 49, 48, 49),
    ("y2", 388, 384, 388),
    ("y3", 3088, 3072, 3088),
    ("Total", 1287189, 1497584, 1552149),
)

LSTM_TABLE = (
    ("i/o/g-1", 8192, 8128, 8192),
    ("i/o/g-2", 32768, 32640, 32768),
    ("i/o/g-3", 131072, 130816, 131072),
    ("c-1", 8192, 8255, 8320),
    ("c-2", 32768, 32895, 33024),
    ("c-3", 131072, 131327, 131584),
    ("f'1-1", 0, 63, 64),
    ("f'1-2", 0, 127, 128),
    ("f'1-3", 0, 255, 256),
    ("f'2-1", 3312, 3264, 3312),
    ("f'2-2", 12768, 12672, 12768),
    ("f'2-3", 50112, 49920, 50112),
    ("y1", 53, 52, 53),
    ("y2", 404, 400, 404),
    ("y3", 3152, 3136, 3152),
    ("Total", 757929, 757118, 759273),
)

COLUMNS = ("params", "adds", "mults")


def compare(report: FlopReport, table) -> list:
    """One dict per table row with computed and expected values and ``ok``."""
    out = []
    for name, *expected in table:
        if name == "Total":
            got = (report.total_params, report.total_adds, report.total_mults)
        else:
            try:
                r = report.row(name)
                got = (r.params, r.adds, r.mults)
            except KeyError:
                got = (None, None, None)
        diff = {c: (g - e if g is not None else None) for c, g, e in zip(COLUMNS, got, expected)}
        out.append({"table": None, "row": name, "expected": list(expected), "got": list(got),
                    "diff": diff, "ok": tuple(got) == tuple(expected)})
    return out


def verify_tables(cnn_arch: CnnArch = CnnArch(), lstm_arch: LstmArch = LstmArch()) -> list:
    rows = []
    for label, report, table in (("cnn", flop_report(cnn_arch), CNN_TABLE),
                                 ("lstm", lstm_flop_report(lstm_arch), LSTM_TABLE)):
        for r in compare(report, table):
            r["table"] = label
            rows.append(r)
    return rows


def format_rows(rows) -> str:
    lines = []
    for r in rows:
        tag = "ok  " if r["ok"] else "FAIL"
        line = f"{tag} {r['table']:4s} {r['row']:8s} " + " ".join(
            f"{c}={g}" for c, g in zip(COLUMNS, r["got"]))
        if not r["ok"]:
            line += "  diff " + " ".join(f"{c}{d:+d}" for c, d in r["diff"].items() if d)
        lines.append(line)
    return "\n".join(lines)
