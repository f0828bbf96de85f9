"""Early-terminated hierarchical LSTM over per-frame CNN features.

One LSTM cell per partition level consumes the first hidden-layer features
of a residue-trained :class:`~cupart.cnn.EthCnn` for the co-located CTU.
Cell update, per level::

    z  = [f_in(t), f_out(t-1)]
    i, o, g = sigmoid(z W_i + b_i), sigmoid(z W_o + b_o), sigmoid(z W_f + b_f)
    c(t) = i * tanh(z W_c + b_c) + g * c(t-1)
    f_out(t) = o * c(t)            # no outer tanh unless ``outer_tanh``

Two fully connected layers follow each cell; both append the side vector
``[qp / 51, one_hot(frame order in GOP, 4)]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .cnn import FlopReport, FlopRow, batch_indices, fc_row
from .hcpm import LEVEL_SLICES, N_CELLS, Decision, HcpmProb, ThresholdSet, decide

log = logging.getLogger(__name__)

HIDDEN = (64, 128, 256)
FC2 = (48, 96, 192)
OUTPUTS = (1, 4, 16)
GOP = 4
SIDE = 1 + GOP
GATES = ("i", "o", "f", "c")


def param_shapes(hidden=HIDDEN) -> dict:
    shapes = {}
    for l, (h, m, out) in enumerate(zip(hidden, FC2, OUTPUTS), start=1):
        for g in GATES:
            shapes[f"W_{g}_{l}"] = (2 * h, h)
        for g in GATES:
            shapes[f"b_{g}_{l}"] = (h,)
        shapes[f"fc2_{l}"] = (h + SIDE, m)
        shapes[f"out_{l}"] = (m + SIDE, out)
    return shapes


def side_inputs(qps, orders, dtype=np.float32):
    """``[qp/51, one_hot(order % 4)]`` with shape ``qps.shape + (5,)``."""
    qps = np.asarray(qps, dtype=np.float64)
    orders = np.asarray(orders) % GOP
    out = np.zeros(orders.shape + (SIDE,), dtype=dtype)
    out[..., 0] = np.broadcast_to(qps / 51.0, orders.shape)
    np.put_along_axis(out, (orders + 1)[..., None], 1.0, axis=-1)
    return out


@dataclass
class LstmState:
    c: list  # per level, B x h
    f: list

    @classmethod
    def zeros(cls, batch, dtype=np.float32, hidden=HIDDEN) -> "LstmState":
        return cls([np.zeros((batch, h), dtype) for h in hidden],
                   [np.zeros((batch, h), dtype) for h in hidden])


class EthLstm:
    def __init__(self, params: dict, outer_tanh=False):
        for name, shape in param_shapes().items():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise nn.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = params
        self.outer_tanh = outer_tanh

    @classmethod
    def init(cls, seed=0, std=0.1, dtype=np.float32, outer_tanh=False) -> "EthLstm":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes().items():
            if name.startswith("b_"):
                params[name] = np.zeros(shape, dtype)
            else:
                params[name] = nn.truncated_normal(rng, shape, std, dtype)
        return cls(params, outer_tanh)

    @property
    def dtype(self):
        return self.params["fc2_1"].dtype

    def astype(self, dtype) -> "EthLstm":
        return EthLstm({k: v.astype(dtype) for k, v in self.params.items()}, self.outer_tanh)

    def n_params(self, include_bias=False) -> int:
        return sum(int(v.size) for k, v in self.params.items() if include_bias or not k.startswith("b_"))

    # -- cell ----------------------------------------------------------------

    def cell_step(self, level, f_in, c_prev, f_prev):
        """One recurrent update for a batch. Returns ``(c, f_out, cache)``."""
        p = self.params
        h = HIDDEN[level - 1]
        if f_in.shape[-1] != h:
            raise nn.ShapeError(f"level {level} expects features of length {h}, got {f_in.shape[-1]}")
        z = np.concatenate([f_in, f_prev], axis=-1)
        i = nn.sigmoid(z @ p[f"W_i_{level}"] + p[f"b_i_{level}"])
        o = nn.sigmoid(z @ p[f"W_o_{level}"] + p[f"b_o_{level}"])
        g = nn.sigmoid(z @ p[f"W_f_{level}"] + p[f"b_f_{level}"])
        u = np.tanh(z @ p[f"W_c_{level}"] + p[f"b_c_{level}"])
        c = i * u + g * c_prev
        f_out = o * (np.tanh(c) if self.outer_tanh else c)
        return c, f_out, (z, i, o, g, u, c_prev, c)

    def _head(self, level, f_out, side, fc=nn.fc_forward):
        p = self.params
        s2 = np.concatenate([f_out, side], axis=-1)
        a2 = nn.relu(fc(s2, p[f"fc2_{level}"]))
        s3 = np.concatenate([a2, side], axis=-1)
        return fc(s3, p[f"out_{level}"]), (s2, a2, s3)

    # -- sequences ---------------------------------------------------------------

    def forward_sequence(self, feats, qps, orders, early_term=False,
                         thresholds: ThresholdSet | None = None, state: LstmState | None = None):
        """Run ``B`` independent sequences of ``T`` frames.

        ``feats`` is a list of three ``B x T x h_l`` arrays, ``orders`` the
        frame indices (``B x T``; must be strictly increasing along T).
        Returns ``(prob, valid, final_state)`` with ``prob``/``valid`` of shape
        ``B x T x 21``. Cell states advance at every level and frame, also
        where early termination skips the heads.
        """
        orders = np.asarray(orders)
        if orders.ndim == 1:
            orders = orders[None]
        if orders.shape[1] > 1 and np.any(np.diff(orders, axis=1) <= 0):
            raise ValueError("frames must be given in encoding order")
        b, t_len = orders.shape
        side = side_inputs(np.asarray(qps).reshape(-1, 1) * np.ones((1, t_len)), orders, self.dtype)
        st = state or LstmState.zeros(b, self.dtype)
        c, f = list(st.c), list(st.f)
        t = thresholds or ThresholdSet.single(0.5)
        prob = np.zeros((b, t_len, N_CELLS), self.dtype)
        valid = np.zeros((b, t_len, N_CELLS), bool)
        for step in range(t_len):
            for l in (1, 2, 3):
                c[l - 1], f[l - 1], _ = self.cell_step(l, feats[l - 1][:, step], c[l - 1], f[l - 1])
            rows = np.arange(b)
            quad_open = np.ones((b, 4), bool)
            for l, sl in zip((1, 2, 3), LEVEL_SLICES):
                if early_term and l == 2:
                    lo, up = t.for_level(1)
                    rows = rows[[decide(float(v), lo, up) != Decision.NOT_SPLIT for v in prob[rows, step, 0]]]
                elif early_term and l == 3:
                    lo, up = t.for_level(2)
                    for r in rows:
                        quad_open[r] = [decide(float(v), lo, up) != Decision.NOT_SPLIT
                                        for v in prob[r, step, 1:5]]
                    quad_open[np.setdiff1d(np.arange(b), rows)] = False
                    rows = np.arange(b)[quad_open.any(axis=1)]
                if rows.size == 0:
                    continue
                logits, _ = self._head(l, f[l - 1][rows], side[rows, step], nn.fc_forward_rows)
                prob[rows, step, sl] = nn.sigmoid(logits)
                valid[rows, step, sl] = True
            if early_term:
                cell_open = np.repeat(quad_open, 4, axis=1)
                prob[:, step, 5:] = np.where(cell_open, prob[:, step, 5:], 0)
                valid[:, step, 5:] &= cell_open
        return prob, valid, LstmState(c, f)

    def loss_and_grads(self, feats, qps, orders, labels):
        """Masked cross-entropy averaged over sequences and frames, with BPTT."""
        p = self.params
        labels = np.asarray(labels)
        b, t_len = labels.shape[:2]
        side = side_inputs(np.asarray(qps).reshape(-1, 1) * np.ones((1, t_len)), orders, self.dtype)
        truth = (labels == 1).astype(self.dtype)
        mask = (labels != 255).astype(self.dtype)
        scale = self.dtype.type(1.0 / (b * t_len))
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        total = 0.0
        for l, sl in zip((1, 2, 3), LEVEL_SLICES):
            h = HIDDEN[l - 1]
            c = np.zeros((b, h), self.dtype)
            f = np.zeros((b, h), self.dtype)
            caches, heads, dfs = [], [], []
            for step in range(t_len):
                c, f, cc = self.cell_step(l, feats[l - 1][:, step], c, f)
                logits, hc = self._head(l, f, side[:, step])
                per_row, _, dlog = nn.sigmoid_cross_entropy(logits, truth[:, step, sl], mask[:, step, sl])
                total += float(per_row.sum())
                dlog = dlog * scale
                s2, a2, s3 = hc
                grads[f"out_{l}"] += s3.T @ dlog
                da2 = (dlog @ p[f"out_{l}"].T)[:, :-SIDE] * (a2 > 0)
                grads[f"fc2_{l}"] += s2.T @ da2
                dfs.append((da2 @ p[f"fc2_{l}"].T)[:, :-SIDE])
                caches.append(cc)
            dh_next = np.zeros((b, h), self.dtype)
            dc_next = np.zeros((b, h), self.dtype)
            for step in reversed(range(t_len)):
                z, i, o, g, u, c_prev, c = caches[step]
                dh = dfs[step] + dh_next
                if self.outer_tanh:
                    tc = np.tanh(c)
                    do = dh * tc
                    dc = dh * o * (1 - tc * tc) + dc_next
                else:
                    do = dh * c
                    dc = dh * o + dc_next
                pre = {
                    "i": dc * u * i * (1 - i),
                    "o": do * o * (1 - o),
                    "f": dc * c_prev * g * (1 - g),
                    "c": dc * i * (1 - u * u),
                }
                dz = np.zeros_like(z)
                for gname, d in pre.items():
                    grads[f"W_{gname}_{l}"] += z.T @ d
                    grads[f"b_{gname}_{l}"] += d.sum(axis=0)
                    dz += d @ p[f"W_{gname}_{l}"].T
                dh_next = dz[:, h:]
                dc_next = dc * g
        return total / (b * t_len), grads

    def loss(self, feats, qps, orders, labels) -> float:
        labels = np.asarray(labels)
        prob, _, _ = self.forward_sequence(feats, qps, orders)
        mask = labels != 255
        loss, _ = nn.masked_cross_entropy(prob.astype(np.float64), labels == 1, mask)
        return loss / (labels.shape[0] * labels.shape[1])


def lstm_cell_step(f_in, state_c, state_f, model: EthLstm, level: int):
    """Single-sequence convenience wrapper: returns the updated ``(c, f_out)``."""
    c, f, _ = model.cell_step(level, np.asarray(f_in)[None], np.asarray(state_c)[None],
                              np.asarray(state_f)[None])
    return c[0], f[0]


def to_hcpm_probs(prob, valid) -> list:
    return [HcpmProb(p, v) for p, v in zip(prob, valid)]


# -- training ------------------------------------------------------------------------

def window_starts(n_frames: int, length=20, overlap=10) -> list:
    if length <= overlap:
        raise ValueError("window length must exceed the overlap")
    if n_frames < length:
        log.warning("sequence of %d frames is shorter than the window length %d; skipped",
                    n_frames, length)
        return []
    return list(range(0, n_frames - length + 1, length - overlap))


@dataclass
class LstmTrainConfig:
    iters: int = 1000
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 0.99
    decay_interval: int = 200
    seed: int = 0


def train_sequences(model: EthLstm, feats, qps, orders, labels,
                    cfg: LstmTrainConfig = LstmTrainConfig(), progress=None) -> list:
    """Momentum SGD over pre-cut windows.

    ``feats[l]`` is ``N x T x h_l``; ``qps`` ``N``; ``orders`` and ``labels``
    ``N x T (x 21)``. The CNN producing the features is not touched.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("no training windows")
    state = nn.SgdState(cfg.lr, cfg.momentum, cfg.decay_factor, cfg.decay_interval)
    stream = batch_indices(n, min(cfg.batch, n), [cfg.seed, 2])
    losses = []
    for it in range(cfg.iters):
        idx = next(stream)
        loss, grads = model.loss_and_grads([f[idx] for f in feats], qps[idx], orders[idx], labels[idx])
        nn.sgd_step(model.params, grads, state)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return losses


# -- accounting ----------------------------------------------------------------------

@dataclass(frozen=True)
class LstmArch:
    hidden: tuple = HIDDEN
    fc2: tuple = FC2
    side: int = SIDE
    bias: bool = False


def lstm_flop_report(arch: LstmArch = LstmArch()) -> FlopReport:
    """Per-row parameter/operation counts.

    Row formulas (``h`` = hidden size): one gate ``2h*h`` params,
    ``(2h-1)h`` adds, ``2h*h`` mults, counted three times in the totals; cell
    state ``2h*h`` params, ``(2h-1)(h+1)`` adds, ``2h(h+1)`` mults; cell output
    ``h-1`` adds and ``h`` mults. FC rows as for the CNN.
    """
    rows = []
    for l, h in enumerate(arch.hidden, start=1):
        b = h if arch.bias else 0
        rows.append(FlopRow(f"i/o/g-{l}", str(h), 2 * h * h + b, (2 * h - 1) * h, 2 * h * h, 3))
    for l, h in enumerate(arch.hidden, start=1):
        b = h if arch.bias else 0
        rows.append(FlopRow(f"c-{l}", str(h), 2 * h * h + b, (2 * h - 1) * (h + 1), 2 * h * (h + 1)))
    for l, h in enumerate(arch.hidden, start=1):
        rows.append(FlopRow(f"f'1-{l}", str(h), 0, h - 1, h))
    for l, (h, m) in enumerate(zip(arch.hidden, arch.fc2), start=1):
        r = fc_row(f"f'2-{l}", h + arch.side, m, arch.bias)
        rows.append(FlopRow(r.name, str(m), r.params, r.adds, r.mults))
    for l, (m, out) in enumerate(zip(arch.fc2, OUTPUTS), start=1):
        r = fc_row(f"y{l}", m + arch.side, out, arch.bias)
        rows.append(FlopRow(r.name, str(out), r.params, r.adds, r.mults))
    return FlopReport(rows)
