"""Early-terminated hierarchical CNN predicting the 21-cell partition map.

Three branches see the CTU at 16x16, 32x32 and 64x64 after per-unit mean
removal; each runs three non-overlapping conv layers (4x4/16, 2x2/24,
2x2/32). The second and third conv outputs of all branches are concatenated
(2688 values) and fed to one fully connected head per level, with the
normalised QP appended to both hidden-layer inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .hcpm import LEVEL_SLICES, N_CELLS, Decision, HcpmProb, ThresholdSet, decide

HIDDEN1 = (64, 128, 256)
HIDDEN2 = (48, 96, 192)
OUTPUTS = (1, 4, 16)
CONV_SPECS = (nn.ConvSpec(1, 16, 4), nn.ConvSpec(16, 24, 2), nn.ConvSpec(24, 32, 2))
BRANCH_INPUT = (16, 32, 64)
CONCAT_LEN = 2688
DROPOUT = (0.5, 0.2)
QP_MAX = 51.0


def param_shapes() -> dict:
    shapes = {}
    for l in (1, 2, 3):
        for i, spec in enumerate(CONV_SPECS, start=1):
            shapes[f"conv{i}_{l}"] = spec.weight_shape
    for l, (h1, h2, out) in enumerate(zip(HIDDEN1, HIDDEN2, OUTPUTS), start=1):
        shapes[f"fc1_{l}"] = (CONCAT_LEN, h1)
        shapes[f"fc2_{l}"] = (h1 + 1, h2)
        shapes[f"out_{l}"] = (h2 + 1, out)
    return shapes


def _box(x, k):
    b, h, w = x.shape
    return x.reshape(b, h // k, k, w // k, k).mean(axis=(2, 4))


def _remove_unit_means(x, unit):
    b, h, w = x.shape
    blocks = x.reshape(b, h // unit, unit, w // unit, unit)
    return (blocks - blocks.mean(axis=(2, 4), keepdims=True)).reshape(b, h, w)


def preprocess(ctus, dtype=np.float32):
    """Scale to [0, 1], remove per-unit means and box-downsample per branch.

    Accepts one ``64 x 64`` CTU or a batch ``B x 64 x 64``. Returns three
    arrays ``B x S x S x 1`` with ``S`` = 16, 32, 64.
    """
    x = np.asarray(ctus)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (64, 64):
        raise nn.ShapeError(f"CTUs must be 64x64, got {x.shape[1:]}")
    x = x.astype(dtype) / dtype(255.0)
    b1 = _box(_remove_unit_means(x, 64), 4)
    b2 = _box(_remove_unit_means(x, 32), 2)
    b3 = _remove_unit_means(x, 16)
    out = tuple(b[..., None].astype(dtype) for b in (b1, b2, b3))
    if single:
        return tuple(o[0] for o in out)
    return out


@dataclass
class CnnFeatures:
    f1: list  # per level: B x {64, 128, 256}


class EthCnn:
    def __init__(self, params: dict):
        shapes = param_shapes()
        missing = set(shapes) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise nn.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = params

    @classmethod
    def init(cls, seed=0, std=0.1, dtype=np.float32) -> "EthCnn":
        rng = np.random.default_rng(seed)
        return cls({n: nn.truncated_normal(rng, s, std, dtype) for n, s in param_shapes().items()})

    @classmethod
    def zeros(cls, dtype=np.float32) -> "EthCnn":
        return cls({n: np.zeros(s, dtype) for n, s in param_shapes().items()})

    @property
    def dtype(self):
        return self.params["fc1_1"].dtype

    def astype(self, dtype) -> "EthCnn":
        return EthCnn({k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    # -- trunk ---------------------------------------------------------------

    def _trunk(self, ctus):
        p = self.params
        branches = preprocess(ctus, self.dtype.type)
        cache = []
        c2s, c3s = [], []
        for l, x in enumerate(branches, start=1):
            acts = [x]
            for i in (1, 2, 3):
                acts.append(nn.relu(nn.conv_forward(acts[-1], p[f"conv{i}_{l}"])))
            cache.append(acts)
            c2s.append(acts[2].reshape(len(x), -1))
            c3s.append(acts[3].reshape(len(x), -1))
        return np.concatenate(c2s + c3s, axis=1), cache

    def _trunk_backward(self, cache, da, grads):
        p = self.params
        sizes = [acts[2][0].size for acts in cache] + [acts[3][0].size for acts in cache]
        parts = np.split(da, np.cumsum(sizes)[:-1], axis=1)
        for l, acts in enumerate(cache, start=1):
            d3 = parts[3 + l - 1].reshape(acts[3].shape) * (acts[3] > 0)
            dx, grads[f"conv3_{l}"] = nn.conv_backward(acts[2], p[f"conv3_{l}"], d3)
            d2 = (dx + parts[l - 1].reshape(acts[2].shape)) * (acts[2] > 0)
            dx, grads[f"conv2_{l}"] = nn.conv_backward(acts[1], p[f"conv2_{l}"], d2)
            d1 = dx * (acts[1] > 0)
            _, grads[f"conv1_{l}"] = nn.conv_backward(acts[0], p[f"conv1_{l}"], d1)

    # -- heads ---------------------------------------------------------------

    def _hidden1(self, level, a, fc=nn.fc_forward):
        return nn.relu(fc(a, self.params[f"fc1_{level}"]))

    def _head_rest(self, level, h1, q, rng=None, fc=nn.fc_forward):
        p = self.params
        h1d, s1 = nn.dropout_train(h1, DROPOUT[0], rng, training=rng is not None)
        z2 = np.concatenate([h1d, q], axis=1)
        h2 = nn.relu(fc(z2, p[f"fc2_{level}"]))
        h2d, s2 = nn.dropout_train(h2, DROPOUT[1], rng, training=rng is not None)
        z3 = np.concatenate([h2d, q], axis=1)
        logits = fc(z3, p[f"out_{level}"])
        return logits, (h1, s1, z2, h2, s2, z3)

    def _qcol(self, qps, n):
        q = np.asarray(qps, dtype=np.float64).reshape(-1)
        if q.size == 1 and n > 1:
            q = np.full(n, q[0])
        if np.any((q < 0) | (q > QP_MAX)):
            raise ValueError("QP must lie in [0, 51]")
        return (q / QP_MAX).astype(self.dtype)[:, None]

    def forward_train(self, ctus, qps, rng=None):
        """Full forward pass (all heads) keeping what backward needs.

        ``rng`` enables dropout; ``None`` runs in inference mode.
        """
        a, tcache = self._trunk(ctus)
        q = self._qcol(qps, len(a))
        logits, hcache = [], []
        for l in (1, 2, 3):
            lg, hc = self._head_rest(l, self._hidden1(l, a), q, rng)
            logits.append(lg)
            hcache.append(hc)
        return np.concatenate(logits, axis=1), (a, tcache, hcache)

    def backward(self, cache, dlogits) -> dict:
        a, tcache, hcache = cache
        p = self.params
        grads = {}
        da = np.zeros_like(a)
        for l, sl in zip((1, 2, 3), LEVEL_SLICES):
            h1, s1, z2, h2, s2, z3 = hcache[l - 1]
            dz3, grads[f"out_{l}"] = nn.fc_backward(z3, p[f"out_{l}"], dlogits[:, sl])
            dh2 = dz3[:, :-1]
            if s2 is not None:
                dh2 = dh2 * s2
            dh2 = dh2 * (h2 > 0)
            dz2, grads[f"fc2_{l}"] = nn.fc_backward(z2, p[f"fc2_{l}"], dh2)
            dh1 = dz2[:, :-1]
            if s1 is not None:
                dh1 = dh1 * s1
            dh1 = dh1 * (h1 > 0)
            da_l, grads[f"fc1_{l}"] = nn.fc_backward(a, p[f"fc1_{l}"], dh1)
            da += da_l
        self._trunk_backward(tcache, da, grads)
        return grads

    def loss_and_grads(self, ctus, qps, labels, rng=None):
        """Mean over the batch of the per-sample masked cross-entropy sum."""
        labels = np.asarray(labels)
        logits, cache = self.forward_train(ctus, qps, rng)
        truth = (labels == 1).astype(self.dtype)
        mask = (labels != 255).astype(self.dtype)
        per_row, _, dlogits = nn.sigmoid_cross_entropy(logits, truth, mask)
        b = len(labels)
        grads = self.backward(cache, dlogits / self.dtype.type(b))
        return float(per_row.mean()), grads

    def loss(self, ctus, qps, labels) -> float:
        labels = np.asarray(labels)
        logits, _ = self.forward_train(ctus, qps)
        truth = (labels == 1).astype(self.dtype)
        mask = (labels != 255).astype(self.dtype)
        per_row, _, _ = nn.sigmoid_cross_entropy(logits, truth, mask)
        return float(per_row.mean())

    # -- inference -----------------------------------------------------------

    def predict(self, ctus, qps, early_term=False, thresholds: ThresholdSet | None = None,
                with_features=False):
        """Batched inference.

        Returns ``(prob, valid)`` arrays of shape ``B x 21`` (plus the
        :class:`CnnFeatures` when ``with_features``). With ``early_term`` a
        level-2 head is evaluated only for CTUs whose level-1 decision is not
        NotSplit, and level-3 cells only under quadrants that are not
        NotSplit; skipped cells are flagged invalid and hold 0. Decisions use
        the lower thresholds of ``thresholds`` (0.5 by default).
        """
        ctus = np.asarray(ctus)
        if ctus.ndim == 2:
            ctus = ctus[None]
        a, _ = self._trunk(ctus)
        b = len(a)
        q = self._qcol(qps, b)
        t = thresholds or ThresholdSet.single(0.5)
        prob = np.zeros((b, N_CELLS), dtype=self.dtype)
        valid = np.zeros((b, N_CELLS), dtype=bool)
        f1 = [None, None, None]

        # heads go through fc_forward_rows so that evaluating a subset of rows
        # (early termination) reproduces the full-batch values bit for bit
        def run(level, rows):
            h1 = self._hidden1(level, a[rows], nn.fc_forward_rows)
            lg, _ = self._head_rest(level, h1, q[rows], fc=nn.fc_forward_rows)
            prob[rows, LEVEL_SLICES[level - 1]] = nn.sigmoid(lg)
            valid[rows, LEVEL_SLICES[level - 1]] = True
            return h1

        all_rows = np.arange(b)
        f1[0] = run(1, all_rows)
        if not early_term:
            f1[1] = run(2, all_rows)
            f1[2] = run(3, all_rows)
        else:
            lo1, up1 = t.for_level(1)
            go2 = np.array([decide(float(v), lo1, up1) != Decision.NOT_SPLIT for v in prob[:, 0]],
                           dtype=bool)
            rows2 = all_rows[go2]
            if rows2.size:
                run(2, rows2)
            lo2, up2 = t.for_level(2)
            quad_open = np.zeros((b, 4), dtype=bool)
            for r in rows2:
                quad_open[r] = [decide(float(v), lo2, up2) != Decision.NOT_SPLIT for v in prob[r, 1:5]]
            rows3 = all_rows[quad_open.any(axis=1)]
            if rows3.size:
                run(3, rows3)
                cell_open = np.repeat(quad_open, 4, axis=1)
                prob[:, 5:] = np.where(cell_open, prob[:, 5:], 0)
                valid[:, 5:] = cell_open
            if with_features:
                f1[1] = self._hidden1(2, a, nn.fc_forward_rows)
                f1[2] = self._hidden1(3, a, nn.fc_forward_rows)
        if with_features:
            return prob, valid, CnnFeatures(f1)
        return prob, valid

    def features(self, ctus, batch=256) -> list:
        """First hidden-layer outputs per level (inference mode)."""
        ctus = np.asarray(ctus)
        outs = [[], [], []]
        for s in range(0, len(ctus), batch):
            a, _ = self._trunk(ctus[s:s + batch])
            for l in (1, 2, 3):
                outs[l - 1].append(self._hidden1(l, a, nn.fc_forward_rows))
        return [np.concatenate(o, axis=0) if o else np.zeros((0, h), self.dtype)
                for o, h in zip(outs, HIDDEN1)]


def forward(ctu, qp, model: EthCnn, early_term=False, thresholds=None):
    """Single-CTU convenience wrapper returning ``(HcpmProb, CnnFeatures)``."""
    prob, valid, feats = model.predict(np.asarray(ctu)[None], [qp], early_term, thresholds,
                                       with_features=True)
    return HcpmProb(prob[0], valid[0]), CnnFeatures([f[0] for f in feats.f1])


def predict_batched(model: EthCnn, ctus, qps, early_term=False, thresholds=None, batch=256):
    qps = np.asarray(qps)
    probs, valids = [], []
    for s in range(0, len(ctus), batch):
        p, v = model.predict(ctus[s:s + batch], qps[s:s + batch], early_term, thresholds)
        probs.append(p)
        valids.append(v)
    if not probs:
        return np.zeros((0, N_CELLS), np.float32), np.zeros((0, N_CELLS), bool)
    return np.concatenate(probs), np.concatenate(valids)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.99
    decay_interval: int = 2000
    seed: int = 0


def batch_indices(n, batch, seed):
    """Endless stream of index batches; each epoch is a fresh permutation drawn
    from a generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch]
        buf = buf[batch:]


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)


def train(model: EthCnn, blocks, qps, labels, cfg: TrainConfig = TrainConfig(),
          progress=None) -> TrainResult:
    """Minimise the batch-mean masked cross-entropy with momentum SGD."""
    n = len(blocks)
    if n == 0:
        raise ValueError("empty training database")
    blocks = np.asarray(blocks)
    qps = np.asarray(qps)
    labels = np.asarray(labels)
    state = nn.SgdState(cfg.lr, cfg.momentum, cfg.decay_factor, cfg.decay_interval)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    stream = batch_indices(n, min(cfg.batch, n), [cfg.seed, 0])
    losses = []
    for it in range(cfg.iters):
        idx = next(stream)
        loss, grads = model.loss_and_grads(blocks[idx], qps[idx], labels[idx], drop_rng)
        nn.sgd_step(model.params, grads, state)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return TrainResult(model, losses)


# -- accounting ----------------------------------------------------------------------

@dataclass(frozen=True)
class FlopRow:
    name: str
    size: str
    params: int
    adds: int
    mults: int
    multiplicity: int = 1


@dataclass
class FlopReport:
    rows: list

    @property
    def total_params(self) -> int:
        return sum(r.params * r.multiplicity for r in self.rows)

    @property
    def total_adds(self) -> int:
        return sum(r.adds * r.multiplicity for r in self.rows)

    @property
    def total_mults(self) -> int:
        return sum(r.mults * r.multiplicity for r in self.rows)

    def row(self, name) -> FlopRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class CnnArch:
    hidden1: tuple = HIDDEN1
    hidden2: tuple = HIDDEN2
    conv_filters: tuple = (16, 24, 32)
    bias: bool = False


def conv_row(name, in_edge, k, cin, cout, bias=False):
    out_elems = (in_edge // k) ** 2 * cout
    params = k * k * cin * cout + (cout if bias else 0)
    # cross-channel accumulation adds are not counted (matches the reference table)
    adds = out_elems * (k * k - 1) * cin + (out_elems if bias else 0)
    return FlopRow(name, f"{in_edge}x{in_edge}", params, adds, out_elems * k * k * cin)


def fc_row(name, n, m, bias=False):
    return FlopRow(name, str(n), n * m + (m if bias else 0), (n - 1) * m + (m if bias else 0), n * m)


def flop_report(arch: CnnArch = CnnArch()) -> FlopReport:
    rows = []
    f = arch.conv_filters
    chans = ((1, f[0], 4), (f[0], f[1], 2), (f[1], f[2], 2))
    concat = 0
    for i, (cin, cout, k) in enumerate(chans, start=1):
        for l, edge in enumerate(BRANCH_INPUT, start=1):
            e = edge
            for cin_, _, k_ in chans[: i - 1]:
                e //= k_
            rows.append(conv_row(f"C{i}-{l}", e, k, cin, cout, arch.bias))
            if i >= 2:
                concat += (e // k) ** 2 * cout
    for l, h in enumerate(arch.hidden1, start=1):
        rows.append(fc_row(f"f1-{l}", concat, h, arch.bias))
    for l, (h1, h2) in enumerate(zip(arch.hidden1, arch.hidden2), start=1):
        rows.append(fc_row(f"f2-{l}", h1 + 1, h2, arch.bias))
    for l, (h2, out) in enumerate(zip(arch.hidden2, OUTPUTS), start=1):
        rows.append(fc_row(f"y{l}", h2 + 1, out, arch.bias))
    return FlopReport(rows)


def head_flops(report: FlopReport, level: int) -> int:
    return sum(r.adds + r.mults for r in report.rows
               if r.name in (f"f1-{level}", f"f2-{level}", f"y{level}"))


def early_term_skipped(prob, valid, report: FlopReport | None = None) -> np.ndarray:
    """Fraction of the per-CTU FLOPs skipped, given early-terminated outputs."""
    report = report or flop_report()
    total = report.total_adds + report.total_mults
    l2, l3 = head_flops(report, 2), head_flops(report, 3)
    skip2 = ~valid[:, 1]
    skip3 = ~valid[:, 5:].any(axis=1)
    return (np.where(skip2, l2, 0) + np.where(skip3, l3, 0)) / total


def measure_early_term_savings(model: EthCnn, blocks, qps, thresholds=None) -> dict:
    """Mean fraction of FLOPs skipped by early termination, per QP."""
    qps = np.asarray(qps)
    prob, valid = predict_batched(model, np.asarray(blocks), qps, True, thresholds)
    frac = early_term_skipped(prob, valid)
    return {int(q): float(frac[qps == q].mean()) for q in np.unique(qps)}
