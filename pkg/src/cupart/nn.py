"""Small deterministic neural-network kernels built on numpy.

Everything here works on plain ``numpy.ndarray`` values. Feature maps are
channel-last (``batch x H x W x C``), fully connected inputs are
``batch x n``. There are no bias terms in the conv/FC layers. Parameters are
float32 by default; the kernels are dtype-preserving so gradient checks can
run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_edge: int

    @property
    def stride(self) -> int:
        return self.kernel_edge

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_edge
        return (k, k, self.in_channels, self.out_channels)

    @property
    def n_params(self) -> int:
        return self.kernel_edge ** 2 * self.in_channels * self.out_channels


@dataclass(frozen=True)
class FcSpec:
    in_dim: int
    out_dim: int

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.in_dim, self.out_dim)

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim


def truncated_normal(rng: np.random.Generator, shape, std=0.1, dtype=np.float32):
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


# -- convolution -------------------------------------------------------------

def _check_conv(x, w):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be B x H x W x C, got {x.shape}")
    k, k2, cin, _ = w.shape
    if k != k2:
        raise ShapeError("conv kernels must be square")
    _, h, wd, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if h % k or wd % k:
        raise ShapeError(f"spatial extent {h}x{wd} not divisible by kernel edge {k}")


def _patches(x, k):
    b, h, w, c = x.shape
    p = x.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(b * (h // k) * (w // k), k * k * c)


def conv_forward(x, w):
    """Non-overlapping convolution (stride == kernel edge), no padding.

    ``x`` is ``H x W x Cin`` or ``B x H x W x Cin``; ``w`` is ``k x k x Cin x Cout``.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv(x, w)
    k, _, cin, cout = w.shape
    b, h, wd, _ = x.shape
    y = _patches(x, k) @ w.reshape(k * k * cin, cout)
    y = y.reshape(b, h // k, wd // k, cout)
    return y[0] if single else y


def conv_backward(x, w, dy):
    """Gradients of :func:`conv_forward` w.r.t. its input and weights."""
    k, _, cin, cout = w.shape
    b, h, wd, _ = x.shape
    dy2 = dy.reshape(-1, cout)
    dw = (_patches(x, k).T @ dy2).reshape(w.shape)
    dp = dy2 @ w.reshape(k * k * cin, cout).T
    dx = dp.reshape(b, h // k, wd // k, k, k, cin).transpose(0, 1, 3, 2, 4, 5)
    return dx.reshape(x.shape), dw


# -- fully connected -----------------------------------------------------------

def fc_forward(x, w):
    """``output[j] = sum_i x[i] * w[i, j]``; works on a vector or a batch of rows."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input length {x.shape[-1]} != in_dim {w.shape[0]}")
    return x @ w


ROW_BLOCK = 16


def fc_forward_rows(x, w):
    """:func:`fc_forward` for a batch, with each row's result independent of
    which other rows share the batch.

    BLAS switches to different kernels (and summation orders) for very small
    row counts, so a row evaluated alone can differ in the last bit from the
    same row inside a large batch. Zero-padding the row count to a multiple of
    ``ROW_BLOCK`` keeps every call on the same kernel.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input length {x.shape[-1]} != in_dim {w.shape[0]}")
    n = len(x)
    pad = (-n) % ROW_BLOCK
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]), x.dtype)])
    return (x @ w)[:n]


def fc_backward(x, w, dy):
    return dy @ w.T, x.T @ dy


# -- activations -----------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout_train(x, rate, rng, training=True):
    """Inverted dropout. Returns ``(output, keep_mask_scaled)``.

    The second value is what the backward pass multiplies by; at inference
    (or ``rate == 0``) it is ``None`` and the input passes straight through.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * scale, scale


# -- loss --------------------------------------------------------------------------

def masked_cross_entropy(pred, truth, mask):
    """Summed binary cross-entropy over masked-in cells.

    Returns ``(loss, d_loss/d_pred)``; the gradient is exactly zero where
    ``mask == 0``. Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    if not (pred.shape == truth.shape == mask.shape):
        raise ShapeError("pred, truth and mask must have identical shapes")
    p = np.clip(pred.astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = truth.astype(np.float64)
    m = mask.astype(np.float64)
    ce = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    loss = float(np.sum(ce * m))
    grad = m * (-t / p + (1.0 - t) / (1.0 - p))
    return loss, grad.astype(pred.dtype)


def sigmoid_cross_entropy(logits, truth, mask):
    """Masked cross-entropy computed from logits.

    Returns ``(per-row loss, probabilities, d_loss/d_logits)``. The logit
    gradient is ``(p - y) * mask`` which stays informative when the sigmoid
    saturates.
    """
    p = sigmoid(logits)
    pc = np.clip(p.astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = truth.astype(np.float64)
    m = mask.astype(np.float64)
    ce = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)) * m
    grad = ((p - truth.astype(p.dtype)) * mask.astype(p.dtype)).astype(logits.dtype)
    return ce.sum(axis=-1), p, grad


# -- optimiser ---------------------------------------------------------------------

@dataclass
class SgdState:
    """Momentum SGD with a stepwise exponential learning-rate decay."""

    learning_rate: float
    momentum: float = 0.9
    decay_factor: float = 0.99
    decay_interval: int = 2000
    iteration: int = 0
    velocity: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.learning_rate * self.decay_factor ** (self.iteration // self.decay_interval)


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """In-place update ``v <- mu v - lr g; p <- p + v``. Returns ``params``."""
    lr = state.current_lr()
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = (p.dtype.type(state.momentum) * v - p.dtype.type(lr) * g).astype(p.dtype)
        state.velocity[name] = v
        p += v
    state.iteration += 1
    return params


# -- gradient checking -------------------------------------------------------------

def grad_check(loss_fn, params: dict, grads: dict, epsilon=1e-5, n_coords=200, seed=0):
    """Compare analytic gradients with central finite differences.

    ``loss_fn()`` re-evaluates the scalar loss using the current contents of
    ``params`` (which are perturbed in place and restored). ``n_coords``
    coordinates are drawn uniformly over all parameter entries. Returns the
    max relative error ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-5, 1e-2]")
    rng = np.random.default_rng(seed)
    names = sorted(grads)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(int(flat - offsets[k]), params[name].shape)
        p = params[name]
        orig = p[idx]
        p[idx] = orig + epsilon
        lp = loss_fn()
        p[idx] = orig - epsilon
        lm = loss_fn()
        p[idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss while probing {name}{idx}")
        numeric = (lp - lm) / (2 * epsilon)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
