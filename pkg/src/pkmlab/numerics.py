"""Dense array math and hand-differentiated network primitives.

All tensors are plain numpy arrays: float32 for training, float64 when a test
wants headroom for finite-difference checks. There is no autodiff graph; each
forward helper returns exactly the cache its backward twin needs.

Randomness is drawn from named sub-streams spawned off one root seed
(`make_rng`), so a (seed, config) pair fully determines every result within
one build. Streams are spawned, never shared, which keeps e.g. evaluation
masking from perturbing the training data order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

# Fixed tags for the spawned sub-streams.
STREAM_PARAMS = 0
STREAM_DATA = 1
STREAM_MASK = 2
STREAM_DROPOUT = 3
STREAM_EVAL = 4
STREAM_BENCH = 5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic splittable generator: same (seed, stream) -> same draws."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=stream))


def name_stream(name: str) -> int:
    """Stable integer tag for a parameter name, for per-name init streams."""
    return zlib.crc32(name.encode("utf-8"))


def ensure_finite(label: str, *arrays: np.ndarray) -> None:
    """Raise if any array carries NaN/Inf; finiteness is a hard invariant."""
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{label}: non-finite values encountered")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product (m, n) x (n, p) -> (m, p) with explicit shape checks."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (..., n_in), w (n_in, n_out), b (n_out,) -> (..., n_out)."""
    return x @ w + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db) for y = x @ w + b."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def segment_add(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """out[idx[i]] += vals[i] with duplicate indices, in place.

    Sort + add.reduceat: equivalent to np.add.at but vectorized (add.at
    falls back to a scalar inner loop and dominates profiles otherwise).
    """
    idx = idx.reshape(-1)
    vals = vals.reshape(idx.size, -1)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
    sums = np.add.reduceat(vals[order], starts, axis=0)
    out[sorted_idx[starts]] += sums.reshape((-1,) + out.shape[1:])


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift.

    Returns (y, cache). A zero-variance row normalizes to zeros, so the output
    there is just `bias`.
    """
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer norm needs at least 2 features, got {d}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gain * x_hat + bias, (x_hat, inv_std, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    """Returns (dx, dgain, dbias); mean/variance terms are differentiated through."""
    x_hat, inv_std, gain = cache
    d = x_hat.shape[-1]
    lead = tuple(range(x_hat.ndim - 1))
    dgain = (dy * x_hat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxh = dy * gain
    dx = (inv_std / d) * (
        d * dxh
        - dxh.sum(axis=-1, keepdims=True)
        - x_hat * (dxh * x_hat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# Softmax / cross entropy
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted stable softmax."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets, include):
    """Mean negative log-likelihood over the rows flagged in `include`.

    logits (n, V), targets (n,) ints in [0, V), include (n,) bool. Returns
    (loss, dlogits); gradient rows outside `include` are zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    include = np.asarray(include, dtype=bool)
    n, vocab = logits.shape
    if targets.shape != (n,) or include.shape != (n,):
        raise ValueError("targets/include must have one entry per logit row")
    n_eff = int(include.sum())
    if n_eff == 0:
        raise ValueError("empty effective target set")
    if targets[include].size and (targets[include].min() < 0 or targets[include].max() >= vocab):
        raise ValueError("target id out of range")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.flatnonzero(include)
    loss = -float(log_probs[rows, targets[rows]].mean())

    dlogits = np.zeros_like(logits)
    dlogits[rows] = np.exp(log_probs[rows])
    dlogits[rows, targets[rows]] -= 1.0
    dlogits[rows] /= n_eff
    return loss, dlogits


# ---------------------------------------------------------------------------
# Activations / dropout
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_forward(x: np.ndarray):
    """tanh-form gaussian error linear unit; returns (y, cache).

    Written with explicit multiplies and in-place ops: np.power and fresh
    temporaries dominate the training step otherwise.
    """
    one = x.dtype.type(1.0)
    u = x * x
    u *= x.dtype.type(_GELU_A)
    u += one
    u *= x
    u *= x.dtype.type(_GELU_C)
    np.tanh(u, out=u)
    y = u + one
    y *= x
    y *= x.dtype.type(0.5)
    return y, (x, u)


def gelu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, t = cache
    dt = x.dtype.type
    du = x * x
    du *= dt(3.0 * _GELU_A)
    du += dt(1.0)
    du *= dt(_GELU_C)
    sech2 = t * t
    np.subtract(dt(1.0), sech2, out=sech2)
    du *= sech2
    du *= x
    du += t
    du += dt(1.0)
    du *= dt(0.5)
    du *= dy
    return du


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity (mask None) when not training or p == 0."""
    if not train or p <= 0.0:
        return x, None
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments for one parameter.

    `step` is a plain int for dense parameters. Row-sparse tables keep one
    step counter per row (`for_rows`) so a row's bias correction only advances
    when that row is touched.
    """

    m: np.ndarray
    v: np.ndarray
    step: int | np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float, **kw) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0, lr=lr, **kw)

    @classmethod
    def for_rows(cls, table: np.ndarray, lr: float, **kw) -> "AdamState":
        return cls(
            m=np.zeros_like(table),
            v=np.zeros_like(table),
            step=np.zeros(table.shape[0], dtype=np.int64),
            lr=lr,
            **kw,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update, applied to `param` in place."""
    if param.shape != grad.shape:
        raise ValueError(f"param/grad shape mismatch: {param.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    if not isinstance(state.step, (int, np.integer)):
        raise TypeError("dense adam_step needs a scalar step counter; see sparse_value_update")

    state.step = int(state.step) + 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param
