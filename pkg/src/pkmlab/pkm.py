"""Product-key memory: exact top-k key-value lookup over a factored key space.

A slot address is a pair of sub-key ids (i, j) with flat index i * C + j, so
two C-row codebooks address C^2 value rows. A query is split in half, each
half is scored against its codebook (2C dot products), and the k best halves
per side are recombined into k^2 candidate sums that are re-ranked. The
search is exact: see `product_topk` for the argument. All heads read and
write one shared value table; the backward pass touches only the value rows
selected in the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, segment_add, softmax

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class MemoryConfig:
    """Shape hyper-parameters of one memory layer; slot count is C^2."""

    codebook_size: int = 32  # C, rows per sub-key codebook
    heads: int = 2
    top_k: int = 8  # keys selected per head
    key_dim: int = 32  # query/key width per head, must be even
    value_dim: int = 128  # must equal the hosting model width
    batch_norm: bool = True
    value_init: str = "gaussian"  # "gaussian" (sigma = value_dim**-0.5) or "zeros"

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if not 1 <= self.top_k <= self.codebook_size:
            raise ValueError(f"top_k must be in [1, {self.codebook_size}], got {self.top_k}")
        if self.key_dim < 2 or self.key_dim % 2:
            raise ValueError(f"key_dim must be even and >= 2, got {self.key_dim}")
        if self.value_init not in ("gaussian", "zeros"):
            raise ValueError(f"unknown value_init {self.value_init!r}")

    @property
    def num_slots(self) -> int:
        return self.codebook_size * self.codebook_size


class ProductKeyMemory:
    """Parameters and batch-norm state of one memory layer.

    Heads have independent query projections and sub-key codebooks, stacked
    along a leading head axis; the value table is shared. Query batch norm
    pools statistics over batch x positions x heads (one gain/bias/running
    pair of width key_dim), which widens key coverage during training; eval
    mode reads the running statistics (initialized to mean 0 / var 1, so a
    never-trained layer is still usable).
    """

    def __init__(self, cfg: MemoryConfig, model_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        if cfg.value_dim != model_dim:
            raise ValueError(
                f"value_dim {cfg.value_dim} must equal model width {model_dim}"
            )
        half = cfg.key_dim // 2
        scale = half**-0.5
        self.cfg = cfg
        self.model_dim = model_dim
        self.query_w = rng.normal(0.0, scale, (cfg.heads, model_dim, cfg.key_dim)).astype(dtype)
        self.query_b = np.zeros((cfg.heads, cfg.key_dim), dtype=dtype)
        self.sub_keys1 = rng.normal(0.0, scale, (cfg.heads, cfg.codebook_size, half)).astype(dtype)
        self.sub_keys2 = rng.normal(0.0, scale, (cfg.heads, cfg.codebook_size, half)).astype(dtype)
        self.bn_gain = np.ones(cfg.key_dim, dtype=dtype)
        self.bn_bias = np.zeros(cfg.key_dim, dtype=dtype)
        self.bn_mean = np.zeros(cfg.key_dim, dtype=dtype)
        self.bn_var = np.ones(cfg.key_dim, dtype=dtype)
        if cfg.value_init == "zeros":
            self.values = np.zeros((cfg.num_slots, cfg.value_dim), dtype=dtype)
        else:
            self.values = rng.normal(
                0.0, cfg.value_dim**-0.5, (cfg.num_slots, cfg.value_dim)
            ).astype(dtype)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays, keyed by local name."""
        return {
            "query_w": self.query_w,
            "query_b": self.query_b,
            "sub_keys1": self.sub_keys1,
            "sub_keys2": self.sub_keys2,
            "bn_gain": self.bn_gain,
            "bn_bias": self.bn_bias,
            "values": self.values,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        return {"bn_mean": self.bn_mean, "bn_var": self.bn_var}


@dataclass
class MemoryAccess:
    """Selection record of one forward pass.

    For each of the N query positions and H heads: the k selected flat slot
    ids (unique within a head) and their softmax weights (each (n, h) row
    sums to 1).
    """

    indices: np.ndarray  # (N, H, k) int64
    weights: np.ndarray  # (N, H, k) float
    num_slots: int

    def aggregated_pairs(self):
        """Per-position slot weights summed across heads, duplicates merged.

        Returns (positions, slots, weights), equal-length arrays sorted by
        (position, slot). The merged weight is the per-slot access weight of
        that position.
        """
        n, h, k = self.indices.shape
        if n == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty.copy(), np.zeros(0, dtype=np.float64)
        pos = np.repeat(np.arange(n, dtype=np.int64), h * k)
        key = pos * self.num_slots + self.indices.reshape(-1).astype(np.int64)
        uniq, inverse = np.unique(key, return_inverse=True)
        agg = np.bincount(inverse, weights=self.weights.reshape(-1).astype(np.float64))
        return uniq // self.num_slots, uniq % self.num_slots, agg


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def split_query(q: np.ndarray):
    """(..., d) -> two (..., d/2) halves; d must be even."""
    d = q.shape[-1]
    if d % 2:
        raise ValueError(f"query dim must be even, got {d}")
    half = d // 2
    return q[..., :half], q[..., half:]


def subkey_topk(sub_q: np.ndarray, codebook: np.ndarray, k: int):
    """k largest dot products against codebook rows.

    Returns (indices, scores) sorted score-descending; ties go to the lower
    row index (the stable sort keeps ascending-index order among equals).
    """
    c = codebook.shape[0]
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    scores = codebook @ sub_q
    order = np.argsort(-scores, kind="stable")[:k]
    return order, scores[order]


def product_topk(q1: np.ndarray, q2: np.ndarray, keys1: np.ndarray, keys2: np.ndarray, k: int):
    """Exact top-k over all C^2 pair scores s(i, j) = q1.keys1[i] + q2.keys2[j].

    Only the two codebooks are scored (2C dot products); the k^2 candidate
    sums reuse the cached half scores. Exactness, tie rule included: if a
    pair is in the global top-k, each of its halves must sit in that half's
    top-k, because any half that is beaten by k others (on score, or on index
    at equal score) yields k full pairs beating the full pair the same way.
    Global ties break to the lower flat index i * C + j.
    """
    idx, scores = _product_topk_batch(
        q1[None, :], q2[None, :], keys1, keys2, k
    )
    return idx[0], scores[0]


def _topk_rows(scores: np.ndarray, k: int):
    """Row-wise top-k of (N, C) scores, ties to the lower column index."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(scores, order, axis=1)


def _product_topk_batch(q1, q2, keys1, keys2, k):
    """Batched product search: q1/q2 (N, d/2) -> (indices, scores) each (N, k).

    k may run up to C^2; the per-side search width is min(k, C), which still
    covers every global top-k pair (at width C the candidate set is already
    exhaustive).
    """
    c = keys1.shape[0]
    if not 1 <= k <= c * c:
        raise ValueError(f"k must be in [1, {c * c}], got {k}")
    width = min(k, c)
    i1, s1 = _topk_rows(q1 @ keys1.T, width)
    i2, s2 = _topk_rows(q2 @ keys2.T, width)
    cand_scores = (s1[:, :, None] + s2[:, None, :]).reshape(len(q1), width * width)
    cand_flat = (i1[:, :, None].astype(np.int64) * c + i2[:, None, :]).reshape(
        len(q1), width * width
    )
    # Pre-order candidates by flat index so the stable score sort breaks ties low.
    by_flat = np.argsort(cand_flat, axis=1, kind="stable")
    cand_flat = np.take_along_axis(cand_flat, by_flat, axis=1)
    cand_scores = np.take_along_axis(cand_scores, by_flat, axis=1)
    order = np.argsort(-cand_scores, axis=1, kind="stable")[:, :k]
    return (
        np.take_along_axis(cand_flat, order, axis=1),
        np.take_along_axis(cand_scores, order, axis=1),
    )


class ExhaustiveSearch:
    """Flat-table baseline: scores every one of the C^2 full-width keys.

    The concatenated key matrix is materialized once up front; `topk_batch`
    is the per-query cost a non-factored memory would pay, used as the slow
    side of the search benchmark.
    """

    def __init__(self, keys1: np.ndarray, keys2: np.ndarray):
        c = keys1.shape[0]
        self.c = c
        self.flat_keys = np.concatenate(
            [np.repeat(keys1, c, axis=0), np.tile(keys2, (c, 1))], axis=1
        )

    def topk_batch(self, q: np.ndarray, k: int):
        """q (N, d_k) -> (indices, scores) each (N, k), same tie rule as product search."""
        scores = q @ self.flat_keys.T
        return _topk_rows(scores, k)


# ---------------------------------------------------------------------------
# Layer forward / backward
# ---------------------------------------------------------------------------


def _bn_forward(q: np.ndarray, mem: ProductKeyMemory, train_mode: bool):
    """Batch norm over (batch * positions * heads, key_dim) pooled rows."""
    if train_mode:
        mean = q.mean(axis=0)
        var = q.var(axis=0)
        # Running averages only feed eval mode; update them in place.
        mem.bn_mean += (BN_MOMENTUM * (mean - mem.bn_mean)).astype(mem.bn_mean.dtype)
        mem.bn_var += (BN_MOMENTUM * (var - mem.bn_var)).astype(mem.bn_var.dtype)
    else:
        mean, var = mem.bn_mean, mem.bn_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    q_hat = (q - mean) * inv_std
    return mem.bn_gain * q_hat + mem.bn_bias, (q_hat, inv_std, train_mode)


def _bn_backward(dy: np.ndarray, mem: ProductKeyMemory, cache):
    q_hat, inv_std, train_mode = cache
    dgain = (dy * q_hat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dqh = dy * mem.bn_gain
    if train_mode:
        m = q_hat.shape[0]
        dq = (inv_std / m) * (
            m * dqh - dqh.sum(axis=0) - q_hat * (dqh * q_hat).sum(axis=0)
        )
    else:
        dq = dqh * inv_std  # running stats are constants in eval mode
    return dq, dgain, dbias


def memory_forward(x: np.ndarray, mem: ProductKeyMemory, train_mode: bool):
    """Memory layer forward pass.

    x (B, T, d_model) -> (y (B, T, value_dim), access, cache). Per position
    and head: project to a query, batch-normalize, run the exact product
    search, softmax the k selected scores, and sum the k value rows by those
    weights; head outputs are summed.
    """
    cfg = mem.cfg
    b, t, d = x.shape
    if d != mem.model_dim:
        raise ValueError(f"expected width {mem.model_dim}, got {d}")
    n = b * t
    h, k = cfg.heads, cfg.top_k
    xf = x.reshape(n, d)

    w_flat = mem.query_w.transpose(1, 0, 2).reshape(d, h * cfg.key_dim)
    q = (xf @ w_flat).reshape(n, h, cfg.key_dim).transpose(1, 0, 2)  # (H, N, dk)
    q = q + mem.query_b[:, None, :]
    q_pool = np.ascontiguousarray(q.reshape(h * n, cfg.key_dim))
    if cfg.batch_norm:
        qn_pool, bn_cache = _bn_forward(q_pool, mem, train_mode)
    else:
        qn_pool, bn_cache = q_pool, None

    q1, q2 = split_query(qn_pool)  # each (H*N, half), rows ordered head-major
    flat_idx = np.empty((h, n, k), dtype=np.int64)
    sel_scores = np.empty((h, n, k), dtype=qn_pool.dtype)
    for head in range(h):
        rows = slice(head * n, (head + 1) * n)
        flat_idx[head], sel_scores[head] = _product_topk_batch(
            q1[rows], q2[rows], mem.sub_keys1[head], mem.sub_keys2[head], k
        )

    weights = softmax(sel_scores, axis=2)  # (H, N, k)
    picked = mem.values[flat_idx]  # (H, N, k, d_v)
    y = np.einsum("hnk,hnkd->nd", weights, picked, optimize=True)

    access = MemoryAccess(
        indices=flat_idx.transpose(1, 0, 2).copy(),
        weights=weights.transpose(1, 0, 2).astype(np.float64),
        num_slots=cfg.num_slots,
    )
    cache = {
        "xf": xf,
        "q1": q1,
        "q2": q2,
        "bn": bn_cache,
        "flat_idx": flat_idx,
        "weights": weights,
        "picked": picked,
        "shape": (b, t),
    }
    return y.reshape(b, t, cfg.value_dim), access, cache


def memory_backward(dy: np.ndarray, mem: ProductKeyMemory, cache):
    """Memory layer backward pass.

    dy (B, T, value_dim) -> (dx, grads, value_rows, value_row_grads). `grads`
    covers the dense parameters; the value table gradient is returned as the
    sorted unique touched rows plus one gradient row per touched slot, and is
    guaranteed to have no support outside the forward selection.
    """
    if cache is None:
        raise ValueError("memory_backward needs the cache from memory_forward")
    cfg = mem.cfg
    b, t = cache["shape"]
    n = b * t
    h, k, c = cfg.heads, cfg.top_k, cfg.codebook_size
    flat_idx = cache["flat_idx"]  # (H, N, k)
    weights = cache["weights"]  # (H, N, k)
    dyf = dy.reshape(n, cfg.value_dim)

    # Value rows: grad of row r is the weight-scaled sum of upstream rows
    # over every (position, head, slot=r) selection.
    rows, inverse = np.unique(flat_idx.reshape(-1), return_inverse=True)
    contrib = weights[:, :, :, None] * dyf[None, :, None, :]  # (H, N, k, d_v)
    value_row_grads = np.zeros((rows.size, cfg.value_dim), dtype=dyf.dtype)
    segment_add(value_row_grads, inverse, contrib.reshape(-1, cfg.value_dim))

    # Scores: softmax backward over each (head, position) row of k weights.
    picked = cache["picked"]  # (H, N, k, d_v)
    dw = np.einsum("nd,hnkd->hnk", dyf, picked, optimize=True)
    dscores = weights * (dw - (weights * dw).sum(axis=2, keepdims=True))

    sub1 = flat_idx // c  # (H, N, k)
    sub2 = flat_idx % c
    head_ix = np.repeat(np.arange(h), n * k).reshape(h, n, k)

    dq1 = np.einsum("hnk,hnkc->hnc", dscores, mem.sub_keys1[head_ix, sub1], optimize=True)
    dq2 = np.einsum("hnk,hnkc->hnc", dscores, mem.sub_keys2[head_ix, sub2], optimize=True)

    half = cfg.key_dim // 2
    dk1 = np.zeros((h * c, half), dtype=mem.sub_keys1.dtype)
    dk2 = np.zeros((h * c, half), dtype=mem.sub_keys2.dtype)
    q1 = cache["q1"].reshape(h, n, -1)
    q2 = cache["q2"].reshape(h, n, -1)
    head_offset = (head_ix * c).reshape(-1)
    segment_add(dk1, head_offset + sub1.reshape(-1),
                (dscores[:, :, :, None] * q1[:, :, None, :]).reshape(-1, half))
    segment_add(dk2, head_offset + sub2.reshape(-1),
                (dscores[:, :, :, None] * q2[:, :, None, :]).reshape(-1, half))
    dk1 = dk1.reshape(h, c, half)
    dk2 = dk2.reshape(h, c, half)

    dqn_pool = np.concatenate(
        [dq1.reshape(h * n, -1), dq2.reshape(h * n, -1)], axis=1
    )
    if cfg.batch_norm:
        dq_pool, dgain, dbias = _bn_backward(dqn_pool, mem, cache["bn"])
    else:
        dq_pool = dqn_pool
        dgain = np.zeros_like(mem.bn_gain)
        dbias = np.zeros_like(mem.bn_bias)

    dq = dq_pool.reshape(h, n, cfg.key_dim)
    xf = cache["xf"]
    dq_flat = dq.transpose(1, 0, 2).reshape(n, h * cfg.key_dim)
    w_flat = mem.query_w.transpose(1, 0, 2).reshape(mem.model_dim, h * cfg.key_dim)
    grads = {
        "query_w": (xf.T @ dq_flat).reshape(mem.model_dim, h, cfg.key_dim).transpose(1, 0, 2),
        "query_b": dq.sum(axis=1),
        "sub_keys1": dk1,
        "sub_keys2": dk2,
        "bn_gain": dgain,
        "bn_bias": dbias,
    }
    dx = (dq_flat @ w_flat.T).reshape(b, t, mem.model_dim)
    return dx, grads, rows, value_row_grads


# ---------------------------------------------------------------------------
# Sparse value updates
# ---------------------------------------------------------------------------


def sparse_value_update(values: np.ndarray, rows: np.ndarray, row_grads: np.ndarray,
                        state: AdamState, lr_mem: float) -> None:
    """Adam update restricted to `rows` of the value table, in place.

    Moments and the per-row step counter advance only for touched rows, so an
    untouched row (and its moments) is bit-identical before and after; one
    touched row behaves exactly like a dense Adam step on that row alone.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return
    if rows.min() < 0 or rows.max() >= values.shape[0]:
        raise IndexError("value row index out of range")
    if not isinstance(state.step, np.ndarray):
        raise TypeError("sparse_value_update needs per-row step counters (AdamState.for_rows)")
    if not np.all(np.isfinite(row_grads)):
        raise FloatingPointError("non-finite gradient passed to sparse_value_update")

    state.step[rows] += 1
    t = state.step[rows][:, None].astype(values.dtype)
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m[rows] + (1.0 - b1) * row_grads
    v = b2 * state.v[rows] + (1.0 - b2) * row_grads * row_grads
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    values[rows] -= (lr_mem * m_hat / (np.sqrt(v_hat) + state.eps)).astype(values.dtype)


def sparse_value_update_sgd(values: np.ndarray, rows: np.ndarray, row_grads: np.ndarray,
                            lr_mem: float) -> None:
    """Plain SGD fallback for the value table, same sparsity contract."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return
    if rows.min() < 0 or rows.max() >= values.shape[0]:
        raise IndexError("value row index out of range")
    values[rows] -= (lr_mem * row_grads).astype(values.dtype)
