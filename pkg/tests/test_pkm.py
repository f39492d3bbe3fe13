import hashlib
import math

import numpy as np
import pytest

from pkmlab import numerics as nm
from pkmlab import pkm
from conftest import max_grad_rel_err

# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def exhaustive_oracle(q, keys1, keys2, k):
    """Score every flat pair from materialized full-width keys, then sort by
    (score desc, flat index asc). Independent of the product-search path."""
    c = keys1.shape[0]
    half = keys1.shape[1]
    full = np.zeros((c * c, 2 * half), dtype=keys1.dtype)
    for i in range(c):
        for j in range(c):
            full[i * c + j, :half] = keys1[i]
            full[i * c + j, half:] = keys2[j]
    scores = full @ q
    order = sorted(range(c * c), key=lambda f: (-scores[f], f))[:k]
    return np.asarray(order), scores[np.asarray(order)]


def sort_oracle(scores, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    return np.asarray(order), scores[np.asarray(order)]


# ---------------------------------------------------------------------------
# split / search
# ---------------------------------------------------------------------------


class TestSplitQuery:
    def test_definition(self):
        q1, q2 = pkm.split_query(np.array([1.0, 2.0, 3.0, 4.0]))
        assert np.array_equal(q1, [1.0, 2.0]) and np.array_equal(q2, [3.0, 4.0])

    def test_zero_vector(self):
        q1, q2 = pkm.split_query(np.zeros(6))
        assert not q1.any() and not q2.any()

    def test_round_trip(self):
        q = np.random.default_rng(0).normal(size=10)
        q1, q2 = pkm.split_query(q)
        assert np.array_equal(np.concatenate([q1, q2]), q)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            pkm.split_query(np.zeros(5))


class TestSubkeyTopk:
    def test_basis_selector(self):
        codebook = np.eye(2)
        idx, scores = pkm.subkey_topk(np.array([0.0, 5.0]), codebook, 1)
        assert idx[0] == 1 and scores[0] == 5.0

    def test_tie_breaks_to_lower_index(self):
        codebook = np.ones((4, 3))
        idx, _ = pkm.subkey_topk(np.array([1.0, 1.0, 1.0]), codebook, 2)
        assert list(idx) == [0, 1]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(1)
        codebook = rng.normal(size=(16, 6))
        for _ in range(50):
            q = rng.normal(size=6)
            idx, scores = pkm.subkey_topk(q, codebook, 4)
            want_idx, want_scores = sort_oracle(codebook @ q, 4)
            assert np.array_equal(idx, want_idx)
            assert np.array_equal(scores, want_scores)

    def test_k_larger_than_codebook_rejected(self):
        with pytest.raises(ValueError):
            pkm.subkey_topk(np.zeros(2), np.zeros((3, 2)), 4)


class TestProductTopk:
    def test_hand_worked_two_by_two(self):
        keys1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        keys2 = np.array([[1.0, 0.0], [0.0, 1.0]])
        q1 = np.array([2.0, 0.0])
        q2 = np.array([0.0, 3.0])
        # Pair scores: (0,0)=2, (0,1)=5, (1,0)=0, (1,1)=3.
        idx, scores = pkm.product_topk(q1, q2, keys1, keys2, 1)
        assert idx[0] == 1 and scores[0] == 5.0
        idx4, scores4 = pkm.product_topk(q1, q2, keys1, keys2, 4)
        assert list(idx4) == [1, 3, 0, 2]
        assert list(scores4) == [5.0, 3.0, 2.0, 0.0]

    def test_k_equals_slot_count_returns_everything_sorted(self):
        rng = np.random.default_rng(2)
        keys1 = rng.normal(size=(2, 3))
        keys2 = rng.normal(size=(2, 3))
        q1, q2 = rng.normal(size=3), rng.normal(size=3)
        idx, scores = pkm.product_topk(q1, q2, keys1, keys2, 4)
        q = np.concatenate([q1, q2])
        want_idx, want_scores = exhaustive_oracle(q, keys1, keys2, 4)
        assert np.array_equal(idx, want_idx)
        assert np.abs(scores - want_scores).max() < 1e-12

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        keys1 = rng.normal(size=(32, 8))
        keys2 = rng.normal(size=(32, 8))
        for _ in range(100):
            q = rng.normal(size=16)
            q1, q2 = pkm.split_query(q)
            idx, scores = pkm.product_topk(q1, q2, keys1, keys2, 8)
            want_idx, want_scores = exhaustive_oracle(q, keys1, keys2, 8)
            assert np.array_equal(idx, want_idx)
            assert np.abs(scores - want_scores).max() < 1e-10

    def test_all_tied_scores_use_flat_index_order(self):
        keys1 = np.ones((3, 2))
        keys2 = np.ones((3, 2))
        q1 = np.array([0.5, 0.5])
        q2 = np.array([0.25, 0.25])
        idx, scores = pkm.product_topk(q1, q2, keys1, keys2, 4)
        assert list(idx) == [0, 1, 2, 3]
        assert np.allclose(scores, scores[0])

    def test_candidates_reuse_cached_sub_scores(self):
        # The recombination step must form candidate scores as sums of the two
        # sub-search outputs, never rescoring codebooks: every returned score
        # equals s1[i] + s2[j] for sub-results (i, s1), (j, s2).
        rng = np.random.default_rng(4)
        keys1 = rng.normal(size=(8, 4))
        keys2 = rng.normal(size=(8, 4))
        q1, q2 = rng.normal(size=4), rng.normal(size=4)
        k = 3
        i1, s1 = pkm.subkey_topk(q1, keys1, k)
        i2, s2 = pkm.subkey_topk(q2, keys2, k)
        sums = {
            (int(a) * 8 + int(b)): float(sa + sb)
            for a, sa in zip(i1, s1)
            for b, sb in zip(i2, s2)
        }
        idx, scores = pkm.product_topk(q1, q2, keys1, keys2, k)
        for flat, score in zip(idx, scores):
            assert math.isclose(sums[int(flat)], float(score), rel_tol=1e-12)


class TestExhaustiveSearch:
    def test_agrees_with_product_search(self):
        rng = np.random.default_rng(5)
        keys1 = rng.normal(size=(16, 4)).astype(np.float64)
        keys2 = rng.normal(size=(16, 4)).astype(np.float64)
        searcher = pkm.ExhaustiveSearch(keys1, keys2)
        q = rng.normal(size=(20, 8))
        idx, scores = searcher.topk_batch(q, 5)
        for row in range(20):
            q1, q2 = pkm.split_query(q[row])
            want_idx, want_scores = pkm.product_topk(q1, q2, keys1, keys2, 5)
            assert np.array_equal(idx[row], want_idx)
            assert np.abs(scores[row] - want_scores).max() < 1e-9


# ---------------------------------------------------------------------------
# Layer forward
# ---------------------------------------------------------------------------


def small_memory(c=4, heads=2, k=2, key_dim=8, d=16, value_init="gaussian",
                 dtype=np.float32, seed=0):
    cfg = pkm.MemoryConfig(codebook_size=c, heads=heads, top_k=k, key_dim=key_dim,
                           value_dim=d, value_init=value_init)
    return pkm.ProductKeyMemory(cfg, d, nm.make_rng(seed, 99), dtype=dtype)


class TestMemoryForward:
    def test_k1_output_is_the_selected_value_row(self):
        mem = small_memory(k=1, heads=1)
        x = nm.make_rng(1, 0).normal(size=(1, 3, 16)).astype(np.float32)
        y, access, _ = pkm.memory_forward(x, mem, train_mode=False)
        for pos in range(3):
            row = access.indices[pos, 0, 0]
            assert access.weights[pos, 0, 0] == 1.0
            assert np.abs(y[0, pos] - mem.values[row]).max() < 1e-6

    def test_zero_values_give_zero_output(self):
        mem = small_memory(value_init="zeros")
        x = nm.make_rng(2, 0).normal(size=(2, 5, 16)).astype(np.float32)
        y, _, _ = pkm.memory_forward(x, mem, train_mode=False)
        assert np.abs(y).max() == 0.0

    def test_weights_sum_to_one_per_head(self):
        mem = small_memory(c=8, heads=3, k=4)
        x = nm.make_rng(3, 0).normal(size=(2, 7, 16)).astype(np.float32)
        _, access, _ = pkm.memory_forward(x, mem, train_mode=True)
        sums = access.weights.sum(axis=2)
        assert np.abs(sums - 1.0).max() < 1e-5

    def test_indices_unique_within_head(self):
        mem = small_memory(c=8, heads=2, k=4)
        x = nm.make_rng(4, 0).normal(size=(1, 9, 16)).astype(np.float32)
        _, access, _ = pkm.memory_forward(x, mem, train_mode=False)
        for pos in range(9):
            for head in range(2):
                row = access.indices[pos, head]
                assert len(set(row.tolist())) == len(row)

    def test_matches_composed_float64_oracle(self):
        mem = small_memory(c=4, heads=2, k=2, key_dim=8, d=16, dtype=np.float64)
        x = nm.make_rng(5, 0).normal(size=(2, 3, 16))
        y, _, _ = pkm.memory_forward(x, mem, train_mode=False)

        cfg = mem.cfg
        half = cfg.key_dim // 2
        want = np.zeros((2, 3, 16))
        for b in range(2):
            for t in range(3):
                for h in range(cfg.heads):
                    q = x[b, t] @ mem.query_w[h] + mem.query_b[h]
                    # Eval-mode batch norm on fresh running stats (mean 0, var 1).
                    q = mem.bn_gain * q / math.sqrt(1.0 + pkm.BN_EPS) + mem.bn_bias
                    scores = {}
                    for i in range(cfg.codebook_size):
                        for j in range(cfg.codebook_size):
                            scores[i * cfg.codebook_size + j] = float(
                                q[:half] @ mem.sub_keys1[h, i] + q[half:] @ mem.sub_keys2[h, j]
                            )
                    top = sorted(scores, key=lambda f: (-scores[f], f))[: cfg.top_k]
                    sel = np.array([scores[f] for f in top])
                    w = np.exp(sel - sel.max())
                    w /= w.sum()
                    for weight, flat in zip(w, top):
                        want[b, t] += weight * mem.values[flat]
        assert np.abs(y - want).max() < 1e-5

    def test_eval_mode_usable_with_fresh_running_stats(self):
        mem = small_memory()
        x = nm.make_rng(6, 0).normal(size=(1, 2, 16)).astype(np.float32)
        y, _, _ = pkm.memory_forward(x, mem, train_mode=False)
        assert np.all(np.isfinite(y))


# ---------------------------------------------------------------------------
# Layer backward
# ---------------------------------------------------------------------------


class TestMemoryBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        mem = small_memory()
        x = nm.make_rng(7, 0).normal(size=(1, 4, 16)).astype(np.float32)
        _, _, cache = pkm.memory_forward(x, mem, train_mode=True)
        dx, grads, rows, row_grads = pkm.memory_backward(
            np.zeros((1, 4, 16), dtype=np.float32), mem, cache
        )
        assert np.abs(dx).max() == 0.0
        assert all(np.abs(g).max() == 0.0 for g in grads.values())
        assert np.abs(row_grads).max() == 0.0

    def test_k1_value_gradient_is_upstream_and_scores_get_nothing(self):
        mem = small_memory(k=1, heads=1)
        x = nm.make_rng(8, 0).normal(size=(1, 1, 16)).astype(np.float32)
        _, access, cache = pkm.memory_forward(x, mem, train_mode=True)
        upstream = nm.make_rng(9, 0).normal(size=(1, 1, 16)).astype(np.float32)
        dx, grads, rows, row_grads = pkm.memory_backward(upstream, mem, cache)
        assert rows.tolist() == [int(access.indices[0, 0, 0])]
        assert np.abs(row_grads[0] - upstream[0, 0]).max() < 1e-7
        # Softmax over a single score is constant, so nothing flows upstream
        # of the scores: keys, queries, and the input all get zero gradient.
        assert np.abs(grads["sub_keys1"]).max() == 0.0
        assert np.abs(grads["query_w"]).max() == 0.0
        assert np.abs(dx).max() == 0.0

    def test_gradient_support_equals_selection(self):
        mem = small_memory(c=8, heads=2, k=3)
        x = nm.make_rng(10, 0).normal(size=(2, 6, 16)).astype(np.float32)
        _, access, cache = pkm.memory_forward(x, mem, train_mode=True)
        upstream = nm.make_rng(11, 0).normal(size=(2, 6, 16)).astype(np.float32)
        _, _, rows, _ = pkm.memory_backward(upstream, mem, cache)
        assert set(rows.tolist()) == set(np.unique(access.indices).tolist())

    def test_missing_cache_rejected(self):
        mem = small_memory()
        with pytest.raises(ValueError):
            pkm.memory_backward(np.zeros((1, 1, 16)), mem, None)

    def test_full_layer_gradients_match_finite_differences(self):
        mem = small_memory(c=4, heads=1, k=2, key_dim=4, d=8, dtype=np.float64, seed=3)
        rng = nm.make_rng(12, 0)
        x = rng.normal(size=(1, 3, 8))
        upstream = rng.normal(size=(1, 3, 8))

        def loss():
            y, _, _ = pkm.memory_forward(x, mem, train_mode=True)
            return float((y * upstream).sum())

        _, _, cache = pkm.memory_forward(x, mem, train_mode=True)
        dx, grads, rows, row_grads = pkm.memory_backward(upstream, mem, cache)

        assert max_grad_rel_err(dx, loss, x) < 1e-3
        for name in ("query_w", "query_b", "sub_keys1", "sub_keys2", "bn_gain", "bn_bias"):
            analytic = grads[name]
            target = getattr(mem, name)
            assert max_grad_rel_err(analytic, loss, target) < 1e-3, name
        dense_vgrad = np.zeros_like(mem.values)
        dense_vgrad[rows] = row_grads
        sample_rng = np.random.default_rng(0)
        assert max_grad_rel_err(dense_vgrad, loss, mem.values, sample=64,
                                rng=sample_rng) < 1e-3


# ---------------------------------------------------------------------------
# Sparse updates
# ---------------------------------------------------------------------------


def table_hash(arr: np.ndarray, rows=None) -> str:
    view = arr if rows is None else arr[rows]
    return hashlib.sha256(np.ascontiguousarray(view).tobytes()).hexdigest()


class TestSparseValueUpdate:
    def test_empty_touched_set_is_noop(self):
        values = nm.make_rng(13, 0).normal(size=(10, 4)).astype(np.float32)
        before = values.copy()
        state = nm.AdamState.for_rows(values, lr=1e-3)
        pkm.sparse_value_update(values, np.array([], dtype=np.int64),
                               np.zeros((0, 4), dtype=np.float32), state, 1e-3)
        assert np.array_equal(values, before)

    def test_single_row_matches_dense_adam(self):
        rng = nm.make_rng(14, 0)
        values = rng.normal(size=(10, 4)).astype(np.float64)
        grad = rng.normal(size=4)
        row = values[3].copy()
        dense_state = nm.AdamState.for_param(row, lr=5e-3)
        for _ in range(3):
            nm.adam_step(row, grad, dense_state)

        sparse_state = nm.AdamState.for_rows(values, lr=5e-3)
        for _ in range(3):
            pkm.sparse_value_update(values, np.array([3]), grad[None, :], sparse_state, 5e-3)
        assert np.abs(values[3] - row).max() < 1e-12

    def test_untouched_region_bit_identical(self):
        rng = nm.make_rng(15, 0)
        values = rng.normal(size=(32, 8)).astype(np.float32)
        state = nm.AdamState.for_rows(values, lr=1e-3)
        touched = np.array([4, 9, 20])
        untouched = np.setdiff1d(np.arange(32), touched)
        before = table_hash(values, untouched)
        before_m = table_hash(state.m, untouched)
        pkm.sparse_value_update(values, touched,
                               rng.normal(size=(3, 8)).astype(np.float32), state, 1e-3)
        assert table_hash(values, untouched) == before
        assert table_hash(state.m, untouched) == before_m
        assert all(state.step[untouched] == 0) and all(state.step[touched] == 1)

    def test_out_of_range_row_rejected(self):
        values = np.zeros((4, 2), dtype=np.float32)
        state = nm.AdamState.for_rows(values, lr=1e-3)
        with pytest.raises(IndexError):
            pkm.sparse_value_update(values, np.array([4]), np.zeros((1, 2)), state, 1e-3)

    def test_sgd_fallback_applies_plain_update(self):
        values = np.ones((4, 2), dtype=np.float32)
        grads = np.full((1, 2), 2.0, dtype=np.float32)
        pkm.sparse_value_update_sgd(values, np.array([1]), grads, 0.5)
        assert np.allclose(values[1], 0.0)
        assert np.allclose(values[0], 1.0)


class TestAccessAggregation:
    def test_duplicate_slots_across_heads_merge(self):
        access = pkm.MemoryAccess(
            indices=np.array([[[2, 3], [2, 5]]], dtype=np.int64),
            weights=np.array([[[0.25, 0.75], [0.6, 0.4]]]),
            num_slots=9,
        )
        pos, slots, weights = access.aggregated_pairs()
        assert pos.tolist() == [0, 0, 0]
        assert slots.tolist() == [2, 3, 5]
        assert np.allclose(weights, [0.85, 0.75, 0.4])
