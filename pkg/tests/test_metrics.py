import csv
import json
import math

import numpy as np
import pytest

from pkmlab import metrics as mx
from pkmlab.pkm import MemoryAccess


def access_of(indices, weights, num_slots=16):
    return MemoryAccess(
        indices=np.asarray(indices, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
        num_slots=num_slots,
    )


def random_access(rng, n=20, heads=2, k=3, num_slots=16):
    idx = np.stack(
        [
            np.stack([rng.choice(num_slots, size=k, replace=False) for _ in range(heads)])
            for _ in range(n)
        ]
    )
    raw = rng.random((n, heads, k))
    weights = raw / raw.sum(axis=2, keepdims=True)
    return access_of(idx, weights, num_slots)


class TestRecordAccess:
    def test_singleton(self):
        log = mx.AccessLog(16)
        log.record(access_of([[[7]]], [[[1.0]]]))
        assert log.u_raw[7] == 1 and log.t_raw[7] == 1
        assert log.w_raw[7] == 1.0
        assert log.u_raw.sum() == 1 and log.t_raw.sum() == 1

    def test_merge_equals_concatenated_stream(self):
        rng = np.random.default_rng(0)
        a1, a2 = random_access(rng), random_access(rng)
        both = mx.AccessLog(16)
        both.record(a1)
        both.record(a2)
        merged = mx.AccessLog(16)
        other = mx.AccessLog(16)
        merged.record(a1)
        other.record(a2)
        merged.merge(other)
        assert np.array_equal(both.u_raw, merged.u_raw)
        assert np.array_equal(both.t_raw, merged.t_raw)
        assert np.allclose(both.w_raw, merged.w_raw)
        assert both.queries == merged.queries

    def test_against_per_event_rescan_oracle(self):
        rng = np.random.default_rng(1)
        log = mx.AccessLog(16)
        u = np.zeros(16, dtype=np.int64)
        t = np.zeros(16, dtype=np.int64)
        w = np.zeros(16)
        for _ in range(50):
            access = random_access(rng, n=4)
            log.record(access)
            for pos in range(4):
                slot_w = {}
                for h in range(access.indices.shape[1]):
                    for j in range(access.indices.shape[2]):
                        s = int(access.indices[pos, h, j])
                        slot_w[s] = slot_w.get(s, 0.0) + float(access.weights[pos, h, j])
                for s, weight in slot_w.items():
                    if weight > 0:
                        u[s] += 1
                    w[s] += weight
                best = min(s for s, weight in slot_w.items()
                           if weight == max(slot_w.values()))
                t[best] += 1
        assert np.array_equal(log.u_raw, u)
        assert np.array_equal(log.t_raw, t)
        assert np.allclose(log.w_raw, w)

    def test_argmax_tie_goes_to_lower_slot(self):
        log = mx.AccessLog(8)
        log.record(access_of([[[5, 2]]], [[[0.5, 0.5]]], num_slots=8))
        assert log.t_raw[2] == 1 and log.t_raw[5] == 0

    def test_total_weight_equals_queries_times_heads(self):
        rng = np.random.default_rng(2)
        log = mx.AccessLog(16)
        for _ in range(5):
            log.record(random_access(rng, n=10, heads=3))
        assert abs(log.w_raw.sum() - log.queries * 3) < 1e-3

    def test_slot_count_mismatch_rejected(self):
        log = mx.AccessLog(8)
        with pytest.raises(ValueError):
            log.record(access_of([[[0]]], [[[1.0]]], num_slots=16))


class TestMemoryUsage:
    def test_direct_count(self):
        log = mx.AccessLog(4)
        log.u_raw = np.array([3, 0, 1, 0])
        mu, _ = mx.memory_usage(log)
        assert mu == 0.5

    def test_empty_log(self):
        assert mx.memory_usage(mx.AccessLog(16)) == (0.0, 0.0)

    def test_top1_never_exceeds_mu_fuzzed(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            log = mx.AccessLog(16)
            for _ in range(rng.integers(1, 6)):
                log.record(random_access(rng, n=int(rng.integers(1, 10))))
            mu, mu_top1 = mx.memory_usage(log)
            assert mu_top1 <= mu
            assert np.all(log.t_raw <= log.u_raw)

    def test_monotone_under_more_logging(self):
        rng = np.random.default_rng(4)
        log = mx.AccessLog(16)
        prev = (0.0, 0.0)
        for _ in range(10):
            log.record(random_access(rng, n=2))
            cur = mx.memory_usage(log)
            assert cur[0] >= prev[0] and cur[1] >= prev[1]
            prev = cur


class TestKlUniform:
    def test_uniform_counts_give_zero(self):
        log = mx.AccessLog(8)
        log.u_raw[:] = 5
        log.w_raw[:] = 2.5
        kl_u, kl_w = mx.kl_uniform(log)
        assert abs(kl_u) < 1e-12 and abs(kl_w) < 1e-12

    def test_one_hot_gives_log_slot_count(self):
        log = mx.AccessLog(4)
        log.u_raw[2] = 9
        log.w_raw[2] = 4.0
        kl_u, kl_w = mx.kl_uniform(log)
        assert abs(kl_u - math.log(4)) < 1e-12
        assert abs(kl_w - math.log(4)) < 1e-12

    def test_half_support_value(self):
        log = mx.AccessLog(4)
        log.u_raw[:2] = 10
        log.w_raw[:2] = 1.0
        kl_u, _ = mx.kl_uniform(log)
        assert abs(kl_u - (math.log(4) + math.log(0.5))) < 1e-12

    def test_bounds_fuzzed(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            log = mx.AccessLog(16)
            log.record(random_access(rng, n=int(rng.integers(1, 8))))
            kl_u, kl_w = mx.kl_uniform(log)
            assert 0.0 <= kl_u <= math.log(16) + 1e-12
            assert 0.0 <= kl_w <= math.log(16) + 1e-12

    def test_empty_log_rejected(self):
        with pytest.raises(ValueError):
            mx.kl_uniform(mx.AccessLog(4))


class TestStalenessHistogram:
    def test_single_saturated_snapshot(self):
        hist = mx.staleness_histogram([np.ones(8, dtype=np.int64)])
        assert hist.tolist() == [0, 8]

    def test_slot_bucketed_at_last_use(self):
        snaps = [np.zeros(4, dtype=np.int64) for _ in range(5)]
        snaps[1][2] = 3  # used in interval 2 (1-based), never again
        hist = mx.staleness_histogram(snaps)
        assert hist[2] == 1 and hist[0] == 3
        assert hist.sum() == 4

    def test_against_per_slot_scan_oracle(self):
        rng = np.random.default_rng(6)
        snaps = [rng.integers(0, 3, size=32).astype(np.int64) for _ in range(3)]
        hist = mx.staleness_histogram(snaps)
        want = np.zeros(4, dtype=np.int64)
        for slot in range(32):
            last = 0
            for i, snap in enumerate(snaps, 1):
                if snap[slot] > 0:
                    last = i
            want[last] += 1
        assert np.array_equal(hist, want)

    def test_buckets_partition_slots(self):
        rng = np.random.default_rng(7)
        snaps = [rng.integers(0, 2, size=64).astype(np.int64) for _ in range(4)]
        assert mx.staleness_histogram(snaps).sum() == 64

    def test_mismatched_slot_counts_rejected(self):
        with pytest.raises(ValueError):
            mx.staleness_histogram([np.zeros(4, dtype=np.int64), np.zeros(5, dtype=np.int64)])

    def test_no_snapshots_rejected(self):
        with pytest.raises(ValueError):
            mx.staleness_histogram([])


class TestClassDivergence:
    def test_identical_distributions(self):
        t = np.array([1.0, 2.0, 3.0])
        kl, iou = mx.class_divergence(t, t)
        assert iou == 1.0 and kl < 1e-9

    def test_disjoint_supports(self):
        kl, iou = mx.class_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert iou == 0.0 and kl > 1.0

    def test_hand_worked_third(self):
        _, iou = mx.class_divergence(np.array([2.0, 0.0]), np.array([1.0, 1.0]))
        assert abs(iou - 1.0 / 3.0) < 1e-12

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            mx.class_divergence(np.zeros(4), np.ones(4))

    def test_iou_range_fuzzed(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.random(16)
            b = rng.random(16)
            kl, iou = mx.class_divergence(a, b)
            assert 0.0 <= iou <= 1.0 and kl >= 0.0


class TestSerialization:
    def test_utilization_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        logs = {2: mx.AccessLog(16), 4: mx.AccessLog(16)}
        for log in logs.values():
            log.record(random_access(rng))
        rows = mx.utilization_report(logs)
        assert [r["layer"] for r in rows] == [2, 4]
        for row in rows:
            assert set(row) == set(mx.UTILIZATION_FIELDS)

        csv_path = tmp_path / "utilization.csv"
        json_path = tmp_path / "utilization.json"
        mx.write_utilization_csv(csv_path, rows)
        mx.write_utilization_json(json_path, rows)

        with open(csv_path, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert len(parsed) == 2
        assert float(parsed[0]["MU"]) == rows[0]["MU"]
        loaded = json.loads(json_path.read_text())
        assert loaded == rows

    def test_staleness_csv_schema(self, tmp_path):
        path = tmp_path / "staleness.csv"
        mx.write_staleness_csv(path, np.array([3, 1, 4]))
        with open(path, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert [int(r["checkpoint_index"]) for r in parsed] == [0, 1, 2]
        assert [int(r["count"]) for r in parsed] == [3, 1, 4]
