import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import synthetic_store as _synthetic_store
from bknn.errors import DataFormatError
from bknn.knn import KnnConfig, Neighbor, knn, neighbors_to_distribution


def synthetic_store(tmp_path, keys, token_ids, doc_ids=None):
    return _synthetic_store(tmp_path / "synth.bknnds", keys, token_ids, doc_ids)


def brute_force(query, keys, ids, k):
    """Independent oracle: python-level distance loop plus full sort."""
    scored = []
    q = [float(x) for x in query]
    for rid, key in zip(ids, keys):
        scored.append((math.dist(q, [float(x) for x in key]), rid))
    scored.sort()
    return [rid for _, rid in scored[:k]]


class TestKnn:

    def test_single_record_slice(self, tmp_path):
        keys = np.array([[1.0, 0.0]], dtype=np.float32)
        store = synthetic_store(tmp_path, keys, [7])
        out = knn(np.array([0.0, 0.0], dtype=np.float32), store, [(0, 1)],
                  KnnConfig(k=5))
        assert len(out) == 1 and out[0].token_id == 7
        assert out[0].distance == pytest.approx(1.0)

    def test_self_match_first_with_distance_zero(self, tmp_path):
        rng = np.random.default_rng(3)
        keys = rng.normal(size=(50, 8)).astype(np.float32)
        store = synthetic_store(tmp_path, keys, list(range(50)))
        out = knn(keys[17], store, store.full_range(), KnnConfig(k=3))
        assert out[0].record_id == 17 and out[0].distance == 0.0

    def test_matches_brute_force_on_random_fixture(self, tmp_path):
        rng = np.random.default_rng(11)
        keys = rng.normal(size=(200, 16)).astype(np.float32)
        store = synthetic_store(tmp_path, keys, rng.integers(0, 9, 200))
        query = rng.normal(size=16).astype(np.float32)
        got = [n.record_id for n in knn(query, store, store.full_range(),
                                        KnnConfig(k=8))]
        assert got == brute_force(query, keys, range(200), 8)

    def test_fewer_than_k(self, tmp_path):
        keys = np.eye(3, 4, dtype=np.float32)
        store = synthetic_store(tmp_path, keys, [0, 1, 2])
        out = knn(np.zeros(4, dtype=np.float32), store, store.full_range(),
                  KnnConfig(k=128))
        assert len(out) == 3

    def test_tie_break_by_record_order(self, tmp_path):
        keys = np.array([[1, 0], [0, 1], [1, 0]], dtype=np.float32)
        store = synthetic_store(tmp_path, keys, [10, 11, 12])
        out = knn(np.array([1.0, 0.0]), store, store.full_range(), KnnConfig(k=3))
        assert [n.record_id for n in out] == [0, 2, 1]

    def test_dimension_mismatch(self, tmp_path):
        keys = np.zeros((2, 4), dtype=np.float32)
        store = synthetic_store(tmp_path, keys, [0, 1])
        with pytest.raises(DataFormatError, match="dim"):
            knn(np.zeros(5), store, store.full_range(), KnnConfig())

    def test_ranges_restrict_search(self, tmp_path):
        keys = np.array([[0, 0], [5, 5], [0.1, 0]], dtype=np.float32)
        store = synthetic_store(tmp_path, keys, [1, 2, 3], doc_ids=[0, 0, 1])
        out = knn(np.zeros(2), store, store.slice([1]), KnnConfig(k=2))
        assert [n.record_id for n in out] == [2]


def nb(token_id, distance):
    return Neighbor(record_id=0, token_id=token_id, doc_id=0, distance=distance)


class TestDistribution:

    def test_single_neighbor(self):
        probs = neighbors_to_distribution([nb(5, 3.0)], KnnConfig())
        assert probs == {5: 1.0}

    def test_two_neighbor_softmax(self):
        probs = neighbors_to_distribution([nb(1, 0.0), nb(2, 6.0)],
                                          KnnConfig(scale=6.0))
        assert probs[1] == pytest.approx(math.e / (math.e + 1.0), abs=1e-12)
        assert probs[1] == pytest.approx(0.7311, abs=1e-4)
        assert probs[2] == pytest.approx(0.2689, abs=1e-4)

    def test_occurrence_summation_equal_distances(self):
        probs = neighbors_to_distribution([nb(1, 2.0), nb(1, 2.0), nb(2, 2.0)],
                                          KnnConfig())
        assert probs[1] == pytest.approx(2 / 3, abs=1e-12)
        assert probs[2] == pytest.approx(1 / 3, abs=1e-12)

    def test_empty(self):
        assert neighbors_to_distribution([], KnnConfig()) == {}

    @given(st.lists(st.tuples(st.integers(0, 5),
                              st.floats(0, 50, allow_nan=False)), min_size=1,
                    max_size=20),
           st.floats(-5, 5))
    def test_shift_invariance(self, pairs, shift):
        config = KnnConfig(scale=3.0)
        base = neighbors_to_distribution([nb(t, d) for t, d in pairs], config)
        moved = neighbors_to_distribution(
            [nb(t, d + abs(shift)) for t, d in pairs], config)
        assert set(base) == set(moved)
        for tid in base:
            assert moved[tid] == pytest.approx(base[tid], abs=1e-9)

    def test_scale_limits(self):
        neighbors = [nb(1, 0.5), nb(2, 1.0), nb(2, 1.5), nb(3, 2.0)]
        flat = neighbors_to_distribution(neighbors, KnnConfig(scale=1e6))
        # occurrence frequencies among the neighbors
        assert flat[1] == pytest.approx(0.25, abs=1e-5)
        assert flat[2] == pytest.approx(0.50, abs=1e-5)
        sharp = neighbors_to_distribution(neighbors, KnnConfig(scale=1e-6))
        assert sharp[1] == pytest.approx(1.0, abs=1e-9)
        tied = neighbors_to_distribution([nb(1, 0.5), nb(2, 0.5), nb(3, 2.0)],
                                         KnnConfig(scale=1e-6))
        assert tied[1] == pytest.approx(0.5, abs=1e-9)
        assert tied[2] == pytest.approx(0.5, abs=1e-9)

    def test_duplicate_neighbor_increases_probability(self):
        one = neighbors_to_distribution([nb(1, 1.0), nb(2, 0.5)], KnnConfig())
        two = neighbors_to_distribution([nb(1, 1.0), nb(1, 1.0), nb(2, 0.5)],
                                        KnnConfig())
        assert two[1] > one[1]

    @given(st.lists(st.tuples(st.integers(0, 8),
                              st.floats(0, 30, allow_nan=False)), min_size=1,
                    max_size=30))
    def test_sums_to_one(self, pairs):
        probs = neighbors_to_distribution([nb(t, d) for t, d in pairs],
                                          KnnConfig(scale=2.0))
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-6)
        assert all(0.0 <= p <= 1.0 + 1e-12 for p in probs.values())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KnnConfig(k=0)
        with pytest.raises(ValueError):
            KnnConfig(scale=0.0)
