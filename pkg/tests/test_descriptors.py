import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import seeds
from vprcalib.descriptors import (
    DescriptorStore,
    distance,
    load_descriptors,
    read_binary,
    read_csv,
    write_binary,
    write_csv,
)
from vprcalib.errors import DimensionMismatch, DuplicateKeyframe, EmptyStore, SchemaViolation, UnknownKeyframe


def brute_force(vectors, q, k, window):
    rows = []
    for j, v in enumerate(vectors):
        if abs(j - q) > window:
            rows.append((math.sqrt(sum((a - b) ** 2 for a, b in zip(vectors[q], v))), j))
    rows.sort()
    return rows[:k]


def test_insert_and_size():
    s = DescriptorStore(4)
    s.insert(0, [1, 2, 3, 4])
    assert len(s) == 1
    s.insert(1, [0, 0, 0, 0])
    assert s.query(0, 5, window=0)[0].candidate_id == 1
    assert s.query(1, 5, window=0)[0].candidate_id == 0


def test_insert_errors():
    s = DescriptorStore(4)
    with pytest.raises(DimensionMismatch):
        s.insert(0, [1, 2, 3])
    s.insert(0, [1, 2, 3, 4])
    with pytest.raises(DuplicateKeyframe):
        s.insert(0, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        s.insert(1, [np.nan, 0, 0, 0])


def test_distance_examples(rng):
    v = rng.normal(size=8)
    assert distance(v, v) == 0.0
    assert distance([0, 0], [3, 4]) == 5.0
    with pytest.raises(DimensionMismatch):
        distance([0, 0], [0, 0, 0])
    for _ in range(100):
        a, b = rng.normal(size=(2, 16))
        naive = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        assert abs(distance(a, b) - naive) < 1e-12
        assert distance(a, b) == distance(b, a)


def test_window_excludes_neighbours(rng):
    s = DescriptorStore.from_arrays(range(31), rng.normal(size=(31, 4)))
    ids = [c.candidate_id for c in s.query(15, 100, window=10)]
    assert ids and not any(5 <= i <= 25 for i in ids)


def test_k_larger_than_eligible(rng):
    s = DescriptorStore.from_arrays(range(20), rng.normal(size=(20, 4)))
    out = s.query(0, 100, window=10)
    assert [c.candidate_id for c in out] == [c.candidate_id for c in sorted(out, key=lambda c: (c.distance, c.candidate_id))]
    assert len(out) == 9


def test_query_matches_brute_force_200(rng):
    V = rng.normal(size=(200, 8))
    s = DescriptorStore.from_arrays(range(200), V)
    for q in range(0, 200, 7):
        got = [(c.distance, c.candidate_id) for c in s.query(q, 25, window=10)]
        want = brute_force(V.tolist(), q, 25, 10)
        assert [j for _, j in got] == [j for _, j in want]
        np.testing.assert_allclose([d for d, _ in got], [d for d, _ in want], rtol=0, atol=1e-12)
        for c in s.query(q, 25, window=10):
            assert c.distance == distance(V[q], V[c.candidate_id])


def test_ties_broken_by_id():
    V = np.zeros((30, 3))
    s = DescriptorStore.from_arrays(range(30), V)
    assert [c.candidate_id for c in s.query(0, 5, window=10)] == [11, 12, 13, 14, 15]


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(0, 15), st.integers(1, 40))
def test_window_property(seed, window, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    s = DescriptorStore.from_arrays(range(n), rng.normal(size=(n, 3)))
    q = int(rng.integers(n))
    out = s.query(q, k, window)
    assert all(abs(c.candidate_id - q) > window for c in out)
    assert len(out) == min(k, sum(abs(j - q) > window for j in range(n)))


def test_unknown_keyframe(rng):
    s = DescriptorStore.from_arrays(range(3), rng.normal(size=(3, 2)))
    with pytest.raises(UnknownKeyframe):
        s.query(7, 1)


def test_similarity_matrix(rng):
    with pytest.raises(EmptyStore):
        DescriptorStore(3).similarity_matrix()
    one = DescriptorStore.from_arrays([0], [[1.0, 2.0]])
    np.testing.assert_array_equal(one.similarity_matrix(), [[0.0]])
    V = rng.normal(size=(25, 5))
    M = DescriptorStore.from_arrays(range(25), V).similarity_matrix()
    assert np.array_equal(M, M.T)
    assert np.all(np.diag(M) == 0)
    for i in range(25):
        for j in range(25):
            if i != j:
                assert abs(M[i, j] - distance(V[i], V[j])) < 1e-12


def test_normalize_option():
    s = DescriptorStore.from_arrays([0, 1], [[3.0, 4.0], [0.0, 2.0]], normalize=True)
    np.testing.assert_allclose(np.linalg.norm(s.vectors, axis=1), 1.0)
    raw = DescriptorStore.from_arrays([0], [[3.0, 4.0]])
    np.testing.assert_array_equal(raw.vector(0), [3.0, 4.0])


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_file_round_trips(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 30)), int(rng.integers(1, 10))
    ids = rng.permutation(1000)[:n]
    store = DescriptorStore.from_arrays(ids, rng.normal(size=(n, d)) * 10.0 ** rng.integers(-5, 5))
    tmp = tmp_path_factory.mktemp("desc")
    write_csv(store, tmp / "d.csv")
    write_binary(store, tmp / "d.vprd")
    for back in (read_csv(tmp / "d.csv"), read_binary(tmp / "d.vprd"), load_descriptors(tmp / "d.vprd")):
        np.testing.assert_array_equal(back.ids, store.ids)
        np.testing.assert_array_equal(back.vectors, store.vectors)


def test_csv_format(tmp_path):
    store = DescriptorStore.from_arrays([0, 1], [[0.5, 1.0], [2.0, -1.0]])
    write_csv(store, tmp_path / "d.csv")
    raw = (tmp_path / "d.csv").read_bytes()
    assert raw.startswith(b"keyframe_id,v0,v1\n")
    assert b"\r" not in raw


def test_binary_layout(tmp_path):
    store = DescriptorStore.from_arrays([7], [[1.0, 2.0]])
    write_binary(store, tmp_path / "d.vprd")
    raw = (tmp_path / "d.vprd").read_bytes()
    assert raw[:4] == b"VPRD"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 2, 1]
    assert np.frombuffer(raw[16:24], "<u8")[0] == 7
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0]


def test_malformed_csv(tmp_path):
    (tmp_path / "bad.csv").write_text("id,a\n0,1\n")
    with pytest.raises(SchemaViolation):
        read_csv(tmp_path / "bad.csv")
    (tmp_path / "short.csv").write_text("keyframe_id,v0,v1\n0,1\n")
    with pytest.raises(SchemaViolation):
        read_csv(tmp_path / "short.csv")
