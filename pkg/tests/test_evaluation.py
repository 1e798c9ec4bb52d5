import json

import jsonschema
import numpy as np
import pytest
from scipy.spatial.distance import cdist

from vprcalib.errors import EmptyThresholds, EmptyTuples
from vprcalib.evaluation import (
    SUMMARY_SCHEMA,
    EvalConfig,
    PrCurve,
    VerifiedPairs,
    candidate_pairs,
    correct_match_percentage,
    dominates,
    emit_artifacts,
    emit_separation,
    evaluate,
    interpolated_precision,
    pairwise_distances,
    pr_sweep,
    separation_stats,
    threshold_grid,
    verify_world,
)
from vprcalib.mining import TrainingTuple, TupleStatus
from vprcalib.simulator import WorldConfig, generate
from vprcalib.training import EmbeddingHead


def random_verified(rng, n=40, window=3):
    pairs = candidate_pairs(n, window)
    m = len(pairs)
    registered = rng.random(m) < 0.7
    survived = registered & (rng.random(m) < 0.8)
    true_positive = rng.random(m) < 0.3
    return VerifiedPairs(pairs, registered, survived, true_positive)


def clustered(n_clusters=6, per=5, window=0):
    """Keyframes in clusters; same-cluster pairs are the true loops."""
    labels = np.repeat(np.arange(n_clusters), per)
    pairs = candidate_pairs(len(labels), window)
    same = labels[pairs[:, 0]] == labels[pairs[:, 1]]
    desc = np.eye(n_clusters)[labels] / np.sqrt(2.0)
    ones = np.ones(len(pairs), dtype=bool)
    return desc, VerifiedPairs(pairs, ones, ones.copy(), same)


def confusion_oracle(desc, verified, tau):
    tp = fp = fn = 0
    for (i, j), ok, truth in zip(verified.pairs, verified.survived, verified.true_positive):
        detected = ok and np.linalg.norm(desc[i] - desc[j]) < tau
        tp += detected and truth
        fp += detected and not truth
        fn += (not detected) and truth
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def test_threshold_below_all_distances(rng):
    desc = rng.normal(size=(40, 8))
    v = random_verified(rng)
    curve = pr_sweep(desc, v, [0.0, 1e-9])
    np.testing.assert_array_equal(curve.precision, [1.0, 1.0])
    np.testing.assert_array_equal(curve.recall, [0.0, 0.0])
    match = correct_match_percentage(desc, v, [0.0, 1e-9])
    assert match.percentage == 0.0 and match.zero_detections


def test_oracle_descriptors_are_perfect():
    desc, v = clustered()
    D = pairwise_distances(desc)
    assert set(np.round(np.unique(D[v.pairs[:, 0], v.pairs[:, 1]]), 12)) == {0.0, 1.0}
    curve = pr_sweep(desc, v, [0.5])
    assert curve.precision[0] == 1.0 and curve.recall[0] == 1.0
    match = correct_match_percentage(desc, v, np.linspace(0.1, 0.9, 9))
    assert match.percentage == 100.0 and not match.zero_detections


def test_pr_matches_confusion_matrix_oracle(rng):
    for _ in range(5):
        desc = rng.normal(size=(40, 4))
        v = random_verified(rng)
        grid = threshold_grid(pairwise_distances(desc), n=25)
        # midpoints keep thresholds off the pair distances, where rounding decides ties
        curve = pr_sweep(desc, v, 0.5 * (grid[1:] + grid[:-1]))
        for tau, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            assert (p, r) == confusion_oracle(desc, v, tau)


def test_recall_monotone_and_percentage_bounded(rng):
    for _ in range(10):
        desc = rng.normal(size=(40, 6))
        v = random_verified(rng)
        grid = threshold_grid(pairwise_distances(desc))
        curve = pr_sweep(desc, v, grid[::-1])
        assert np.all(np.diff(curve.thresholds) >= 0)
        assert np.all(np.diff(curve.recall) >= 0)
        assert np.all((curve.precision >= 0) & (curve.precision <= 1))
        pct = correct_match_percentage(desc, v, grid)
        assert 0.0 <= pct.percentage <= 100.0
        valid = curve.detections > 0
        assert pct.percentage == pytest.approx(100 * curve.precision[valid].mean(), abs=1e-12)


def test_registration_and_gnc_stages_gate_detection():
    desc, v = clustered()
    blocked = VerifiedPairs(v.pairs, v.registered, np.zeros_like(v.survived), v.true_positive)
    curve = pr_sweep(desc, blocked, [0.5, 2.0])
    np.testing.assert_array_equal(curve.detections, [0, 0])


def test_empty_thresholds(rng):
    with pytest.raises(EmptyThresholds):
        pr_sweep(rng.normal(size=(40, 3)), random_verified(rng), [])


def test_threshold_grid_spans_all_systems(rng):
    a = pairwise_distances(rng.normal(size=(10, 3)))
    b = pairwise_distances(3 * rng.normal(size=(10, 3)))
    grid = threshold_grid(a, b, n=50)
    off = ~np.eye(10, dtype=bool)
    assert len(grid) == 50
    assert grid[0] == min(a[off].min(), b[off].min()) and grid[-1] == max(a[off].max(), b[off].max())


def test_pairwise_distances_match_cdist(rng):
    X = rng.normal(size=(30, 7))
    D = pairwise_distances(X)
    np.testing.assert_allclose(D, cdist(X, X), atol=1e-12)
    assert np.array_equal(D, D.T)


def test_interpolated_precision_and_dominance():
    untuned = PrCurve(np.arange(3.0), np.array([1.0, 0.5, 0.4]), np.array([0.0, 0.5, 1.0]), np.array([0, 4, 10]))
    better = PrCurve(np.arange(3.0), np.array([1.0, 0.6, 0.4]), np.array([0.0, 0.5, 1.0]), np.array([0, 4, 10]))
    worse = PrCurve(np.arange(3.0), np.array([1.0, 0.45, 0.45]), np.array([0.0, 0.5, 0.5]), np.array([0, 4, 4]))
    np.testing.assert_array_equal(interpolated_precision(untuned, [0.25, 0.5, 1.0]), [0.5, 0.5, 0.4])
    assert dominates(better, untuned)[0]
    assert dominates(untuned, untuned)[0]
    ok, levels, _, _ = dominates(worse, untuned)
    assert not ok and levels.tolist() == [0.5]


def tuples_for(rng, n, count=12):
    out = []
    for _ in range(count):
        ids = rng.choice(n, 6, replace=False)
        out.append(TrainingTuple(int(ids[0]), int(ids[1]), ids[2:], None, TupleStatus.INLIER))
    return out


def test_separation_stats_brute_force(rng):
    desc = rng.normal(size=(30, 5))
    tuples = tuples_for(rng, 30)
    raw = separation_stats(None, tuples, desc)
    same = separation_stats(EmbeddingHead.identity(5), tuples, desc)
    np.testing.assert_array_equal(raw.positive, same.positive)
    head = EmbeddingHead(rng.normal(size=(3, 5)), rng.normal(size=3))
    s = separation_stats(head, tuples, desc)
    E = desc @ head.weight.T + head.bias
    D = cdist(E, E)
    pos = [D[t.anchor_id, t.positive_id] for t in tuples]
    neg = [D[t.anchor_id, k] for t in tuples for k in t.negative_ids]
    np.testing.assert_allclose(s.positive, pos, atol=1e-12)
    np.testing.assert_allclose(s.negative, neg, atol=1e-12)
    assert s.gap == pytest.approx(np.mean(neg) - np.mean(pos), abs=1e-12)
    with pytest.raises(EmptyTuples):
        separation_stats(None, [], desc)


def small_results(rng):
    desc = rng.normal(size=(40, 6))
    heads = {"untuned": None, "tuned": EmbeddingHead(np.eye(6) + 0.1 * rng.normal(size=(6, 6)), np.zeros(6))}
    return evaluate(desc, random_verified(rng), heads, tuples=tuples_for(rng, 40), n_thresholds=20)


def test_artifacts_are_byte_deterministic(tmp_path):
    a = small_results(np.random.default_rng(5))
    b = small_results(np.random.default_rng(5))
    names = emit_artifacts(a, tmp_path / "a")
    assert emit_artifacts(b, tmp_path / "b") == names
    assert "pr_tuned.csv" in names and "similarity_untuned.csv" in names and "histogram_tuned.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "pr_tuned.csv").read_text().splitlines()[0]
    assert header == "threshold,precision,recall"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    assert set(summary["systems"]) == {"tuned", "untuned"} and "comparison" in summary


def test_emit_separation(tmp_path, rng):
    desc = rng.normal(size=(30, 5))
    tuples = tuples_for(rng, 30)
    emit_separation({"untuned": separation_stats(None, tuples, desc)}, tmp_path)
    data = json.loads((tmp_path / "separation.json").read_text())
    assert data["untuned"]["n_positive"] == 12 and data["untuned"]["n_negative"] == 48
    rows = (tmp_path / "histogram_untuned.csv").read_text().splitlines()
    assert rows[0] == "bin_left,bin_right,positive_count,negative_count" and len(rows) == 31
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 12


def test_verify_world_stages_are_nested():
    w = generate(WorldConfig(n_keyframes=120, aliasing_pairs=2, seed=2, nuisance_scale=0.0))
    v = verify_world(w)
    P = w.ground_truth.positions
    assert len(v.pairs) == len(candidate_pairs(120, 10))
    assert np.all(v.survived <= v.registered)
    dist = np.array([np.linalg.norm(P[i] - P[j]) for i, j in v.pairs])
    np.testing.assert_array_equal(v.true_positive, dist <= 3.0)
    # planted traps register with a wrong pose; the robust solve removes every
    # pair whose frames cannot overlap, while keeping all true loops
    far = dist >= 2 * w.config.sensing_radius
    assert np.any(v.registered & far)
    assert not np.any(v.survived & far)
    assert v.survived[v.true_positive].all()
    v2 = verify_world(w, EvalConfig(window=10, revisit_radius=3.0))
    np.testing.assert_array_equal(v.survived, v2.survived)
