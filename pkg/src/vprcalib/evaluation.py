"""Loop-closure detection metrics before and after calibration.

A candidate pair ``(i, j)`` with ``|i - j| > window`` counts as a detected
loop closure at threshold ``tau`` when

1. the embedded descriptor distance is below ``tau``,
2. registration between the two frames succeeds, and
3. its loop-closure edge survives the robust pose-graph solve.

Stages 2 and 3 do not depend on the threshold or on the embedding, so they
are computed once per sequence by :func:`verify_pairs` and shared by every
sweep over that sequence.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import EmptyThresholds, EmptyTuples, IoFailure
from .mining import MiningConfig, _registration_for
from .optimizer import GncConfig, gnc_solve
from .posegraph import chain_initialize
from .registration import RegistrationConfig, match_correspondences, register_frames
from .training import EmbeddingHead, embed

N_THRESHOLDS = 50

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["version", "n_keyframes", "n_candidate_pairs", "n_true_pairs", "n_verified_pairs", "systems"],
    "properties": {
        "version": {"const": 1},
        "n_keyframes": {"type": "integer", "minimum": 0},
        "n_candidate_pairs": {"type": "integer", "minimum": 0},
        "n_true_pairs": {"type": "integer", "minimum": 0},
        "n_verified_pairs": {"type": "integer", "minimum": 0},
        "systems": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["correct_match_percentage", "zero_detections", "separation_gap"],
                "properties": {
                    "correct_match_percentage": {"type": "number", "minimum": 0, "maximum": 100},
                    "zero_detections": {"type": "boolean"},
                    "separation_gap": {"type": ["number", "null"]},
                    "mean_positive_distance": {"type": ["number", "null"]},
                    "mean_negative_distance": {"type": ["number", "null"]},
                },
            },
        },
        "comparison": {
            "type": "object",
            "required": ["percentage_gain", "tuned_dominates"],
            "properties": {
                "percentage_gain": {"type": "number"},
                "tuned_dominates": {"type": "boolean"},
            },
        },
    },
}


@dataclass
class EvalConfig:
    window: int = 10
    revisit_radius: float = 3.0
    n_thresholds: int = N_THRESHOLDS
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    gnc: GncConfig = field(default_factory=GncConfig)
    seed: int = 0


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    detections: np.ndarray


@dataclass
class SeparationStats:
    positive: np.ndarray
    negative: np.ndarray

    @property
    def gap(self):
        return float(np.mean(self.negative) - np.mean(self.positive))


@dataclass
class MatchPercentage:
    percentage: float
    zero_detections: bool
    per_threshold: np.ndarray  # NaN where nothing was detected


@dataclass
class VerifiedPairs:
    """Candidate pairs and the threshold-independent verification stages."""

    pairs: np.ndarray  # (M, 2) all candidate pairs, i < j
    registered: np.ndarray  # (M,) bool
    survived: np.ndarray  # (M,) bool, registered and a GNC inlier
    true_positive: np.ndarray  # (M,) bool ground-truth label


def candidate_pairs(n, window):
    i, j = np.triu_indices(n, k=window + 1)
    return np.column_stack([i, j])


def verify_pairs(observations, odometry, positions, config: EvalConfig | None = None) -> VerifiedPairs:
    """Run registration and one robust solve over every candidate pair."""
    config = config or EvalConfig()
    n = len(observations)
    pairs = candidate_pairs(n, config.window)
    frames = {int(f.keyframe_id): f for f in observations}
    mcfg = MiningConfig(registration=config.registration, seed=config.seed)
    graph = chain_initialize(odometry)
    registered = np.zeros(len(pairs), dtype=bool)
    edge_of = {}
    for k, (i, j) in enumerate(pairs):
        common, _, _ = match_correspondences(frames[i], frames[j])
        if len(common) < config.registration.min_correspondences:
            continue  # registration would fail on correspondence count alone
        result = register_frames(frames[i], frames[j], _registration_for(mcfg, i, j))
        if result:
            registered[k] = True
            edge_of[k] = graph.add_loop_closure(int(i), int(j), result.relative_pose, config.registration.information)
    survived = np.zeros(len(pairs), dtype=bool)
    if edge_of:
        _, _, report = gnc_solve(graph, config.gnc)
        inl = set(report.inlier_edges)
        for k, e in edge_of.items():
            survived[k] = e in inl
    positions = np.asarray(positions, dtype=float)
    dist = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1) if len(pairs) else np.zeros(0)
    return VerifiedPairs(pairs, registered, survived, dist <= config.revisit_radius)


def verify_world(world, config: EvalConfig | None = None) -> VerifiedPairs:
    """:func:`verify_pairs` on a simulated world, labelled with its own radius."""
    if config is None:
        config = EvalConfig(window=world.config.window, revisit_radius=world.config.revisit_radius)
    return verify_pairs(world.observations, world.odometry, world.ground_truth.positions, config)


def embedded(descriptors, head: EmbeddingHead | None):
    descriptors = np.asarray(descriptors, dtype=float)
    return descriptors if head is None else embed(head, descriptors)


def pairwise_distances(vectors):
    """Full L2 distance matrix, symmetric by construction."""
    V = np.asarray(vectors, dtype=float)
    n = len(V)
    out = np.zeros((n, n))
    for i in range(n - 1):
        row = np.sqrt(np.sum((V[i + 1 :] - V[i]) ** 2, axis=1))
        out[i, i + 1 :] = row
        out[i + 1 :, i] = row
    return out


def threshold_grid(*distance_matrices, n=N_THRESHOLDS):
    """Uniform grid over the off-diagonal distance range of all given matrices."""
    lo, hi = np.inf, -np.inf
    for D in distance_matrices:
        off = D[~np.eye(len(D), dtype=bool)]
        if off.size:
            lo, hi = min(lo, off.min()), max(hi, off.max())
    if not np.isfinite(lo):
        raise EmptyThresholds("no pairwise distances to span")
    return np.linspace(lo, hi, n)


def pr_sweep(descriptors, verified: VerifiedPairs, thresholds, head: EmbeddingHead | None = None) -> PrCurve:
    """Precision and recall of loop-closure detection for each threshold."""
    thresholds = np.sort(np.asarray(thresholds, dtype=float).reshape(-1))
    if thresholds.size == 0:
        raise EmptyThresholds("threshold list is empty")
    E = embedded(descriptors, head)
    p = verified.pairs
    d = np.sqrt(np.sum((E[p[:, 0]] - E[p[:, 1]]) ** 2, axis=1)) if len(p) else np.zeros(0)
    n_pos = int(verified.true_positive.sum())
    precision, recall, detections = [], [], []
    for tau in thresholds:
        det = verified.survived & (d < tau)
        tp = int(np.sum(det & verified.true_positive))
        fp = int(np.sum(det & ~verified.true_positive))
        precision.append(tp / (tp + fp) if tp + fp else 1.0)
        recall.append(tp / n_pos if n_pos else 0.0)
        detections.append(tp + fp)
    return PrCurve(thresholds, np.array(precision), np.array(recall), np.array(detections))


def correct_match_percentage(descriptors, verified: VerifiedPairs, thresholds, head: EmbeddingHead | None = None):
    """Mean, over thresholds with at least one detection, of the correct fraction, in percent."""
    curve = pr_sweep(descriptors, verified, thresholds, head)
    frac = np.where(curve.detections > 0, curve.precision, np.nan)
    valid = ~np.isnan(frac)
    if not valid.any():
        return MatchPercentage(0.0, True, frac)
    return MatchPercentage(float(100.0 * np.mean(frac[valid])), False, frac)


def interpolated_precision(curve: PrCurve, recall_levels):
    """Best precision reached at recall >= each level (standard PR interpolation)."""
    out = []
    for r in recall_levels:
        ok = curve.recall >= r
        out.append(float(curve.precision[ok].max()) if ok.any() else np.nan)
    return np.array(out)


def dominates(tuned: PrCurve, untuned: PrCurve, atol=1e-12):
    """Whether ``tuned`` has at least the precision of ``untuned`` at every
    recall level both curves reach.  Returns ``(ok, levels, p_tuned, p_untuned)``.
    """
    lo = max(tuned.recall.min(), untuned.recall.min())
    hi = min(tuned.recall.max(), untuned.recall.max())
    levels = np.unique(np.concatenate([tuned.recall, untuned.recall]))
    levels = levels[(levels >= lo) & (levels <= hi) & (levels > 0)]
    pt = interpolated_precision(tuned, levels)
    pu = interpolated_precision(untuned, levels)
    return bool(np.all(pt >= pu - atol)), levels, pt, pu


def separation_stats(head: EmbeddingHead | None, tuples, descriptors) -> SeparationStats:
    """Embedded anchor-positive and anchor-negative distances over ``tuples``."""
    if not tuples:
        raise EmptyTuples("no tuples to measure")
    E = embedded(descriptors, head)
    pos = [np.sqrt(np.sum((E[t.anchor_id] - E[t.positive_id]) ** 2)) for t in tuples]
    neg = [np.sqrt(np.sum((E[t.anchor_id] - E[k]) ** 2)) for t in tuples for k in t.negative_ids]
    return SeparationStats(np.array(pos), np.array(neg))


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


@dataclass
class SystemResult:
    similarity: np.ndarray
    curve: PrCurve
    match: MatchPercentage
    separation: SeparationStats | None = None


@dataclass
class EvalResults:
    n_keyframes: int
    verified: VerifiedPairs
    thresholds: np.ndarray
    systems: dict  # name -> SystemResult

    def summary(self):
        out = {
            "version": 1,
            "n_keyframes": int(self.n_keyframes),
            "n_candidate_pairs": int(len(self.verified.pairs)),
            "n_true_pairs": int(self.verified.true_positive.sum()),
            "n_verified_pairs": int(self.verified.survived.sum()),
            "systems": {},
        }
        for name, res in sorted(self.systems.items()):
            sep = res.separation
            out["systems"][name] = {
                "correct_match_percentage": res.match.percentage,
                "zero_detections": res.match.zero_detections,
                "separation_gap": None if sep is None else sep.gap,
                "mean_positive_distance": None if sep is None else float(np.mean(sep.positive)),
                "mean_negative_distance": None if sep is None else float(np.mean(sep.negative)),
            }
        if {"tuned", "untuned"} <= set(self.systems):
            tuned, untuned = self.systems["tuned"], self.systems["untuned"]
            out["comparison"] = {
                "percentage_gain": tuned.match.percentage - untuned.match.percentage,
                "tuned_dominates": dominates(tuned.curve, untuned.curve)[0],
            }
        return out


def evaluate(descriptors, verified: VerifiedPairs, heads: dict, tuples=None, n_thresholds=N_THRESHOLDS) -> EvalResults:
    """Evaluate several heads (``None`` = raw descriptors) on one shared threshold grid."""
    sims = {name: pairwise_distances(embedded(descriptors, h)) for name, h in heads.items()}
    grid = threshold_grid(*sims.values(), n=n_thresholds)
    systems = {}
    for name, head in heads.items():
        systems[name] = SystemResult(
            similarity=sims[name],
            curve=pr_sweep(descriptors, verified, grid, head),
            match=correct_match_percentage(descriptors, verified, grid, head),
            separation=separation_stats(head, tuples, descriptors) if tuples else None,
        )
    return EvalResults(len(descriptors), verified, grid, systems)


def _csv_text(header, rows):
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _histogram_csv(sep: SeparationStats, n_bins):
    both = np.concatenate([sep.positive, sep.negative])
    edges = np.linspace(both.min(), both.max(), n_bins + 1)
    hp, _ = np.histogram(sep.positive, edges)
    hn, _ = np.histogram(sep.negative, edges)
    return _csv_text(
        ["bin_left", "bin_right", "positive_count", "negative_count"],
        zip(edges[:-1].tolist(), edges[1:].tolist(), hp.tolist(), hn.tolist()),
    )


def _write_files(out_dir, files):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fname, text in files.items():
            (out / fname).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return sorted(files)


def emit_artifacts(results: EvalResults, out_dir, n_bins=30):
    """Write similarity matrices, PR curves, histograms and ``summary.json``."""
    files = {}
    for name, res in sorted(results.systems.items()):
        n = len(res.similarity)
        files[f"similarity_{name}.csv"] = _csv_text([f"k{j}" for j in range(n)], res.similarity.tolist())
        c = res.curve
        files[f"pr_{name}.csv"] = _csv_text(
            ["threshold", "precision", "recall"], zip(c.thresholds.tolist(), c.precision.tolist(), c.recall.tolist())
        )
        if res.separation is not None:
            files[f"histogram_{name}.csv"] = _histogram_csv(res.separation, n_bins)
    summary = results.summary()
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    files["summary.json"] = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    return _write_files(out_dir, files)


def emit_separation(stats: dict, out_dir, n_bins=30):
    """Histograms and gaps for separation stats keyed by system name.

    Writes ``histogram_<name>.csv`` per system and ``separation.json``.
    """
    files = {f"histogram_{name}.csv": _histogram_csv(sep, n_bins) for name, sep in sorted(stats.items())}
    files["separation.json"] = json.dumps(
        {
            name: {
                "gap": sep.gap,
                "mean_positive_distance": float(np.mean(sep.positive)),
                "mean_negative_distance": float(np.mean(sep.negative)),
                "n_positive": int(len(sep.positive)),
                "n_negative": int(len(sep.negative)),
            }
            for name, sep in sorted(stats.items())
        },
        indent=1,
        sort_keys=True,
    ) + "\n"
    return _write_files(out_dir, files)
