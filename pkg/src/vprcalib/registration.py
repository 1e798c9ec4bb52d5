"""Relative-pose estimation between keyframes from 3D point correspondences.

Correspondences come from shared landmark ids.  A 3-point RANSAC finds the
consensus set, then a closed-form SVD alignment (no scale) is refit on it.
Too few correspondences or too small a consensus is reported as a
:class:`Failure`, which is an expected outcome rather than an error.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaViolation
from .geometry import Pose
from .posegraph import DEFAULT_LOOP_INFORMATION, EdgeKind, PoseEdge

MIN_CORRESPONDENCES = 6


@dataclass(frozen=True, eq=False)
class KeyframeObservations:
    keyframe_id: int
    landmark_ids: np.ndarray  # (n,) int
    points: np.ndarray  # (n, 3) in the keyframe's local frame

    def __post_init__(self):
        ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(ids) != len(pts):
            raise ValueError("one point per landmark id required")
        if len(np.unique(ids)) != len(ids):
            raise ValueError(f"keyframe {self.keyframe_id}: landmark ids must be unique")
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "landmark_ids", ids[order])
        object.__setattr__(self, "points", pts[order])

    def __len__(self):
        return len(self.landmark_ids)


@dataclass
class RansacConfig:
    iterations: int = 100
    sample_size: int = 3
    inlier_threshold: float = 0.05
    seed: int = 0


class FailureReason(enum.Enum):
    TOO_FEW_CORRESPONDENCES = "TooFewCorrespondences"
    NO_CONSENSUS = "NoConsensus"


@dataclass(frozen=True)
class Failure:
    reason: FailureReason
    correspondences: int

    def __bool__(self):
        return False


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    relative_pose: Pose
    inlier_correspondences: int
    rms_error: float
    inlier_mask: np.ndarray


@dataclass
class RegistrationConfig:
    min_correspondences: int = MIN_CORRESPONDENCES
    ransac: RansacConfig = None
    information: np.ndarray = None

    def __post_init__(self):
        if self.ransac is None:
            self.ransac = RansacConfig()
        if self.information is None:
            self.information = DEFAULT_LOOP_INFORMATION.copy()


def match_correspondences(a: KeyframeObservations, b: KeyframeObservations):
    """Pair the points of landmarks seen in both frames, ordered by landmark id.

    Returns ``(landmark_ids, points_a, points_b)``.
    """
    common, ia, ib = np.intersect1d(a.landmark_ids, b.landmark_ids, assume_unique=True, return_indices=True)
    return common, a.points[ia], b.points[ib]


def align_points(p, q):
    """Rigid ``(R, t)`` minimising ``sum |p_k - (R q_k + t)|^2``.

    Closed-form SVD solution with the reflection case corrected so that
    ``det(R) = +1``.  Batched over leading axes of ``(..., n, 3)`` inputs.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pc, qc = p.mean(axis=-2), q.mean(axis=-2)
    H = np.swapaxes(q - qc[..., None, :], -1, -2) @ (p - pc[..., None, :])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    Ut = np.swapaxes(U, -1, -2)
    d = np.sign(np.linalg.det(V @ Ut))
    d = np.where(d == 0, 1.0, d)
    S = np.zeros(d.shape + (3, 3))
    S[..., 0, 0] = S[..., 1, 1] = 1.0
    S[..., 2, 2] = d
    R = V @ S @ Ut
    return R, pc - np.einsum("...ij,...j->...i", R, qc)


def estimate_relative_pose(p, q, min_correspondences=MIN_CORRESPONDENCES, ransac: RansacConfig | None = None):
    """Pose ``T`` with ``p ~ T q`` (frame-b points expressed in frame a).

    ``p`` and ``q`` are paired ``(n, 3)`` arrays.  Returns a
    :class:`RegistrationResult` or a :class:`Failure`.
    """
    ransac = ransac or RansacConfig()
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    n = len(p)
    if n < max(min_correspondences, ransac.sample_size):
        return Failure(FailureReason.TOO_FEW_CORRESPONDENCES, n)

    rng = np.random.default_rng(ransac.seed)
    thr2 = ransac.inlier_threshold**2
    # one random permutation prefix per hypothesis: distinct indices per sample
    samples = np.argsort(rng.random((ransac.iterations, n)), axis=1)[:, : ransac.sample_size]
    R, t = align_points(p[samples], q[samples])
    err2 = np.sum((p[None] - (np.einsum("kij,nj->kni", R, q) + t[:, None, :])) ** 2, axis=2)
    masks = err2 < thr2
    counts = masks.sum(axis=1)
    errs = np.where(masks, err2, 0.0).sum(axis=1)
    # most inliers wins, then smallest inlier error, then earliest hypothesis
    best = np.lexsort((np.arange(len(counts)), errs, -counts))[0]
    best_mask, best_count = masks[best], int(counts[best])
    if best_count < max(min_correspondences, ransac.sample_size):
        return Failure(FailureReason.NO_CONSENSUS, n)

    mask = best_mask
    for _ in range(2):
        R, t = align_points(p[mask], q[mask])
        err2 = np.sum((p - (q @ R.T + t)) ** 2, axis=1)
        refit = err2 < thr2
        if refit.sum() < max(min_correspondences, ransac.sample_size) or np.array_equal(refit, mask):
            break
        mask = refit
    R, t = align_points(p[mask], q[mask])
    err2 = np.sum((p[mask] - (q[mask] @ R.T + t)) ** 2, axis=1)
    return RegistrationResult(Pose.from_rt(R, t), int(mask.sum()), float(np.sqrt(err2.mean())), mask)


def register_frames(a: KeyframeObservations, b: KeyframeObservations, config: RegistrationConfig | None = None):
    config = config or RegistrationConfig()
    _, pa, pb = match_correspondences(a, b)
    return estimate_relative_pose(pa, pb, config.min_correspondences, config.ransac)


def attempt_loop_closure(frames, i, j, config: RegistrationConfig | None = None):
    """Loop-closure edge ``i -> j`` if registration succeeds, else ``None``.

    ``frames`` maps keyframe ids to :class:`KeyframeObservations`.
    """
    config = config or RegistrationConfig()
    result = register_frames(frames[i], frames[j], config)
    if not result:
        return None
    return PoseEdge(int(i), int(j), result.relative_pose, config.information, EdgeKind.LOOP_CLOSURE)


# --------------------------------------------------------------------------
# observations JSON
# --------------------------------------------------------------------------


def observations_to_json(frames) -> str:
    data = [
        {
            "keyframe_id": int(f.keyframe_id),
            "points": [
                {"landmark_id": int(lid), "xyz": [float(v) for v in xyz]}
                for lid, xyz in zip(f.landmark_ids, f.points)
            ],
        }
        for f in frames
    ]
    return json.dumps(data)


def observations_from_json(text: str):
    try:
        data = json.loads(text)
        frames = []
        for item in data:
            pts = item["points"]
            frames.append(
                KeyframeObservations(
                    int(item["keyframe_id"]),
                    [int(p["landmark_id"]) for p in pts],
                    np.array([p["xyz"] for p in pts], dtype=float).reshape(-1, 3),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"malformed observations: {exc}") from exc
    return frames
