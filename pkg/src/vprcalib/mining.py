"""Self-supervised mining of (anchor, positive, negatives) training tuples.

For every keyframe the descriptor neighbours are walked nearest first.  The
first neighbour that registers becomes the positive and its relative pose
joins the pose graph as a loop closure.  Walking on, up to ``max_negatives``
neighbours that fail to register become negatives.  A single robust solve
over the whole graph then rejects every tuple whose loop closure it labels
an outlier.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .descriptors import DEFAULT_WINDOW, DescriptorStore
from .errors import InputLengthMismatch, IoFailure, SchemaViolation
from .optimizer import GncConfig, OptimizeReport, gnc_solve
from .posegraph import PoseGraph, chain_initialize
from .registration import RansacConfig, RegistrationConfig, register_frames

log = logging.getLogger(__name__)

TUPLE_SCHEMA = {
    "type": "object",
    "required": ["version", "tuples"],
    "properties": {
        "version": {"const": 1},
        "tuples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["anchor", "positive", "negatives", "status"],
                "properties": {
                    "anchor": {"type": "integer", "minimum": 0},
                    "positive": {"type": "integer", "minimum": 0},
                    "negatives": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0},
                        "minItems": 1,
                        "maxItems": 10,
                        "uniqueItems": True,
                    },
                    "status": {"enum": ["Pending", "Inlier", "Rejected"]},
                    "loop_edge": {"type": ["integer", "null"]},
                },
            },
        },
    },
}


class TupleStatus(enum.Enum):
    PENDING = "Pending"
    INLIER = "Inlier"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class TrainingTuple:
    anchor_id: int
    positive_id: int
    negative_ids: tuple
    loop_edge_index: int | None = None
    status: TupleStatus = TupleStatus.PENDING

    def __post_init__(self):
        object.__setattr__(self, "negative_ids", tuple(int(k) for k in self.negative_ids))


@dataclass
class MiningConfig:
    window: int = DEFAULT_WINDOW
    k_max: int = 50
    max_negatives: int = 10
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    gnc: GncConfig = field(default_factory=GncConfig)
    normalize: bool = False
    seed: int = 0


@dataclass
class MiningReport:
    tuples_extracted: int = 0
    tuples_rejected_by_pgo: int = 0
    keyframes_without_positive: int = 0
    tuples_without_negatives: int = 0
    optimize_report: OptimizeReport | None = None
    estimates: list | None = field(default=None, repr=False)

    def to_dict(self):
        out = {
            "tuples_extracted": self.tuples_extracted,
            "tuples_rejected_by_pgo": self.tuples_rejected_by_pgo,
            "keyframes_without_positive": self.keyframes_without_positive,
            "tuples_without_negatives": self.tuples_without_negatives,
        }
        if self.optimize_report is not None:
            out["optimize_report"] = self.optimize_report.to_dict()
        return out


def candidate_walk(store: DescriptorStore, anchor, k_max=50, window=DEFAULT_WINDOW):
    """Yield up to ``k_max`` match candidates of ``anchor``, nearest first."""
    yield from store.query(anchor, k_max, window)


def pair_seed(seed, i, j):
    """RANSAC seed for one keyframe pair, independent of visiting order."""
    return int(np.random.SeedSequence([seed, int(i), int(j)]).generate_state(1)[0])


def _registration_for(config: MiningConfig, i, j):
    r = config.registration
    ransac = RansacConfig(r.ransac.iterations, r.ransac.sample_size, r.ransac.inlier_threshold, pair_seed(config.seed, i, j))
    return RegistrationConfig(r.min_correspondences, ransac, r.information)


def _as_store(descriptors, normalize):
    if isinstance(descriptors, DescriptorStore):
        return descriptors
    arr = np.asarray(descriptors, dtype=float)
    return DescriptorStore.from_arrays(range(len(arr)), arr, normalize=normalize)


def mine(descriptors, observations, odometry, config: MiningConfig | None = None):
    """Mine training tuples from one traversal.

    Parameters
    ----------
    descriptors : DescriptorStore or (N, D) array
    observations : list of KeyframeObservations, indexed by keyframe id
    odometry : list of Pose or (Pose, information), N - 1 steps
    config : MiningConfig, optional

    Returns
    -------
    tuples : list of TrainingTuple
    graph : PoseGraph
        Odometry chain plus one loop closure per positive.
    report : MiningReport
    """
    config = config or MiningConfig()
    store = _as_store(descriptors, config.normalize)
    n = len(observations)
    if len(store) != n or len(odometry) != n - 1:
        raise InputLengthMismatch(
            f"{len(store)} descriptors, {n} observation frames, {len(odometry)} odometry steps"
        )
    frames = {int(f.keyframe_id): f for f in observations}
    if sorted(frames) != list(range(n)) or sorted(int(k) for k in store.ids) != list(range(n)):
        raise InputLengthMismatch("keyframe ids must be 0..N-1 in descriptors and observations")

    graph = chain_initialize(odometry)
    report = MiningReport()
    pending = []
    for anchor in range(n):
        positive, edge_index, negatives = None, None, []
        for cand in candidate_walk(store, anchor, config.k_max, config.window):
            c = cand.candidate_id
            result = register_frames(frames[anchor], frames[c], _registration_for(config, anchor, c))
            if positive is None:
                if result:
                    positive = c
                    edge_index = graph.add_loop_closure(
                        anchor, c, result.relative_pose, config.registration.information
                    )
            elif not result:
                negatives.append(c)
                if len(negatives) == config.max_negatives:
                    break
        if positive is None:
            report.keyframes_without_positive += 1
        elif not negatives:
            report.tuples_without_negatives += 1
        else:
            pending.append(TrainingTuple(anchor, positive, negatives, edge_index))

    estimates, _, opt = gnc_solve(graph, config.gnc)
    outliers = set(opt.outlier_edges)
    tuples = []
    for tup in pending:
        status = TupleStatus.REJECTED if tup.loop_edge_index in outliers else TupleStatus.INLIER
        tuples.append(TrainingTuple(tup.anchor_id, tup.positive_id, tup.negative_ids, tup.loop_edge_index, status))
    report.tuples_extracted = len(tuples)
    report.tuples_rejected_by_pgo = sum(t.status is TupleStatus.REJECTED for t in tuples)
    report.optimize_report = opt
    report.estimates = estimates
    log.info("mined %d tuples, %d rejected", report.tuples_extracted, report.tuples_rejected_by_pgo)
    return tuples, graph, report


def tuning_set(tuples):
    """Tuples usable for training: those whose loop closure survived."""
    return [t for t in tuples if t.status is TupleStatus.INLIER]


# --------------------------------------------------------------------------
# JSON export
# --------------------------------------------------------------------------


def tuples_to_dict(tuples) -> dict:
    return {
        "version": 1,
        "tuples": [
            {
                "anchor": t.anchor_id,
                "positive": t.positive_id,
                "negatives": list(t.negative_ids),
                "status": t.status.value,
                "loop_edge": t.loop_edge_index,
            }
            for t in tuples
        ],
    }


def tuples_from_dict(data) -> list:
    try:
        jsonschema.validate(data, TUPLE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(exc.message) from exc
    return [
        TrainingTuple(t["anchor"], t["positive"], t["negatives"], t.get("loop_edge"), TupleStatus(t["status"]))
        for t in data["tuples"]
    ]


def export_tuples(tuples, path):
    text = json.dumps(tuples_to_dict(tuples), indent=1, sort_keys=True) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def import_tuples(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(str(exc)) from exc
    return tuples_from_dict(data)
