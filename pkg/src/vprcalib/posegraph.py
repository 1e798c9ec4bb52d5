"""Pose graph container and g2o / JSON serialization.

Information matrices are 6x6 in the ``(x, y, z, rx, ry, rz)`` residual order
used by :mod:`vprcalib.optimizer`.  In g2o files they are written as the 21
row-major upper-triangular entries in that same order; no unit conversion to
g2o's quaternion-vector error is applied.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure, MalformedLine, MissingVertex, NonChainOdometry, NonSpdInformation, UnknownNode
from .geometry import Pose, compose

# translation sigma 0.1 m, rotation sigma 0.05 rad
DEFAULT_LOOP_INFORMATION = np.diag([100.0, 100.0, 100.0, 400.0, 400.0, 400.0])
DEFAULT_ODOMETRY_INFORMATION = np.diag([400.0, 400.0, 400.0, 10000.0, 10000.0, 10000.0])

_TRIU = np.triu_indices(6)


class EdgeKind(enum.Enum):
    ODOMETRY = "odometry"
    LOOP_CLOSURE = "loop_closure"


def classify_indices(from_id, to_id):
    return EdgeKind.ODOMETRY if to_id == from_id + 1 else EdgeKind.LOOP_CLOSURE


def check_information(info):
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise NonSpdInformation(f"information must be 6x6, got {info.shape}")
    if not np.all(np.isfinite(info)) or np.max(np.abs(info - info.T)) > 1e-12:
        raise NonSpdInformation("information matrix is not symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise NonSpdInformation("information matrix is not positive definite") from None
    return info


@dataclass(frozen=True)
class PoseNode:
    id: int
    estimate: Pose


@dataclass(frozen=True, eq=False)
class PoseEdge:
    from_id: int
    to_id: int
    measurement: Pose
    information: np.ndarray
    kind: EdgeKind

    def __post_init__(self):
        info = np.array(self.information, dtype=float)
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    # -- construction ------------------------------------------------------

    def add_node(self, estimate: Pose, node_id=None):
        node_id = len(self.nodes) if node_id is None else int(node_id)
        if node_id != len(self.nodes):
            raise ValueError(f"node ids must be contiguous; expected {len(self.nodes)}")
        self.nodes.append(PoseNode(node_id, estimate))
        return node_id

    def _check_endpoints(self, i, j):
        for k in (i, j):
            if not 0 <= k < len(self.nodes):
                raise UnknownNode(k)

    def add_odometry_edge(self, from_id, to_id, measurement, information=DEFAULT_ODOMETRY_INFORMATION):
        self._check_endpoints(from_id, to_id)
        if to_id != from_id + 1:
            raise NonChainOdometry(f"odometry edge {from_id}->{to_id} is not consecutive")
        if any(e.kind is EdgeKind.ODOMETRY and e.from_id == from_id for e in self.edges):
            raise NonChainOdometry(f"duplicate odometry edge from {from_id}")
        info = check_information(information)
        self.edges.append(PoseEdge(from_id, to_id, measurement, info, EdgeKind.ODOMETRY))
        return len(self.edges) - 1

    def add_loop_closure(self, from_id, to_id, measurement, information=DEFAULT_LOOP_INFORMATION):
        """Append a loop-closure edge and return its index in ``edges``."""
        self._check_endpoints(from_id, to_id)
        if abs(to_id - from_id) <= 1:
            raise ValueError(f"loop closure {from_id}->{to_id} must span more than one step")
        info = check_information(information)
        self.edges.append(PoseEdge(from_id, to_id, measurement, info, EdgeKind.LOOP_CLOSURE))
        return len(self.edges) - 1

    def add_edge(self, edge: PoseEdge):
        if edge.kind is EdgeKind.ODOMETRY:
            return self.add_odometry_edge(edge.from_id, edge.to_id, edge.measurement, edge.information)
        return self.add_loop_closure(edge.from_id, edge.to_id, edge.measurement, edge.information)

    # -- queries -----------------------------------------------------------

    @property
    def loop_edge_indices(self):
        return [k for k, e in enumerate(self.edges) if e.kind is EdgeKind.LOOP_CLOSURE]

    @property
    def odometry_edge_indices(self):
        return [k for k, e in enumerate(self.edges) if e.kind is EdgeKind.ODOMETRY]

    def estimates(self):
        return [n.estimate for n in self.nodes]

    def with_estimates(self, poses):
        if len(poses) != len(self.nodes):
            raise ValueError("one estimate per node required")
        return PoseGraph([PoseNode(n.id, p) for n, p in zip(self.nodes, poses)], list(self.edges))

    def copy(self):
        return PoseGraph(list(self.nodes), list(self.edges))

    def validate(self):
        """Check the chain and edge invariants; raises on the first violation."""
        n = len(self.nodes)
        for k, node in enumerate(self.nodes):
            if node.id != k:
                raise ValueError("node ids must be unique and contiguous from 0")
        chain = set()
        for e in self.edges:
            self._check_endpoints(e.from_id, e.to_id)
            if classify_indices(e.from_id, e.to_id) is not e.kind:
                raise NonChainOdometry(f"edge {e.from_id}->{e.to_id} kind does not match its indices")
            check_information(e.information)
            if e.kind is EdgeKind.ODOMETRY:
                chain.add(e.from_id)
        if chain != set(range(n - 1)):
            raise NonChainOdometry("odometry edges do not form a single chain over all nodes")


def chain_initialize(odometry, information=DEFAULT_ODOMETRY_INFORMATION) -> PoseGraph:
    """Dead-reckon a graph from relative odometry poses.

    ``odometry`` holds poses (or ``(pose, information)`` pairs) for the steps
    ``k -> k+1``; node 0 sits at the identity.
    """
    if len(odometry) == 0:
        raise ValueError("odometry must contain at least one measurement")
    graph = PoseGraph()
    current = Pose.identity()
    graph.add_node(current)
    for k, item in enumerate(odometry):
        meas, info = item if isinstance(item, tuple) else (item, information)
        current = compose(current, meas)
        graph.add_node(current)
        graph.add_odometry_edge(k, k + 1, meas, info)
    return graph


def odometry_from_graph(graph: PoseGraph):
    """``(measurement, information)`` per chain step, in order ``0 -> 1 -> ...``.

    Raises :class:`NonChainOdometry` unless the odometry edges form exactly
    one chain over all nodes.
    """
    graph.validate()
    steps = {e.from_id: (e.measurement, e.information) for e in graph.edges if e.kind is EdgeKind.ODOMETRY}
    return [steps[k] for k in range(len(graph.nodes) - 1)]


def trajectory_rmse(estimates, truth) -> float:
    """Translation RMSE after aligning the first estimated pose onto the first true one."""
    if len(estimates) != len(truth) or not len(truth):
        raise ValueError("estimates and truth must be nonempty and of equal length")
    align = compose(truth[0], estimates[0].inverse())
    est = np.array([compose(align, p).t for p in estimates])
    ref = np.array([p.t for p in truth])
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


# --------------------------------------------------------------------------
# g2o text
# --------------------------------------------------------------------------

VERTEX_TAG = "VERTEX_SE3:QUAT"
EDGE_TAG = "EDGE_SE3:QUAT"


def _fmt(x):
    return format(float(x), ".17g")


def _pose_fields(p: Pose):
    w, x, y, z = p.q
    return [*p.t, x, y, z, w]


def _pose_from_fields(vals):
    x, y, z, qx, qy, qz, qw = vals
    return Pose(np.array([qw, qx, qy, qz]), np.array([x, y, z]))


def write_g2o(graph: PoseGraph) -> str:
    lines = []
    for node in graph.nodes:
        lines.append(" ".join([VERTEX_TAG, str(node.id)] + [_fmt(v) for v in _pose_fields(node.estimate)]))
    for e in graph.edges:
        vals = _pose_fields(e.measurement) + list(e.information[_TRIU])
        lines.append(" ".join([EDGE_TAG, str(e.from_id), str(e.to_id)] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def parse_g2o(text: str) -> PoseGraph:
    vertices = {}
    raw_edges = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        try:
            if tok[0] == VERTEX_TAG:
                if len(tok) != 9:
                    raise MalformedLine(line_no, "vertex needs id and 7 pose values")
                vid = int(tok[1])
                if vid in vertices:
                    raise MalformedLine(line_no, f"duplicate vertex {vid}")
                vertices[vid] = _pose_from_fields([float(v) for v in tok[2:]])
            elif tok[0] == EDGE_TAG:
                if len(tok) != 3 + 7 + 21:
                    raise MalformedLine(line_no, "edge needs 2 ids, 7 pose values and 21 information entries")
                i, j = int(tok[1]), int(tok[2])
                vals = [float(v) for v in tok[3:]]
                info = np.zeros((6, 6))
                info[_TRIU] = vals[7:]
                info = info + np.triu(info, 1).T
                raw_edges.append((line_no, i, j, _pose_from_fields(vals[:7]), info))
            else:
                raise MalformedLine(line_no, f"unknown tag {tok[0]!r}")
        except ValueError as exc:
            if isinstance(exc, MalformedLine):
                raise
            raise MalformedLine(line_no, str(exc)) from exc

    graph = PoseGraph()
    for k in range(len(vertices)):
        if k not in vertices:
            raise MissingVertex(f"vertex ids must be contiguous from 0; {k} missing")
        graph.add_node(vertices[k])
    for line_no, i, j, meas, info in raw_edges:
        if i not in vertices or j not in vertices:
            raise MissingVertex(f"line {line_no}: edge {i}->{j} references a missing vertex")
        try:
            if classify_indices(i, j) is EdgeKind.ODOMETRY:
                graph.add_odometry_edge(i, j, meas, info)
            else:
                graph.add_loop_closure(i, j, meas, info)
        except (NonSpdInformation, NonChainOdometry, ValueError) as exc:
            raise MalformedLine(line_no, str(exc)) from exc
    return graph


def read_g2o(path) -> PoseGraph:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_g2o(text)


def save_g2o(graph: PoseGraph, path):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(write_g2o(graph))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def graph_to_dict(graph: PoseGraph) -> dict:
    return {
        "nodes": [
            {"id": n.id, "q_wxyz": n.estimate.q.tolist(), "t_xyz": n.estimate.t.tolist()}
            for n in graph.nodes
        ],
        "edges": [
            {
                "from_id": e.from_id,
                "to_id": e.to_id,
                "kind": e.kind.value,
                "q_wxyz": e.measurement.q.tolist(),
                "t_xyz": e.measurement.t.tolist(),
                "information": e.information.tolist(),
            }
            for e in graph.edges
        ],
    }


def graph_from_dict(data: dict) -> PoseGraph:
    graph = PoseGraph()
    for n in data["nodes"]:
        graph.add_node(Pose(n["q_wxyz"], n["t_xyz"]), node_id=n["id"])
    for e in data["edges"]:
        edge = PoseEdge(e["from_id"], e["to_id"], Pose(e["q_wxyz"], e["t_xyz"]), e["information"], EdgeKind(e["kind"]))
        graph.add_edge(edge)
    return graph


def dump_graph_json(graph: PoseGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh, indent=1)
