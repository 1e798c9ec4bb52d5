import numpy as np
import pytest
from hypothesis import given, settings
from scipy.stats import wishart

from conftest import random_pose, seeds
from vprcalib.errors import MalformedLine, MissingVertex, NonChainOdometry, NonSpdInformation, UnknownNode
from vprcalib.geometry import Pose, compose
from vprcalib.posegraph import (
    DEFAULT_LOOP_INFORMATION,
    EdgeKind,
    PoseGraph,
    chain_initialize,
    classify_indices,
    graph_from_dict,
    graph_to_dict,
    odometry_from_graph,
    parse_g2o,
    read_g2o,
    save_g2o,
    trajectory_rmse,
    write_g2o,
)


def random_graph(rng, n=None, loops=None):
    n = n or int(rng.integers(2, 30))
    odo = [(random_pose(rng, 0.5, 1.0), wishart.rvs(10, np.eye(6), random_state=rng)) for _ in range(n - 1)]
    g = chain_initialize(odo)
    g = g.with_estimates([random_pose(rng) for _ in range(n)])
    for _ in range(loops if loops is not None else int(rng.integers(0, 10))):
        i, j = sorted(rng.choice(n, 2, replace=False))
        if j - i > 1:
            g.add_loop_closure(int(i), int(j), random_pose(rng), wishart.rvs(8, np.eye(6), random_state=rng))
    return g


def assert_graphs_identical(a, b):
    assert [n.id for n in a.nodes] == [n.id for n in b.nodes]
    for x, y in zip(a.nodes, b.nodes):
        assert np.array_equal(x.estimate.q, y.estimate.q) and np.array_equal(x.estimate.t, y.estimate.t)
    assert len(a.edges) == len(b.edges)
    for x, y in zip(a.edges, b.edges):
        assert (x.from_id, x.to_id, x.kind) == (y.from_id, y.to_id, y.kind)
        assert np.array_equal(x.measurement.q, y.measurement.q)
        assert np.array_equal(x.measurement.t, y.measurement.t)
        assert np.array_equal(x.information, y.information)


def test_add_loop_edge_to_chain():
    g = chain_initialize([Pose.identity()] * 99)
    g.add_loop_closure(0, 50, Pose.identity())
    assert len(g.loop_edge_indices) == 1
    g.validate()


def test_edge_errors():
    g = chain_initialize([Pose.identity()] * 9)
    with pytest.raises(NonChainOdometry):
        g.add_odometry_edge(3, 5, Pose.identity())
    with pytest.raises(NonSpdInformation):
        g.add_loop_closure(0, 5, Pose.identity(), np.zeros((6, 6)))
    with pytest.raises(UnknownNode):
        g.add_loop_closure(0, 50, Pose.identity())
    with pytest.raises(ValueError):
        g.add_loop_closure(3, 4, Pose.identity())
    asym = np.eye(6)
    asym[0, 1] = 0.1
    with pytest.raises(NonSpdInformation):
        g.add_loop_closure(0, 5, Pose.identity(), asym)


def test_chain_initialize_examples(rng):
    g = chain_initialize([Pose.identity()] * 4)
    assert all(p.allclose(Pose.identity(), atol=0) for p in g.estimates())
    g = chain_initialize([Pose(np.array([1.0, 0, 0, 0]), [1, 0, 0])] * 5)
    np.testing.assert_array_equal(g.nodes[5].estimate.t, [5, 0, 0])
    odo = [random_pose(rng) for _ in range(40)]
    g = chain_initialize(odo)
    acc = Pose.identity()
    assert g.nodes[0].estimate.allclose(acc, atol=0)
    for k, m in enumerate(odo, start=1):
        acc = compose(acc, m)
        np.testing.assert_allclose(g.nodes[k].estimate.as_matrix(), acc.as_matrix(), atol=1e-12)
    with pytest.raises(ValueError):
        chain_initialize([])


def test_single_vertex_round_trip():
    g = PoseGraph()
    g.add_node(Pose.identity())
    back = parse_g2o(write_g2o(g))
    assert_graphs_identical(g, back)


def test_hand_written_fixture():
    info = " ".join(["1 0 0 0 0 0", "1 0 0 0 0", "1 0 0 0", "1 0 0", "1 0", "1"])
    text = "\n".join(
        [
            "# four poses on a square",
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1",
            "VERTEX_SE3:QUAT 1 1 0 0 0 0 0.70710678118654757 0.70710678118654757",
            "VERTEX_SE3:QUAT 2 1 1 0 0 0 1 0",
            "VERTEX_SE3:QUAT 3 0 1 0 0 0 -0.70710678118654757 0.70710678118654757",
            f"EDGE_SE3:QUAT 0 1 1 0 0 0 0 0.70710678118654757 0.70710678118654757 {info}",
            f"EDGE_SE3:QUAT 1 2 1 0 0 0 0 0.70710678118654757 0.70710678118654757 {info}",
            f"EDGE_SE3:QUAT 2 3 1 0 0 0 0 0.70710678118654757 0.70710678118654757 {info}",
            f"EDGE_SE3:QUAT 0 3 0 1 0 0 0 -0.70710678118654757 0.70710678118654757 {info}",
        ]
    )
    g = parse_g2o(text)
    kinds = [e.kind for e in g.edges]
    assert kinds.count(EdgeKind.ODOMETRY) == 3 and kinds.count(EdgeKind.LOOP_CLOSURE) == 1
    np.testing.assert_array_equal(g.edges[0].information, np.eye(6))
    # information entries fill the upper triangle row by row and are mirrored
    L = np.tril(np.arange(1.0, 37.0).reshape(6, 6)) / 10 + 3 * np.eye(6)
    spd = L @ L.T
    spd = np.triu(spd) + np.triu(spd, 1).T
    tri = " ".join(repr(float(v)) for v in spd[np.triu_indices(6)])
    g2 = parse_g2o(
        "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n"
        f"EDGE_SE3:QUAT 0 1 0 0 0 0 0 0 1 {tri}\n"
    )
    np.testing.assert_array_equal(g2.edges[0].information, spd)
    tri = " ".join(str(v) for v in range(1, 22))
    with pytest.raises(MalformedLine):
        parse_g2o(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n"
            f"EDGE_SE3:QUAT 0 1 0 0 0 0 0 0 1 {tri}\n"
        )


def test_parse_errors():
    with pytest.raises(MalformedLine) as exc:
        parse_g2o("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_XYZ 1 0 0 0\n")
    assert exc.value.line_no == 2
    with pytest.raises(MalformedLine):
        parse_g2o("VERTEX_SE3:QUAT 0 0 0 0 0 0 1\n")
    with pytest.raises(MalformedLine):
        parse_g2o("VERTEX_SE3:QUAT 0 0 0 x 0 0 0 1\n")
    info = " ".join(str(float(v)) for v in np.eye(6)[np.triu_indices(6)])
    with pytest.raises(MissingVertex):
        parse_g2o(f"VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 1 0 0 0 0 0 0 1 {info}\n")


def test_edge_kind_recoverable_from_indices():
    assert classify_indices(4, 5) is EdgeKind.ODOMETRY
    assert classify_indices(4, 9) is EdgeKind.LOOP_CLOSURE
    assert classify_indices(9, 4) is EdgeKind.LOOP_CLOSURE


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_g2o_round_trip_is_exact(seed):
    g = random_graph(np.random.default_rng(seed))
    text = write_g2o(g)
    back = parse_g2o(text)
    assert_graphs_identical(g, back)
    assert write_g2o(back) == text


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_json_round_trip_is_exact(seed):
    g = random_graph(np.random.default_rng(seed))
    assert_graphs_identical(g, graph_from_dict(graph_to_dict(g)))


def test_file_round_trip(tmp_path, rng):
    g = random_graph(rng, n=12, loops=4)
    save_g2o(g, tmp_path / "g.g2o")
    assert_graphs_identical(g, read_g2o(tmp_path / "g.g2o"))


def test_odometry_from_graph(rng):
    g = random_graph(rng, n=10, loops=3)
    odo = odometry_from_graph(g)
    assert len(odo) == 9
    for k, (m, info) in enumerate(odo):
        e = next(e for e in g.edges if e.kind is EdgeKind.ODOMETRY and e.from_id == k)
        assert m is e.measurement and info is e.information
    broken = PoseGraph()
    for _ in range(3):
        broken.add_node(Pose.identity())
    broken.add_odometry_edge(0, 1, Pose.identity())
    with pytest.raises(NonChainOdometry):
        odometry_from_graph(broken)


def test_trajectory_rmse_alignment(rng):
    truth = [random_pose(rng) for _ in range(20)]
    offset = random_pose(rng)
    moved = [compose(offset, p) for p in truth]
    assert trajectory_rmse(moved, truth) < 1e-12
    shifted = [Pose(p.q, p.t + [0.0, 0.0, 1.0]) for p in truth[1:]]
    assert abs(trajectory_rmse([truth[0], *shifted], truth) - np.sqrt(19 / 20)) < 1e-12


def test_default_loop_information():
    np.testing.assert_array_equal(np.diag(DEFAULT_LOOP_INFORMATION), [100, 100, 100, 400, 400, 400])
