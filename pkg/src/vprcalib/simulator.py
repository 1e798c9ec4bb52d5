"""Synthetic single-traversal worlds with known ground truth.

A world is a planar trajectory embedded in SE(3) that revisits its own path,
a cloud of 3D landmarks along the path, noisy odometry, per-keyframe landmark
observations, and global descriptors.

Descriptors are built from three parts:

* a place signature, a random-Fourier-feature field over the 2D position, so
  descriptor distance grows smoothly with distance between places;
* an appearance nuisance living in a fixed low-dimensional subspace (shared
  by all worlds of the same ``domain_seed``) that drifts slowly with time,
  standing in for the domain shift a pretrained network suffers from;
* isotropic noise.

With ``unit_norm`` (the default) the sum is scaled to unit length, as the
outputs of common global-descriptor networks are.

Aliased pairs are distant keyframes forced onto the same place signature.
With ``alias_geometry`` the landmarks around the first keyframe are also
duplicated, rigidly moved, around the second, so registration between the
two succeeds with a wrong relative pose.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidConfig
from .geometry import Pose, between, compose, exp
from .posegraph import DEFAULT_LOOP_INFORMATION, PoseGraph, chain_initialize
from .registration import KeyframeObservations

TRAJECTORIES = ("loop", "figure-eight", "grid")


@dataclass
class WorldConfig:
    trajectory: str = "loop"
    n_keyframes: int = 400
    laps: float = 4.0
    spacing: float = 4.0
    lap_jitter: float = 0.3
    landmark_density: float = 6.0
    landmark_spread: float = 2.0
    landmark_height: float = 2.0
    sensing_radius: float = 3.0
    observation_noise: float = 0.005
    odom_sigma_t: float = 0.02
    odom_sigma_r: float = 0.002
    descriptor_dim: int = 16
    place_length_scale: float = 2.0
    place_signature_noise: float = 0.03
    nuisance_dim: int = 4
    nuisance_scale: float = 0.5
    nuisance_period: int = 20
    unit_norm: bool = True
    aliasing_pairs: int = 0
    alias_geometry: bool = True
    alias_min_distance: float = 20.0
    revisit_radius: float = 3.0
    window: int = 10
    seed: int = 0
    domain_seed: int = 0

    def validate(self):
        if self.trajectory not in TRAJECTORIES:
            raise InvalidConfig(f"trajectory must be one of {TRAJECTORIES}")
        if self.n_keyframes < 2:
            raise InvalidConfig("n_keyframes must be >= 2")
        sigmas = (
            self.lap_jitter,
            self.observation_noise,
            self.odom_sigma_t,
            self.odom_sigma_r,
            self.place_signature_noise,
            self.nuisance_scale,
        )
        if any(s < 0 for s in sigmas):
            raise InvalidConfig("noise levels must be >= 0")
        if self.laps <= 0 or self.spacing <= 0 or self.sensing_radius <= 0:
            raise InvalidConfig("laps, spacing and sensing_radius must be > 0")
        if self.landmark_density < 0 or self.landmark_spread <= 0:
            raise InvalidConfig("landmark density must be >= 0 and spread > 0")
        if not 0 <= self.nuisance_dim < self.descriptor_dim:
            raise InvalidConfig("need 0 <= nuisance_dim < descriptor_dim")
        if self.nuisance_period < 1:
            raise InvalidConfig("nuisance_period must be >= 1")
        if self.aliasing_pairs < 0:
            raise InvalidConfig("aliasing_pairs must be >= 0")
        return self


@dataclass
class GroundTruth:
    poses: list
    revisit_pairs: set
    aliased_pairs: list
    revisit_radius: float = 3.0
    window: int = 10

    @property
    def positions(self):
        return np.array([p.t for p in self.poses])

    def to_dict(self):
        return {
            "version": 1,
            "revisit_radius": self.revisit_radius,
            "window": self.window,
            "poses": [{"q_wxyz": p.q.tolist(), "t_xyz": p.t.tolist()} for p in self.poses],
            "revisit_pairs": sorted([list(map(int, p)) for p in self.revisit_pairs]),
            "aliased_pairs": [list(map(int, p)) for p in self.aliased_pairs],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            poses=[Pose(p["q_wxyz"], p["t_xyz"]) for p in data["poses"]],
            revisit_pairs={tuple(p) for p in data["revisit_pairs"]},
            aliased_pairs=[tuple(p) for p in data["aliased_pairs"]],
            revisit_radius=data.get("revisit_radius", 3.0),
            window=data.get("window", 10),
        )


@dataclass
class World:
    config: WorldConfig
    descriptors: np.ndarray
    observations: list
    odometry: list  # (Pose, information) per step
    ground_truth: GroundTruth
    landmarks: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return len(self.observations)

    def initial_graph(self) -> PoseGraph:
        return chain_initialize(self.odometry)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def _lap_polyline(kind):
    """Dense unit-scale polyline of one lap and whether it is closed."""
    if kind == "loop":
        s = np.linspace(0.0, 2 * np.pi, 2001)
        return np.stack([np.cos(s), np.sin(s)], axis=1)
    if kind == "figure-eight":
        s = np.linspace(0.0, 2 * np.pi, 4001)
        return np.stack([np.sin(s), np.sin(s) * np.cos(s)], axis=1)
    # city blocks; the middle street is driven twice per lap
    pts = np.array([[0, 0], [2, 0], [2, 1], [0, 1], [0, 2], [2, 2], [2, 1], [0, 1], [0, 0]], dtype=float)
    return pts


def _arc_param(poly):
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _sample_path(poly, cum, s):
    """Position and heading at arc lengths ``s`` (within one lap)."""
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
    seg_len = cum[idx + 1] - cum[idx]
    frac = np.where(seg_len > 0, (s - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    d = poly[idx + 1] - poly[idx]
    pos = poly[idx] + frac[:, None] * d
    yaw = np.arctan2(d[:, 1], d[:, 0])
    return pos, yaw


def true_trajectory(config: WorldConfig, rng):
    n = config.n_keyframes
    lap_len = n * config.spacing / config.laps
    poly = _lap_polyline(config.trajectory)
    cum = _arc_param(poly)
    poly = poly * (lap_len / cum[-1])
    cum = cum * (lap_len / cum[-1])

    s = np.arange(n) * config.spacing
    lap = np.floor(s / lap_len).astype(int)
    n_laps = int(lap.max()) + 1
    along = rng.uniform(-config.lap_jitter, config.lap_jitter, n_laps)
    lateral = rng.uniform(-config.lap_jitter, config.lap_jitter, n_laps)
    along[0] = lateral[0] = 0.0
    s_lap = np.mod(s + along[lap], lap_len)
    pos, yaw = _sample_path(poly, cum, s_lap)
    normal = np.stack([-np.sin(yaw), np.cos(yaw)], axis=1)
    pos = pos + lateral[lap][:, None] * normal
    return [Pose.planar(x, y, th) for (x, y), th in zip(pos, yaw)]


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _landmarks(config, positions, rng):
    xy = positions[:, :2]
    pad = config.landmark_spread + 1.0
    lo, hi = xy.min(axis=0) - pad, xy.max(axis=0) + pad
    area = float(np.prod(hi - lo))
    areal = config.landmark_density / (2.0 * config.landmark_spread)
    count = rng.poisson(areal * area)
    cand = rng.uniform(lo, hi, size=(count, 2))
    near, _ = cKDTree(xy).query(cand)
    keep = cand[near <= config.landmark_spread]
    z = rng.uniform(-0.5 * config.landmark_height, config.landmark_height, len(keep))
    return np.column_stack([keep, z])


def _pick_aliased_pairs(config, positions, rng):
    n = len(positions)
    pairs = []
    used = []
    tries = 0
    while len(pairs) < config.aliasing_pairs and tries < 10000:
        tries += 1
        a, b = sorted(rng.choice(n, size=2, replace=False))
        if np.linalg.norm(positions[a] - positions[b]) < config.alias_min_distance:
            continue
        # keep each trap away from the others and from every revisit of them
        spots = [positions[a], positions[b]]
        if any(np.linalg.norm(s - u) < 3 * config.sensing_radius + 1.0 for s in spots for u in used):
            continue
        pairs.append((int(a), int(b)))
        used.extend(spots)
    if len(pairs) < config.aliasing_pairs:
        raise InvalidConfig("could not place the requested number of aliased pairs")
    return pairs


def _place_field(config, rng):
    m = config.descriptor_dim - config.nuisance_dim
    freqs = rng.normal(scale=1.0 / config.place_length_scale, size=(m, 2))
    phases = rng.uniform(0.0, 2 * np.pi, m)
    return lambda xy: np.sqrt(2.0 / m) * np.cos(xy @ freqs.T + phases)


def _domain_basis(config):
    rng = np.random.default_rng(config.domain_seed)
    Q, _ = np.linalg.qr(rng.normal(size=(config.descriptor_dim, config.descriptor_dim)))
    m = config.descriptor_dim - config.nuisance_dim
    return Q[:, :m], Q[:, m:]


def _nuisance(config, n, rng):
    k = config.nuisance_dim
    if k == 0:
        return np.zeros((n, 0))
    knots = np.arange(0, n + config.nuisance_period, config.nuisance_period)
    coeffs = rng.normal(size=(len(knots), k)) / np.sqrt(k)
    idx = np.arange(n)
    out = np.column_stack([np.interp(idx, knots, coeffs[:, c]) for c in range(k)])
    return config.nuisance_scale * out


def _odometry_information(config):
    st = max(config.odom_sigma_t, 1e-3)
    sr = max(config.odom_sigma_r, 1e-4)
    return np.diag([st**-2] * 3 + [sr**-2] * 3)


def revisit_pairs(positions, radius, window):
    tree = cKDTree(positions)
    return {(int(i), int(j)) for i, j in tree.query_pairs(radius) if abs(i - j) > window}


def generate(config: WorldConfig) -> World:
    """Build a world deterministically from ``config`` (and its seeds)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_keyframes

    poses = true_trajectory(config, rng)
    positions = np.array([p.t for p in poses])

    odom_info = _odometry_information(config)
    sig = np.array([config.odom_sigma_t] * 3 + [config.odom_sigma_r] * 3)
    odometry = []
    for k in range(n - 1):
        noise = exp(rng.normal(size=6) * sig)
        odometry.append((compose(between(poses[k], poses[k + 1]), noise), odom_info))

    landmarks = _landmarks(config, positions, rng)
    ids = np.arange(len(landmarks))
    aliased = _pick_aliased_pairs(config, positions, rng) if config.aliasing_pairs else []

    phys_pts, phys_ids = [landmarks], [ids]
    if config.alias_geometry and len(landmarks):
        tree = cKDTree(landmarks)
        for a, b in aliased:
            near = np.array(sorted(tree.query_ball_point(positions[a], config.sensing_radius + 1.0)), dtype=int)
            move = compose(poses[b], poses[a].inverse())
            phys_pts.append(move.act(landmarks[near]).reshape(-1, 3))
            phys_ids.append(ids[near])
    all_pts = np.concatenate(phys_pts)
    all_ids = np.concatenate(phys_ids)

    observations = []
    tree = cKDTree(all_pts) if len(all_pts) else None
    for k, pose in enumerate(poses):
        seen = np.array(sorted(tree.query_ball_point(pose.t, config.sensing_radius)), dtype=int) if tree else np.zeros(0, int)
        lids = all_ids[seen]
        # a frame never sees a landmark and its twin together: twins sit far away
        _, first = np.unique(lids, return_index=True)
        seen, lids = seen[first], lids[first]
        local = pose.inverse().act(all_pts[seen]).reshape(-1, 3)
        local = local + rng.normal(scale=config.observation_noise, size=local.shape)
        observations.append(KeyframeObservations(k, lids, local))

    place = _place_field(config, rng)
    Bp, Bn = _domain_basis(config)
    sig_xy = positions[:, :2].copy()
    for a, b in aliased:
        sig_xy[b] = positions[a, :2]
    descriptors = place(sig_xy) @ Bp.T + _nuisance(config, n, rng) @ Bn.T
    descriptors = descriptors + rng.normal(scale=config.place_signature_noise, size=descriptors.shape)
    if config.unit_norm:
        norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
        descriptors = descriptors / np.where(norms > 0, norms, 1.0)

    gt = GroundTruth(
        poses=poses,
        revisit_pairs=revisit_pairs(positions, config.revisit_radius, config.window),
        aliased_pairs=aliased,
        revisit_radius=config.revisit_radius,
        window=config.window,
    )
    return World(config, descriptors, observations, odometry, gt, landmarks)


def true_label(ground_truth: GroundTruth, i, j, radius=None):
    """``"positive"`` if the true positions of ``i`` and ``j`` lie within ``radius``."""
    radius = ground_truth.revisit_radius if radius is None else radius
    d = np.linalg.norm(ground_truth.poses[i].t - ground_truth.poses[j].t)
    return "positive" if d <= radius else "negative"


def config_to_json(config: WorldConfig) -> str:
    return json.dumps(asdict(config), indent=1, sort_keys=True)


# --------------------------------------------------------------------------
# pose-graph scenarios for the robust back end
# --------------------------------------------------------------------------


@dataclass
class GraphScenario:
    graph: PoseGraph
    truth: list
    outlier_edges: set  # indices into graph.edges


def _random_rotation_vector(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def pose_graph_scenario(
    n_keyframes=200,
    outlier_fraction=0.2,
    n_wrong=None,
    seed=0,
    loop_sigma_t=0.03,
    loop_sigma_r=0.01,
    loop_information=DEFAULT_LOOP_INFORMATION,
    loops_per_revisit=1,
    config: WorldConfig | None = None,
) -> GraphScenario:
    """Odometry chain plus correct and wrong loop closures with known labels.

    Correct loop closures join revisit pairs with a slightly perturbed true
    relative pose.  Wrong ones alternate between a random relative pose
    between random distant keyframes and an aliasing-style near-identity
    measurement between distant keyframes.  ``n_wrong`` overrides the count
    implied by ``outlier_fraction``.
    """
    config = config or WorldConfig(n_keyframes=n_keyframes, seed=seed, nuisance_scale=0.0)
    rng = np.random.default_rng(config.seed)
    poses = true_trajectory(config, rng)
    positions = np.array([p.t for p in poses])
    n = len(poses)
    sig = np.array([config.odom_sigma_t] * 3 + [config.odom_sigma_r] * 3)
    odom_info = _odometry_information(config)
    odometry = [
        (compose(between(poses[k], poses[k + 1]), exp(rng.normal(size=6) * sig)), odom_info) for k in range(n - 1)
    ]
    graph = chain_initialize(odometry)

    tree = cKDTree(positions)
    lsig = np.array([loop_sigma_t] * 3 + [loop_sigma_r] * 3)
    for j in range(n):
        near = [i for i in tree.query_ball_point(positions[j], config.revisit_radius) if i < j - config.window]
        if not near:
            continue
        near = sorted(near, key=lambda i: np.linalg.norm(positions[i] - positions[j]))[:loops_per_revisit]
        for i in near:
            meas = compose(between(poses[i], poses[j]), exp(rng.normal(size=6) * lsig))
            graph.add_loop_closure(i, j, meas, loop_information)

    n_good = len(graph.loop_edge_indices)
    if n_wrong is None:
        n_wrong = int(round(outlier_fraction * n_good / (1.0 - outlier_fraction))) if outlier_fraction < 1 else 0
    far = [
        (i, j)
        for i in range(n)
        for j in range(i + config.window + 1, n)
        if np.linalg.norm(positions[i] - positions[j]) >= 4 * config.revisit_radius
    ]
    if n_wrong > len(far):
        raise InvalidConfig(f"only {len(far)} keyframe pairs are far enough apart for {n_wrong} wrong edges")
    outliers = set()
    used = set()
    while len(outliers) < n_wrong:
        i, j = far[int(rng.integers(len(far)))]
        if (i, j) in used:
            continue
        used.add((i, j))
        if len(outliers) % 2 == 0:
            meas = Pose(exp(np.r_[np.zeros(3), _random_rotation_vector(rng, 3.0)]).q, rng.uniform(-10, 10, 3))
        else:
            meas = exp(rng.normal(size=6) * lsig)
        outliers.add(graph.add_loop_closure(int(i), int(j), meas, loop_information))
    return GraphScenario(graph, poses, outliers)
