"""Levenberg-Marquardt pose-graph optimization and GNC-TLS outlier rejection.

The objective is ``sum_e w_e * r_e^T Omega_e r_e`` with the edge residual
``r_e = log(Z_e^-1 * X_i^-1 * X_j)``.  Node 0 is held fixed to remove the
gauge freedom.  Only loop-closure edges carry GNC weights; odometry weights
are pinned to 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.stats import chi2

from .errors import SingularNormalEquations
from .geometry import Pose, Twist, se3_adjoint, se3_exp, se3_left_jacobian_inv, se3_log
from .posegraph import EdgeKind, PoseEdge, PoseGraph

log = logging.getLogger(__name__)


AUTO_DENSE_MAX_NODES = 50


@dataclass
class LMConfig:
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    step_tol: float = 1e-8
    rel_cost_tol: float = 1e-9
    # "dense", "sparse", or "auto": dense up to AUTO_DENSE_MAX_NODES nodes
    linear_solver: str = "auto"

    def __post_init__(self):
        if self.linear_solver not in ("dense", "sparse", "auto"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class GncConfig:
    chi2_quantile: float = 0.99
    mu_growth: float = 1.4
    mu_stop: float = 1e6
    weight_tol: float = 1e-3
    max_outer_iters: int = 1000
    lm: LMConfig = field(default_factory=LMConfig)

    @property
    def threshold_sq(self):
        """Inlier bound on the whitened squared residual (6 DoF chi-square quantile)."""
        return float(chi2.ppf(self.chi2_quantile, 6))


@dataclass
class ResidualEvaluation:
    edge_index: int | None
    residual: Twist
    whitened_norm_sq: float


@dataclass
class GncState:
    mu: float
    weights: dict  # loop-edge index -> weight
    iteration: int
    mu_history: list = field(default_factory=list)


@dataclass
class OptimizeReport:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    inlier_edges: list
    outlier_edges: list

    def to_dict(self):
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "initial_cost": float(self.initial_cost),
            "final_cost": float(self.final_cost),
            "inlier_edges": [int(k) for k in self.inlier_edges],
            "outlier_edges": [int(k) for k in self.outlier_edges],
        }


# --------------------------------------------------------------------------
# batched problem representation
# --------------------------------------------------------------------------


class _Problem:
    def __init__(self, edges, n):
        self.n = n
        self.src = np.array([e.from_id for e in edges], dtype=np.intp)
        self.dst = np.array([e.to_id for e in edges], dtype=np.intp)
        self.RZ = np.array([e.measurement.rotation for e in edges]).reshape(-1, 3, 3)
        self.tZ = np.array([e.measurement.t for e in edges]).reshape(-1, 3)
        self.info = np.array([e.information for e in edges]).reshape(-1, 6, 6)
        self.is_loop = np.array([e.kind is EdgeKind.LOOP_CLOSURE for e in edges], dtype=bool)

    def edge_weights(self, loop_weights):
        w = np.ones(len(self.src))
        if loop_weights is not None:
            w[self.is_loop] = loop_weights
        return w

    def residuals(self, R, t):
        Ri, Rj = R[self.src], R[self.dst]
        ti, tj = t[self.src], t[self.dst]
        RiT = np.swapaxes(Ri, -1, -2)
        Rrel = RiT @ Rj
        trel = np.einsum("eij,ej->ei", RiT, tj - ti)
        RZT = np.swapaxes(self.RZ, -1, -2)
        RE = RZT @ Rrel
        tE = np.einsum("eij,ej->ei", RZT, trel - self.tZ)
        return se3_log(RE, tE)

    def chi2(self, r):
        return np.einsum("ei,eij,ej->e", r, self.info, r)

    def jacobians(self, R, t, r):
        """Residual derivatives w.r.t. left perturbations of the two endpoints."""
        Ri = R[self.src]
        ti = t[self.src]
        RA = np.swapaxes(Ri @ self.RZ, -1, -2)
        tA = -np.einsum("eij,ej->ei", RA, np.einsum("eij,ej->ei", Ri, self.tZ) + ti)
        Jj = se3_left_jacobian_inv(r) @ se3_adjoint(RA, tA)
        return -Jj, Jj


def _to_arrays(poses):
    R = np.array([p.rotation for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    return R, t


def _to_poses(R, t):
    return [Pose.from_rt(Ri, ti) for Ri, ti in zip(R, t)]


def _retract(R, t, delta):
    """Left-multiplicative update of every node by its tangent step."""
    dR, dt = se3_exp(delta)
    return dR @ R, np.einsum("nij,nj->ni", dR, t) + dt


# --------------------------------------------------------------------------
# public helpers
# --------------------------------------------------------------------------


def residual(edge: PoseEdge, estimates, edge_index=None) -> ResidualEvaluation:
    """Residual of one edge given node estimates (a list of poses)."""
    R, t = _to_arrays([estimates[edge.from_id], estimates[edge.to_id]])
    prob = _Problem([PoseEdge(0, 1, edge.measurement, edge.information, edge.kind)], 2)
    r = prob.residuals(R, t)
    return ResidualEvaluation(edge_index, Twist.from_vector(r[0]), float(prob.chi2(r)[0]))


def evaluate_residuals(graph: PoseGraph, estimates=None):
    """Residual vectors and whitened squared norms for every edge."""
    prob = _Problem(graph.edges, len(graph.nodes))
    R, t = _to_arrays(graph.estimates() if estimates is None else estimates)
    r = prob.residuals(R, t)
    return r, prob.chi2(r)


def total_cost(graph: PoseGraph, estimates=None, loop_weights=None) -> float:
    prob = _Problem(graph.edges, len(graph.nodes))
    R, t = _to_arrays(graph.estimates() if estimates is None else estimates)
    r = prob.residuals(R, t)
    return float(np.sum(prob.edge_weights(loop_weights) * prob.chi2(r)))


def edge_jacobians(graph: PoseGraph, estimates=None):
    """Analytic ``(d r / d delta_from, d r / d delta_to)`` per edge, each ``(E, 6, 6)``."""
    prob = _Problem(graph.edges, len(graph.nodes))
    R, t = _to_arrays(graph.estimates() if estimates is None else estimates)
    r = prob.residuals(R, t)
    return prob.jacobians(R, t, r)


def cost_gradient(graph: PoseGraph, estimates=None, loop_weights=None):
    """Gradient of :func:`total_cost` w.r.t. left perturbations, shape ``(N, 6)``."""
    prob = _Problem(graph.edges, len(graph.nodes))
    R, t = _to_arrays(graph.estimates() if estimates is None else estimates)
    r = prob.residuals(R, t)
    Ji, Jj = prob.jacobians(R, t, r)
    w = prob.edge_weights(loop_weights)
    Wr = 2.0 * w[:, None] * np.einsum("eij,ej->ei", prob.info, r)
    g = np.zeros((prob.n, 6))
    np.add.at(g, prob.src, np.einsum("eji,ej->ei", Ji, Wr))
    np.add.at(g, prob.dst, np.einsum("eji,ej->ei", Jj, Wr))
    return g


def _normal_equations(prob, R, t, w):
    r = prob.residuals(R, t)
    Ji, Jj = prob.jacobians(R, t, r)
    WO = w[:, None, None] * prob.info
    JiT = np.swapaxes(Ji, 1, 2)
    JjT = np.swapaxes(Jj, 1, 2)
    blocks = [
        (prob.src, prob.src, JiT @ WO @ Ji),
        (prob.src, prob.dst, JiT @ WO @ Jj),
        (prob.dst, prob.src, JjT @ WO @ Ji),
        (prob.dst, prob.dst, JjT @ WO @ Jj),
    ]
    off = np.arange(6)
    rows, cols, vals = [], [], []
    for bi, bj, B in blocks:
        rows.append((6 * bi[:, None, None] + off[None, :, None]).repeat(6, axis=2).ravel())
        cols.append((6 * bj[:, None, None] + off[None, None, :]).repeat(6, axis=1).ravel())
        vals.append(B.ravel())
    size = 6 * prob.n
    H = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsc()
    WOr = np.einsum("eij,ej->ei", WO, r)
    g = np.zeros((prob.n, 6))
    np.add.at(g, prob.src, np.einsum("eji,ej->ei", Ji, WOr))
    np.add.at(g, prob.dst, np.einsum("eji,ej->ei", Jj, WOr))
    return H, g.ravel()


def _solve(H, g, lam, solver):
    # node 0 is the gauge anchor: drop its six rows and columns
    H = H[6:, 6:]
    g = g[6:]
    if solver == "auto":
        solver = "dense" if H.shape[0] <= 6 * AUTO_DENSE_MAX_NODES else "sparse"
    if solver == "sparse":
        d = H.diagonal()
        A = (H + scipy.sparse.diags(lam * d)).tocsc()
        try:
            lu = scipy.sparse.linalg.splu(A)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc
        step = lu.solve(-g)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite sparse solve")
    else:
        A = H.toarray()
        A[np.diag_indices_from(A)] *= 1.0 + lam
        c = scipy.linalg.cho_factor(A, check_finite=False)
        step = scipy.linalg.cho_solve(c, -g, check_finite=False)
    return np.concatenate([np.zeros(6), step])


def _lm(prob: _Problem, R, t, w, config: LMConfig):
    r = prob.residuals(R, t)
    cost = float(np.sum(w * prob.chi2(r)))
    initial = cost
    lam = config.lambda_init
    converged = False
    it = 0
    if prob.n < 2 or cost == 0.0:
        return R, t, initial, cost, True, 0
    while it < config.max_iters:
        it += 1
        H, g = _normal_equations(prob, R, t, w)
        while True:
            try:
                delta = _solve(H, g, lam, config.linear_solver)
            except np.linalg.LinAlgError:
                lam *= config.lambda_factor
                if lam > config.lambda_max:
                    raise SingularNormalEquations("damping escalation failed") from None
                continue
            delta = delta.reshape(-1, 6)
            Rn, tn = _retract(R, t, delta)
            new_cost = float(np.sum(w * prob.chi2(prob.residuals(Rn, tn))))
            if new_cost <= cost:
                break
            lam *= config.lambda_factor
            if lam > config.lambda_max:
                # no descent direction left at any damping: stationary point
                return R, t, initial, cost, True, it
        step_norm = float(np.linalg.norm(delta))
        decrease = cost - new_cost
        R, t, cost = Rn, tn, new_cost
        lam = max(lam / config.lambda_factor, 1e-15)
        if step_norm < config.step_tol or cost == 0.0 or decrease <= config.rel_cost_tol * max(cost + decrease, 1e-300):
            converged = True
            break
    return R, t, initial, cost, converged, it


def optimize_lm(graph: PoseGraph, weights=None, config: LMConfig | None = None, initial=None):
    """Weighted Levenberg-Marquardt solve.

    Parameters
    ----------
    graph : PoseGraph
        Graph whose node estimates are the starting point (unless ``initial``).
    weights : array-like, optional
        One weight per loop-closure edge, in ``graph.loop_edge_indices`` order.
    config : LMConfig, optional
    initial : list of Pose, optional
        Overrides the starting estimates stored in the graph.

    Returns
    -------
    estimates : list of Pose
    report : OptimizeReport
        With every loop edge listed as an inlier.
    """
    config = config or LMConfig()
    prob = _Problem(graph.edges, len(graph.nodes))
    R, t = _to_arrays(graph.estimates() if initial is None else initial)
    w = prob.edge_weights(None if weights is None else np.asarray(weights, dtype=float))
    R, t, c0, c1, conv, it = _lm(prob, R, t, w, config)
    report = OptimizeReport(conv, it, c0, c1, list(graph.loop_edge_indices), [])
    return _to_poses(R, t), report


# --------------------------------------------------------------------------
# graduated non-convexity
# --------------------------------------------------------------------------


def tls_weights(r2, threshold_sq, mu):
    """Closed-form GNC weights for the truncated-least-squares surrogate."""
    r2 = np.asarray(r2, dtype=float)
    upper = (mu + 1.0) / mu * threshold_sq
    lower = mu / (mu + 1.0) * threshold_sq
    with np.errstate(divide="ignore"):
        mid = np.sqrt(threshold_sq * mu * (mu + 1.0) / r2) - mu
    w = np.where(r2 >= upper, 0.0, np.where(r2 <= lower, 1.0, mid))
    return np.clip(w, 0.0, 1.0)


def initial_mu(max_r2, threshold_sq):
    denom = 2.0 * max_r2 - threshold_sq
    mu = threshold_sq / denom if denom > 0 else np.inf
    return max(mu, 1e-6)


def _tls_cost(prob, R, t, threshold_sq):
    c = prob.chi2(prob.residuals(R, t))
    c = np.where(prob.is_loop, np.minimum(c, threshold_sq), c)
    return float(np.sum(c))


def gnc_solve(graph: PoseGraph, config: GncConfig | None = None, initial=None):
    """Robust pose-graph optimization by GNC with a TLS cost.

    Returns ``(estimates, state, report)``.  ``report.initial_cost`` and
    ``report.final_cost`` are truncated-least-squares costs at the starting
    and final estimates; loop edges whose final weight is >= 0.5 are inliers.
    """
    config = config or GncConfig()
    eps2 = config.threshold_sq
    prob = _Problem(graph.edges, len(graph.nodes))
    loop_idx = np.array(graph.loop_edge_indices, dtype=np.intp)
    R, t = _to_arrays(graph.estimates() if initial is None else initial)
    init_cost = _tls_cost(prob, R, t, eps2)

    w = np.ones(len(loop_idx))
    R, t, _, _, conv, it = _lm(prob, R, t, prob.edge_weights(w), config.lm)
    total_it = it
    if len(loop_idx) == 0:
        state = GncState(mu=np.inf, weights={}, iteration=0)
        report = OptimizeReport(conv, total_it, init_cost, _tls_cost(prob, R, t, eps2), [], [])
        return _to_poses(R, t), state, report

    r2 = prob.chi2(prob.residuals(R, t))[prob.is_loop]
    mu = initial_mu(float(np.max(r2)), eps2)
    history = []
    outer = 0
    stable = False
    if np.isinf(mu):
        # every loop edge already fits within the inlier bound
        stable = True
    while not stable and outer < config.max_outer_iters:
        history.append(mu)
        w_new = tls_weights(r2, eps2, mu)
        change = float(np.max(np.abs(w_new - w)))
        w = w_new
        R, t, _, _, conv, it = _lm(prob, R, t, prob.edge_weights(w), config.lm)
        total_it += it
        r2 = prob.chi2(prob.residuals(R, t))[prob.is_loop]
        outer += 1
        binary = bool(np.all((w <= config.weight_tol) | (w >= 1.0 - config.weight_tol)))
        if mu >= config.mu_stop or (change < config.weight_tol and binary):
            stable = True
            break
        mu *= config.mu_growth
    log.debug("gnc: %d outer iterations, final mu %.3g", outer, mu)

    inliers = [int(k) for k, wk in zip(loop_idx, w) if wk >= 0.5]
    outliers = [int(k) for k, wk in zip(loop_idx, w) if wk < 0.5]
    state = GncState(mu=mu, weights={int(k): float(wk) for k, wk in zip(loop_idx, w)}, iteration=outer, mu_history=history)
    report = OptimizeReport(conv and stable, total_it, init_cost, _tls_cost(prob, R, t, eps2), inliers, outliers)
    return _to_poses(R, t), state, report


def classify_matches(report: OptimizeReport) -> dict:
    """Map each loop-edge index to ``"inlier"`` or ``"outlier"``."""
    labels = {int(k): "inlier" for k in report.inlier_edges}
    labels.update({int(k): "outlier" for k in report.outlier_edges})
    return dict(sorted(labels.items()))
