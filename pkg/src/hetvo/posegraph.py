"""Covariance-weighted SE(3) pose graphs solved with Levenberg-Marquardt.

Edge residuals are ``log(Z^-1 X_from^-1 X_to)`` (twist ordering ``(rho,
phi)``) and node updates are right-multiplicative, ``X <- X exp(delta)``.
The 6x6 information of an edge weights its twist residual directly; learned
covariances live in the Tait-Bryan error chart, so this is a small-angle
approximation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .exceptions import EmptyInput, NotPositiveDefinite, SingularSystem
from .geometry import Pose, adjoint, compose, exp_map, integrate, inverse, log_map, se3_right_jacobian_inv

log = logging.getLogger(__name__)

DEFAULT_LOOP_SCALE = 1e-6


@dataclass(frozen=True)
class GraphNode:
    id: int
    pose: Pose
    fixed: bool = False


@dataclass(frozen=True)
class GraphEdge:
    frm: int
    to: int
    measurement: Pose
    information: np.ndarray

    def __post_init__(self):
        if self.frm == self.to:
            raise ValueError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information must be 6x6")
        if np.abs(info - info.T).max() > 1e-10 * max(1.0, np.abs(info).max()):
            raise NotPositiveDefinite("information matrix is not symmetric")
        if np.linalg.eigvalsh(0.5 * (info + info.T)).min() <= 0:
            raise NotPositiveDefinite("information matrix is not positive definite")
        object.__setattr__(self, "information", info)


@dataclass
class PoseGraph:
    nodes: list
    edges: list

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be contiguous from 0")
        for e in self.edges:
            if not (0 <= e.frm < len(ids) and 0 <= e.to < len(ids)):
                raise ValueError(f"edge {e.frm}->{e.to} references a missing node")

    @property
    def poses(self):
        return [n.pose for n in self.nodes]

    def with_poses(self, poses):
        return PoseGraph([replace(n, pose=p) for n, p in zip(self.nodes, poses)], list(self.edges))


@dataclass
class LMConfig:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    rel_tol: float = 1e-9
    grad_tol: float = 1e-12
    jacobian: str = "analytic"

    def __post_init__(self):
        if min(self.initial_lambda, self.lambda_up, self.lambda_down) <= 0:
            raise ValueError("LM factors must be positive")
        if self.jacobian not in ("analytic", "numeric"):
            raise ValueError("jacobian must be 'analytic' or 'numeric'")


@dataclass
class OptimizeStats:
    iterations: int
    initial_chi2: float
    final_chi2: float
    converged: bool
    chi2_history: list = field(default_factory=list)
    final_lambda: float = 0.0


def information_from_cov(sigma):
    sigma = np.asarray(sigma, dtype=float)
    try:
        c = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefinite("covariance is not positive definite") from None
    info = linalg.cho_solve(c, np.eye(len(sigma)))
    return 0.5 * (info + info.T)


def build_graph(relatives, loop=None, start: Pose | None = None) -> PoseGraph:
    """Chain graph from ``(measurement, covariance)`` pairs.

    ``loop`` is ``(z, covariance)`` for an edge from the last node back to
    node 0, where ``z`` is the pose of node 0 seen from the last node;
    a ``None`` covariance means ``1e-6 * I``.  Node 0 is fixed.
    """
    relatives = list(relatives)
    if not relatives:
        raise EmptyInput("need at least one relative measurement")
    poses = integrate([z for z, _ in relatives], start)
    nodes = [GraphNode(i, p, i == 0) for i, p in enumerate(poses)]
    edges = [GraphEdge(i, i + 1, z, information_from_cov(S)) for i, (z, S) in enumerate(relatives)]
    if loop is not None:
        z, S = loop
        S = DEFAULT_LOOP_SCALE * np.eye(6) if S is None else S
        edges.append(GraphEdge(len(poses) - 1, 0, z, information_from_cov(S)))
    return PoseGraph(nodes, edges)


def _residual(Z, Xi, Xj):
    return log_map(compose(inverse(Z), compose(inverse(Xi), Xj)))


def edge_residual(edge: GraphEdge, graph: PoseGraph):
    return _residual(edge.measurement, graph.nodes[edge.frm].pose, graph.nodes[edge.to].pose)


def edge_jacobians(edge: GraphEdge, graph: PoseGraph, kind="analytic"):
    """Jacobians of the residual w.r.t. right perturbations of both nodes."""
    Z, Xi, Xj = edge.measurement, graph.nodes[edge.frm].pose, graph.nodes[edge.to].pose
    if kind == "numeric":
        return _numeric_jacobians(Z, Xi, Xj)
    r = _residual(Z, Xi, Xj)
    Jr_inv = se3_right_jacobian_inv(r)
    Jj = Jr_inv
    Ji = -Jr_inv @ adjoint(compose(inverse(Xj), Xi))
    return Ji, Jj


def _numeric_jacobians(Z, Xi, Xj, h=1e-7):
    Ji = np.empty((6, 6))
    Jj = np.empty((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        Ep, Em = exp_map(d), exp_map(-d)
        Ji[:, k] = (_residual(Z, compose(Xi, Ep), Xj) - _residual(Z, compose(Xi, Em), Xj)) / (2 * h)
        Jj[:, k] = (_residual(Z, Xi, compose(Xj, Ep)) - _residual(Z, Xi, compose(Xj, Em))) / (2 * h)
    return Ji, Jj


def chi2(graph: PoseGraph) -> float:
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, graph)
        total += float(r @ e.information @ r)
    return total


def _linearize(graph, index, kind):
    dim = 6 * len(index)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, graph)
        Om = e.information
        total += float(r @ Om @ r)
        Ji, Jj = edge_jacobians(e, graph, kind)
        blocks = [(index.get(e.frm), Ji), (index.get(e.to), Jj)]
        blocks = [(6 * k, J) for k, J in blocks if k is not None]
        for a, Ja in blocks:
            JaT_Om = Ja.T @ Om
            g[a : a + 6] += JaT_Om @ r
            for b, Jb in blocks:
                H[a : a + 6, b : b + 6] += JaT_Om @ Jb
    return H, g, total


def _retract(graph, index, delta):
    poses = list(graph.poses)
    for node_id, k in index.items():
        poses[node_id] = compose(poses[node_id], exp_map(delta[6 * k : 6 * k + 6]))
    return graph.with_poses(poses)


def optimize(graph: PoseGraph, config: LMConfig | None = None):
    """Levenberg-Marquardt on the manifold.

    Returns ``(optimized_graph, OptimizeStats)``; the input graph is left
    untouched.  Steps are accepted only when chi2 decreases.
    """
    config = config or LMConfig()
    free = [n.id for n in graph.nodes if not n.fixed]
    if len(free) == len(graph.nodes):
        raise SingularSystem("no fixed node: the gauge freedom makes the system singular")
    index = {node_id: k for k, node_id in enumerate(free)}
    if not index:
        c = chi2(graph)
        return graph, OptimizeStats(0, c, c, True, [c])

    H, g, current = _linearize(graph, index, config.jacobian)
    try:
        linalg.cho_factor(H, lower=True)
    except linalg.LinAlgError:
        raise SingularSystem("normal equations are rank deficient (disconnected or unanchored nodes)") from None

    stats = OptimizeStats(0, current, current, False, [current])
    lam = config.initial_lambda
    while stats.iterations < config.max_iterations:
        if np.abs(g).max() < config.grad_tol or current == 0.0:
            stats.converged = True
            break
        stats.iterations += 1
        A = H + lam * np.diag(np.diag(H))
        try:
            delta = linalg.cho_solve(linalg.cho_factor(A, lower=True), -g)
        except linalg.LinAlgError:
            lam *= config.lambda_up
            continue
        candidate = _retract(graph, index, delta)
        new = chi2(candidate)
        if new < current:
            decrease = (current - new) / current
            graph, current = candidate, new
            stats.chi2_history.append(new)
            lam *= config.lambda_down
            log.debug("iter %d chi2 %.6e lambda %.1e", stats.iterations, new, lam)
            if decrease < config.rel_tol:
                stats.converged = True
                break
            H, g, _ = _linearize(graph, index, config.jacobian)
        else:
            lam *= config.lambda_up
            if lam > 1e16:
                # no descent direction left at machine precision
                stats.converged = True
                break
    stats.final_chi2 = current
    stats.final_lambda = lam
    return graph, stats
