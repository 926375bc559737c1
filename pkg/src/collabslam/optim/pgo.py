"""Levenberg-Marquardt pose-graph optimisation on SE(3).

Edge residual: ``r = log(Z^-1 * A^-1 * B)`` for an edge A->B with measured
relative pose Z.  Node updates are right-multiplicative, ``X <- X * exp(d)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import NotConnectedToGauge
from ..geom import Pose, adjoint, compose, inverse, se3_exp, se3_log, se3_right_jacobian_inv

log = logging.getLogger(__name__)

# rigid inter-camera constraints dominate odometry (calibrated offline)
KIND_WEIGHTS = {"odometry": 1.0, "loop": 1.0, "rigid": 100.0}


@dataclass
class Edge:
    a: object
    b: object
    measured: Pose  # a_from_b
    weight: float = 1.0
    kind: str = "odometry"


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    fixed: set = field(default_factory=set)

    def add_edge(self, a, b, measured: Pose, kind: str = "odometry", weight: float | None = None):
        w = KIND_WEIGHTS.get(kind, 1.0) if weight is None else weight
        self.edges.append(Edge(a, b, measured, w, kind))

    def components(self) -> list[set]:
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            ra, rb = find(e.a), find(e.b)
            if ra != rb:
                parent[ra] = rb
        groups: dict = {}
        for n in self.nodes:
            groups.setdefault(find(n), set()).add(n)
        return list(groups.values())


@dataclass
class PGOResult:
    poses: dict
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_costs: list
    lambdas: list


def edge_residual_and_jacobian(Xa: Pose, Xb: Pose, Z: Pose):
    """Residual (6,) and Jacobians (6, 6) w.r.t. right perturbations of a and b."""
    E = compose(inverse(Z), compose(inverse(Xa), Xb))
    r = se3_log(E)
    Jinv = se3_right_jacobian_inv(r)
    Jb = Jinv
    Ja = -Jinv @ adjoint(compose(inverse(Xb), Xa))
    return r, Ja, Jb


def edge_residual(Xa: Pose, Xb: Pose, Z: Pose) -> np.ndarray:
    return se3_log(compose(inverse(Z), compose(inverse(Xa), Xb)))


def graph_cost(nodes: dict, edges) -> float:
    total = 0.0
    for e in edges:
        r = edge_residual(nodes[e.a], nodes[e.b], e.measured)
        total += e.weight * float(r @ r)
    return total


def _check_gauge(g: PoseGraph) -> None:
    for e in g.edges:
        if e.a not in g.nodes or e.b not in g.nodes:
            raise KeyError(f"edge endpoint missing: {e.a} -> {e.b}")
    for comp in g.components():
        if not comp & g.fixed:
            raise NotConnectedToGauge(f"component of {len(comp)} nodes has no fixed node")


def optimize_pose_graph(g: PoseGraph, max_iters: int = 50, tol: float = 1e-12, lambda0: float = 1e-4) -> PGOResult:
    _check_gauge(g)
    poses = dict(g.nodes)
    var = [n for n in sorted(poses, key=_sort_key) if n not in g.fixed]
    index = {n: i for i, n in enumerate(var)}
    edges = [e for e in g.edges if e.a in index or e.b in index]
    cost = graph_cost(poses, edges)
    result = PGOResult(poses, cost, cost, 0, [cost], [])
    if not var or not edges or cost == 0.0:
        return result

    lam = lambda0
    n = 6 * len(var)
    it = 0
    while it < max_iters:
        it += 1
        rows, cols, vals = [], [], []
        res = np.zeros(6 * len(edges))
        for k, e in enumerate(edges):
            r, Ja, Jb = edge_residual_and_jacobian(poses[e.a], poses[e.b], e.measured)
            s = np.sqrt(e.weight)
            res[6 * k : 6 * k + 6] = s * r
            for node, J in ((e.a, Ja), (e.b, Jb)):
                j = index.get(node)
                if j is None:
                    continue
                rr, cc = np.meshgrid(np.arange(6 * k, 6 * k + 6), np.arange(6 * j, 6 * j + 6), indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append((s * J).ravel())
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(res), n)
        )
        H = (J.T @ J).tocsc()
        grad = J.T @ res
        diag = H.diagonal()
        improved = False
        while lam < 1e12:
            A = H + sp.diags(lam * np.maximum(diag, 1e-9))
            step = spla.spsolve(A.tocsc(), -grad)
            trial = dict(poses)
            for node, j in index.items():
                trial[node] = compose(poses[node], se3_exp(step[6 * j : 6 * j + 6]))
            new_cost = graph_cost(trial, edges)
            result.lambdas.append(lam)
            if new_cost < cost:
                lam = max(lam / 10.0, 1e-12)
                decrease = cost - new_cost
                poses, cost = trial, new_cost
                result.accepted_costs.append(cost)
                improved = True
                break
            lam *= 10.0
        if not improved or decrease < tol or cost < 1e-30:
            break
    result.poses = poses
    result.final_cost = cost
    result.iterations = it
    log.debug("pgo: %d nodes %d edges cost %.3g -> %.3g in %d its", len(poses), len(edges), result.initial_cost, cost, it)
    return result


def _sort_key(n):
    return n if isinstance(n, tuple) else (n,)
