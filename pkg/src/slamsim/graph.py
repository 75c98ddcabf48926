"""Pose graph: typed factors, robust Levenberg-Marquardt, replicated deltas.

Every robot holds its own :class:`PoseGraph`. Structure arrives through
:func:`apply_delta`, which is idempotent and buffers deltas whose
prerequisite nodes have not arrived yet, so replicas converge to the same
:func:`digest` regardless of delivery order.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import (
    Pose3,
    Rotation,
    adjoint_batch,
    between,
    check_information,
    compose,
    inverse,
    log,
    matrices_to_quats,
    se3_exp_batch,
    se3_log_batch,
    se3_right_jacobian_inv_batch,
)

logger = logging.getLogger(__name__)

PRIOR = "prior_anchor"
FRAME_SWITCH = "frame_switch"
LOOP_CLOSURE = "loop_closure"
ROBOT_DETECTION = "robot_detection"
FACTOR_KINDS = (PRIOR, FRAME_SWITCH, LOOP_CLOSURE, ROBOT_DETECTION)
ROBUST_KINDS = frozenset({LOOP_CLOSURE, ROBOT_DETECTION})

HUBER_K = 1.0
HARD_ANCHOR_INFO = 1e9
LANDER_ID = 0


class GraphError(Exception):
    pass


class OptimizationError(GraphError):
    pass


class NodeId(NamedTuple):
    robot: int
    submap: int

    def __str__(self):
        return f"({self.robot},{self.submap})"


LANDER_NODE = NodeId(LANDER_ID, 0)


@dataclass(frozen=True, eq=False)
class Factor:
    kind: str
    endpoints: tuple
    measurement: Pose3
    information: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        ends = tuple(NodeId(*e) for e in self.endpoints)
        if len(ends) != (1 if self.kind == PRIOR else 2):
            raise ValueError(f"{self.kind} factor has wrong number of endpoints")
        if self.kind == ROBOT_DETECTION and ends[0].robot == ends[1].robot:
            raise ValueError("robot_detection endpoints must belong to different robots")
        if self.kind == FRAME_SWITCH and (ends[0].robot != ends[1].robot or ends[1].submap != ends[0].submap + 1):
            raise ValueError("frame_switch endpoints must be consecutive submaps of one robot")
        if self.kind == LOOP_CLOSURE and ends[0] == ends[1]:
            raise ValueError("loop_closure endpoints must differ")
        info = np.array(self.information, dtype=float)
        check_information(info)
        info.setflags(write=False)
        object.__setattr__(self, "endpoints", ends)
        object.__setattr__(self, "information", info)

    def key(self) -> str:
        """Canonical text form; equal keys mean identical factors."""
        ends = " ".join(f"{e.robot} {e.submap}" for e in self.endpoints)
        meas = " ".join(repr(float(v)) for v in self.measurement.to_vector())
        info = " ".join(repr(float(v)) for v in self.information.ravel())
        return f"{self.kind} {self.time!r} {ends} {meas} {info}"


@dataclass
class OptOptions:
    max_iters: int = 20
    cost_tol: float = 1e-10
    step_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_max: float = 1e10


@dataclass
class OptReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    optimized_nodes: tuple = ()
    unanchored_nodes: tuple = ()
    cost_history: list = field(default_factory=list)

    @property
    def has_unanchored(self):
        return bool(self.unanchored_nodes)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "n_optimized": len(self.optimized_nodes),
            "unanchored": [list(n) for n in self.unanchored_nodes],
        }


class PoseGraph:
    def __init__(self):
        self.nodes: dict = {}
        self.factors: list = []
        self.pending: dict = {}
        self.applied: set = set()
        self.needs_optimization = False
        self._keys: set = set()
        self._parent: dict = {}
        self._anchored_roots: set = set()

    @classmethod
    def anchored_at(cls, pose: Pose3, node: NodeId = LANDER_NODE, information=None):
        g = cls()
        g.add_node(node, pose)
        info = np.eye(6) * HARD_ANCHOR_INFO if information is None else information
        g.add_factor(Factor(PRIOR, (node,), pose, info))
        return g

    # -- structure

    def add_node(self, node, estimate: Pose3) -> bool:
        node = NodeId(*node)
        if node in self.nodes:
            return False
        self.nodes[node] = estimate
        self._parent[node] = node
        return True

    def add_factor(self, factor: Factor) -> bool:
        for e in factor.endpoints:
            if e not in self.nodes:
                raise GraphError(f"dangling factor: node {e} missing")
        key = factor.key()
        if key in self._keys:
            return False
        self._keys.add(key)
        self.factors.append(factor)
        if factor.kind == PRIOR:
            self._anchored_roots.add(self._find(factor.endpoints[0]))
        else:
            self._union(*factor.endpoints)
        if factor.kind != FRAME_SWITCH:
            self.needs_optimization = True
        return True

    def _find(self, n):
        parent = self._parent
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    def _union(self, a, b):
        ra, rb = self._find(a), self._find(b)
        if ra == rb:
            return
        if rb < ra:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if rb in self._anchored_roots:
            self._anchored_roots.discard(rb)
            self._anchored_roots.add(ra)

    def is_anchored(self, node) -> bool:
        return self._find(NodeId(*node)) in self._anchored_roots

    def anchored_nodes(self):
        return sorted(n for n in self.nodes if self.is_anchored(n))

    def unanchored_nodes(self):
        return sorted(n for n in self.nodes if not self.is_anchored(n))

    def digest(self) -> int:
        return digest(self)

    def copy_structure(self) -> "PoseGraph":
        g = PoseGraph()
        for n in sorted(self.nodes):
            g.add_node(n, self.nodes[n])
        for f in self.factors:
            g.add_factor(f)
        return g


# ------------------------------------------------------------------ residuals


def residual(f: Factor, estimates) -> np.ndarray:
    for e in f.endpoints:
        if e not in estimates:
            raise GraphError("dangling factor")
    if f.kind == PRIOR:
        rel = estimates[f.endpoints[0]]
    else:
        rel = between(estimates[f.endpoints[0]], estimates[f.endpoints[1]])
    return log(compose(inverse(f.measurement), rel))


def robust_cost(s, robust):
    """Huber on the whitened norm for robust factors; ``s`` is the squared norm."""
    s = np.asarray(s, dtype=float)
    k2 = HUBER_K * HUBER_K
    huber = np.where(s <= k2, s, 2.0 * HUBER_K * np.sqrt(np.maximum(s, k2)) - k2)
    return np.where(robust, huber, s)


def robust_weight(s, robust):
    s = np.asarray(s, dtype=float)
    w = np.where(s <= HUBER_K * HUBER_K, 1.0, HUBER_K / np.sqrt(np.maximum(s, 1e-300)))
    return np.where(robust, w, 1.0)


class _Problem:
    """Factor arrays for batched linearization. Index ``-1`` is the fixed identity pose."""

    def __init__(self, factors, node_index):
        n = len(factors)
        self.n = n
        self.ia = np.empty(n, dtype=int)
        self.ib = np.empty(n, dtype=int)
        self.Rm = np.empty((n, 3, 3))
        self.tm = np.empty((n, 3))
        self.info = np.empty((n, 6, 6))
        self.robust = np.zeros(n, dtype=bool)
        for k, f in enumerate(factors):
            if f.kind == PRIOR:
                self.ia[k] = -1
                self.ib[k] = node_index[f.endpoints[0]]
            else:
                self.ia[k] = node_index[f.endpoints[0]]
                self.ib[k] = node_index[f.endpoints[1]]
            self.Rm[k] = f.measurement.rotation.matrix
            self.tm[k] = f.measurement.translation
            self.info[k] = f.information
            self.robust[k] = f.kind in ROBUST_KINDS

    @staticmethod
    def _gather(R, t, idx):
        Rs = np.where((idx < 0)[:, None, None], np.eye(3), R[idx])
        ts = np.where((idx < 0)[:, None], 0.0, t[idx])
        return Rs, ts

    def residuals(self, R, t, jacobians=False):
        Ra, ta = self._gather(R, t, self.ia)
        Rb, tb = self._gather(R, t, self.ib)
        RaT = np.swapaxes(Ra, 1, 2)
        Rx = RaT @ Rb
        tx = np.einsum("nij,nj->ni", RaT, tb - ta)
        RmT = np.swapaxes(self.Rm, 1, 2)
        Re = RmT @ Rx
        te = np.einsum("nij,nj->ni", RmT, tx - self.tm)
        r = se3_log_batch(Re, te)
        if not jacobians:
            return r
        Jb = se3_right_jacobian_inv_batch(r)
        RxT = np.swapaxes(Rx, 1, 2)
        Ja = -Jb @ adjoint_batch(RxT, -np.einsum("nij,nj->ni", RxT, tx))
        return r, Ja, Jb

    def costs(self, r):
        s = np.einsum("ni,nij,nj->n", r, self.info, r)
        return robust_cost(s, self.robust), s


def _as_arrays(poses):
    R = np.array([p.rotation.matrix for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    return R, t


def residual_jacobians(f: Factor, estimates):
    """Residual and its Jacobians w.r.t. right perturbations of each endpoint."""
    nodes = list(f.endpoints)
    prob = _Problem([f], {n: i for i, n in enumerate(nodes)})
    R, t = _as_arrays([estimates[n] for n in nodes])
    r, Ja, Jb = prob.residuals(R, t, jacobians=True)
    if f.kind == PRIOR:
        return r[0], [Jb[0]]
    return r[0], [Ja[0], Jb[0]]


def total_cost(g: PoseGraph) -> float:
    if not g.factors:
        return 0.0
    order = list(g.nodes)
    prob = _Problem(g.factors, {n: i for i, n in enumerate(order)})
    R, t = _as_arrays([g.nodes[n] for n in order])
    c, _ = prob.costs(prob.residuals(R, t))
    return float(c.sum())


# ------------------------------------------------------------------ optimizer


def _hard_anchor(f: Factor) -> bool:
    return f.kind == PRIOR and float(np.linalg.eigvalsh(f.information).min()) >= HARD_ANCHOR_INFO


def optimize(g: PoseGraph, opts: OptOptions | None = None) -> OptReport:
    """Levenberg-Marquardt over right-perturbation twists of every anchored node.

    Nodes held by a prior with information ≥ 1e9·I are fixed at the prior.
    Components without any prior are left untouched and listed in the report.
    """
    opts = opts or OptOptions()
    if not any(f.kind == PRIOR for f in g.factors):
        raise GraphError("graph has no prior_anchor")

    for f in g.factors:
        if _hard_anchor(f):
            g.nodes[f.endpoints[0]] = f.measurement

    anchored = [n for n in sorted(g.nodes) if g.is_anchored(n)]
    unanchored = tuple(n for n in sorted(g.nodes) if not g.is_anchored(n))
    if unanchored:
        logger.debug("skipping %d unanchored nodes", len(unanchored))
    fixed = {f.endpoints[0] for f in g.factors if _hard_anchor(f)}
    anchored_set = set(anchored)
    factors = [f for f in g.factors if f.endpoints[0] in anchored_set]
    index = {n: i for i, n in enumerate(anchored)}
    var_of = np.array([-1 if n in fixed else 0 for n in anchored])
    free = [i for i in range(len(anchored)) if var_of[i] == 0]
    var_of[free] = np.arange(len(free))
    nvar = len(free)

    full_cost = total_cost(g)
    other_cost = full_cost
    R, t = _as_arrays([g.nodes[n] for n in anchored])
    prob = _Problem(factors, index) if factors else None

    def cost_of(R_, t_):
        if prob is None:
            return 0.0
        c, _ = prob.costs(prob.residuals(R_, t_))
        return float(c.sum())

    cost = cost_of(R, t)
    other_cost = full_cost - cost
    initial = full_cost
    history = [full_cost]
    if nvar == 0 or prob is None:
        return OptReport(0, initial, full_cost, True, tuple(anchored), unanchored, history)

    va = np.where(prob.ia >= 0, var_of[np.maximum(prob.ia, 0)], -1)
    vb = var_of[prob.ib]
    lam = opts.lambda_init
    converged = False
    it = 0
    dim = 6 * nvar
    while it < opts.max_iters:
        it += 1
        r, Ja, Jb = prob.residuals(R, t, jacobians=True)
        _, s = prob.costs(r)
        W = prob.info * robust_weight(s, prob.robust)[:, None, None]
        H, grad = _assemble(Ja, Jb, W, r, va, vb, dim)
        diag = H.diagonal().copy()
        diag[diag <= 0] = 1.0
        while True:
            dx = _solve(H, diag, lam, grad)
            if dx is None:
                lam *= 10.0
                if lam > opts.lambda_max:
                    raise OptimizationError("optimization failed: singular normal equations")
                continue
            Rn, tn = _retract(R, t, free, dx.reshape(-1, 6))
            new_cost = cost_of(Rn, tn)
            if np.isfinite(new_cost) and new_cost <= cost:
                break
            lam *= 10.0
            if lam > opts.lambda_max:
                dx = None
                break
        if dx is None:
            converged = True
            break
        decrease = cost - new_cost
        R, t, cost = Rn, tn, new_cost
        history.append(cost + other_cost)
        lam = max(lam / 10.0, 1e-12)
        if decrease <= opts.cost_tol * max(cost, 1e-300) or np.abs(dx).max() < opts.step_tol or cost < 1e-30:
            converged = True
            break

    quats = matrices_to_quats(R)
    for i, n in enumerate(anchored):
        if var_of[i] >= 0:
            g.nodes[n] = Pose3(Rotation(quats[i]), t[i])
    g.needs_optimization = False
    return OptReport(it, initial, cost + other_cost, converged, tuple(anchored), unanchored, history)


_BLOCK_R, _BLOCK_C = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")


def _assemble(Ja, Jb, W, r, va, vb, dim):
    JaT = np.swapaxes(Ja, 1, 2)
    JbT = np.swapaxes(Jb, 1, 2)
    Wr = np.einsum("nij,nj->ni", W, r)
    rows, cols, vals = [], [], []
    grad = np.zeros(dim)

    def block(vi, vj, M):
        m = (vi >= 0) & (vj >= 0)
        if not m.any():
            return
        rows.append((6 * vi[m])[:, None, None] + _BLOCK_R)
        cols.append((6 * vj[m])[:, None, None] + _BLOCK_C)
        vals.append(M[m])

    Haa = JaT @ W @ Ja
    Hab = JaT @ W @ Jb
    Hbb = JbT @ W @ Jb
    block(va, va, Haa)
    block(vb, vb, Hbb)
    block(va, vb, Hab)
    block(vb, va, np.swapaxes(Hab, 1, 2))
    for v, J in ((va, JaT), (vb, JbT)):
        m = v >= 0
        if m.any():
            np.add.at(grad, (6 * v[m])[:, None] + np.arange(6), np.einsum("nij,nj->ni", J[m], Wr[m]))
    H = sp.coo_matrix(
        (np.concatenate([v.ravel() for v in vals]), (np.concatenate([x.ravel() for x in rows]), np.concatenate([x.ravel() for x in cols]))),
        shape=(dim, dim),
    ).tocsc()
    return H, grad


def _solve(H, diag, lam, grad):
    A = (H + sp.diags(lam * diag)).tocsc()
    try:
        dx = splu(A).solve(-grad)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def _retract(R, t, free, dx):
    Rn = R.copy()
    tn = t.copy()
    dR, dt = se3_exp_batch(dx)
    Rf = R[free]
    Rn[free] = Rf @ dR
    tn[free] = t[free] + np.einsum("nij,nj->ni", Rf, dt)
    return Rn, tn


# ------------------------------------------------------------------ replication


def _ready(g: PoseGraph, delta) -> bool:
    available = set(g.nodes)
    available.update(NodeId(*n) for n, _ in delta.nodes)
    for f in delta.factors:
        if f.kind == FRAME_SWITCH:
            if f.endpoints[0] not in available:
                return False
            available.add(f.endpoints[1])
        elif any(e not in available for e in f.endpoints):
            return False
    return True


def _apply_now(g: PoseGraph, delta):
    for n, est in delta.nodes:
        g.add_node(n, est)
    for f in delta.factors:
        if f.kind == FRAME_SWITCH and f.endpoints[1] not in g.nodes:
            g.add_node(f.endpoints[1], compose(g.nodes[f.endpoints[0]], f.measurement))
        g.add_factor(f)
    g.applied.add((delta.origin, delta.seq))


def apply_delta(g: PoseGraph, delta) -> PoseGraph:
    """Apply a replicated delta (idempotent; out-of-order deltas wait in ``g.pending``)."""
    key = (delta.origin, delta.seq)
    if key in g.applied or key in g.pending:
        return g
    if not _ready(g, delta):
        g.pending[key] = delta
        return g
    _apply_now(g, delta)
    progress = True
    while progress and g.pending:
        progress = False
        for k in sorted(g.pending):
            if _ready(g, g.pending[k]):
                _apply_now(g, g.pending.pop(k))
                progress = True
    return g


def digest(g: PoseGraph) -> int:
    """64-bit structural hash over node ids and factors (estimates excluded)."""
    lines = sorted(f"N {n.robot} {n.submap}" for n in g.nodes)
    lines += sorted("F " + f.key() for f in g.factors)
    h = hashlib.blake2b("\n".join(lines).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


# ------------------------------------------------------------------ text dump


def dump(g: PoseGraph) -> str:
    out = []
    for n in sorted(g.nodes):
        vals = " ".join(repr(float(v)) for v in g.nodes[n].to_vector())
        out.append(f"NODE {n.robot} {n.submap} {vals}")
    for f in g.factors:
        ends = " ".join(f"{e.robot} {e.submap}" for e in f.endpoints)
        meas = " ".join(repr(float(v)) for v in f.measurement.to_vector())
        diag = " ".join(repr(float(v)) for v in np.diag(f.information))
        out.append(f"FACTOR {f.kind} {ends} {meas} {diag} {f.time!r}")
    return "\n".join(out) + "\n"


def load_dump(text: str) -> PoseGraph:
    """Rebuild a graph from :func:`dump` output (information restored as diagonal)."""
    g = PoseGraph()
    factors = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "NODE":
            g.add_node(NodeId(int(parts[1]), int(parts[2])), Pose3.from_vector([float(v) for v in parts[3:10]]))
        elif parts[0] == "FACTOR":
            kind = parts[1]
            n_end = 1 if kind == PRIOR else 2
            ids = [int(v) for v in parts[2 : 2 + 2 * n_end]]
            ends = tuple(NodeId(ids[2 * i], ids[2 * i + 1]) for i in range(n_end))
            rest = [float(v) for v in parts[2 + 2 * n_end :]]
            factors.append(Factor(kind, ends, Pose3.from_vector(rest[:7]), np.diag(rest[7:13]), rest[13]))
        else:
            raise ValueError(f"unrecognized dump record {parts[0]!r}")
    for f in factors:
        g.add_factor(f)
    return g
