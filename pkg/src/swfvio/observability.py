"""Unobservable-subspace machinery: analytic bases, the auxiliary matrix
behind the indirect alignment transform, a step-by-step auditor for the
estimator's subspace status, and a desk-scale information-matrix
cross-check.

The auditor is span algebra: it carries an explicit basis of the
estimator's unobservable subspace through every filter step (propagate,
update, augment, feature init, marginalize, alignment) and classifies it
against the analytic basis at the current estimate. The information
recursion with a zero prior is kept only as an independent oracle,
because extracting nullspaces from a singular information matrix is far
less robust than propagating the span directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .geometry import GRAVITY, skew
from .state import IMU_DIM, ErrorLayout, SwfState

TOL_ANGLE = 1e-6       # Aligned classification threshold, radians
RANK_RTOL = 1e-8       # relative singular-value threshold
GAP_RATIO = 10.0       # required gap to accept a numerical rank
ZERO_ROW_RTOL = 1e-9   # |H b| below this times |H| counts as unobservable


class SubspaceLabel(str, Enum):
    ALIGNED = "Aligned"
    MISALIGNED = "Misaligned"
    MISMATCHED = "Mismatched"


@dataclass
class SubspaceStatus:
    label: SubspaceLabel
    dim: int
    angle: float  # largest principal angle to the analytic basis, rad


@dataclass
class AuditRecord:
    stamp: float
    step: str
    status: SubspaceStatus
    conclusive: bool = True


@dataclass
class UnobservableBasis:
    n: np.ndarray                 # N x 4, columns [N_p | N_theta]
    eval_point: SwfState | None = None


@dataclass
class FeatureSubBasis:
    mat: np.ndarray               # 3 x 4, [I3 | [p]x g]


_GZ = GRAVITY[2]


def _cross_g(p: np.ndarray) -> np.ndarray:
    """cross(p, GRAVITY) written out; gravity only has a z component."""
    out = np.zeros_like(p, dtype=float)
    out[..., 0] = _GZ * p[..., 1]
    out[..., 1] = -_GZ * p[..., 0]
    return out


def feature_sub_basis(p: np.ndarray) -> FeatureSubBasis:
    mat = np.zeros((3, 4))
    mat[:, :3] = np.eye(3)
    mat[:, 3] = _cross_g(p)
    return FeatureSubBasis(mat)


@lru_cache(maxsize=64)
def _basis_template(n_clones: int, n_features: int):
    """Constant translation columns plus the yaw-column row indices,
    cached per window shape (the alignment hot path rebuilds the basis
    twice per update event)."""
    lay = ErrorLayout(n_clones, n_features)
    n = np.zeros((lay.dim, 4))
    n[lay.pos, 0:3] = np.eye(3)
    axes = np.arange(3)
    starts = IMU_DIM + 6 * np.arange(n_clones)[:, None]
    th_rows = (starts + axes).ravel()
    p_rows = (starts + 3 + axes).ravel()
    n[p_rows, np.tile(axes, n_clones)] = 1.0
    f_rows = lay.feature_base + np.arange(3 * n_features)
    n[f_rows, np.tile(axes, n_features)] = 1.0
    n.setflags(write=False)
    return n, th_rows, p_rows, f_rows


def _fill_yaw(col: np.ndarray, x: SwfState, lay: ErrorLayout,
              th_rows: np.ndarray, p_rows: np.ndarray,
              f_rows: np.ndarray) -> None:
    """Write the rotation-about-gravity column into `col` (flat or a
    column view). Note R^T g is g_z times the third row of R, so no
    matrix products are needed."""
    col[lay.theta] = -_GZ * x.imu.rot[2]
    col[lay.pos] = _cross_g(x.imu.pos)
    col[lay.vel] = _cross_g(x.imu.vel)
    if x.clones:
        nc = len(x.clones)
        rows2 = np.empty((nc, 3))
        poss = np.empty((nc, 3))
        for i, c in enumerate(x.clones):
            rows2[i] = c.rot[2]
            poss[i] = c.pos
        col[th_rows] = (-_GZ * rows2).ravel()
        col[p_rows] = _cross_g(poss).ravel()
    if x.features:
        poss = np.array([f.pos for f in x.features])
        col[f_rows] = _cross_g(poss).ravel()


def build_basis(x: SwfState) -> UnobservableBasis:
    """Analytic unobservable basis at a state: 3 translation columns and
    one rotation-about-gravity column."""
    lay = x.layout()
    template, th_rows, p_rows, f_rows = _basis_template(
        lay.n_clones, lay.n_features)
    n = template.copy()
    _fill_yaw(n[:, 3], x, lay, th_rows, p_rows, f_rows)
    return UnobservableBasis(n, x)


def yaw_column(x: SwfState) -> np.ndarray:
    """Just the rotation-about-gravity column of the analytic basis (the
    translation columns are state-independent, so the fused alignment
    kernel only needs this)."""
    lay = x.layout()
    _, th_rows, p_rows, f_rows = _basis_template(lay.n_clones, lay.n_features)
    col = np.zeros(lay.dim)
    _fill_yaw(col, x, lay, th_rows, p_rows, f_rows)
    return col


def build_top_blocks(x: SwfState) -> UnobservableBasis:
    """Basis restricted to the IMU + clone blocks (feature-free window)."""
    if x.features:
        raise ValueError("top-block basis is defined for feature-free states only")
    return build_basis(x)


def constant_basis(layout: ErrorLayout) -> np.ndarray:
    """The state-independent subspace the auxiliary matrix maps onto:
    -g in every orientation row's yaw column, identity position stacks."""
    n = np.zeros((layout.dim, 4))
    n[layout.theta, 3] = -GRAVITY
    n[layout.pos, 0:3] = np.eye(3)
    for i in range(layout.n_clones):
        n[layout.clone_theta(i), 3] = -GRAVITY
        n[layout.clone_pos(i), 0:3] = np.eye(3)
    for j in range(layout.n_features):
        n[layout.feature(j), 0:3] = np.eye(3)
    return n


def build_aux(x: SwfState) -> np.ndarray:
    """Auxiliary matrix T(x) with T(x) N(x) = constant_basis(layout).

    Block lower-triangular: rotation blocks on the orientation rows,
    position/velocity/feature rows get skew-times-rotation couplings,
    identity elsewhere. Invertible by construction.
    """
    lay = x.layout()
    t = np.eye(lay.dim)
    r = x.imu.rot
    t[lay.theta, lay.theta] = r
    t[lay.pos, lay.theta] = skew(x.imu.pos) @ r
    t[lay.vel, lay.theta] = skew(x.imu.vel) @ r
    for i, clone in enumerate(x.clones):
        t[lay.clone_theta(i), lay.clone_theta(i)] = clone.rot
        t[lay.clone_pos(i), lay.clone_theta(i)] = skew(clone.pos) @ clone.rot
    for j, feat in enumerate(x.features):
        t[lay.feature(j), lay.theta] = skew(feat.pos) @ r
    return t


def _orth(mat: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    rank = int((s > rtol * s[0]).sum())
    return u[:, :rank]


def subspace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Largest principal angle between the column spans, radians."""
    qa = _orth(np.asarray(a, dtype=float))
    qb = _orth(np.asarray(b, dtype=float))
    if qa.shape[1] < min(a.shape) or qb.shape[1] < min(b.shape):
        raise ValueError("rank-deficient input to subspace_distance")
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        return 0.0 if qa.shape[1] == qb.shape[1] else np.pi / 2
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    c = min(1.0, float(s[min(qa.shape[1], qb.shape[1]) - 1]))
    return float(np.arccos(c))


def classify(basis: np.ndarray, xstar: SwfState,
             tol_angle: float = TOL_ANGLE) -> SubspaceStatus:
    """Status of an estimator subspace against the analytic basis at the
    current estimate."""
    dim = basis.shape[1]
    analytic = build_basis(xstar).n
    angle = subspace_distance(basis, analytic) if dim > 0 else np.pi / 2
    if dim != 4:
        return SubspaceStatus(SubspaceLabel.MISMATCHED, dim, angle)
    if angle < tol_angle:
        return SubspaceStatus(SubspaceLabel.ALIGNED, dim, angle)
    return SubspaceStatus(SubspaceLabel.MISALIGNED, dim, angle)


@dataclass
class AuditStep:
    """One filter event as seen by the auditor / information tracker.

    kind: 'propagate' | 'update' | 'augment' | 'init' | 'marginalize' | 'usa'
    """

    kind: str
    stamp: float = 0.0
    phi15: np.ndarray | None = None        # propagate
    h: np.ndarray | None = None            # update rows, (rows, N)
    insert_at: int | None = None           # augment: new clone block start
    hx1: np.ndarray | None = None          # init: 3 x N rows
    hf1: np.ndarray | None = None          # init: 3 x 3 invertible block
    drop: slice | None = None              # marginalize: removed index range
    transform: object | None = None        # usa: Direct/IndirectTransform


def _intersect_with_null(basis: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, bool]:
    """basis <- basis restricted to null(h), with a conclusiveness flag.

    Orthonormalizes first so singular values of h @ q are comparable; a
    dimension drop is accepted only when the rank gap is clean.
    """
    q = _orth(basis)
    m = h @ q
    s = np.linalg.svd(m, compute_uv=False)
    hscale = float(np.linalg.norm(h))
    floor = ZERO_ROW_RTOL * max(hscale, 1e-300)
    if s.size == 0 or s[0] <= floor:
        return basis, True
    tol = max(RANK_RTOL * s[0], floor)
    rank = int((s > tol).sum())
    if rank == 0:
        return basis, True
    conclusive = True
    if rank < s.size:
        conclusive = s[rank - 1] >= GAP_RATIO * s[rank]
    _, _, vt = np.linalg.svd(m)
    nullv = vt[rank:].T
    return q @ nullv, conclusive


def audit_step(basis: np.ndarray, step: AuditStep) -> tuple[np.ndarray, bool]:
    """Evolve an estimator-subspace basis through one filter event.

    Returns (new_basis, conclusive).
    """
    b = basis
    if step.kind == "propagate":
        out = b.copy()
        out[:IMU_DIM, :] = step.phi15 @ b[:IMU_DIM, :]
        return out, True
    if step.kind == "update":
        if step.h.shape[1] != b.shape[0]:
            raise ValueError("audit aborted: update rows do not match basis layout")
        return _intersect_with_null(b, step.h)
    if step.kind == "augment":
        at = step.insert_at
        out = np.vstack([b[:at], b[0:6], b[at:]])
        return out, True
    if step.kind == "init":
        extra = np.linalg.solve(step.hf1, -step.hx1 @ b)
        return np.vstack([b, extra]), True
    if step.kind == "marginalize":
        keep = np.ones(b.shape[0], dtype=bool)
        keep[step.drop] = False
        return b[keep], True
    if step.kind == "usa":
        out = b.copy()
        step.transform.apply_to_rows(out)
        return out, True
    raise ValueError(f"unknown audit step kind {step.kind!r}")


@dataclass
class Auditor:
    """Tracks the estimator's unobservable subspace alongside one filter.

    Starts Aligned at the initial estimate; every filter event passes
    through step(), which evolves the basis and classifies it at the
    post-step estimate.
    """

    basis: np.ndarray
    tol_angle: float = TOL_ANGLE
    records: list[AuditRecord] = field(default_factory=list)

    @classmethod
    def at_state(cls, x: SwfState, tol_angle: float = TOL_ANGLE) -> "Auditor":
        return cls(build_basis(x).n.copy(), tol_angle)

    def step(self, event: AuditStep, xstar: SwfState) -> AuditRecord:
        self.basis, conclusive = audit_step(self.basis, event)
        status = classify(self.basis, xstar, self.tol_angle)
        rec = AuditRecord(event.stamp, event.kind, status, conclusive)
        self.records.append(rec)
        return rec


class InfoNullspaceTracker:
    """Information-matrix nullspace accumulated from a zero prior.

    Keeps the plain stack of all measurement-equivalent Jacobian rows
    expressed in the current error coordinates; the nullspace of the
    information matrix equals the nullspace of that stack for any
    positive weighting, so noise scales are irrelevant and never enter.
    Desk-scale oracle: cost grows with the full row history (compressed
    by QR when it grows past a few multiples of N).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.j = np.zeros((0, dim))

    def _compress(self) -> None:
        if self.j.shape[0] > 3 * self.dim:
            self.j = np.linalg.qr(self.j, mode="r")

    def apply(self, step: AuditStep) -> None:
        if step.kind == "propagate":
            # rows acting on the old error, re-expressed on the new one
            self.j[:, :IMU_DIM] = np.linalg.solve(
                step.phi15.T, self.j[:, :IMU_DIM].T).T
        elif step.kind == "update":
            self.j = np.vstack([self.j, step.h])
            self._compress()
        elif step.kind == "augment":
            at = step.insert_at
            rows, _ = self.j.shape
            j2 = np.hstack([self.j[:, :at], np.zeros((rows, 6)), self.j[:, at:]])
            cons = np.zeros((6, self.dim + 6))
            cons[0:6, at:at + 6] = np.eye(6)
            cons[0:6, 0:6] = -np.eye(6)
            self.j = np.vstack([j2, cons])
            self.dim += 6
        elif step.kind == "init":
            rows, _ = self.j.shape
            j2 = np.hstack([self.j, np.zeros((rows, 3))])
            new = np.hstack([step.hx1, step.hf1])
            self.j = np.vstack([j2, new])
            self.dim += 3
        elif step.kind == "marginalize":
            keep = np.ones(self.dim, dtype=bool)
            keep[step.drop] = False
            jm = self.j[:, ~keep]
            jr = self.j[:, keep]
            u = _orth(jm)
            self.j = jr - u @ (u.T @ jr)
            self.dim = int(keep.sum())
            self._compress()
        elif step.kind == "usa":
            self.j = self.j @ step.transform.dense_forward(self.dim)
        else:
            raise ValueError(f"unknown tracker step kind {step.kind!r}")

    def nullspace(self) -> tuple[np.ndarray, bool]:
        """(orthonormal nullspace basis, conclusive flag)."""
        if self.j.shape[0] == 0:
            return np.eye(self.dim), True
        u, s, vt = np.linalg.svd(self.j)
        if s[0] == 0.0:
            return np.eye(self.dim), True
        tol = RANK_RTOL * s[0]
        rank = int((s > tol).sum())
        conclusive = True
        if 0 < rank < s.size:
            conclusive = s[rank - 1] >= GAP_RATIO * s[rank]
        return vt[rank:].T.copy(), conclusive


def info_nullspace_crosscheck(jacobian_log: list[AuditStep],
                              dim0: int) -> tuple[np.ndarray, bool]:
    """Replay a logged event stream through the information tracker and
    return its terminal nullspace basis."""
    tracker = InfoNullspaceTracker(dim0)
    for step in jacobian_log:
        tracker.apply(step)
    return tracker.nullspace()
