"""Unobservable subspace alignment transforms.

Two constructions of the same repair: a rank-1 transform built from the
analytic bases at the pre/post-update estimates (the minimum-distance
solution to the alignment equation), and an indirect transform factored
through the auxiliary matrix into four sparse block factors. Both apply
to the covariance as a congruence in O(N^2), never touch the state
estimate, and restore the Aligned status.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import skew
from .state import ErrorCov, SwfState
from .observability import UnobservableBasis

SINGULAR_TOL = 1e-12


class SingularTransform(RuntimeError):
    """1 + beta^T alpha vanished; alignment must be skipped this step."""


@dataclass
class DirectTransform:
    """T = I + alpha beta^T with T N(x_plus) = N(x_minus) exactly."""

    alpha: np.ndarray
    beta: np.ndarray

    @property
    def scale(self) -> float:
        return 1.0 + float(self.beta @ self.alpha)

    def apply_to_rows(self, m: np.ndarray) -> None:
        """m <- T^{-1} m in place (works on any column count)."""
        m -= np.outer(self.alpha / self.scale, self.beta @ m)

    def dense_forward(self, dim: int) -> np.ndarray:
        return np.eye(dim) + np.outer(self.alpha, self.beta)

    def dense_inverse(self, dim: int) -> np.ndarray:
        return np.eye(dim) - np.outer(self.alpha / self.scale, self.beta)


def make_direct(n_minus: UnobservableBasis,
                n_plus: UnobservableBasis) -> DirectTransform:
    """Rank-1 alignment transform between two analytic bases.

    alpha is the yaw-column difference (the translation columns are
    state-independent); beta is the 4th row of the pseudoinverse of the
    post-update basis, so T differs from identity by the smallest
    Frobenius norm among all solutions.
    """
    np_mat = n_plus.n
    if np_mat.shape != n_minus.n.shape:
        raise ValueError("bases have different layouts")
    alpha = n_minus.n[:, 3] - np_mat[:, 3]
    gram = np_mat.T @ np_mat
    beta = np.linalg.solve(gram, np_mat.T)[3]
    t = DirectTransform(alpha, beta)
    if abs(t.scale) < SINGULAR_TOL:
        raise SingularTransform(f"1 + beta.alpha = {t.scale:.3e}")
    return t


def invert_direct(t: DirectTransform) -> DirectTransform:
    """Closed-form rank-1 inverse: I - alpha beta^T / (1 + beta^T alpha)."""
    if abs(t.scale) < SINGULAR_TOL:
        raise SingularTransform(f"1 + beta.alpha = {t.scale:.3e}")
    return DirectTransform(-t.alpha / t.scale, t.beta)


def apply_direct_inplace(p: ErrorCov, t: DirectTransform) -> None:
    """P <- T^{-1} P T^{-T} via the rank-1 structure, O(N^2), in place."""
    kernels.apply_rank1(p.p, -t.alpha / t.scale, t.beta)


def apply_direct(p: ErrorCov, t: DirectTransform) -> ErrorCov:
    """Functional form of apply_direct_inplace."""
    out = p.copy()
    apply_direct_inplace(out, t)
    return out


@dataclass
class IndirectTransform:
    """Factored inverse transform from the auxiliary-matrix route.

    Stores the 3x3 blocks of the four factors; application is a short
    sequence of block-row (and mirrored block-column) operations.
    """

    rr: np.ndarray        # attitude factor, R_plus^T R_minus
    ap: np.ndarray        # position shear against theta
    av: np.ndarray        # velocity shear against theta
    clone_m: np.ndarray   # (n, 3, 3) per-clone rotation blocks
    clone_c: np.ndarray   # (n, 3, 3) per-clone shear blocks
    feat_d: np.ndarray    # (m, 3, 3) per-feature shears against theta

    def apply_to_rows(self, m: np.ndarray) -> None:
        kernels.indirect_rows(m, self.rr, self.ap, self.av,
                              self.clone_m, self.clone_c, self.feat_d)

    def dense_inverse(self, dim: int) -> np.ndarray:
        out = np.eye(dim)
        self.apply_to_rows(out)
        return out

    def dense_forward(self, dim: int) -> np.ndarray:
        return np.linalg.inv(self.dense_inverse(dim))


def _skew_stack(v: np.ndarray) -> np.ndarray:
    """(k, 3) -> (k, 3, 3) stack of skew matrices."""
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def make_indirect(x_minus: SwfState, x_plus: SwfState) -> IndirectTransform:
    """Build the factored T^{-1} from the two estimates directly.

    Per-clone and per-feature blocks are assembled with stacked matmuls;
    this runs once per update event, right behind the basis builds on
    the profile.
    """
    if (len(x_minus.clones) != len(x_plus.clones)
            or len(x_minus.features) != len(x_plus.features)):
        raise ValueError("states have different layouts")
    r_plus = x_plus.imu.rot
    rr = r_plus.T @ x_minus.imu.rot
    ap = skew(x_minus.imu.pos - x_plus.imu.pos) @ r_plus
    av = skew(x_minus.imu.vel - x_plus.imu.vel) @ r_plus
    n = len(x_plus.clones)
    m = len(x_plus.features)
    if n:
        rots_m = np.array([c.rot for c in x_minus.clones])
        rots_p = np.array([c.rot for c in x_plus.clones])
        dp = np.array([cm.pos - cp.pos
                       for cm, cp in zip(x_minus.clones, x_plus.clones)])
        clone_m = np.einsum("nij,nik->njk", rots_p, rots_m)
        clone_c = _skew_stack(dp) @ rots_m
    else:
        clone_m = np.empty((0, 3, 3))
        clone_c = np.empty((0, 3, 3))
    if m:
        df = np.array([fm.pos - fp.pos
                       for fm, fp in zip(x_minus.features, x_plus.features)])
        feat_d = _skew_stack(df) @ r_plus
    else:
        feat_d = np.empty((0, 3, 3))
    return IndirectTransform(rr, ap, av, clone_m, clone_c, feat_d)


def apply_indirect_inplace(p: ErrorCov, t: IndirectTransform) -> None:
    """P <- T^{-1} P T^{-T} factor-by-factor, O(N^2), in place."""
    kernels.indirect_congruence(p.p, t.rr, t.ap, t.av,
                                t.clone_m, t.clone_c, t.feat_d)


def apply_indirect(p: ErrorCov, t: IndirectTransform) -> ErrorCov:
    """Functional form of apply_indirect_inplace."""
    out = p.copy()
    apply_indirect_inplace(out, t)
    return out


def psd_repair(p: ErrorCov, floor: float = -1e-9,
               jitter_scale: float = 1e-12) -> bool:
    """Symmetrize and, when the spectrum probe dips below the floor, add
    a trace-scaled jitter to the diagonal. Returns True when repaired."""
    p.symmetrize()
    lo = p.min_eig()
    if lo < floor:
        n = p.p.shape[0]
        bump = max(-lo, jitter_scale * np.trace(p.p) / n)
        p.p[np.diag_indices(n)] += bump
        return True
    return False
