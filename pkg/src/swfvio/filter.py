"""Sliding-window filter pipeline, parameterized by consistency strategy.

Per frame: predict, clone augment, track bookkeeping, MSCKF update,
SLAM update, delayed feature initialization, marginalization. The
strategies differ only in where measurement Jacobians are evaluated
(live estimates vs first-estimate anchors) and in whether an alignment
transform is applied to the covariance after each correction.

The filter runs in covariance form throughout; information-form
reasoning lives in the observability oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import chi2

from . import alignment, kernels, observability, propagation, vision
from .observability import AuditStep, Auditor
from .propagation import ImuSample, NoiseParams
from .state import (CLONE_DIM, IMU_DIM, ClonePose, ErrorCov, FeatureState,
                    ImuState, SwfState, boxplus)
from .vision import (Z_MIN, Extrinsics, LinPoint, Obs, StackedJac,
                     default_extrinsics)

log = logging.getLogger(__name__)


class Strategy(Enum):
    STD = "std"
    FEJ = "fej"
    USA_IT = "usa-it"
    USA_DT = "usa-dt"
    USA_DTR = "usa-dtr"


class Mode(Enum):
    MSCKF = "msckf"
    SLAM = "slam"
    HYBRID = "hybrid"


USA_STRATEGIES = (Strategy.USA_IT, Strategy.USA_DT, Strategy.USA_DTR)


@dataclass
class FilterConfig:
    strategy: Strategy = Strategy.STD
    mode: Mode = Mode.HYBRID
    max_slam_feats: int = 40
    max_msckf_feats: int = 40
    max_clones: int = 11
    min_obs: int = 3
    chi2_quantile: float = 0.95
    init_variant: str = "separate"       # or "batch"
    slam_drop_after: int = 3             # frames unseen before marginalizing
    psd_check_every: int = 25            # frames between spectrum probes
    sigma_uv: float = 2.0 / 458.0        # normalized-image noise std
    noise: NoiseParams = field(default_factory=NoiseParams)
    extrinsics: Extrinsics = field(default_factory=lambda: default_extrinsics())
    # initial prior standard deviations
    prior_ori_rad: float = np.deg2rad(0.3)
    prior_pos: float = 0.02
    prior_vel: float = 0.02
    prior_bg: float = 2.0e-4
    prior_ba: float = 3.0e-2
    audit: bool = False
    track_info: bool = False             # desk-scale information cross-check

    def validate(self) -> None:
        if self.init_variant not in ("separate", "batch"):
            raise ValueError(f"unknown init variant {self.init_variant!r}")
        if self.init_variant == "batch" and self.strategy == Strategy.USA_DTR:
            raise ValueError("batch initialization is undefined for the "
                             "re-evaluation strategy")
        self.noise.validate()


@dataclass
class FeatureTrack:
    id: int
    obs: dict[float, np.ndarray] = field(default_factory=dict)
    last_seen: float = -np.inf


@dataclass
class FilterEstimate:
    x: SwfState
    p: ErrorCov
    audit: Auditor | None = None


@dataclass
class RunStats:
    frames: int = 0
    slam_rows: int = 0
    msckf_tracks: int = 0
    gated: int = 0
    tri_failed: int = 0
    inits: int = 0
    demoted: int = 0
    usa_skipped: int = 0
    diverged: bool = False


def initial_estimate(truth_imu: ImuState, cfg: FilterConfig,
                     rng: np.random.Generator) -> FilterEstimate:
    """Prior: truth perturbed by a draw matching the diagonal P0."""
    sig = np.concatenate([
        np.full(3, cfg.prior_ori_rad), np.full(3, cfg.prior_pos),
        np.full(3, cfg.prior_vel), np.full(3, cfg.prior_bg),
        np.full(3, cfg.prior_ba)])
    x0 = SwfState(truth_imu.copy())
    draw = sig * rng.standard_normal(IMU_DIM)
    x = boxplus(x0, draw)
    p0 = ErrorCov(np.diag(sig ** 2))
    return FilterEstimate(x, p0)


class SlidingWindowFilter:
    """One estimator instance; strictly sequential step order per frame."""

    def __init__(self, cfg: FilterConfig, est: FilterEstimate):
        cfg.validate()
        self.cfg = cfg
        self.est = est
        self.tracks: dict[int, FeatureTrack] = {}
        self.stats = RunStats()
        self._rvar = cfg.sigma_uv ** 2
        self._chi2_cache: dict[int, float] = {}
        self._fej_imu: ImuState | None = (
            est.x.imu.copy() if cfg.strategy == Strategy.FEJ else None)
        self._feat_last_frame: dict[int, int] = {}
        self._frame_index = -1
        self.events: list[AuditStep] = []
        self.info_tracker = (
            observability.InfoNullspaceTracker(est.x.dim)
            if cfg.track_info else None)
        if cfg.audit and est.audit is None:
            est.audit = Auditor.at_state(est.x)
        # when nothing records events, the hot path skips building them
        # (and the alignment hook can use the fused kernels)
        self._recording = (est.audit is not None
                           or self.info_tracker is not None)

    # -- auditing plumbing -------------------------------------------------

    def _emit(self, kind: str, stamp: float, **fields) -> None:
        if not self._recording:
            return
        event = AuditStep(kind, stamp, **fields)
        if self.est.audit is not None:
            self.est.audit.step(event, self.est.x)
        if self.info_tracker is not None:
            self.info_tracker.apply(event)
        self.events.append(event)

    def _chi2(self, dof: int) -> float:
        if dof not in self._chi2_cache:
            self._chi2_cache[dof] = float(chi2.ppf(self.cfg.chi2_quantile, dof))
        return self._chi2_cache[dof]

    # -- pipeline steps ----------------------------------------------------

    def predict(self, samples: list[ImuSample], stamp: float) -> None:
        if len(samples) < 2:
            return
        prop = propagation.propagate_frame(
            self.est.x.imu, samples, self.cfg.noise, phi_from=self._fej_imu)
        self.est.x.imu = prop.imu_next
        self.est.p = propagation.propagate_cov(self.est.p, prop.phi, prop.qd)
        if self.cfg.strategy == Strategy.FEJ:
            self._fej_imu = prop.imu_next.copy()
        self._emit("propagate", stamp, phi15=prop.phi)

    def augment_clone(self, stamp: float) -> None:
        x = self.est.x
        if len(x.clones) >= self.cfg.max_clones:
            raise RuntimeError("window full; marginalize before augmenting")
        anchored = self.cfg.strategy == Strategy.FEJ
        clone = ClonePose(
            x.imu.rot.copy(), x.imu.pos.copy(), stamp,
            first_rot=x.imu.rot.copy() if anchored else None,
            first_pos=x.imu.pos.copy() if anchored else None)
        at = IMU_DIM + CLONE_DIM * len(x.clones)  # end of the clone section
        x.clones.append(clone)
        src = np.concatenate([np.arange(at), np.arange(6), np.arange(at, self.est.p.p.shape[0])])
        self.est.p = ErrorCov(self.est.p.p[np.ix_(src, src)])
        self._emit("augment", stamp, insert_at=at)

    def _lin_point(self, clone: ClonePose, pf: np.ndarray,
                   feat: FeatureState | None) -> LinPoint | None:
        """Strategy-selected Jacobian evaluation states for one observation."""
        if self.cfg.strategy != Strategy.FEJ:
            return None
        pf_anchor = pf
        if feat is not None and feat.first_pos is not None:
            pf_anchor = feat.first_pos
        return LinPoint(
            clone.first_rot if clone.first_rot is not None else clone.rot,
            clone.first_pos if clone.first_pos is not None else clone.pos,
            pf_anchor)

    def _apply_update(self, h: np.ndarray, r: np.ndarray, stamp: float,
                      step: str) -> bool:
        """Batched Joseph-form EKF update plus the strategy's USA hook."""
        if h.shape[0] == 0:
            return False
        # boxplus rebinds est.x without touching the old object, so the
        # pre-update state for the alignment hook is just this reference
        x_minus = self.est.x
        dx, pnew = kernels.joseph_update(self.est.p.p, h, r, self._rvar)
        if not np.isfinite(dx).all() or not np.isfinite(pnew).all():
            self.stats.diverged = True
            log.warning("non-finite update at t=%.3f (%s); skipped", stamp, step)
            return False
        self.est.p = ErrorCov(pnew)
        self.est.x = boxplus(self.est.x, dx)
        self._emit("update", stamp, h=h)
        self._apply_usa(x_minus, stamp)
        return True

    def _apply_usa(self, x_minus: SwfState, stamp: float) -> None:
        if self.cfg.strategy in USA_STRATEGIES:
            self._apply_usa_between(x_minus, self.est.x, stamp)

    def slam_update(self, seen: list[tuple[int, np.ndarray]], stamp: float) -> None:
        """One batched update over all state features observed this frame.

        Every row shares the newest clone, so the Jacobian chain is
        evaluated for the whole batch at once (same math as
        ``vision.jacobians`` row by row).
        """
        if not seen:
            return
        x = self.est.x
        lay = x.layout()
        ci = len(x.clones) - 1
        clone = x.clones[ci]
        ext = self.cfg.extrinsics
        fej = self.cfg.strategy == Strategy.FEJ
        rot_l = clone.first_rot if fej and clone.first_rot is not None else clone.rot
        pos_l = clone.first_pos if fej and clone.first_pos is not None else clone.pos
        idx = np.array([j for j, _ in seen])
        uvs = np.array([uv for _, uv in seen])
        pf = np.array([x.features[j].pos for j in idx])
        if fej:
            pf_l = np.array([
                x.features[j].first_pos
                if x.features[j].first_pos is not None else x.features[j].pos
                for j in idx])
        else:
            pf_l = pf
        rc, tc = ext.cam_from_global(clone.rot, clone.pos)
        rcl, tcl = ext.cam_from_global(rot_l, pos_l)
        pc = pf @ rc.T + tc        # residual chain, live states
        pcl = pf_l @ rcl.T + tcl   # Jacobian chain, strategy-selected states
        good = (pc[:, 2] > Z_MIN) & (pcl[:, 2] > Z_MIN)
        if not good.any():
            return
        idx, uvs, pf_l = idx[good], uvs[good], pf_l[good]
        pc, pcl = pc[good], pcl[good]
        m = len(idx)
        r = (uvs - pc[:, :2] / pc[:, 2:]).ravel()
        iz = 1.0 / pcl[:, 2]
        dproj = np.zeros((m, 2, 3))
        dproj[:, 0, 0] = iz
        dproj[:, 1, 1] = iz
        dproj[:, 0, 2] = -pcl[:, 0] * iz * iz
        dproj[:, 1, 2] = -pcl[:, 1] * iz * iz
        front = dproj @ ext.rot
        hf = front @ rot_l.T
        pb = (pf_l - pos_l) @ rot_l
        sk = np.zeros((m, 3, 3))
        sk[:, 0, 1] = -pb[:, 2]
        sk[:, 0, 2] = pb[:, 1]
        sk[:, 1, 0] = pb[:, 2]
        sk[:, 1, 2] = -pb[:, 0]
        sk[:, 2, 0] = -pb[:, 1]
        sk[:, 2, 1] = pb[:, 0]
        h3 = np.zeros((m, 2, lay.dim))
        h3[:, :, lay.clone_theta(ci)] = front @ sk
        h3[:, :, lay.clone_pos(ci)] = -hf
        fb = lay.feature_base + 3 * idx
        for i in range(m):
            h3[i, :, fb[i]:fb[i] + 3] = hf[i]
        h = h3.reshape(2 * m, lay.dim)
        sizes = np.full(m, 2, dtype=np.int64)
        d2 = kernels.gate_distances(self.est.p.p, h, r, self._rvar, sizes)
        keep = d2 <= self._chi2(2)
        self.stats.gated += int((~keep).sum())
        if not keep.any():
            return
        mask = np.repeat(keep, 2)
        self.stats.slam_rows += int(mask.sum())
        self._apply_update(h[mask], r[mask], stamp, "slam")

    def _track_system(self, track: FeatureTrack,
                      pf: np.ndarray) -> StackedJac | None:
        """Stack Jacobian rows for every windowed observation of a track."""
        x = self.est.x
        lay = x.layout()
        stamp_to_idx = {c.stamp: i for i, c in enumerate(x.clones)}
        rows_hx, rows_hf, rows_r = [], [], []
        for stamp, uv in sorted(track.obs.items()):
            ci = stamp_to_idx.get(stamp)
            if ci is None:
                continue
            clone = x.clones[ci]
            try:
                pred = vision.project(clone, self.cfg.extrinsics, pf)
                hx, hf = vision.jacobians(
                    clone, self.cfg.extrinsics, pf, lay, ci,
                    self._lin_point(clone, pf, None))
            except vision.BehindCamera:
                continue
            rows_hx.append(hx)
            rows_hf.append(hf)
            rows_r.append(uv - pred)
        if len(rows_hx) < self.cfg.min_obs:
            return None
        return StackedJac(np.vstack(rows_hx), np.vstack(rows_hf),
                          np.concatenate(rows_r),
                          np.full(2 * len(rows_hx), self._rvar))

    def _triangulate_track(self, track: FeatureTrack) -> np.ndarray | None:
        x = self.est.x
        stamp_to_idx = {c.stamp: i for i, c in enumerate(x.clones)}
        obs = [Obs(stamp_to_idx[s], uv, self.cfg.sigma_uv)
               for s, uv in sorted(track.obs.items()) if s in stamp_to_idx]
        try:
            return vision.triangulate(x.clones, self.cfg.extrinsics, obs)
        except vision.TriangulationFailed:
            self.stats.tri_failed += 1
            return None

    def msckf_update(self, tracks: list[FeatureTrack], stamp: float) -> None:
        """Triangulate, project out the feature blocks, gate, one batched
        update over all surviving tracks."""
        blocks_h, blocks_r, sizes = [], [], []
        for track in tracks[:self.cfg.max_msckf_feats]:
            pf = self._triangulate_track(track)
            if pf is None:
                continue
            sj = self._track_system(track, pf)
            if sj is None or sj.rows <= 3:
                continue
            try:
                hx2, r2, _ = vision.nullspace_project(sj)
            except vision.RankDeficient:
                self.stats.tri_failed += 1
                continue
            blocks_h.append(hx2)
            blocks_r.append(r2)
            sizes.append(hx2.shape[0])
        if not blocks_h:
            return
        h = np.vstack(blocks_h)
        r = np.concatenate(blocks_r)
        d2 = kernels.gate_distances(self.est.p.p, h, r, self._rvar,
                                    np.asarray(sizes, dtype=np.int64))
        keep_rows = []
        at = 0
        used = 0
        for b, k in enumerate(sizes):
            if d2[b] <= self._chi2(k):
                keep_rows.extend(range(at, at + k))
                used += 1
            else:
                self.stats.gated += 1
            at += k
        if not keep_rows:
            return
        self.stats.msckf_tracks += used
        self._apply_update(h[keep_rows], r[keep_rows], stamp, "msckf")

    def delayed_init(self, track: FeatureTrack, stamp: float) -> bool:
        """Two-substep initialization of one SLAM feature.

        Substep 1 absorbs the feature-determining rows into a covariance
        augmentation; substep 2 is a plain update with the feature-free
        rows. Strategy branches: re-evaluation rebuilds the substep-1
        Jacobians at the corrected feature estimate; the other alignment
        strategies transform the covariance instead (per substep, or
        once at the end under the batch variant).
        """
        cfg = self.cfg
        pf_minus = self._triangulate_track(track)
        if pf_minus is None:
            return False
        sj = self._track_system(track, pf_minus)
        if sj is None or sj.rows <= 3:
            return False
        try:
            sub1, sub2 = vision.split_subsystems(sj)
        except vision.RankDeficient:
            self.stats.demoted += 1
            self.msckf_update([track], stamp)
            return False
        if np.linalg.cond(sub1.hf) > 1e8:
            self.stats.demoted += 1
            self.msckf_update([track], stamp)
            return False

        x = self.est.x
        p = self.est.p.p
        n_old = p.shape[0]
        dz = np.linalg.solve(sub1.hf, sub1.resid)
        pf_plus = pf_minus + dz

        hx1, hf1 = sub1.hx, sub1.hf
        if cfg.strategy == Strategy.USA_DTR:
            # rebuild the feature-determining rows at the corrected point
            sj_star = self._track_system(track, pf_plus)
            if sj_star is not None and sj_star.rows > 3:
                try:
                    sub1s, _ = vision.split_subsystems(sj_star)
                    hx1, hf1 = sub1s.hx, sub1s.hf
                except vision.RankDeficient:
                    pass

        hfinvt_hx = np.linalg.solve(hf1, hx1)          # hf1^-1 hx1
        pxf = -p @ hfinvt_hx.T
        pff = (hx1 @ p @ hx1.T + self._rvar * np.eye(3))
        pff = np.linalg.solve(hf1, np.linalg.solve(hf1, pff.T).T)
        pnew = np.zeros((n_old + 3, n_old + 3))
        pnew[:n_old, :n_old] = p
        pnew[:n_old, n_old:] = pxf
        pnew[n_old:, :n_old] = pxf.T
        pnew[n_old:, n_old:] = 0.5 * (pff + pff.T)

        anchored = cfg.strategy == Strategy.FEJ
        x.features.append(FeatureState(
            track.id, pf_plus, first_pos=pf_plus.copy() if anchored else None))
        self.est.p = ErrorCov(pnew)
        self.stats.inits += 1
        self._emit("init", stamp, hx1=hx1, hf1=hf1)

        batch_ref: SwfState | None = None
        if cfg.strategy in USA_STRATEGIES:
            x_at_minus = self.est.x.copy()
            x_at_minus.features[-1].pos = pf_minus.copy()
            if cfg.init_variant == "batch":
                batch_ref = x_at_minus
            elif cfg.strategy != Strategy.USA_DTR:
                # align the fresh feature block from the triangulated
                # point to the corrected one
                self._apply_usa_between(x_at_minus, self.est.x, stamp)

        # substep 2: feature-free rows, padded over the grown layout
        h2 = np.hstack([sub2.hx, np.zeros((sub2.rows, 3))])
        d2 = kernels.gate_distances(self.est.p.p, h2, sub2.resid, self._rvar,
                                    np.array([sub2.rows], dtype=np.int64))
        if d2[0] <= self._chi2(sub2.rows):
            self._apply_update(h2, sub2.resid, stamp, "init")
        else:
            self.stats.gated += 1
        if batch_ref is not None:
            self._apply_usa_between(batch_ref, self.est.x, stamp)
        return True

    def _apply_usa_between(self, x_minus: SwfState, x_plus: SwfState,
                           stamp: float) -> None:
        strat = self.cfg.strategy
        if strat != Strategy.USA_IT and not self._recording:
            # fused kernel path; the auditor needs the transform object,
            # so this only runs when nothing records events
            scale = kernels.align_direct(
                self.est.p.p, observability.yaw_column(x_minus),
                observability.yaw_column(x_plus), len(x_plus.clones),
                len(x_plus.features), alignment.SINGULAR_TOL)
            if abs(scale) < alignment.SINGULAR_TOL:
                self.stats.usa_skipped += 1
                log.warning("alignment skipped at t=%.3f: 1 + beta.alpha "
                            "= %.3e", stamp, scale)
            return
        try:
            if strat == Strategy.USA_IT:
                t = alignment.make_indirect(x_minus, x_plus)
                alignment.apply_indirect_inplace(self.est.p, t)
            else:
                t = alignment.make_direct(observability.build_basis(x_minus),
                                          observability.build_basis(x_plus))
                alignment.apply_direct_inplace(self.est.p, t)
        except alignment.SingularTransform as exc:
            self.stats.usa_skipped += 1
            log.warning("alignment skipped at t=%.3f: %s", stamp, exc)
            return
        self._emit("usa", stamp, transform=t)

    def marginalize(self, drop_clone: bool, drop_feat_ids: list[int],
                    stamp: float) -> None:
        """Remove blocks from state and covariance (row/col deletion)."""
        x = self.est.x
        lay = x.layout()
        for fid in sorted(drop_feat_ids,
                          key=lambda f: x.feature_index(f), reverse=True):
            j = x.feature_index(fid)
            sl = lay.feature(j)
            self._delete_block(sl)
            x.features.pop(j)
            self._feat_last_frame.pop(fid, None)
            lay = x.layout()
            self._emit("marginalize", stamp, drop=sl)
        if drop_clone and x.clones:
            sl = lay.clone(0)
            self._delete_block(sl)
            dropped = x.clones.pop(0)
            self._emit("marginalize", stamp, drop=sl)
            for track in self.tracks.values():
                track.obs.pop(dropped.stamp, None)

    def _delete_block(self, sl: slice) -> None:
        keep = np.ones(self.est.p.p.shape[0], dtype=bool)
        keep[sl] = False
        self.est.p = ErrorCov(self.est.p.p[np.ix_(keep, keep)])

    # -- frame driver --------------------------------------------------------

    def process_frame(self, stamp: float, frame_obs: list[tuple[int, np.ndarray]],
                      samples: list[ImuSample]) -> FilterEstimate:
        cfg = self.cfg
        self._frame_index += 1
        self.stats.frames += 1
        self.predict(samples, stamp)
        self.augment_clone(stamp)

        x = self.est.x
        state_ids = {f.id: j for j, f in enumerate(x.features)}
        seen_slam: list[tuple[int, np.ndarray]] = []
        seen_ids = set()
        for fid, uv in frame_obs:
            seen_ids.add(fid)
            if fid in state_ids:
                seen_slam.append((state_ids[fid], uv))
                self._feat_last_frame[fid] = self._frame_index
            else:
                track = self.tracks.setdefault(fid, FeatureTrack(fid))
                track.obs[stamp] = np.asarray(uv, dtype=float)
                track.last_seen = stamp

        # tracks that ended, or that have filled the window and cannot
        # become SLAM features, are consumed by the MSCKF update
        slam_room = cfg.max_slam_feats - len(x.features)
        init_ids: list[int] = []
        if cfg.mode != Mode.MSCKF:
            for fid in sorted(self.tracks):
                track = self.tracks[fid]
                if (fid in seen_ids and len(track.obs) >= cfg.max_clones - 1
                        and len(init_ids) < slam_room):
                    init_ids.append(fid)

        msckf_tracks: list[FeatureTrack] = []
        done_ids: list[int] = []
        for fid in sorted(self.tracks):
            if fid in init_ids:
                continue
            track = self.tracks[fid]
            lost = fid not in seen_ids
            saturated = len(track.obs) >= cfg.max_clones
            if lost or saturated:
                if len(track.obs) >= cfg.min_obs and cfg.mode != Mode.SLAM:
                    msckf_tracks.append(track)
                done_ids.append(fid)

        if cfg.mode != Mode.SLAM:
            self.msckf_update(msckf_tracks, stamp)
        for fid in done_ids:
            del self.tracks[fid]

        self.slam_update(seen_slam, stamp)

        if cfg.mode != Mode.MSCKF:
            for fid in init_ids:
                track = self.tracks.pop(fid)
                if self.delayed_init(track, stamp):
                    self._feat_last_frame[track.id] = self._frame_index

        x = self.est.x  # updates replace the state object
        stale = [f.id for f in x.features
                 if self._frame_index - self._feat_last_frame.get(f.id, -10)
                 >= cfg.slam_drop_after]
        self.marginalize(len(x.clones) >= cfg.max_clones, stale, stamp)

        if not np.isfinite(self.est.p.p).all():
            # flag rather than crash inside the spectrum probe; the run
            # driver drops diverged runs from the aggregate
            self.stats.diverged = True
        elif cfg.psd_check_every and self._frame_index % cfg.psd_check_every == 0:
            alignment.psd_repair(self.est.p)
        else:
            self.est.p.symmetrize()
        return self.est
