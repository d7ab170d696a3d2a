"""RMSE / NEES metrics and Monte-Carlo aggregation.

NEES values are normalized by their degrees of freedom, so a consistent
estimator sits at 1. The yaw entry uses the globally-defined orientation
error, whose third component is the error about gravity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .filter import FilterEstimate
from .state import ImuState, SwfState, boxminus, global_orientation_error


@dataclass
class EpochRow:
    ori_err_deg: float
    pos_err_m: float
    ori_nees: float
    pos_nees: float
    yaw_nees: float


@dataclass
class RunMetrics:
    t: np.ndarray
    ori_err_deg: np.ndarray
    pos_err_m: np.ndarray
    ori_nees: np.ndarray
    pos_nees: np.ndarray
    yaw_nees: np.ndarray
    diverged: bool = False
    skipped: int = 0


@dataclass
class McSummary:
    n_runs: int
    n_failed: int
    t: np.ndarray
    ori_rmse_deg: np.ndarray
    pos_rmse_m: np.ndarray
    ori_nees: np.ndarray
    pos_nees: np.ndarray
    yaw_nees: np.ndarray
    avg_ori_rmse_deg: float = field(init=False)
    avg_pos_rmse_m: float = field(init=False)
    avg_ori_nees: float = field(init=False)
    avg_pos_nees: float = field(init=False)
    avg_yaw_nees: float = field(init=False)

    def __post_init__(self):
        self.avg_ori_rmse_deg = float(np.mean(self.ori_rmse_deg))
        self.avg_pos_rmse_m = float(np.mean(self.pos_rmse_m))
        self.avg_ori_nees = float(np.mean(self.ori_nees))
        self.avg_pos_nees = float(np.mean(self.pos_nees))
        self.avg_yaw_nees = float(np.mean(self.yaw_nees))


def epoch_errors(est: FilterEstimate, truth_imu: ImuState) -> EpochRow | None:
    """Current-pose error metrics for one epoch; None when a covariance
    block is singular (the caller counts the skip)."""
    xhat = est.x
    lay = xhat.layout()
    truth = SwfState(truth_imu.copy(),
                     [c.copy() for c in xhat.clones],
                     [f.copy() for f in xhat.features])
    delta = boxminus(truth, xhat)
    th = delta[lay.theta]
    dp = delta[lay.pos]
    p_th = est.p.p[lay.theta, lay.theta]
    p_pos = est.p.p[lay.pos, lay.pos]
    th_g = global_orientation_error(truth, xhat)
    yaw_var = float(xhat.imu.rot[2] @ p_th @ xhat.imu.rot[2])
    try:
        nees_ori = float(th @ np.linalg.solve(p_th, th)) / 3.0
        nees_pos = float(dp @ np.linalg.solve(p_pos, dp)) / 3.0
        if yaw_var <= 0.0:
            return None
        nees_yaw = float(th_g[2] ** 2) / yaw_var
    except np.linalg.LinAlgError:
        return None
    return EpochRow(float(np.rad2deg(np.linalg.norm(th))),
                    float(np.linalg.norm(dp)),
                    nees_ori, nees_pos, nees_yaw)


def aggregate(runs: list[RunMetrics]) -> McSummary:
    """Per-epoch RMSE across runs plus averaged NEES; diverged runs are
    excluded from the averages and counted as failures."""
    if not runs:
        raise ValueError("need at least one run")
    ok = [r for r in runs if not r.diverged]
    failed = len(runs) - len(ok)
    if not ok:
        raise ValueError("all runs diverged")
    t = ok[0].t
    for r in ok:
        if r.t.shape != t.shape:
            raise ValueError("runs cover different epochs")
    ori = np.stack([r.ori_err_deg for r in ok])
    pos = np.stack([r.pos_err_m for r in ok])
    return McSummary(
        n_runs=len(ok), n_failed=failed, t=t.copy(),
        ori_rmse_deg=np.sqrt(np.mean(ori ** 2, axis=0)),
        pos_rmse_m=np.sqrt(np.mean(pos ** 2, axis=0)),
        ori_nees=np.mean(np.stack([r.ori_nees for r in ok]), axis=0),
        pos_nees=np.mean(np.stack([r.pos_nees for r in ok]), axis=0),
        yaw_nees=np.mean(np.stack([r.yaw_nees for r in ok]), axis=0))


def improvement(rmse_base: float, rmse_other: float) -> float:
    """Relative RMSE improvement of `other` over the baseline."""
    return (rmse_base - rmse_other) / rmse_base


def nees_histogram(values: np.ndarray, dof: int = 3,
                   bins: int = 40) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical density of dof-normalized NEES values against the
    chi-square(dof)/dof reference density on the same bins."""
    from scipy.stats import chi2
    values = np.asarray(values, dtype=float)
    hi = max(3.0, float(np.percentile(values, 99.0)))
    edges = np.linspace(0.0, hi, bins + 1)
    density, _ = np.histogram(values, bins=edges, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    ref = chi2.pdf(centers * dof, dof) * dof
    return edges, density, ref
