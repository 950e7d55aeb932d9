"""Accuracy and consistency metrics: RMSE, yaw error, NEES/ANEES."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .geometry import gamma, so3_log


def imu_error_vector(rot_true, pos_true, vel_true, bg_true, ba_true, x):
    """15-dim invariant error of the IMU block, truth relative to estimate."""
    dth = so3_log(rot_true @ x.imu.rot.T)
    g0, g1 = gamma(0, dth), gamma(1, dth)
    dp = np.linalg.solve(g1, pos_true - g0 @ x.imu.pos)
    dv = np.linalg.solve(g1, vel_true - g0 @ x.imu.vel)
    return np.concatenate([dth, dp, dv,
                           bg_true - x.gyro_bias, ba_true - x.accel_bias])


def nees(err15, p15):
    return float(err15 @ np.linalg.solve(p15, err15))


def yaw_error(rot_true, rot_est):
    """Component of the world-frame attitude error along the vertical."""
    return float(so3_log(rot_true @ rot_est.T)[2])


def anees_interval(n_samples, dim, confidence=0.95):
    """Bounds for the mean of n_samples independent dim-dof chi-squares."""
    alpha = 1.0 - confidence
    lo = chi2.ppf(alpha / 2.0, n_samples * dim) / n_samples
    hi = chi2.ppf(1.0 - alpha / 2.0, n_samples * dim) / n_samples
    return float(lo), float(hi)


@dataclass
class MetricsSummary:
    rmse_pos: float
    final_pos_error: float
    rmse_yaw: float
    mean_nees: float
    anees: float
    n_samples: int


def summarize(err_pos, err_yaw, nees_series):
    err_pos = np.asarray(err_pos, dtype=float)
    norms = np.linalg.norm(err_pos, axis=1)
    nees_series = np.asarray(nees_series, dtype=float)
    return MetricsSummary(
        rmse_pos=float(np.sqrt(np.mean(norms ** 2))),
        final_pos_error=float(norms[-1]),
        rmse_yaw=float(np.sqrt(np.mean(np.asarray(err_yaw) ** 2))),
        mean_nees=float(np.mean(nees_series)),
        anees=float(np.mean(nees_series)),
        n_samples=len(norms),
    )
