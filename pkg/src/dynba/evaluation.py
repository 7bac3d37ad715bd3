"""Trajectory, depth and focal-length metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, MissingInput, NoValidPixels
from .geometry import Trajectory, rotation_angle, umeyama_align
from .scene import read_raster, read_tum

MIN_DISPARITY = 1e-8


def _centers(traj):
    return traj.centers if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)


def align_trajectory(est, gt, with_scale=True):
    """Similarity taking the estimated camera centres onto the ground truth."""
    e, g = _centers(est), _centers(gt)
    if len(e) != len(g):
        raise ValueError(f"trajectory lengths differ: {len(e)} vs {len(g)}")
    return umeyama_align(e, g, with_scale=with_scale)


def ate(est, gt, with_scale=True):
    """Absolute trajectory error: RMSE of camera centres after Umeyama alignment."""
    e, g = _centers(est), _centers(gt)
    if len(e) < 3:
        raise DegenerateConfiguration("ATE needs at least 3 poses")
    S = align_trajectory(e, g, with_scale)
    d = S.apply(e) - g
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _c2w(pose):
    return np.linalg.inv(pose.matrix)


def rpe(est, gt, delta=1):
    """Relative pose error over index pairs (t, t + delta).

    Returns ``(trans_rmse, rot_rmse_degrees)``. No alignment is applied, so a
    global translation scaling changes only the translational part.
    """
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    if len(est) <= delta or delta < 1:
        raise ValueError(f"need more than delta={delta} poses")
    E = np.array([_c2w(p) for p in est.poses])
    G = np.array([_c2w(p) for p in gt.poses])
    rel_e = np.linalg.inv(E[:-delta]) @ E[delta:]
    rel_g = np.linalg.inv(G[:-delta]) @ G[delta:]
    err = np.linalg.inv(rel_g) @ rel_e
    trans = np.linalg.norm(err[:, :3, 3], axis=1)
    rot = np.degrees(rotation_angle(err[:, :3, :3]))
    return float(np.sqrt(np.mean(trans**2))), float(np.sqrt(np.mean(rot**2)))


@dataclass(frozen=True)
class DepthAlignment:
    scale: float
    shift: float = 0.0

    def apply(self, depth):
        disp = self.scale / depth + self.shift
        return 1.0 / np.maximum(disp, MIN_DISPARITY)


def fit_disparity_alignment(est, gt, mode="scale_shift"):
    """Least-squares fit of ``gt_disp ~ scale * est_disp + shift`` over paired samples."""
    x = 1.0 / np.asarray(est, dtype=np.float64)
    y = 1.0 / np.asarray(gt, dtype=np.float64)
    if mode == "scale":
        s = float(np.dot(x, y) / np.dot(x, x))
        b = 0.0
    elif mode == "scale_shift":
        A = np.stack([x, np.ones_like(x)], axis=1)
        (s, b), *_ = np.linalg.lstsq(A, y, rcond=None)
        s, b = float(s), float(b)
    else:
        raise ValueError(f"unknown alignment {mode!r}")
    if not np.isfinite(s) or s == 0:
        raise DegenerateConfiguration("depth alignment scale is zero or non-finite")
    return DepthAlignment(s, b)


def depth_metrics(est, gt, alignment="scale_shift", valid=None):
    """AbsRel and the fraction of pixels with ``max(d/g, g/d) < 1.25``.

    ``est`` and ``gt`` are stacks of depth rasters for one sequence; a single
    alignment is fitted in disparity space over all valid pixels. Pixels are
    valid where both depths are finite and positive (and ``valid`` is true).
    Returns ``(abs_rel, delta_1_25, DepthAlignment)``.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {est.shape} vs {gt.shape}")
    ok = np.isfinite(est) & np.isfinite(gt) & (est > 0) & (gt > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not ok.any():
        raise NoValidPixels("no pixel is valid in both depth sets")
    e, g = est[ok], gt[ok]
    al = fit_disparity_alignment(e, g, alignment)
    d = al.apply(e)
    abs_rel = float(np.mean(np.abs(d - g) / g))
    inlier = float(np.mean(np.maximum(d / g, g / d) < 1.25))
    return abs_rel, inlier, al


def focal_metrics(est_fx, gt_fx, est_fy=None, gt_fy=None):
    """``(AFE, RFE)`` with RFE = |est - gt| / gt.

    When both fy values are given the geometric mean ``sqrt(fx * fy)`` is
    compared instead of fx alone.
    """
    e, g = float(est_fx), float(gt_fx)
    if est_fy is not None and gt_fy is not None:
        e = float(np.sqrt(e * float(est_fy)))
        g = float(np.sqrt(g * float(gt_fy)))
    if not g > 0:
        raise ValueError("ground-truth focal length must be positive")
    afe = abs(e - g)
    return afe, afe / g


EVAL_KEYS = ("ate", "rpe_trans", "rpe_rot", "abs_rel", "delta_1_25", "afe", "rfe")


def _read_camera(directory):
    return json.loads((Path(directory) / "camera.json").read_text())


def _read_depths(directory):
    files = sorted((Path(directory) / "depth").glob("*.dvr"))
    if not files:
        raise MissingInput(f"no depth rasters under {directory}/depth")
    return np.stack([read_raster(f) for f in files]).astype(np.float64)


def evaluate_directories(est_dir, gt_dir, delta=1, alignment="scale_shift"):
    """Compare an output directory against ground truth; returns a dict over EVAL_KEYS.

    Both directories hold ``trajectory.tum``, ``depth/*.dvr`` and ``camera.json``.
    """
    est_traj = read_tum(Path(est_dir) / "trajectory.tum")
    gt_traj = read_tum(Path(gt_dir) / "trajectory.tum")
    out = {"ate": ate(est_traj, gt_traj)}
    out["rpe_trans"], out["rpe_rot"] = rpe(est_traj, gt_traj, delta)
    out["abs_rel"], out["delta_1_25"], _ = depth_metrics(_read_depths(est_dir), _read_depths(gt_dir), alignment)
    ec, gc = _read_camera(est_dir), _read_camera(gt_dir)
    out["afe"], out["rfe"] = focal_metrics(ec["fx"], gc["fx"], ec.get("fy"), gc.get("fy"))
    return out


def format_report(metrics):
    lines = ["# rfe = |f_est - f_gt| / f_gt"]
    lines += [f"{k} = {metrics[k]:.10g}" for k in EVAL_KEYS if k in metrics]
    return "\n".join(lines) + "\n"
