"""Five-stage dynamic bundle adjustment.

I   masking: semantic masks united with epipolar-error masks; tracks relabelled
II  camera initialisation from depth-lifted static tracks
III static bundle adjustment with the camera smoothness prior
IV  non-rigid adjustment of dynamic trajectories (cameras frozen), then
    densification of the depth maps into point maps
V   flow-consistency refinement of the static point maps (cameras frozen)

Every stage takes and returns an immutable :class:`SceneBundle`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from functools import partial
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import costs
from .epipolar import combine_masks, epipolar_error_map, estimate_fundamental, threshold_flow_mask
from .errors import (ConfigError, DegenerateMotion, DynbaError, InsufficientAnchors, InsufficientCorrespondences,
                     InsufficientStaticTracks, MissingInput)
from .geometry import CameraPose, Trajectory, umeyama_align, unproject
from .scene import (DYNAMIC, STATIC, DynamicMask, DynamicTrajectorySet, StaticPointSet,
                    dense_pointmap, load_bundle, read_manifest, sample_depth, write_ply, write_raster, write_tracks,
                    write_tum)
from .solver import Problem, SolverOptions, huber, soft_l1, solve

log = logging.getLogger(__name__)

LOCK_NAME = ".dynba.lock"
MAX_REMOVAL_FRACTION = 0.2
MIN_DENSIFY_ANCHORS = 5


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    enable_epimask: bool = True
    enable_flow_refine: bool = True
    init_window: int = 5
    refine_window: int = 5
    refine_stride: int = 2
    refine_passes: int = 2
    w_ba: float = 1.0
    w_cam: float = 1.0
    w_nr: float = 1.0
    w_arap: float = 1.0
    w_smooth: float = 1.0
    w_flow: float = 1.0
    w_depth: float = 1.0
    huber_delta: float = 2.0
    flow_eps: float = 1e-3
    tau: float = 2.0
    knn_k: int = 8
    outlier_percentile: float = 95.0
    outlier_floor: float = 1.0
    min_triangulation_deg: float = 2.0
    fundamental_samples: int = 2000
    optimize_focal_in_init: bool = False
    densify_shift: bool = False
    max_iter: int = 100
    init_max_iter: int = 300
    refine_max_iter: int = 50
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    initial_damping: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.init_window < 2 or self.refine_window < 2:
            raise ConfigError("window sizes must be >= 2")
        if self.refine_stride < 1 or self.refine_passes < 1:
            raise ConfigError("refine_stride and refine_passes must be >= 1")
        if not 50 < self.outlier_percentile < 100:
            raise ConfigError("outlier_percentile must lie in (50, 100)")
        for f in fields(self):
            if f.name.startswith("w_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        if self.min_triangulation_deg < 0:
            raise ConfigError("min_triangulation_deg must be >= 0")
        if not self.tau > 0 or self.knn_k < 1:
            raise ConfigError("tau must be positive and knn_k >= 1")

    def solver_options(self, max_iter=None):
        return SolverOptions(max_iter=max_iter or self.max_iter, grad_tol=self.grad_tol,
                             step_tol=self.step_tol, initial_damping=self.initial_damping)

    def updated(self, **changes):
        return _coerce_config(dataclasses.asdict(self) | changes)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, kind, value):
    if isinstance(value, str):
        v = value.strip()
        if kind is bool:
            if v.lower() in _TRUE:
                return True
            if v.lower() in _FALSE:
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        try:
            return int(v) if kind is int else float(v)
        except ValueError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    if kind is bool:
        return bool(value)
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _coerce_config(values):
    kinds = {f.name: {"bool": bool, "int": int, "float": float}[f.type] for f in fields(PipelineConfig)}
    out = {}
    for k, v in values.items():
        if k not in kinds:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _coerce(k, kinds[k], v)
    return PipelineConfig(**out)


def parse_config_text(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v
    return values


def load_config(directory=None, config_file=None, overrides=None):
    """Defaults, then the manifest's ``config`` section, then a config file, then overrides."""
    values = {}
    if directory is not None:
        try:
            meta = read_manifest(directory)
        except MissingInput:
            meta = {}
        values.update(meta.get("config", {}))
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise MissingInput(f"missing config file {path}")
        values.update(parse_config_text(path.read_text()))
    values.update(overrides or {})
    return _coerce_config(values)


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    status: str = "ok"
    solves: list = field(default_factory=list)
    energy_before: dict = field(default_factory=dict)
    energy_after: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self):
        return {
            "name": self.name,
            "status": self.status,
            "solves": [s.to_dict() for s in self.solves],
            "energy_before": self.energy_before,
            "energy_after": self.energy_after,
            "counts": self.counts,
        }


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    error: str = None
    intrinsics: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)

    @property
    def termination(self):
        if self.error:
            return "error"
        terms = [s.termination for st in self.stages for s in st.solves]
        return "max_iter" if "max_iter" in terms else "converged"

    @property
    def exit_code(self):
        return {"converged": 0, "max_iter": 2, "error": 1}[self.termination]

    def stage(self, name):
        return next(s for s in self.stages if s.name == name)

    def to_dict(self):
        return {
            "termination": self.termination,
            "error": self.error,
            "intrinsics": self.intrinsics,
            "energy": self.energy,
            "stages": [s.to_dict() for s in self.stages],
        }

    def timing(self):
        return {s.name: s.seconds for s in self.stages}


# --------------------------------------------------------------------------
# shared problem builders
# --------------------------------------------------------------------------

def _principal(bundle):
    return np.array([bundle.intrinsics.cx, bundle.intrinsics.cy])


def _add_cameras(problem, bundle, free_poses, free_focal):
    traj = bundle.trajectory
    T = bundle.frames
    frozen = np.ones(T, bool)
    if free_poses:
        frozen[1:] = False   # the first camera fixes the gauge
    problem.add_parameter_block("rot", traj.rotations, "so3", frozen=frozen)
    problem.add_parameter_block("trans", traj.translations, frozen=frozen)
    problem.add_parameter_block("focal", bundle.intrinsics.focal[None], frozen=not free_focal)


def _with_cameras(bundle, problem):
    rot, trans = problem.values("rot"), problem.values("trans")
    fx, fy = problem.values("focal")[0]
    traj = Trajectory.from_arrays(rot, trans, bundle.trajectory.timestamps)
    return bundle.replace(trajectory=traj, intrinsics=bundle.intrinsics.with_focal(fx, fy))


def _observations(tracks, track_ids):
    """(row into track_ids, frame, pixel) for every visible observation."""
    vis = tracks.visible[track_ids]
    rows, frames = np.nonzero(vis)
    return rows, frames, tracks.positions[track_ids[rows], frames]


def _add_ba(problem, bundle, config, block="points", track_ids=None, term="ba"):
    sp = bundle.static_points
    ids = sp.source_track if track_ids is None else track_ids
    rows, frames, obs = _observations(bundle.tracks, ids)
    fn = partial(costs.ba_residual, obs, _principal(bundle))
    problem.add_residual_block(term, fn, [("rot", frames), ("trans", frames), (block, rows),
                                          ("focal", np.zeros(len(rows), int))],
                               loss=huber(config.huber_delta), weight=config.w_ba)
    return rows, frames


def _add_cam(problem, T, config):
    if T < 3 or config.w_cam == 0:
        return
    t = np.arange(1, T - 1)
    problem.add_residual_block("cam", costs.cam_smooth_residual,
                               [("rot", t - 1), ("trans", t - 1), ("rot", t), ("trans", t),
                                ("rot", t + 1), ("trans", t + 1)], weight=config.w_cam)


def _depth_samples(bundle, frames, pixels, fallback=False):
    d = np.zeros(len(frames))
    ok = np.zeros(len(frames), bool)
    for t in np.unique(frames):
        sel = frames == t
        d[sel], ok[sel] = sample_depth(bundle.depths[t].values, pixels[sel], fallback=fallback)
    return d, ok


def _unproject_obs(bundle, frames, pixels, depth):
    out = np.empty((len(frames), 3))
    traj = bundle.trajectory
    for t in np.unique(frames):
        sel = frames == t
        out[sel] = unproject(pixels[sel], depth[sel], bundle.intrinsics, traj.poses[t])
    return out


# --------------------------------------------------------------------------
# Stage I
# --------------------------------------------------------------------------

def _mask_pair(bundle, t):
    for t2 in (t + 1, t - 1):
        if (t, t2) in bundle.flows:
            return t2
    return None


def label_tracks(tracks, masks):
    """Majority vote of each track's visible positions against the combined masks.

    Ties count as dynamic so that doubtful tracks stay out of the static
    adjustment.
    """
    K, T = tracks.visible.shape
    H, W = masks[0].combined.shape
    dyn = np.zeros(K)
    for t in range(T):
        vis = tracks.visible[:, t]
        p = np.rint(tracks.positions[vis, t]).astype(int)
        p[:, 0] = np.clip(p[:, 0], 0, W - 1)
        p[:, 1] = np.clip(p[:, 1], 0, H - 1)
        dyn[vis] += masks[t].combined[p[:, 1], p[:, 0]]
    n = tracks.visible.sum(axis=1)
    return np.where(dyn >= n / 2.0, DYNAMIC, STATIC).astype(np.uint8)


def stage1_masking(bundle, config, record=None):
    """Build combined dynamic masks and relabel every track."""
    record = record or StageRecord("masking")
    masks, errors = [], {}
    degenerate = 0
    for t in range(bundle.frames):
        sem = bundle.masks[t].semantic
        flow_mask = np.zeros_like(sem)
        t2 = _mask_pair(bundle, t) if config.enable_epimask else None
        if t2 is not None:
            flow = bundle.flows[(t, t2)]
            try:
                F, _, _ = estimate_fundamental(flow, config.fundamental_samples, config.seed + t,
                                               exclude=sem)
                err = epipolar_error_map(flow, F)
                errors[t] = err
                flow_mask = threshold_flow_mask(err, config.tau)
            except (DegenerateMotion, InsufficientCorrespondences) as exc:
                log.info("frame %d: %s; using the semantic mask only", t, exc)
                degenerate += 1
        masks.append(DynamicMask(t, sem, flow_mask, combine_masks(sem, flow_mask)))
    labels = label_tracks(bundle.tracks, masks)
    record.counts.update({
        "degenerate_pairs": degenerate,
        "dynamic_tracks": int(np.sum(labels == DYNAMIC)),
        "static_tracks": int(np.sum(labels == STATIC)),
        "relabelled": int(np.sum(labels != bundle.tracks.labels)),
    })
    out = bundle.replace(masks=tuple(masks), tracks=bundle.tracks.with_labels(labels))
    return out, record, errors


# --------------------------------------------------------------------------
# Stage II
# --------------------------------------------------------------------------

def init_pairs(bundle, config):
    """Residual instances of the initialisation energy.

    Every ordered frame pair (t, t') with ``0 < |t - t'| < init_window`` and a
    static track visible in both, whose depth at t is usable, contributes one
    instance. Returns ``(track, t, t', depth_at_t)`` arrays.
    """
    tracks = bundle.tracks
    st = tracks.static_index
    T = bundle.frames
    ks, ts, t2s, ds = [], [], [], []
    depth = np.zeros((len(st), T))
    ok = np.zeros((len(st), T), bool)
    rows, frames, pix = _observations(tracks, st)
    d, good = _depth_samples(bundle, frames, pix)
    depth[rows, frames] = d
    ok[rows, frames] = good
    vis = tracks.visible[st]
    for gap in range(1, config.init_window):
        for t in range(T):
            for t2 in (t + gap, t - gap):
                if not 0 <= t2 < T:
                    continue
                sel = np.flatnonzero(vis[:, t] & vis[:, t2] & ok[:, t])
                ks.append(st[sel])
                ts.append(np.full(len(sel), t))
                t2s.append(np.full(len(sel), t2))
                ds.append(depth[sel, t])
    cat = lambda a, dt: np.concatenate(a).astype(dt) if a else np.zeros(0, dt)  # noqa: E731
    return cat(ks, np.int64), cat(ts, np.int64), cat(t2s, np.int64), cat(ds, np.float64)


def _check_window_support(bundle, config, k, t, t2):
    T = bundle.frames
    w = min(config.init_window, T)
    for s in range(0, T - w + 1):
        inside = (t >= s) & (t < s + w) & (t2 >= s) & (t2 < s + w)
        n = len(np.unique(k[inside]))
        if n < 8:
            raise InsufficientStaticTracks(
                f"only {n} usable static tracks in frames {s}..{s + w - 1} (need 8)")


def _chain_initial_poses(bundle, k, t, t2, depth):
    """Consecutive-frame rigid alignment of depth-lifted static tracks."""
    tracks = bundle.tracks
    T = bundle.frames
    intr = bundle.intrinsics
    ident = CameraPose.identity()
    poses = [ident]
    for a in range(T - 1):
        fwd = np.flatnonzero((t == a) & (t2 == a + 1))
        bwd = np.flatnonzero((t == a + 1) & (t2 == a))
        common = np.intersect1d(k[fwd], k[bwd])
        rel = ident
        if len(common) >= 3:
            da = dict(zip(k[fwd], fwd))
            db = dict(zip(k[bwd], bwd))
            ia = np.array([da[c] for c in common])
            ib = np.array([db[c] for c in common])
            pa = unproject(tracks.positions[common, a], depth[ia], intr, ident)
            pb = unproject(tracks.positions[common, a + 1], depth[ib], intr, ident)
            try:
                S = umeyama_align(pa, pb, with_scale=False)
                rel = CameraPose.from_matrix(S.rotation, S.translation)
            except DynbaError:
                pass
        poses.append(rel.compose(poses[-1]))
    return poses


def stage2_init_cameras(bundle, config, record=None):
    """Poses from depth-lifted static tracks, then the initial 4D structure."""
    record = record or StageRecord("init")
    k, t, t2, d = init_pairs(bundle, config)
    _check_window_support(bundle, config, k, t, t2)
    poses = _chain_initial_poses(bundle, k, t, t2, d)
    traj = Trajectory(tuple(poses), bundle.trajectory.timestamps)
    bundle = bundle.replace(trajectory=traj)

    problem = Problem()
    _add_cameras(problem, bundle, free_poses=True, free_focal=config.optimize_focal_in_init)
    tracks = bundle.tracks
    fn = partial(costs.init_reproj_residual, tracks.positions[k, t], d, tracks.positions[k, t2],
                 _principal(bundle))
    problem.add_residual_block("init", fn, [("rot", t), ("trans", t), ("rot", t2), ("trans", t2),
                                            ("focal", np.zeros(len(k), int))],
                               loss=huber(config.huber_delta))
    rep = solve(problem, config.solver_options(config.init_max_iter))
    record.solves.append(rep)
    record.energy_before = {"init": rep.initial_cost}
    record.energy_after = {"init": rep.final_cost}
    record.counts["residuals"] = int(len(k))
    bundle = _with_cameras(bundle, problem)
    return initial_structure(bundle), record


def initial_structure(bundle):
    """Unproject depth at track positions under the current cameras.

    Static tracks get one point, lifted at their first frame with a clean
    depth sample; dynamic tracks get one point per visible frame.
    """
    tracks = bundle.tracks
    st = tracks.static_index
    rows, frames, pix = _observations(tracks, st)
    d, ok = _depth_samples(bundle, frames, pix, fallback=True)
    score = np.where(ok, 0, 1) * bundle.frames + frames
    order = np.lexsort((score, rows))
    first = order[np.r_[True, rows[order][1:] != rows[order][:-1]]]
    pts = _unproject_obs(bundle, frames[first], pix[first], d[first])
    static = StaticPointSet(pts, st[rows[first]])
    return bundle.replace(static_points=static, dynamic_points=initial_dynamic(bundle))


def initial_dynamic(bundle):
    """Lift dynamic observations through the depth maps.

    Observations whose depth sample straddles a discontinuity stay NaN: their
    position along the ray is not observable from the remaining terms, so they
    are left out of the dynamic structure. Tracks with no lifted frame are
    dropped.
    """
    tracks = bundle.tracks
    dy = tracks.dynamic_index
    pos = np.full((len(dy), bundle.frames, 3), np.nan)
    if len(dy):
        rows, frames, pix = _observations(tracks, dy)
        d, ok = _depth_samples(bundle, frames, pix)
        pos[rows[ok], frames[ok]] = _unproject_obs(bundle, frames[ok], pix[ok], d[ok])
    keep = np.isfinite(pos).all(axis=2).any(axis=1)
    return DynamicTrajectorySet(pos[keep], dy[keep])


# --------------------------------------------------------------------------
# outlier filtering and densification
# --------------------------------------------------------------------------

def filter_outliers(residuals, percentile, floor=0.0):
    """Indices to keep and to remove, by mean residual.

    An entry is removed when its residual is strictly above both the given
    percentile of all residuals and ``floor``. At most ``floor(0.2 N)``
    entries go in one pass, worst first.
    """
    r = np.asarray(residuals, dtype=np.float64)
    n = len(r)
    if n == 0:
        return np.zeros(0, int), np.zeros(0, int)
    cut = max(float(np.percentile(r, percentile)), floor)
    bad = np.flatnonzero(r > cut)
    cap = int(math.floor(MAX_REMOVAL_FRACTION * n))
    if len(bad) > cap:
        bad = bad[np.argsort(-r[bad], kind="stable")[:cap]]
    bad = np.sort(bad)
    keep = np.setdiff1d(np.arange(n), bad)
    return keep, bad


def fit_depth_scale(sparse_depth, map_depth, shift=False):
    """Median-of-ratios scale (optionally with a shift) taking map depths onto sparse depths."""
    z = np.asarray(sparse_depth, dtype=np.float64)
    d = np.asarray(map_depth, dtype=np.float64)
    if len(z) < MIN_DENSIFY_ANCHORS:
        raise InsufficientAnchors(f"{len(z)} anchors, need {MIN_DENSIFY_ANCHORS}")
    if not shift:
        return float(np.median(z / d)), 0.0
    # robust line fit: Theil-Sen style slope from pairwise medians
    i, j = np.triu_indices(len(z), 1)
    dd = d[j] - d[i]
    good = np.abs(dd) > 1e-12
    s = float(np.median((z[j] - z[i])[good] / dd[good])) if good.any() else float(np.median(z / d))
    return s, float(np.median(z - s * d))


def densify(bundle, t, shift=False):
    """Scale frame t's depth map to the optimised static points and unproject it.

    Returns ``(scale, shift, pointmap)``.
    """
    sp = bundle.static_points
    tracks = bundle.tracks
    vis = tracks.visible[sp.source_track, t]
    pose = bundle.trajectory.poses[t]
    pts = sp.points[vis]
    pix = tracks.positions[sp.source_track[vis], t]
    z = pts @ pose.R[2] + pose.translation[2]
    d, ok = sample_depth(bundle.depths[t].values, pix)
    ok &= z > 0
    s, b = fit_depth_scale(z[ok], d[ok], shift)
    raw = bundle.depths[t].values
    depth = np.where(raw > 0, s * raw + b, 0.0)
    depth = np.where(depth > 0, depth, 0.0)
    return s, b, dense_pointmap(depth, bundle.intrinsics, pose)


# --------------------------------------------------------------------------
# Stage III
# --------------------------------------------------------------------------

def _static_problem(bundle, config):
    problem = Problem()
    _add_cameras(problem, bundle, free_poses=True, free_focal=True)
    problem.add_parameter_block("points", bundle.static_points.points, eliminate=True)
    _add_ba(problem, bundle, config)
    _add_cam(problem, bundle.frames, config)
    return problem


def _per_point_residual(problem, term, rows, n):
    norms = problem.residual_norms(term)
    total = np.bincount(rows, weights=norms, minlength=n)
    count = np.bincount(rows, minlength=n)
    return total / np.maximum(count, 1)


def metric_rescale(bundle):
    """Scale structure and translations so static points agree with the depth maps.

    The factor is the median over static observations of map depth divided by
    camera-frame depth. Reprojections and the smoothness ratios are unchanged.
    """
    sp = bundle.static_points
    rows, frames, pix = _observations(bundle.tracks, sp.source_track)
    traj = bundle.trajectory
    R = np.array([p.R for p in traj.poses])
    z = np.einsum("nj,nj->n", R[frames, 2], sp.points[rows]) + traj.translations[frames, 2]
    d, ok = _depth_samples(bundle, frames, pix)
    ok &= z > 0
    if ok.sum() < MIN_DENSIFY_ANCHORS:
        return bundle, 1.0
    m = float(np.median(d[ok] / z[ok]))
    traj = Trajectory.from_arrays(traj.rotations, traj.translations * m, traj.timestamps)
    return bundle.replace(trajectory=traj, static_points=StaticPointSet(sp.points * m, sp.source_track)), m


def triangulation_angles(bundle):
    """Widest angle, in degrees, between the viewing rays of each static point."""
    sp = bundle.static_points
    vis = bundle.tracks.visible[sp.source_track]
    rays = sp.points[:, None, :] - bundle.trajectory.centers[None]
    rays /= np.linalg.norm(rays, axis=2, keepdims=True)
    cos = np.einsum("ktd,ksd->kts", rays, rays)
    both = vis[:, :, None] & vis[:, None, :]
    return np.degrees(np.arccos(np.clip(np.where(both, cos, 1.0), -1.0, 1.0))).max(axis=(1, 2))


def stage3_static_ba(bundle, config, record=None):
    """Joint refinement of poses, focal lengths and static points.

    Points whose viewing rays span less than ``min_triangulation_deg`` are
    left out: their depth is unconstrained at realistic track noise and they
    drift off along their rays, dragging the free global scale with them.
    """
    record = record or StageRecord("static_ba")
    sp = bundle.static_points
    wide = triangulation_angles(bundle) >= config.min_triangulation_deg
    record.counts["static_low_parallax"] = int(np.sum(~wide))
    if not wide.all():
        bundle = bundle.replace(static_points=StaticPointSet(sp.points[wide], sp.source_track[wide]))
    problem = _static_problem(bundle, config)
    record.energy_before = problem.term_costs()
    rep = solve(problem, config.solver_options())
    record.solves.append(rep)
    sp = bundle.static_points
    bundle = _with_cameras(bundle, problem)
    bundle = bundle.replace(static_points=StaticPointSet(problem.values("points").copy(), sp.source_track))

    rows, _ = _observations(bundle.tracks, sp.source_track)[:2]
    per_point = _per_point_residual(problem, "ba", rows, len(sp.points))
    keep, removed = filter_outliers(per_point, config.outlier_percentile, config.outlier_floor)
    record.counts["static_points"] = int(len(sp.points))
    record.counts["static_removed"] = int(len(removed))
    if len(removed):
        sp = bundle.static_points
        bundle = bundle.replace(static_points=StaticPointSet(sp.points[keep], sp.source_track[keep]))
        problem = _static_problem(bundle, config)
        rep = solve(problem, config.solver_options())
        record.solves.append(rep)
        bundle = _with_cameras(bundle, problem)
        bundle = bundle.replace(static_points=StaticPointSet(problem.values("points").copy(),
                                                             bundle.static_points.source_track))
    record.energy_after = problem.term_costs()
    bundle, m = metric_rescale(bundle)
    record.counts["metric_scale"] = m
    # re-lift the dynamic structure with the refined cameras
    return bundle.replace(dynamic_points=initial_dynamic(bundle)), record


# --------------------------------------------------------------------------
# Stage IV
# --------------------------------------------------------------------------

def _dynamic_problem(bundle, config, graph):
    dp = bundle.dynamic_points
    tracks = bundle.tracks
    vis = tracks.visible[dp.source_track] & np.isfinite(dp.positions).all(axis=2)
    var = np.full(vis.shape, -1, dtype=np.int64)
    var[vis] = np.arange(int(vis.sum()))
    problem = Problem()
    _add_cameras(problem, bundle, free_poses=False, free_focal=False)
    problem.add_parameter_block("dyn", dp.positions[vis])

    rows, frames = np.nonzero(vis)
    obs = tracks.positions[dp.source_track[rows], frames]
    var_obs = var[rows, frames]
    c = _principal(bundle)
    zeros = np.zeros(len(rows), int)
    problem.add_residual_block("nr", partial(costs.nr_residual, obs, c),
                               [("rot", frames), ("trans", frames), ("dyn", var_obs), ("focal", zeros)],
                               loss=huber(config.huber_delta), weight=config.w_nr)

    if config.w_depth > 0:
        d, ok = _depth_samples(bundle, frames, obs)
        f = math.sqrt(bundle.intrinsics.fx * bundle.intrinsics.fy)
        sel = np.flatnonzero(ok)
        problem.add_residual_block("depth", partial(costs.depth_anchor_residual, d[sel], f),
                                   [("rot", frames[sel]), ("trans", frames[sel]), ("dyn", var_obs[sel])],
                                   loss=huber(config.huber_delta), weight=config.w_depth)

    if len(graph.edges) and config.w_arap > 0:
        w = graph.weights(vis)
        e, t = np.nonzero(w)
        k, m = graph.edges[e, 0], graph.edges[e, 1]
        problem.add_residual_block("arap", costs.arap_residual,
                                   [("dyn", var[k, t]), ("dyn", var[m, t]),
                                    ("dyn", var[k, t + 1]), ("dyn", var[m, t + 1])],
                                   weight=config.w_arap)
    if config.w_smooth > 0:
        r, t = np.nonzero(vis[:, :-1] & vis[:, 1:])
        problem.add_residual_block("smooth", costs.temporal_smooth_residual,
                                   [("dyn", var[r, t]), ("dyn", var[r, t + 1])], weight=config.w_smooth)
    return problem, var, rows


def stage4_nonrigid_ba(bundle, config, record=None):
    """Dynamic trajectories with frozen cameras, outlier removal, densification."""
    record = record or StageRecord("nonrigid_ba")
    dp = bundle.dynamic_points
    if dp is not None and len(dp.source_track):
        graph = costs.build_arap_graph(dp.positions, config.knn_k)
        problem, var, rows = _dynamic_problem(bundle, config, graph)
        record.energy_before = problem.term_costs()
        rep = solve(problem, config.solver_options())
        record.solves.append(rep)
        record.energy_after = problem.term_costs()
        vis = var >= 0
        pos = np.full(dp.positions.shape, np.nan)
        pos[vis] = problem.values("dyn")
        per_track = _per_point_residual(problem, "nr", rows, len(dp.source_track))
        keep, removed = filter_outliers(per_track, config.outlier_percentile, config.outlier_floor)
        record.counts["dynamic_tracks"] = int(len(dp.source_track))
        record.counts["dynamic_unlifted"] = int(bundle.tracks.visible[dp.source_track].sum() - vis.sum())
        record.counts["dynamic_removed"] = int(len(removed))
        record.counts["arap_edges"] = int(len(graph.edges))
        kept_graph = costs.build_arap_graph(pos[keep], config.knn_k)
        bundle = bundle.replace(dynamic_points=DynamicTrajectorySet(pos[keep], dp.source_track[keep], kept_graph))
    else:
        record.status = "no_dynamic_tracks"

    scales, maps = [], []
    for t in range(bundle.frames):
        s, b, pm = densify(bundle, t, config.densify_shift)
        scales.append(s)
        maps.append(pm)
    record.counts["depth_scale_min"] = float(min(scales))
    record.counts["depth_scale_max"] = float(max(scales))
    return bundle.replace(pointmaps=tuple(maps), depth_scales=tuple(scales)), record


# --------------------------------------------------------------------------
# Stage V
# --------------------------------------------------------------------------

def confident_static(bundle, t):
    """Pixels safely away from dynamic regions and with a valid point."""
    dyn = ndimage.binary_dilation(bundle.masks[t].combined, structure=np.ones((3, 3), bool))
    valid = bundle.depths[t].valid
    if bundle.pointmaps is not None:
        valid &= np.all(np.isfinite(bundle.pointmaps[t]), axis=2)
    return ~dyn & valid


def refine_pairs(bundle, config):
    """Ordered frame pairs inside the refinement windows that have a flow file,
    with their multiplicity across overlapping windows."""
    wins = costs.make_windows(bundle.frames, config.refine_window, config.refine_stride)
    mult = {}
    for s, e in wins:
        for t in range(s, e + 1):
            for t2 in range(s, e + 1):
                if t != t2 and (t, t2) in bundle.flows:
                    mult[(t, t2)] = mult.get((t, t2), 0) + 1
    return wins, dict(sorted(mult.items()))


def camera_depth(bundle, t):
    pose = bundle.trajectory.poses[t]
    pm = bundle.pointmaps[t]
    return pm @ pose.R[2] + pose.translation[2]


def _flow_problem(bundle, config, pairs, confident, depth):
    """Flow residuals for every pair, over per-pixel depths of the confident pixels."""
    H, W = bundle.shape
    intr = bundle.intrinsics
    T = bundle.frames
    var = np.full((T, H, W), -1, dtype=np.int64)
    var[confident] = np.arange(int(confident.sum()))
    problem = Problem()
    problem.add_parameter_block("depth", depth[confident][:, None])
    vv, uu = np.mgrid[0:H, 0:W]
    grid = np.stack([uu, vv], axis=-1).astype(np.float64)
    c = np.array([intr.cx, intr.cy])
    focal = intr.focal
    poses = bundle.trajectory.poses
    used = []
    for (t, t2), mult in pairs.items():
        sel = confident[t]
        if not sel.any():
            continue
        pix = grid[sel]
        rays = np.stack([(pix[:, 0] - intr.cx) / intr.fx, (pix[:, 1] - intr.cy) / intr.fy,
                         np.ones(len(pix))], axis=1)
        M = poses[t2].R @ poses[t].R.T
        b = poses[t2].translation - M @ poses[t].translation
        n = len(pix)
        fn = partial(costs.flow_residual, pix, rays, np.broadcast_to(M, (n, 3, 3)),
                     np.broadcast_to(b, (n, 3)), bundle.flows[(t, t2)].vectors[sel], focal, c)
        problem.add_residual_block("flow", fn, [("depth", var[t][sel])],
                                   loss=soft_l1(config.flow_eps), weight=config.w_flow * mult)
        used.append((t, t2, var[t][sel]))
    return problem, var, used


def _pixel_flow_error(problem, used, n):
    """Largest flow residual norm per depth variable."""
    worst = np.zeros(n)
    norms = problem.residual_norms("flow")
    start = 0
    for _, _, idx in used:
        r = norms[start:start + len(idx)]
        np.maximum.at(worst, idx, r)
        start += len(idx)
    return worst


def stage5_flow_refine(bundle, config, record=None):
    """Per-pixel depth refinement of static point maps against the input flow."""
    record = record or StageRecord("flow_refine")
    if not config.enable_flow_refine:
        record.status = "skipped"
        return bundle, record
    T = bundle.frames
    wins, pairs = refine_pairs(bundle, config)
    record.counts["windows"] = len(wins)
    record.counts["pairs"] = len(pairs)
    depth = np.stack([camera_depth(bundle, t) for t in range(T)])
    confident = np.stack([confident_static(bundle, t) for t in range(T)])
    first = None
    for p in range(config.refine_passes):
        problem, var, used = _flow_problem(bundle, config, pairs, confident, depth)
        if first is None:
            first = (confident.copy(), problem.cost())
        rep = solve(problem, config.solver_options(config.refine_max_iter))
        record.solves.append(rep)
        depth[confident] = problem.values("depth")[:, 0]
        worst = _pixel_flow_error(problem, used, int(confident.sum()))
        drop = worst > config.tau
        record.counts[f"pass{p}_pixels"] = int(confident.sum())
        record.counts[f"pass{p}_dropped"] = int(drop.sum())
        if not drop.any():
            break
        flat = np.flatnonzero(confident.reshape(-1))
        confident.reshape(-1)[flat[drop]] = False

    # energy on the first pass's pixel set, before and after
    mask0, before = first
    after_problem, _, _ = _flow_problem(bundle, config, pairs, mask0, depth)
    record.energy_before = {"flow": before}
    record.energy_after = {"flow": after_problem.cost()}

    maps = []
    for t in range(T):
        pm = bundle.pointmaps[t].copy()
        sel = np.isfinite(depth[t]) & (depth[t] > 0) & np.all(np.isfinite(pm), axis=2)
        vv, uu = np.nonzero(sel)
        pix = np.stack([uu, vv], axis=1).astype(np.float64)
        pm[sel] = unproject(pix, depth[t][sel], bundle.intrinsics, bundle.trajectory.poses[t])
        maps.append(pm)
    return bundle.replace(pointmaps=tuple(maps)), record


# --------------------------------------------------------------------------
# energies and the full run
# --------------------------------------------------------------------------

def energy_terms(bundle, config=None):
    """Diagnostic values of every energy term at the bundle's current state.

    Terms without the state they need (e.g. no dynamic points yet) are omitted.
    Reprojection terms use the configured robust loss.
    """
    config = config or PipelineConfig()
    out = {}
    if bundle.static_points is not None:
        p = Problem()
        _add_cameras(p, bundle, False, False)
        p.add_parameter_block("points", bundle.static_points.points)
        _add_ba(p, bundle, config)
        _add_cam(p, bundle.frames, config.updated(w_cam=1.0))
        t = p.term_costs()
        out["ba"] = t.get("ba", 0.0)
        out["cam"] = t.get("cam", 0.0)
    if bundle.dynamic_points is not None and len(bundle.dynamic_points.source_track):
        graph = bundle.dynamic_points.graph or costs.build_arap_graph(bundle.dynamic_points.positions,
                                                                      config.knn_k)
        p, _, _ = _dynamic_problem(bundle, config.updated(w_depth=0.0), graph)
        t = p.term_costs()
        out["nr"] = t.get("nr", 0.0)
        out["arap"] = t.get("arap", 0.0)
        out["smooth"] = t.get("smooth", 0.0)
    if bundle.flows:
        if bundle.pointmaps is None:
            bundle = bundle.replace(pointmaps=tuple(
                dense_pointmap(d.values, bundle.intrinsics, bundle.trajectory.poses[i])
                for i, d in enumerate(bundle.depths)))
        _, pairs = refine_pairs(bundle, config)
        depth = np.stack([camera_depth(bundle, t) for t in range(bundle.frames)])
        confident = np.stack([confident_static(bundle, t) for t in range(bundle.frames)])
        p, _, _ = _flow_problem(bundle, config, pairs, confident, depth)
        out["flow"] = p.term_costs().get("flow", 0.0)
    return out


def check_inputs(bundle, config):
    """Fail before any stage runs when a required cue is missing."""
    T = bundle.frames
    if config.enable_epimask:
        missing = [t for t in range(T) if _mask_pair(bundle, t) is None]
        if missing:
            raise MissingInput(f"epipolar masking needs flow from frames {missing} to a neighbour")
    if config.enable_flow_refine:
        missing = [(t, t + 1) for t in range(T - 1) if (t, t + 1) not in bundle.flows]
        if missing:
            raise MissingInput(f"flow refinement needs flow files for pairs {missing[:5]}")


class _Lock:
    def __init__(self, directory):
        if not Path(directory).is_dir():
            raise MissingInput(f"bundle directory {directory} does not exist")
        self.path = Path(directory) / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DynbaError(f"{self.path} exists: another run is using this directory") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def run_stages(bundle, config, report=None):
    """Run stages I-V in order on an in-memory bundle; returns (bundle, report, extras)."""
    report = report if report is not None else RunReport()
    extras = {}

    def timed(name, fn):
        rec = StageRecord(name)
        report.stages.append(rec)
        t0 = time.perf_counter()
        out = fn(rec)
        rec.seconds = time.perf_counter() - t0
        return out

    bundle, _, extras["epipolar"] = timed("masking", lambda r: stage1_masking(bundle, config, r))
    bundle, _ = timed("init", lambda r: stage2_init_cameras(bundle, config, r))
    bundle, _ = timed("static_ba", lambda r: stage3_static_ba(bundle, config, r))
    frozen = (bundle.trajectory, bundle.intrinsics)
    bundle, _ = timed("nonrigid_ba", lambda r: stage4_nonrigid_ba(bundle, config, r))
    bundle, _ = timed("flow_refine", lambda r: stage5_flow_refine(bundle, config, r))
    if bundle.trajectory != frozen[0] or bundle.intrinsics != frozen[1]:
        raise DynbaError("camera parameters changed during a frozen stage")
    intr = bundle.intrinsics
    report.intrinsics = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}
    report.energy = energy_terms(bundle, config)
    return bundle, report, extras


def write_outputs(out_dir, bundle, report, extras=None, figures=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", bundle.trajectory)
    sp = bundle.static_points
    write_ply(out / "points_static.ply", sp.points, sp.source_track)
    dp = bundle.dynamic_points
    for t in range(bundle.frames):
        if dp is not None:
            sel = np.all(np.isfinite(dp.positions[:, t]), axis=1)
            write_ply(out / f"points_dyn_{t:06d}.ply", dp.positions[sel, t], dp.source_track[sel])
        pm = bundle.pointmaps[t]
        write_raster(out / "pointmap" / f"{t:06d}.dvr", np.nan_to_num(pm, nan=0.0), np.float32)
        z = camera_depth(bundle, t)
        write_raster(out / "depth" / f"{t:06d}.dvr", np.where(np.isfinite(z) & (z > 0), z, 0.0), np.float32)
        m = bundle.masks[t]
        write_raster(out / "mask_flow" / f"{t:06d}.dvr", m.flow_based, np.uint8)
        write_raster(out / "mask_combined" / f"{t:06d}.dvr", m.combined, np.uint8)
    intr = bundle.intrinsics
    cam = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
           "width": intr.width, "height": intr.height}
    (out / "camera.json").write_text(json.dumps(cam, indent=1, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_cost_history, plot_trajectory
        plot_trajectory(out / "figures" / "trajectory.png", bundle.trajectory)
        plot_cost_history(out / "figures" / "cost_history.png", report)


def run_pipeline(directory, config=None, out_dir=None, figures=True):
    """Load a bundle directory, run every stage and write results to ``out/``."""
    directory = Path(directory)
    config = config or load_config(directory)
    out_dir = Path(out_dir) if out_dir else directory / "out"
    report = RunReport()
    with _Lock(directory):
        try:
            bundle = load_bundle(directory)
            check_inputs(bundle, config)
            bundle, report, extras = run_stages(bundle, config, report)
            write_outputs(out_dir, bundle, report, extras, figures)
        except DynbaError as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
            raise
        finally:
            (directory / "run_timing.json").write_text(json.dumps(report.timing(), indent=1) + "\n")
    return report


def run_masking(directory, config=None, out_dir=None):
    """Stage I alone: write flow, combined and epipolar-error rasters plus relabelled tracks."""
    directory = Path(directory)
    config = config or load_config(directory)
    out = Path(out_dir) if out_dir else directory / "out"
    with _Lock(directory):
        bundle = load_bundle(directory)
        bundle, record, errors = stage1_masking(bundle, config)
        for m in bundle.masks:
            write_raster(out / "mask_flow" / f"{m.frame_index:06d}.dvr", m.flow_based, np.uint8)
            write_raster(out / "mask_combined" / f"{m.frame_index:06d}.dvr", m.combined, np.uint8)
        for t, err in sorted(errors.items()):
            write_raster(out / "epipolar_error" / f"{t:06d}.dvr", err.errors, np.float32)
        write_tracks(out / "tracks.bin", bundle.tracks)
    return record
