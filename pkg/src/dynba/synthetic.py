"""Synthetic 4D scenes with exact ground truth.

The world is a box-shaped room with a few static boxes and a moving cube. All
cues are rendered by analytic ray casting, so depth, tracks, flow and masks
agree with the ground-truth geometry to floating-point precision. The world
frame coincides with the first camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, CameraPose, Trajectory, so3_exp
from .scene import (DYNAMIC, STATIC, DepthMap, DynamicMask, DynamicTrajectorySet, FlowField,
                    SceneBundle, StaticPointSet, TrackletSet, write_ply, write_raster, write_tum)

PRESETS = ("arc", "dolly", "orbit")


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 20
    width: int = 64
    height: int = 48
    fx: float = 56.0
    fy: float = 56.0
    n_static: int = 400
    n_dynamic: int = 80
    preset: str = "arc"
    object_speed: float = 0.3        # metres per frame, vertical triangle wave
    object_amplitude: float = 0.6
    object_spin_deg: float = 2.0     # per frame, about the vertical axis
    n_unlabeled: int = 0             # tracks on a mover missing from the semantic masks
    flow_gap: int = 2                # flow files for |t - t'| <= flow_gap, both directions
    focal_init_error: float = 0.0    # relative error of the manifest focal length
    noise_tracks: float = 0.0
    noise_depth: float = 0.0
    noise_flow: float = 0.0
    fps: float = 30.0
    seed: int = 42

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.frames < 3:
            raise ConfigError("need at least 3 frames")
        if self.width < 8 or self.height < 8:
            raise ConfigError("image must be at least 8x8")
        if self.n_static < 8:
            raise ConfigError("need at least 8 static tracks")
        if self.n_dynamic < 0 or self.n_unlabeled < 0:
            raise ConfigError("track counts must be non-negative")
        if min(self.noise_tracks, self.noise_depth, self.noise_flow) < 0:
            raise ConfigError("noise levels must be >= 0")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.object_speed <= 0 or self.object_amplitude <= 0:
            raise ConfigError("object speed and amplitude must be positive")
        return self


@dataclass
class GroundTruth:
    intrinsics: CameraIntrinsics
    trajectory: Trajectory
    depths: np.ndarray               # (T, H, W)
    positions: np.ndarray            # (K, T, 3) world position of every track's point
    true_dynamic: np.ndarray         # (K,) bool, includes unlabeled movers
    object_masks: np.ndarray         # (T, H, W) pixels on any moving object
    object_ids: np.ndarray = field(default=None)  # (T, H, W) surface id per pixel


# --------------------------------------------------------------------------
# scene geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Box:
    center: np.ndarray
    half: np.ndarray
    inside: bool = False   # the room is seen from the inside


ROOM = 0
CUBE = 1
MOVER = 2
_ROOM = _Box(np.array([0.0, -0.45, 2.5]), np.array([3.5, 2.05, 5.5]), inside=True)
_CUBE = _Box(np.array([0.5, -0.1, 3.5]), np.array([0.45, 0.45, 0.45]))
_MOVER = _Box(np.array([-1.5, -0.6, 3.2]), np.array([0.3, 0.3, 0.3]))
_STATIC_BOXES = (
    _Box(np.array([-1.4, 1.0, 4.8]), np.array([0.5, 0.6, 0.5])),
    _Box(np.array([1.7, 0.9, 5.6]), np.array([0.6, 0.7, 0.6])),
    _Box(np.array([-0.3, -1.3, 6.2]), np.array([0.7, 0.4, 0.3])),
)
_STATIC_IDS = (ROOM, 3, 4, 5)


def _triangle(t, speed, amplitude):
    """Triangle wave in [-amplitude, amplitude] with slope +-speed, starting at -amplitude."""
    period = 4.0 * amplitude / speed
    x = np.mod(np.asarray(t, dtype=np.float64), period) / period
    return amplitude * (1.0 - 4.0 * np.abs(x - 0.5))


def _object_pose(obj, t, cfg):
    """Local-to-world (R, p) of a surface at frame t."""
    if obj == CUBE:
        off = _triangle(t, cfg.object_speed, cfg.object_amplitude)
        R = so3_exp(np.array([0.0, np.deg2rad(cfg.object_spin_deg) * t, 0.0]))
        return R, _CUBE.center + np.array([0.0, off, 0.0])
    if obj == MOVER:
        off = _triangle(t + 1.0, cfg.object_speed, cfg.object_amplitude)
        return np.eye(3), _MOVER.center + np.array([0.0, off, 0.0])
    box = _ROOM if obj == ROOM else _STATIC_BOXES[obj - 3]
    return np.eye(3), box.center.copy()


def _box_of(obj):
    return {ROOM: _ROOM, CUBE: _CUBE, MOVER: _MOVER}.get(obj) or _STATIC_BOXES[obj - 3]


_TILT = np.array([np.sin(np.deg2rad(12.0)), np.cos(np.deg2rad(12.0)), 0.0])


def _camera_to_world(t, preset):
    """Camera-to-world (R, C) for the preset path at frame t; identity at t = 0.

    Rotation axes are tilted off the vertical: with every rotation about one
    image axis, stretching the world along that axis against the matching
    focal length would leave all projections unchanged.
    """
    if preset == "arc":
        # constant-velocity orbit about a tilted axis through c
        c = np.array([0.0, 0.0, 4.5])
        R = so3_exp(_TILT * np.deg2rad(1.5) * t)
        return R, c - R @ c
    if preset == "dolly":
        step_R = so3_exp(_TILT * np.deg2rad(0.8))
        step_t = np.array([0.03, 0.0, 0.08])
        R, C = np.eye(3), np.zeros(3)
        for _ in range(int(t)):
            C = R @ step_t + C
            R = R @ step_R
        return R, C
    # orbit: accelerating orbit with a vertical bob
    c = np.array([0.0, 0.0, 4.0])
    a = np.deg2rad(2.0 * t + 0.06 * t * t)
    R = so3_exp(_TILT * a)
    return R, c - R @ c + np.array([0.0, -0.15 * np.sin(0.35 * t), 0.0])


def _surfaces(cfg):
    ids = [ROOM, CUBE, *range(3, 3 + len(_STATIC_BOXES))]
    if cfg.n_unlabeled > 0:
        ids.append(MOVER)
    return ids


def _raycast(origin, dirs, t, cfg):
    """Nearest hit along world rays; ``dirs`` are scaled so the hit parameter is camera z.

    Returns (s, obj_id, local_point).
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, -1)
    local = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        for obj in _surfaces(cfg):
            box = _box_of(obj)
            R, p = _object_pose(obj, t, cfg)
            o = R.T @ (origin - p)
            d = dirs @ R
            t1 = (-box.half - o) / d
            t2 = (box.half - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            if box.inside:
                s = np.where(tmax > 0, tmax, np.inf)
            else:
                s = np.where((tmin <= tmax) & (tmin > 1e-9), tmin, np.inf)
            closer = s < best
            best = np.where(closer, s, best)
            ids = np.where(closer, obj, ids)
            local = np.where(closer[:, None], o + s[:, None] * d, local)
    return best, ids, local


def _rays(pixels, intr):
    return np.stack([(pixels[:, 0] - intr.cx) / intr.fx,
                     (pixels[:, 1] - intr.cy) / intr.fy,
                     np.ones(len(pixels))], axis=1)


def _render(pixels, pose, t, intr, cfg):
    Rc = pose.R
    origin = pose.center
    return _raycast(origin, _rays(pixels, intr) @ Rc, t, cfg)


def _world_of(obj_ids, local, t, cfg):
    out = np.empty_like(local)
    for obj in np.unique(obj_ids):
        sel = obj_ids == obj
        R, p = _object_pose(int(obj), t, cfg)
        out[sel] = local[sel] @ R.T + p
    return out


def _pixel_grid(W, H):
    vv, uu = np.mgrid[0:H, 0:W]
    return np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def ground_truth_trajectory(cfg):
    poses = []
    for t in range(cfg.frames):
        R, C = _camera_to_world(t, cfg.preset)
        poses.append(CameraPose.from_matrix(R.T, -R.T @ C))
    return Trajectory(tuple(poses), np.arange(cfg.frames) / cfg.fps)


def _sample_tracks(kind, count, rng, traj, intr, cfg):
    """Sample surface points of the given kind at query frames and follow them."""
    T, W, H = cfg.frames, cfg.width, cfg.height
    queries = [0, T // 2] if T > 2 else [0]
    wanted = {"static": set(_STATIC_IDS), "dynamic": {CUBE}, "mover": {MOVER}}[kind]
    objs, locs = [], []
    have = 0
    for attempt in range(200):
        if have >= count:
            break
        q = queries[attempt % len(queries)]
        pix = rng.uniform([0, 0], [W - 1, H - 1], size=(4 * max(count, 8), 2))
        _, ids, local = _render(pix, traj.poses[q], q, intr, cfg)
        keep = np.isin(ids, list(wanted))
        objs.append(ids[keep])
        locs.append(local[keep])
        have += int(keep.sum())
    if have == 0:
        return np.zeros((0,), int), np.zeros((0, T, 3)), np.zeros((0, T, 2)), np.zeros((0, T), bool)
    objs = np.concatenate(objs)
    locs = np.concatenate(locs)
    K = len(objs)
    world = np.zeros((K, T, 3))
    uv = np.full((K, T, 2), np.nan)
    vis = np.zeros((K, T), bool)
    for t in range(T):
        pose = traj.poses[t]
        X = _world_of(objs, locs, t, cfg)
        world[:, t] = X
        pc = X @ pose.R.T + pose.translation
        z = pc[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        p = np.stack([intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy], axis=1)
        inside = front & (p[:, 0] >= 0) & (p[:, 0] <= W - 1) & (p[:, 1] >= 0) & (p[:, 1] <= H - 1)
        s, _, _ = _render(np.where(inside[:, None], p, 0.0), pose, t, intr, cfg)
        seen = inside & (np.abs(s - z) <= 1e-7 * np.maximum(z, 1.0))
        vis[:, t] = seen
        uv[seen, t] = p[seen]
    keep = np.flatnonzero(vis.sum(axis=1) >= 2)[:count]
    return objs[keep], world[keep], uv[keep], vis[keep]


def generate_scene(cfg=None):
    """Render a scene; returns the pipeline-facing bundle and the ground truth.

    The bundle carries the cues only: its trajectory is identity and its
    intrinsics are the true ones scaled by ``1 + focal_init_error``. Noise is
    applied on top when the config asks for it.
    """
    cfg = (cfg or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    T, W, H = cfg.frames, cfg.width, cfg.height
    intr = CameraIntrinsics.centered(cfg.fx, cfg.fy, W, H)
    traj = ground_truth_trajectory(cfg)

    grid = _pixel_grid(W, H)
    depths = np.zeros((T, H, W))
    ids = np.zeros((T, H, W), dtype=np.int64)
    locals_ = []
    for t in range(T):
        s, obj, loc = _render(grid, traj.poses[t], t, intr, cfg)
        if not np.all(np.isfinite(s)):
            raise ConfigError("camera path leaves the room")
        depths[t] = s.reshape(H, W)
        ids[t] = obj.reshape(H, W)
        locals_.append(loc)

    flows = {}
    for t in range(T):
        for g in range(1, cfg.flow_gap + 1):
            for t2 in (t + g, t - g):
                if not 0 <= t2 < T:
                    continue
                X2 = _world_of(ids[t].reshape(-1), locals_[t], t2, cfg)
                pose = traj.poses[t2]
                pc = X2 @ pose.R.T + pose.translation
                z = np.maximum(pc[:, 2], 1e-6)
                p2 = np.stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy], axis=1)
                flows[(t, t2)] = FlowField(t, t2, (p2 - grid).reshape(H, W, 2))

    parts = [_sample_tracks("static", cfg.n_static, rng, traj, intr, cfg)]
    if cfg.n_dynamic:
        parts.append(_sample_tracks("dynamic", cfg.n_dynamic, rng, traj, intr, cfg))
    if cfg.n_unlabeled:
        parts.append(_sample_tracks("mover", cfg.n_unlabeled, rng, traj, intr, cfg))
    objs = np.concatenate([p[0] for p in parts])
    world = np.concatenate([p[1] for p in parts])
    uv = np.concatenate([p[2] for p in parts])
    vis = np.concatenate([p[3] for p in parts])
    if np.sum(~np.isin(objs, (CUBE, MOVER))) < 8:
        raise ConfigError("could not place enough static tracks")

    semantic = ids == CUBE
    labels = np.where(objs == CUBE, DYNAMIC, STATIC).astype(np.uint8)
    tracks = TrackletSet(uv, vis, labels)
    tracks.validate(W, H)
    masks = tuple(DynamicMask.from_semantic(t, semantic[t]) for t in range(T))
    init_intr = intr.with_focal(cfg.fx * (1 + cfg.focal_init_error), cfg.fy * (1 + cfg.focal_init_error))
    bundle = SceneBundle(
        frames=T,
        intrinsics=init_intr,
        trajectory=Trajectory.identity(T, cfg.fps),
        depths=tuple(DepthMap(depths[t].copy(), t) for t in range(T)),
        tracks=tracks,
        masks=masks,
        flows=flows,
    ).validate()
    gt = GroundTruth(intr, traj, depths, world, np.isin(objs, (CUBE, MOVER)),
                     np.isin(ids, (CUBE, MOVER)), ids)
    if cfg.noise_tracks or cfg.noise_depth or cfg.noise_flow:
        bundle = add_noise(bundle, cfg)
    return bundle, gt


def ground_truth_state(bundle, gt):
    """The bundle with its camera and structure state set to ground truth.

    Static points come from every static-labelled track; dynamic trajectories
    from the dynamic-labelled ones.
    """
    st = bundle.tracks.static_index
    dy = bundle.tracks.dynamic_index
    static = gt.positions[st, np.argmax(bundle.tracks.visible[st], axis=1)]
    dyn = np.where(bundle.tracks.visible[dy][..., None], gt.positions[dy], np.nan)
    return bundle.replace(
        intrinsics=gt.intrinsics,
        trajectory=gt.trajectory,
        static_points=StaticPointSet(static, st),
        dynamic_points=DynamicTrajectorySet(dyn, dy),
    )


def add_noise(bundle, cfg):
    """Perturb tracks and flow with Gaussian pixel noise and depth with log-normal noise.

    Track noise is clipped so positions stay inside the image. Masks are never
    touched. With every sigma at zero the bundle is returned unchanged.
    """
    if not (cfg.noise_tracks or cfg.noise_depth or cfg.noise_flow):
        return bundle
    rng = np.random.default_rng([cfg.seed, 1])
    H, W = bundle.shape
    tracks = bundle.tracks
    if cfg.noise_tracks:
        pos = tracks.positions + rng.normal(0.0, cfg.noise_tracks, tracks.positions.shape)
        pos[..., 0] = np.clip(pos[..., 0], 0, W - 1)
        pos[..., 1] = np.clip(pos[..., 1], 0, H - 1)
        pos[~tracks.visible] = np.nan
        tracks = replace(tracks, positions=pos)
    depths = bundle.depths
    if cfg.noise_depth:
        depths = tuple(DepthMap(d.values * np.exp(rng.normal(0.0, cfg.noise_depth, d.values.shape)),
                                d.frame_index) for d in depths)
    flows = bundle.flows
    if cfg.noise_flow:
        flows = {k: FlowField(f.source_frame, f.target_frame,
                              f.vectors + rng.normal(0.0, cfg.noise_flow, f.vectors.shape))
                 for k, f in sorted(bundle.flows.items())}
    return bundle.replace(tracks=tracks, depths=depths, flows=flows)


def write_ground_truth(directory, bundle, gt):
    """Write ground truth in the same layout the pipeline uses for its outputs."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_tum(root / "trajectory.tum", gt.trajectory)
    for t, d in enumerate(gt.depths):
        write_raster(root / "depth" / f"{t:06d}.dvr", d, np.float32)
        write_raster(root / "object_mask" / f"{t:06d}.dvr", gt.object_masks[t], np.uint8)
    st = np.flatnonzero(~gt.true_dynamic)
    first = np.argmax(bundle.tracks.visible[st], axis=1)
    write_ply(root / "points_static.ply", gt.positions[st, first], st)
    intr = gt.intrinsics
    cam = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
           "width": intr.width, "height": intr.height}
    (root / "camera.json").write_text(json.dumps(cam, indent=1, sort_keys=True) + "\n")
    (root / "meta.json").write_text(json.dumps(
        {"true_dynamic": gt.true_dynamic.astype(int).tolist()}, sort_keys=True) + "\n")
