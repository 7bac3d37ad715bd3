"""Scene container, on-disk formats and exporters.

Bundle directory layout::

    meta.json                 manifest: T, H, W, intrinsics, timestamps, camera state
    depth/%06d.dvr            f32 depth, 0 = invalid
    flow/%06d_%06d.dvr        f32 (H, W, 2) flow from the first to the second frame
    mask_sem/%06d.dvr         u8 semantic dynamic mask
    tracks.bin                tracklet table
    mask_flow/, mask_combined/  u8 masks written after masking has run
    state/                    optimized structure (f64 rasters)

Raster files (``.dvr``) are little-endian: ``b"DVR1"``, u32 height, u32 width,
u32 channels, u8 dtype tag (0 = f32, 1 = u8, 2 = f64), then the row-major payload.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, InvariantViolation, MissingInput, NotDensified
from .geometry import CameraIntrinsics, CameraPose, Trajectory, unproject

STATIC, DYNAMIC = 0, 1

_MAGIC = b"DVR1"
_HEADER = struct.Struct("<4sIIIB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}


# --------------------------------------------------------------------------
# rasters
# --------------------------------------------------------------------------

def write_raster(path, array, dtype=None):
    """Write an (H, W) or (H, W, C) array as a DVR raster."""
    a = np.asarray(array)
    if dtype is not None:
        a = a.astype(dtype)
    if a.dtype == bool:
        a = a.astype(np.uint8)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.dtype not in _TAGS:
        raise FormatError(f"cannot store array of shape {a.shape} dtype {a.dtype}")
    tag = _TAGS[a.dtype]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, a.shape[0], a.shape[1], a.shape[2], tag))
        f.write(np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes())


def read_raster(path):
    """Read a DVR raster as an (H, W, C) array in its stored dtype."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing raster {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, c, tag = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    n = h * w * c
    if len(data) != _HEADER.size + n * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match {h}x{w}x{c}")
    return np.frombuffer(data, dtype=dt, offset=_HEADER.size).reshape(h, w, c)


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    frame_index: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise InvariantViolation(f"depth frame {self.frame_index}: expected a 2-D raster")
        bad = ~np.isfinite(v) | (v < 0)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise InvariantViolation(
                f"depth frame {self.frame_index}: invalid value {v[r, c]!r} at pixel (u={c}, v={r})")

    @property
    def valid(self):
        return self.values > 0


@dataclass(frozen=True)
class TrackletSet:
    """K pixel tracks over T frames.

    ``positions`` is (K, T, 2) in (u, v) with NaN where invisible, ``visible``
    (K, T) booleans and ``labels`` (K,) with 0 = static, 1 = dynamic.
    """

    positions: np.ndarray
    visible: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def frames(self):
        return self.visible.shape[1]

    def validate(self, width, height):
        K = len(self.labels)
        if self.positions.shape != (K, self.frames, 2) or self.visible.shape != (K, self.frames):
            raise InvariantViolation("track arrays have inconsistent shapes")
        if not np.all(np.isin(self.labels, (STATIC, DYNAMIC))):
            raise InvariantViolation("track labels must be 0 (static) or 1 (dynamic)")
        p = self.positions[self.visible]
        inside = (np.isfinite(p).all(axis=1) & (p[:, 0] >= 0) & (p[:, 0] <= width - 1)
                  & (p[:, 1] >= 0) & (p[:, 1] <= height - 1))
        if not inside.all():
            k, t = np.argwhere(self.visible)[np.argmin(inside)]
            raise InvariantViolation(
                f"track {k} frame {t}: visible position {self.positions[k, t]} outside the image")
        few = self.visible.sum(axis=1) < 2
        if few.any():
            raise InvariantViolation(f"track {int(np.argmax(few))} is visible in fewer than 2 frames")

    @property
    def static_index(self):
        return np.flatnonzero(self.labels == STATIC)

    @property
    def dynamic_index(self):
        return np.flatnonzero(self.labels == DYNAMIC)

    def with_labels(self, labels):
        return dataclasses.replace(self, labels=np.asarray(labels, dtype=np.uint8))


@dataclass(frozen=True)
class FlowField:
    source_frame: int
    target_frame: int
    vectors: np.ndarray

    def __post_init__(self):
        if abs(self.source_frame - self.target_frame) < 1:
            raise InvariantViolation("flow source and target frames must differ")
        if not np.all(np.isfinite(self.vectors)):
            raise InvariantViolation(
                f"flow {self.source_frame}->{self.target_frame}: non-finite vectors")


@dataclass(frozen=True)
class DynamicMask:
    frame_index: int
    semantic: np.ndarray
    flow_based: np.ndarray
    combined: np.ndarray

    def __post_init__(self):
        if not np.array_equal(self.combined, self.semantic | self.flow_based):
            raise InvariantViolation(f"mask frame {self.frame_index}: combined != semantic | flow")

    @classmethod
    def from_semantic(cls, t, semantic):
        semantic = np.asarray(semantic, dtype=bool)
        return cls(t, semantic, np.zeros_like(semantic), semantic.copy())


@dataclass(frozen=True)
class StaticPointSet:
    points: np.ndarray          # (N, 3)
    source_track: np.ndarray    # (N,) indices into the TrackletSet

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise InvariantViolation("static points must be finite")
        if len(np.unique(self.source_track)) != len(self.source_track):
            raise InvariantViolation("static points must map one-to-one onto tracks")


@dataclass(frozen=True)
class DynamicTrajectorySet:
    """Per-frame world positions ``(Kd, T, 3)`` for dynamic tracks, NaN where unseen."""

    positions: np.ndarray
    source_track: np.ndarray
    graph: object = None

    def check_against(self, visible):
        if not np.array_equal(np.isfinite(self.positions).all(axis=2), visible):
            raise InvariantViolation("dynamic trajectory defined outside its visible frames")


@dataclass(frozen=True)
class SceneBundle:
    frames: int
    intrinsics: CameraIntrinsics
    trajectory: Trajectory
    depths: tuple
    tracks: TrackletSet
    masks: tuple
    flows: dict = field(default_factory=dict)
    static_points: StaticPointSet = None
    dynamic_points: DynamicTrajectorySet = None
    pointmaps: tuple = None      # per-frame (H, W, 3) world points after densification
    depth_scales: tuple = None   # per-frame scale used for densification

    @property
    def shape(self):
        return self.depths[0].values.shape

    def validate(self):
        T = self.frames
        if len(self.depths) != T or len(self.masks) != T or len(self.trajectory) != T:
            raise InvariantViolation("per-frame collections must all have length T")
        if self.tracks.frames != T:
            raise InvariantViolation("tracks must span T frames")
        H, W = self.shape
        if (self.intrinsics.width, self.intrinsics.height) != (W, H):
            raise InvariantViolation("intrinsics image size disagrees with rasters")
        for d in self.depths:
            if d.values.shape != (H, W):
                raise InvariantViolation(f"depth frame {d.frame_index} has a different size")
        for m in self.masks:
            if m.semantic.shape != (H, W):
                raise InvariantViolation(f"mask frame {m.frame_index} has a different size")
        for (s, t), f in self.flows.items():
            if f.vectors.shape != (H, W, 2) or not (0 <= s < T and 0 <= t < T):
                raise InvariantViolation(f"flow {s}->{t} has a bad shape or frame index")
        self.tracks.validate(W, H)
        if self.dynamic_points is not None:
            self.dynamic_points.check_against(self.tracks.visible[self.dynamic_points.source_track])
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def export_pointmap(bundle, t):
    """World-space point map of frame ``t`` plus its validity raster."""
    if bundle.pointmaps is None:
        raise NotDensified("point maps are only available after densification")
    pm = bundle.pointmaps[t]
    return pm, np.all(np.isfinite(pm), axis=2)


def dense_pointmap(depth, intr, pose):
    """Unproject every valid pixel of a depth raster; invalid pixels are NaN."""
    H, W = depth.shape
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    d = depth.reshape(-1)
    out = np.full((H * W, 3), np.nan)
    ok = d > 0
    if ok.any():
        out[ok] = unproject(pix[ok], d[ok], intr, pose)
    return out.reshape(H, W, 3)


def sample_depth(depth, pixels, max_spread=0.1, fallback=False):
    """Bilinearly interpolate inverse depth at continuous pixel positions.

    Returns ``(depth, ok)``. A sample is rejected (``ok`` false) when any of
    its four neighbours is invalid or their depths spread by more than
    ``max_spread`` (relative), which keeps interpolation off occlusion
    boundaries. Rejected samples read 0, or with ``fallback`` the nearest
    valid neighbour depth (the foreground side of an edge).
    """
    H, W = depth.shape
    pixels = np.asarray(pixels, dtype=np.float64)
    u = np.clip(pixels[:, 0], 0, W - 1)
    v = np.clip(pixels[:, 1], 0, H - 1)
    u0 = np.minimum(np.floor(u).astype(int), W - 2)
    v0 = np.minimum(np.floor(v).astype(int), H - 2)
    a, b = u - u0, v - v0
    n = np.stack([depth[v0, u0], depth[v0, u0 + 1], depth[v0 + 1, u0], depth[v0 + 1, u0 + 1]], axis=1)
    valid = n > 0
    ok = np.all(valid, axis=1) & np.isfinite(pixels).all(axis=1)
    safe = np.where(valid, n, 1.0)
    ok &= (safe.max(axis=1) - safe.min(axis=1)) <= max_spread * safe.min(axis=1)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    out = 1.0 / np.sum(w / safe, axis=1)
    if fallback:
        near = np.min(np.where(valid, n, np.inf), axis=1)
        alt = np.where(np.isfinite(near), near, 0.0)
    else:
        alt = 0.0
    return np.where(ok, out, alt), ok


# --------------------------------------------------------------------------
# tracks
# --------------------------------------------------------------------------

def write_tracks(path, tracks):
    K, T = tracks.visible.shape
    rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("vis", "u1")])
    row = np.dtype([("label", "u1"), ("obs", rec, (T,))])
    table = np.zeros(K, dtype=row)
    table["label"] = tracks.labels
    pos = np.where(tracks.visible[..., None], tracks.positions, 0.0)
    table["obs"]["u"] = pos[..., 0]
    table["obs"]["v"] = pos[..., 1]
    table["obs"]["vis"] = tracks.visible
    with open(path, "wb") as f:
        f.write(struct.pack("<II", K, T))
        f.write(table.tobytes())


def read_tracks(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing track table {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    K, T = struct.unpack_from("<II", data)
    rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("vis", "u1")])
    row = np.dtype([("label", "u1"), ("obs", rec, (T,))])
    if len(data) != 8 + K * row.itemsize:
        raise FormatError(f"{path}: size does not match K={K}, T={T}")
    table = np.frombuffer(data, dtype=row, offset=8, count=K)
    vis = table["obs"]["vis"].astype(bool).reshape(K, T)
    if np.any(table["obs"]["vis"] > 1):
        raise FormatError(f"{path}: visibility flags must be 0 or 1")
    pos = np.stack([table["obs"]["u"], table["obs"]["v"]], axis=-1).astype(np.float64).reshape(K, T, 2)
    pos[~vis] = np.nan
    return TrackletSet(pos, vis, table["label"].astype(np.uint8).copy())


# --------------------------------------------------------------------------
# bundle persistence
# --------------------------------------------------------------------------

def _frame_path(root, sub, t):
    return Path(root) / sub / f"{t:06d}.dvr"


def _flow_path(root, s, t):
    return Path(root) / "flow" / f"{s:06d}_{t:06d}.dvr"


def save_bundle(bundle, directory):
    """Write every field of ``bundle`` under ``directory``.

    Input cues (depth, flow, tracks) are stored as float32; optimized state as
    float64 or exact JSON numbers, so a second save of a loaded bundle is
    byte-identical to the first.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    intr, traj = bundle.intrinsics, bundle.trajectory
    H, W = bundle.shape
    meta = {
        "format": "dynba-bundle",
        "version": 1,
        "T": bundle.frames,
        "H": H,
        "W": W,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
        "timestamps": [float(s) for s in traj.timestamps],
        "camera": {
            "rotations": traj.rotations.tolist(),
            "translations": traj.translations.tolist(),
        },
        "flows": [[int(s), int(t)] for s, t in sorted(bundle.flows)],
        "has_flow_masks": bool(any(m.flow_based.any() for m in bundle.masks)),
    }
    for t, d in enumerate(bundle.depths):
        write_raster(_frame_path(root, "depth", t), d.values, np.float32)
    for (s, t), f in sorted(bundle.flows.items()):
        write_raster(_flow_path(root, s, t), f.vectors, np.float32)
    for t, m in enumerate(bundle.masks):
        write_raster(_frame_path(root, "mask_sem", t), m.semantic, np.uint8)
    if meta["has_flow_masks"]:
        for t, m in enumerate(bundle.masks):
            write_raster(_frame_path(root, "mask_flow", t), m.flow_based, np.uint8)
            write_raster(_frame_path(root, "mask_combined", t), m.combined, np.uint8)
    write_tracks(root / "tracks.bin", bundle.tracks)

    state = {}
    if bundle.static_points is not None:
        sp = bundle.static_points
        write_raster(root / "state" / "static_points.dvr", sp.points[:, None, :], np.float64)
        state["static_tracks"] = sp.source_track.tolist()
    if bundle.dynamic_points is not None:
        dp = bundle.dynamic_points
        write_raster(root / "state" / "dynamic_points.dvr", np.nan_to_num(dp.positions, nan=0.0), np.float64)
        state["dynamic_tracks"] = dp.source_track.tolist()
    if bundle.pointmaps is not None:
        for t, pm in enumerate(bundle.pointmaps):
            write_raster(_frame_path(root, "state/pointmap", t), np.nan_to_num(pm, nan=0.0), np.float64)
            write_raster(_frame_path(root, "state/pointmap_valid", t), np.isfinite(pm).all(axis=2), np.uint8)
        state["depth_scales"] = [float(s) for s in bundle.depth_scales]
    if state:
        meta["state"] = state
    _write_json(root / "meta.json", meta)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_manifest(directory):
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise MissingInput(f"missing manifest {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    for key in ("T", "H", "W", "intrinsics"):
        if key not in meta:
            raise FormatError(f"{path}: missing key {key!r}")
    return meta


_FLOW_NAME = re.compile(r"^(\d{6})_(\d{6})\.dvr$")


def list_flow_pairs(directory):
    d = Path(directory) / "flow"
    if not d.is_dir():
        return []
    pairs = []
    for name in os.listdir(d):
        m = _FLOW_NAME.match(name)
        if m:
            pairs.append((int(m.group(1)), int(m.group(2))))
    return sorted(pairs)


def load_bundle(directory):
    """Load and fully validate a bundle directory."""
    root = Path(directory)
    meta = read_manifest(root)
    T, H, W = int(meta["T"]), int(meta["H"]), int(meta["W"])
    k = meta["intrinsics"]
    intr = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k.get("cx", (W - 1) / 2)),
                            float(k.get("cy", (H - 1) / 2)), W, H)
    stamps = meta.get("timestamps") or [t / 30.0 for t in range(T)]
    cam = meta.get("camera")
    if cam:
        traj = Trajectory.from_arrays(np.array(cam["rotations"], dtype=np.float64),
                                      np.array(cam["translations"], dtype=np.float64), stamps)
    else:
        traj = Trajectory.from_arrays(np.zeros((T, 3)), np.zeros((T, 3)), stamps)

    def raster(sub, t, channels, kind):
        a = read_raster(_frame_path(root, sub, t))
        if a.shape != (H, W, channels):
            raise FormatError(f"{sub} frame {t}: shape {a.shape} != {(H, W, channels)}")
        return a

    depths = tuple(DepthMap(raster("depth", t, 1, "depth")[:, :, 0].astype(np.float64), t)
                   for t in range(T))
    sem = [raster("mask_sem", t, 1, "mask")[:, :, 0] != 0 for t in range(T)]
    if meta.get("has_flow_masks"):
        masks = []
        for t in range(T):
            fm = raster("mask_flow", t, 1, "mask")[:, :, 0] != 0
            cm = raster("mask_combined", t, 1, "mask")[:, :, 0] != 0
            masks.append(DynamicMask(t, sem[t], fm, cm))
        masks = tuple(masks)
    else:
        masks = tuple(DynamicMask.from_semantic(t, s) for t, s in enumerate(sem))

    pairs = [tuple(p) for p in meta["flows"]] if "flows" in meta else list_flow_pairs(root)
    flows = {}
    for s, t in pairs:
        path = _flow_path(root, s, t)
        a = read_raster(path)
        if a.shape != (H, W, 2):
            raise FormatError(f"{path}: shape {a.shape} != {(H, W, 2)}")
        flows[(s, t)] = FlowField(s, t, a.astype(np.float64))

    tracks = read_tracks(root / "tracks.bin")
    if tracks.frames != T:
        raise FormatError(f"tracks.bin spans {tracks.frames} frames, manifest says {T}")

    state = meta.get("state", {})
    static_points = dynamic_points = pointmaps = scales = None
    if "static_tracks" in state:
        pts = read_raster(root / "state" / "static_points.dvr")[:, 0, :].astype(np.float64)
        static_points = StaticPointSet(pts, np.array(state["static_tracks"], dtype=np.int64))
    if "dynamic_tracks" in state:
        idx = np.array(state["dynamic_tracks"], dtype=np.int64)
        pos = read_raster(root / "state" / "dynamic_points.dvr").astype(np.float64).copy()
        pos[~tracks.visible[idx]] = np.nan
        dynamic_points = DynamicTrajectorySet(pos, idx)
    if "depth_scales" in state:
        pms = []
        for t in range(T):
            pm = read_raster(_frame_path(root, "state/pointmap", t)).astype(np.float64).copy()
            ok = read_raster(_frame_path(root, "state/pointmap_valid", t))[:, :, 0] != 0
            pm[~ok] = np.nan
            pms.append(pm)
        pointmaps = tuple(pms)
        scales = tuple(float(s) for s in state["depth_scales"])

    bundle = SceneBundle(T, intr, traj, depths, tracks, masks, flows, static_points,
                         dynamic_points, pointmaps, scales)
    return bundle.validate()


# --------------------------------------------------------------------------
# exporters
# --------------------------------------------------------------------------

def write_tum(path, trajectory):
    """Camera-to-world poses as ``timestamp tx ty tz qx qy qz qw``, 9 significant digits."""
    lines = []
    for stamp, pose in zip(trajectory.timestamps, trajectory.poses):
        inv = pose.inverse()
        q = Rotation.from_matrix(inv.R).as_quat()
        if q[3] < 0:
            q = -q
        q = q + 0.0  # normalise -0.0
        vals = [stamp, *(inv.translation + 0.0), *q]
        lines.append(" ".join(f"{float(x):.9g}" for x in vals))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    """Read a TUM file back into a world-to-camera :class:`Trajectory`."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing trajectory {path}")
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}: expected 8 columns, got {len(parts)}")
        rows.append([float(x) for x in parts])
    if not rows:
        raise FormatError(f"{path}: no poses")
    a = np.array(rows)
    poses = []
    for r in a:
        c2w = CameraPose(Rotation.from_quat(r[4:8]).as_rotvec(), r[1:4])
        poses.append(c2w.inverse())
    return Trajectory(tuple(poses), tuple(a[:, 0]))


def write_ply(path, points, track_ids=None):
    """Binary little-endian PLY with float x, y, z and an int track id per vertex."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.full(len(pts), -1) if track_ids is None else np.asarray(track_ids)
    vert = np.zeros(len(pts), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("track", "<i4")])
    vert["x"], vert["y"], vert["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    vert["track"] = ids
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property int track\nend_header\n")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert.tobytes())


def read_ply(path):
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii")
    m = re.search(r"element vertex (\d+)", header)
    if not m or "binary_little_endian" not in header:
        raise FormatError(f"{path}: unsupported PLY header")
    n = int(m.group(1))
    vert = np.frombuffer(data, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("track", "<i4")],
                         offset=end + len("end_header\n"), count=n)
    return np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64), vert["track"].copy()
