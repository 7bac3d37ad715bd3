"""Pinhole camera, so(3)/SE(3) pose algebra and Umeyama alignment.

Conventions used throughout the package:

* ``CameraPose`` maps WORLD -> CAMERA: ``x_cam = R @ x_world + T``.
* Pixels are ``(u, v) = (column, row)`` with the origin at the top-left pixel
  centre, so pixel ``(j, i)`` of a raster sits at continuous ``u=j, v=i``.
* Rotations are stored as rotation vectors kept inside the ball ``|w| <= pi``.

All array functions accept leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InvariantViolation, NonPositiveDepth

MIN_DEPTH = 1e-9


# --------------------------------------------------------------------------
# so(3)
# --------------------------------------------------------------------------

def hat(w):
    w = np.asarray(w, dtype=np.float64)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S


def vee(S):
    S = np.asarray(S)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _exp_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2 and (t-sin t)/t^3 with Taylor fallbacks."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    return a, b, c


def so3_exp(w):
    """Rodrigues' formula, batched over leading dimensions."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    K = hat(w)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Inverse of :func:`so3_exp`; result has norm in ``[0, pi]``."""
    R = np.asarray(R, dtype=np.float64)
    v = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(v, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    small = s < 1e-12
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small, 1.0, s))
    w = v * scale[..., None]

    # near pi the antisymmetric part vanishes; recover the axis from R + I
    near_pi = (c < 0.0) & (s < 1e-6)
    if np.any(near_pi):
        Rp = R[near_pi]
        B = 0.5 * (Rp + np.eye(3))
        out = []
        for Bi, vi, ti in zip(B, v[near_pi], theta[near_pi]):
            k = int(np.argmax(np.diag(Bi)))
            axis = Bi[:, k] / np.sqrt(max(Bi[k, k], 1e-300))
            axis /= np.linalg.norm(axis)
            if axis @ vi < 0:
                axis = -axis
            out.append(axis * ti)
        w = w.copy()
        w[near_pi] = np.array(out)
    return w


def right_jacobian(w):
    """Right Jacobian of SO(3): ``exp(w + d) ~= exp(w) exp(Jr(w) d)``."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _exp_coeffs(theta)
    K = hat(w)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


def canonical_rotvec(w):
    """Map rotation vectors into the canonical ball ``|w| <= pi``."""
    w = np.asarray(w, dtype=np.float64)
    n = np.linalg.norm(w, axis=-1, keepdims=True)
    over = n > np.pi
    if not np.any(over):
        return w
    safe = np.where(over, n, 1.0)
    k = np.floor((safe + np.pi) / (2.0 * np.pi))
    return np.where(over, w * (1.0 - 2.0 * np.pi * k / safe), w)


def rotation_angle(rot):
    """Geodesic angle in ``[0, pi]`` of a rotation vector or 3x3 matrix."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape[-2:] == (3, 3):
        R = rot
    else:
        R = so3_exp(rot)
    v = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(np.linalg.norm(v, axis=-1), c)


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def centered(cls, fx, fy, width, height):
        """Intrinsics with the principal point at the image centre."""
        return cls(float(fx), float(fy), (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def with_focal(self, fx, fy):
        return CameraIntrinsics(float(fx), float(fy), self.cx, self.cy, self.width, self.height)

    @property
    def focal(self):
        return np.array([self.fx, self.fy])

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform stored as (rotation vector, translation)."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = canonical_rotvec(np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, T):
        return cls(so3_log(np.asarray(R)), np.asarray(T))

    @property
    def R(self):
        return so3_exp(self.rotation)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.translation

    def inverse(self):
        R = self.R
        return CameraPose(-self.rotation, -R.T @ self.translation)

    def compose(self, other):
        """``self * other``: apply ``other`` first, then ``self``."""
        R = self.R
        return CameraPose.from_matrix(R @ other.R, R @ other.translation + self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation)

    __hash__ = None


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    timestamps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        ts = np.asarray(self.timestamps, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        if len(ts) != len(self.poses):
            raise InvariantViolation(f"{len(self.poses)} poses but {len(ts)} timestamps")
        if np.any(np.diff(ts) <= 0):
            raise InvariantViolation("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_arrays(cls, rotations, translations, timestamps):
        return cls(tuple(CameraPose(r, t) for r, t in zip(rotations, translations)), timestamps)

    @classmethod
    def identity(cls, n, fps=30.0):
        return cls(tuple(CameraPose.identity() for _ in range(n)), np.arange(n) / fps)

    @property
    def rotations(self):
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3)

    @property
    def translations(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    @property
    def centers(self):
        return np.array([p.center for p in self.poses]).reshape(-1, 3)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.timestamps, other.timestamps)
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.poses, other.poses)))

    __hash__ = None


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def _pose_arrays(pose):
    if isinstance(pose, CameraPose):
        return pose.R, pose.translation
    R, T = pose
    return np.asarray(R), np.asarray(T)


def project(points, intr, pose):
    """Project world point(s) to pixels. Raises NonPositiveDepth for z_cam <= 1e-9."""
    R, T = _pose_arrays(pose)
    pc = np.asarray(points, dtype=np.float64) @ R.T + T
    z = pc[..., 2]
    if np.any(~(z > MIN_DEPTH)):
        raise NonPositiveDepth(f"camera-frame depth {np.min(z):.3g} <= {MIN_DEPTH}")
    u = intr.fx * pc[..., 0] / z + intr.cx
    v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def unproject(pixels, depth, intr, pose):
    """Lift pixel(s) at the given z-depth to world coordinates."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("unproject needs depth > 0")
    pixels = np.asarray(pixels, dtype=np.float64)
    R, T = _pose_arrays(pose)
    pc = np.stack([(pixels[..., 0] - intr.cx) / intr.fx * depth,
                   (pixels[..., 1] - intr.cy) / intr.fy * depth,
                   depth * np.ones_like(pixels[..., 0])], axis=-1)
    return (pc - T) @ R


def relative_pose(a, b):
    """``b^-1 * a``; satisfies ``b.compose(relative_pose(a, b)) == a``."""
    return b.inverse().compose(a)


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------

def umeyama_align(src, dst, with_scale=True):
    """Least-squares similarity (or rigid) transform taking ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 points, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = np.sum(xs * xs) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")
    if D[0] == 0 or D[1] <= 1e-10 * D[0]:
        raise DegenerateConfiguration("cross-covariance is rank deficient")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, R, t)
