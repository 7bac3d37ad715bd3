"""Residual functions for every energy term, with analytic Jacobians.

Each function takes its constant observation data first and the parameter
arrays last, so ``functools.partial(fn, *constants)`` yields a residual
callable for :class:`dynba.solver.Problem`. All functions are batched: row
``i`` of every array belongs to residual instance ``i``.

Sign convention for reprojection terms: ``observed - predicted``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth
from .geometry import MIN_DEPTH, hat, right_jacobian, so3_exp, so3_log

EPS_MOTION = 1e-6


def _pinhole(pc, focal, c):
    """Pixels, d(uv)/d(pc) and d(uv)/d(focal) for camera-frame points."""
    z = pc[:, 2]
    if np.any(~(z > MIN_DEPTH)):
        raise NonPositiveDepth(f"camera-frame depth {np.min(z):.3g} <= {MIN_DEPTH}")
    fx, fy = focal[:, 0], focal[:, 1]
    xz, yz = pc[:, 0] / z, pc[:, 1] / z
    uv = np.stack([fx * xz + c[0], fy * yz + c[1]], axis=1)
    D = np.zeros((len(z), 2, 3))
    D[:, 0, 0] = fx / z
    D[:, 0, 2] = -fx * xz / z
    D[:, 1, 1] = fy / z
    D[:, 1, 2] = -fy * yz / z
    Df = np.zeros((len(z), 2, 2))
    Df[:, 0, 0] = xz
    Df[:, 1, 1] = yz
    return uv, D, Df


def _focal(focal, n):
    return np.broadcast_to(np.asarray(focal, dtype=np.float64).reshape(-1, 2), (n, 2))


# --------------------------------------------------------------------------
# reprojection terms
# --------------------------------------------------------------------------

def ba_residual(obs, c, rot, trans, point, focal, jac=False):
    """Static bundle-adjustment residual ``Z_kt - pi(X_k, xi_t)``.

    Parameter order: camera rotation vector, translation, world point, (fx, fy).
    ``c`` is the fixed principal point.
    """
    n = len(obs)
    focal = _focal(focal, n)
    R = so3_exp(rot)
    pc = np.einsum("nij,nj->ni", R, point) + trans
    uv, D, Df = _pinhole(pc, focal, c)
    r = obs - uv
    if not jac:
        return r
    J_point = -D @ R
    J_trans = -D
    J_rot = D @ R @ hat(point) @ right_jacobian(rot)
    return r, [J_rot, J_trans, J_point, -Df]


def nr_residual(obs, c, rot, trans, point, focal, jac=False):
    """Non-rigid residual ``Z_kt - pi(X_kt, xi_t)``; the point is per-frame."""
    return ba_residual(obs, c, rot, trans, point, focal, jac=jac)


def init_reproj_residual(obs_src, depth, obs_dst, c, rot_a, trans_a, rot_b, trans_b, focal,
                         jac=False):
    """Depth-lifted transfer residual ``Z_kt' - pi(pi^-1(Z_kt, D_t, xi_t), xi_t')``.

    ``a`` is the source frame t, ``b`` the target frame t'.
    """
    n = len(obs_src)
    focal = _focal(focal, n)
    fx, fy = focal[:, 0], focal[:, 1]
    q = np.stack([(obs_src[:, 0] - c[0]) / fx * depth,
                  (obs_src[:, 1] - c[1]) / fy * depth,
                  depth], axis=1)
    Ra = so3_exp(rot_a)
    Rb = so3_exp(rot_b)
    y = q - trans_a
    X = np.einsum("nji,nj->ni", Ra, y)
    pc = np.einsum("nij,nj->ni", Rb, X) + trans_b
    uv, D, Df = _pinhole(pc, focal, c)
    r = obs_dst - uv
    if not jac:
        return r
    RaT = np.swapaxes(Ra, 1, 2)
    DRb = D @ Rb
    dX_rota = RaT @ hat(y) @ right_jacobian(-rot_a)
    dX_transa = -RaT
    dq_f = np.zeros((n, 3, 2))
    dq_f[:, 0, 0] = -(obs_src[:, 0] - c[0]) * depth / fx**2
    dq_f[:, 1, 1] = -(obs_src[:, 1] - c[1]) * depth / fy**2
    dX_f = RaT @ dq_f
    J_rota = -DRb @ dX_rota
    J_transa = -DRb @ dX_transa
    J_rotb = DRb @ hat(X) @ right_jacobian(rot_b)
    J_transb = -D
    J_f = -(DRb @ dX_f + Df)
    return r, [J_rota, J_transa, J_rotb, J_transb, J_f]


def depth_anchor_residual(depth, scale, rot, trans, point, jac=False):
    """Relative camera-depth deviation ``scale * (z_cam - d) / d`` of a point."""
    R = so3_exp(rot)
    pc = np.einsum("nij,nj->ni", R, point) + trans
    k = (scale / depth)[:, None]
    r = k * (pc[:, 2:3] - depth[:, None])
    if not jac:
        return r
    n = len(depth)
    J_point = (k[:, :, None] * R[:, 2:3, :])
    J_trans = np.zeros((n, 1, 3))
    J_trans[:, 0, 2] = k[:, 0]
    J_rot = -k[:, :, None] * (R @ hat(point) @ right_jacobian(rot))[:, 2:3, :]
    return r, [J_rot, J_trans, J_point]


# --------------------------------------------------------------------------
# camera smoothness
# --------------------------------------------------------------------------

def _relative(rot_x, trans_x, rot_y, trans_y):
    """``y^-1 * x`` as (R, T) plus the pieces needed for its derivatives."""
    Rx = so3_exp(rot_x)
    Ry = so3_exp(rot_y)
    RyT = np.swapaxes(Ry, 1, 2)
    dT = trans_x - trans_y
    return RyT @ Rx, np.einsum("nij,nj->ni", RyT, dT), RyT, dT


def _angle_and_axis(R):
    phi = so3_log(R)
    theta = np.linalg.norm(phi, axis=1)
    axis = np.where(theta[:, None] > 1e-12, phi / np.where(theta > 1e-12, theta, 1.0)[:, None], 0.0)
    return theta, axis


def cam_smooth_residual(rot0, trans0, rot1, trans1, rot2, trans2, jac=False, eps=EPS_MOTION):
    """Adaptive relative-motion smoothness over poses (t-1, t, t+1).

    Returns a 4-vector ``[r_rot, r_trans (3)]`` with
    ``r_rot = 2 (th_b - th_a) / (th_a + th_b)`` and
    ``r_trans = 2 (t_b - t_a) / (|t_a| + |t_b|)``, where ``a = xi_t^-1 xi_{t-1}``
    and ``b = xi_{t+1}^-1 xi_t``. Each part is 0 when its denominator is below
    ``eps`` (a stationary camera is smooth by definition).
    """
    n = len(rot0)
    Ra, ta, RyTa, dTa = _relative(rot0, trans0, rot1, trans1)
    Rb, tb, RyTb, dTb = _relative(rot1, trans1, rot2, trans2)
    tha, axa = _angle_and_axis(Ra)
    thb, axb = _angle_and_axis(Rb)
    S_rot = tha + thb
    ok_rot = S_rot >= eps
    Sr = np.where(ok_rot, S_rot, 1.0)
    r_rot = np.where(ok_rot, 2.0 * (thb - tha) / Sr, 0.0)

    na = np.linalg.norm(ta, axis=1)
    nb = np.linalg.norm(tb, axis=1)
    S_tr = na + nb
    ok_tr = S_tr >= eps
    St = np.where(ok_tr, S_tr, 1.0)
    N = tb - ta
    r_tr = np.where(ok_tr[:, None], 2.0 * N / St[:, None], 0.0)
    r = np.concatenate([r_rot[:, None], r_tr], axis=1)
    if not jac:
        return r

    # rotation part: d th / d rot for y^-1 x is  axis^T Jr(rot_x)  and  -axis^T Jr(rot_y)
    Jr0, Jr1, Jr2 = right_jacobian(rot0), right_jacobian(rot1), right_jacobian(rot2)
    dra = np.where(ok_rot, -4.0 * thb / Sr**2, 0.0)[:, None]
    drb = np.where(ok_rot, 4.0 * tha / Sr**2, 0.0)[:, None]
    tha_r0 = np.einsum("ni,nij->nj", axa, Jr0)
    tha_r1 = -np.einsum("ni,nij->nj", axa, Jr1)
    thb_r1 = np.einsum("ni,nij->nj", axb, Jr1)
    thb_r2 = -np.einsum("ni,nij->nj", axb, Jr2)
    Jrot = [dra * tha_r0, dra * tha_r1 + drb * thb_r1, drb * thb_r2]

    # translation part
    ua = np.where(na[:, None] > 0, ta / np.where(na > 0, na, 1.0)[:, None], 0.0)
    ub = np.where(nb[:, None] > 0, tb / np.where(nb > 0, nb, 1.0)[:, None], 0.0)
    I = np.eye(3)[None]
    k = np.where(ok_tr, 1.0, 0.0)[:, None, None]
    dr_ta = k * 2.0 * (-I / St[:, None, None] - N[:, :, None] * ua[:, None, :] / St[:, None, None]**2)
    dr_tb = k * 2.0 * (I / St[:, None, None] - N[:, :, None] * ub[:, None, :] / St[:, None, None]**2)
    # t_a = R1^T (T0 - T1), t_b = R2^T (T1 - T2)
    ta_T0 = RyTa
    ta_T1 = -RyTa
    ta_r1 = RyTa @ hat(dTa) @ right_jacobian(-rot1)
    tb_T1 = RyTb
    tb_T2 = -RyTb
    tb_r2 = RyTb @ hat(dTb) @ right_jacobian(-rot2)

    def stack(rot_part, trans_part):
        return np.concatenate([rot_part[:, None, :], trans_part], axis=1)

    zero = np.zeros((n, 3, 3))
    J_rot0 = stack(Jrot[0], zero)
    J_rot1 = stack(Jrot[1], dr_ta @ ta_r1)
    J_rot2 = stack(Jrot[2], dr_tb @ tb_r2)
    zr = np.zeros((n, 3))
    J_tr0 = stack(zr, dr_ta @ ta_T0)
    J_tr1 = stack(zr, dr_ta @ ta_T1 + dr_tb @ tb_T1)
    J_tr2 = stack(zr, dr_tb @ tb_T2)
    return r, [J_rot0, J_tr0, J_rot1, J_tr1, J_rot2, J_tr2]


def cam_smooth_terms(rot0, trans0, rot1, trans1, rot2, trans2, eps=EPS_MOTION):
    """The (rotation, translation) smoothness values as non-negative scalars."""
    r = cam_smooth_residual(*(np.atleast_2d(a) for a in (rot0, trans0, rot1, trans1, rot2, trans2)),
                            eps=eps)
    return np.abs(r[:, 0]), np.linalg.norm(r[:, 1:], axis=1)


# --------------------------------------------------------------------------
# dynamic motion priors
# --------------------------------------------------------------------------

def arap_residual(xk0, xm0, xk1, xm1, jac=False):
    """``d(X_k,t, X_m,t) - d(X_k,t+1, X_m,t+1)`` for a neighbour edge (k, m)."""
    e0 = xk0 - xm0
    e1 = xk1 - xm1
    n0 = np.linalg.norm(e0, axis=1)
    n1 = np.linalg.norm(e1, axis=1)
    r = (n0 - n1)[:, None]
    if not jac:
        return r
    u0 = np.where(n0[:, None] > 1e-12, e0 / np.where(n0 > 1e-12, n0, 1.0)[:, None], 0.0)
    u1 = np.where(n1[:, None] > 1e-12, e1 / np.where(n1 > 1e-12, n1, 1.0)[:, None], 0.0)
    return r, [u0[:, None, :], -u0[:, None, :], -u1[:, None, :], u1[:, None, :]]


def temporal_smooth_residual(x0, x1, jac=False):
    """``X_k,t - X_k,t+1``."""
    r = x0 - x1
    if not jac:
        return r
    I = np.broadcast_to(np.eye(3), (len(x0), 3, 3))
    return r, [I, -I]


# --------------------------------------------------------------------------
# flow projection
# --------------------------------------------------------------------------

def flow_residual(pixels, rays, M, b, flow_est, focal, c, depth, jac=False):
    """Camera-induced flow minus estimated flow for static pixels.

    The pixel's point is ``X = unproject(p, d)`` in frame t; ``M, b`` map frame
    t's camera coordinates into frame t' (``M = R_t' R_t^T``,
    ``b = T_t' - M T_t``) and ``rays`` are ``((u-cx)/fx, (v-cy)/fy, 1)``.
    The only free parameter is the depth ``d`` (shape ``(n, 1)``).
    """
    n = len(pixels)
    focal = _focal(focal, n)
    pc = np.einsum("nij,nj->ni", M, rays * depth) + b
    uv, D, _ = _pinhole(pc, focal, c)
    r = (uv - pixels) - flow_est
    if not jac:
        return r
    J = D @ np.einsum("nij,nj->ni", M, rays)[:, :, None]
    return r, [J]


def camera_flow(depth, intr, pose_src, pose_dst, pixels=None):
    """Flow induced on a static scene by moving the camera from src to dst.

    ``depth`` is an (H, W) raster; returns (H, W, 2).
    """
    H, W = depth.shape
    if pixels is None:
        vv, uu = np.mgrid[0:H, 0:W]
        pixels = np.stack([uu, vv], axis=-1).astype(np.float64)
    rays = np.stack([(pixels[..., 0] - intr.cx) / intr.fx,
                     (pixels[..., 1] - intr.cy) / intr.fy,
                     np.ones(pixels.shape[:-1])], axis=-1)
    Rs, Rd = pose_src.R, pose_dst.R
    M = Rd @ Rs.T
    b = pose_dst.translation - M @ pose_src.translation
    pc = (rays * depth[..., None]) @ M.T + b
    uv = np.stack([intr.fx * pc[..., 0] / pc[..., 2] + intr.cx,
                   intr.fy * pc[..., 1] / pc[..., 2] + intr.cy], axis=-1)
    return uv - pixels


# --------------------------------------------------------------------------
# graphs and windows
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArapGraph:
    """Mutual k-nearest-neighbour graph over dynamic tracks.

    ``edges`` are (k, m) pairs with k < m (indices into the dynamic track
    list); ``rest`` is the edge length at the pair's first co-visible frame.
    """

    edges: np.ndarray
    rest: np.ndarray
    knn_k: int

    def neighbors(self, k):
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == k, 1], e[e[:, 1] == k, 0]]))

    def weights(self, visible):
        """``w_km`` per consecutive frame pair: (E, T-1) booleans.

        An edge is active for (t, t+1) only if both endpoints are visible at
        both frames.
        """
        if len(self.edges) == 0:
            return np.zeros((0, visible.shape[1] - 1), dtype=bool)
        k, m = self.edges[:, 0], self.edges[:, 1]
        both = visible[k] & visible[m]
        return both[:, :-1] & both[:, 1:]


def build_arap_graph(positions, knn_k=8):
    """KNN graph from per-frame positions ``(K, T, 3)`` (NaN where invisible).

    Distances between two tracks are measured at their first co-visible frame;
    pairs never seen together are not neighbours. Ties go to the lower index.
    An edge is kept when each endpoint is among the other's ``knn_k`` nearest,
    so the graph is symmetric and no track has more than ``knn_k`` neighbours.
    """
    positions = np.asarray(positions, dtype=np.float64)
    K = len(positions)
    if K < 2 or knn_k < 1:
        return ArapGraph(np.zeros((0, 2), dtype=np.int64), np.zeros(0), knn_k)
    vis = np.all(np.isfinite(positions), axis=2)
    co = vis[:, None, :] & vis[None, :, :]
    has = co.any(axis=2)
    first = np.argmax(co, axis=2)
    ii, jj = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    d = np.linalg.norm(positions[ii, first] - positions[jj, first], axis=2)
    d = np.where(has, d, np.inf)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :knn_k]
    chosen = np.zeros((K, K), dtype=bool)
    rows = np.repeat(np.arange(K), order.shape[1])
    chosen[rows, order.reshape(-1)] = True
    chosen &= np.isfinite(d)
    mutual = np.triu(chosen & chosen.T, k=1)
    k, m = np.nonzero(mutual)
    edges = np.stack([k, m], axis=1).astype(np.int64)
    return ArapGraph(edges, d[k, m], knn_k)


@dataclass(frozen=True)
class WindowSet:
    windows: tuple  # inclusive (start, end) frame intervals

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)


def make_windows(T, width, stride):
    """Fixed-width sliding windows covering frames 0..T-1."""
    if width < 2 or stride < 1:
        raise ValueError("window width must be >= 2 and stride >= 1")
    width = min(width, T)
    starts = list(range(0, max(T - width, 0) + 1, stride))
    if starts[-1] + width < T:
        starts.append(T - width)
    return WindowSet(tuple((s, s + width - 1) for s in starts))
