"""Flow-based motion segmentation through two-view epipolar geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateMotion, InsufficientCorrespondences, ShapeMismatch

RANSAC_MAX_ITER = 2000
RANSAC_THRESHOLD = 1.0
PARALLAX_FRACTION = 0.1
RANSAC_CONFIDENCE = 0.99
MIN_INLIER_RATIO = 0.2
RANK_TOL = 1e-8

_OPEN = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class EpipolarErrorMap:
    errors: np.ndarray        # (H, W) Sampson distances in pixels
    frame_pair: tuple
    fundamental: np.ndarray


def _normalize(x):
    """Hartley normalisation: centroid at 0, mean distance sqrt(2)."""
    c = x.mean(axis=0)
    d = np.mean(np.linalg.norm(x - c, axis=1))
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return np.c_[x, np.ones(len(x))] @ T.T, T


def _design(a, b):
    """Rows of the linear system ``b^T F a = 0`` for homogeneous a, b."""
    return np.einsum("ni,nj->nij", b, a).reshape(len(a), 9)


def eight_point(x1, x2):
    """Normalised 8-point fit with rank 2 enforced by zeroing the smallest singular value."""
    a, T1 = _normalize(x1)
    b, T2 = _normalize(x2)
    _, _, Vt = np.linalg.svd(_design(a, b))
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    S[2] = 0.0
    F = T2.T @ (U @ np.diag(S) @ Vt) @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F, x1, x2):
    """Sampson distance in pixels of correspondences ``x1 -> x2`` under ``F``."""
    a = np.c_[x1, np.ones(len(x1))]
    b = np.c_[x2, np.ones(len(x2))]
    Fa = a @ F.T
    Ftb = b @ F
    e = np.sum(b * Fa, axis=1)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt(e * e / den)
    return np.where(den > 0, d, np.where(e == 0, 0.0, np.inf))


def fundamental_ransac(x1, x2, seed=0, threshold=RANSAC_THRESHOLD, max_iter=RANSAC_MAX_ITER,
                       confidence=RANSAC_CONFIDENCE):
    """Robust fundamental matrix from point correspondences.

    Returns ``(F, inliers)``. Raises InsufficientCorrespondences for fewer than
    8 points and DegenerateMotion when the correspondences cannot pin down an
    epipolar geometry (no parallax, pure rotation) or fewer than 20% of them
    agree with the best model.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise InsufficientCorrespondences(f"need 8 correspondences, got {n}")
    a, _ = _normalize(x1)
    b, _ = _normalize(x2)
    sv = np.linalg.svd(_design(a, b), compute_uv=False)
    if len(sv) < 9 or sv[7] < RANK_TOL * sv[0]:
        raise DegenerateMotion("correspondences do not constrain an epipolar geometry")

    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    needed = max_iter
    it = 0
    while it < min(needed, max_iter):
        it += 1
        sample = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        inl = sampson_distance(F, x1, x2) < threshold
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
            w = count / n
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - w ** 8))
    if best_count < 8:
        raise DegenerateMotion("no model with 8 or more inliers")
    F = eight_point(x1[best], x2[best])
    inliers = sampson_distance(F, x1, x2) < threshold
    if inliers.sum() >= 8:
        F = eight_point(x1[inliers], x2[inliers])
        inliers = sampson_distance(F, x1, x2) < threshold
    if inliers.mean() < MIN_INLIER_RATIO:
        raise DegenerateMotion(f"inlier ratio {inliers.mean():.3f} below {MIN_INLIER_RATIO}")
    return F, inliers


def estimate_fundamental(flow, sample_count=2000, seed=0, exclude=None):
    """Fundamental matrix between a flow field's two frames.

    ``sample_count`` pixels are drawn (seeded) from the grid, skipping those in
    the optional ``exclude`` mask; each gives the correspondence
    ``p -> p + flow(p)``. Returns ``(F, inliers, pixels)``.

    The inlier threshold is capped at a tenth of the median displacement: a
    Sampson distance can never exceed the displacement itself, so a fixed pixel
    threshold above the parallax would accept any F.
    """
    H, W, _ = flow.vectors.shape
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    usable = np.ones(H * W, bool) if exclude is None else ~np.asarray(exclude, bool).reshape(-1)
    idx = np.flatnonzero(usable)
    if len(idx) < 8:
        raise InsufficientCorrespondences(f"only {len(idx)} usable pixels")
    rng = np.random.default_rng(seed)
    if len(idx) > sample_count:
        idx = np.sort(rng.choice(idx, sample_count, replace=False))
    x1 = pix[idx]
    x2 = x1 + flow.vectors.reshape(-1, 2)[idx]
    parallax = float(np.median(np.linalg.norm(x2 - x1, axis=1)))
    threshold = min(RANSAC_THRESHOLD, max(PARALLAX_FRACTION * parallax, 1e-9))
    F, inliers = fundamental_ransac(x1, x2, seed=seed, threshold=threshold)
    return F, inliers, x1


def epipolar_error_map(flow, F):
    """Per-pixel Sampson distance of ``(p, p + flow(p))`` under ``F``."""
    H, W, _ = flow.vectors.shape
    vv, uu = np.mgrid[0:H, 0:W]
    x1 = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    x2 = x1 + flow.vectors.reshape(-1, 2)
    err = sampson_distance(F, x1, x2).reshape(H, W)
    err = np.where(np.isfinite(err), err, np.finfo(np.float64).max)
    return EpipolarErrorMap(err, (flow.source_frame, flow.target_frame), F)


def threshold_flow_mask(err, tau=2.0):
    """``errors > tau`` cleaned by a 3x3 morphological opening.

    Erosion treats the outside of the image as foreground so objects touching
    the border are not eaten away.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    errors = err.errors if isinstance(err, EpipolarErrorMap) else np.asarray(err)
    raw = errors > tau
    eroded = ndimage.binary_erosion(raw, structure=_OPEN, border_value=1)
    return ndimage.binary_dilation(eroded, structure=_OPEN, border_value=0)


def combine_masks(sem, flow):
    sem = np.asarray(sem, dtype=bool)
    flow = np.asarray(flow, dtype=bool)
    if sem.shape != flow.shape:
        raise ShapeMismatch(f"mask shapes differ: {sem.shape} vs {flow.shape}")
    return sem | flow
