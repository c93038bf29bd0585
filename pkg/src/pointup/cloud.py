"""Point cloud primitives: validation, kNN, FPS, normalization, patching, augmentation.

A point cloud is a plain ``(N, 3)`` float64 array.  Every routine here is a
brute-force reference implementation; ties are always broken by lower index.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError, InvalidInputError


def as_cloud(points, allow_empty=False):
    """Return ``points`` as a validated ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"expected an (N, 3) array, got shape {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty:
        raise InvalidInputError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("point cloud contains non-finite coordinates")
    return arr


def pairwise_sq_dists(a, b):
    """Exact squared distances, shape ``(len(a), len(b))``.

    Uses explicit differences rather than the ``|a|^2 + |b|^2 - 2ab`` expansion
    so that equal distances compare equal (tie-breaking depends on it), summed
    as ``dx*dx + dy*dy + dz*dz`` in that order.
    """
    diff = a[:, None, :] - b[None, :, :]
    sq = diff * diff
    return sq[..., 0] + sq[..., 1] + sq[..., 2]


@dataclass(frozen=True)
class NeighborIndex:
    center: int
    neighbors: np.ndarray
    distances: np.ndarray


def knn(cloud, center, r, include_self=False):
    """Return the ``r`` nearest points to ``cloud[center]``.

    Neighbors are sorted by ascending Euclidean distance, ties by ascending index.
    """
    pts = as_cloud(cloud)
    n = len(pts)
    if not 0 <= center < n:
        raise InvalidArgumentError(f"center index {center} out of range for N={n}")
    limit = n if include_self else n - 1
    if r < 1 or r > limit:
        raise InvalidArgumentError(f"r={r} out of range [1, {limit}]")
    d2 = pairwise_sq_dists(pts[center:center + 1], pts)[0]
    order = np.argsort(d2, kind="stable")
    if not include_self:
        order = order[order != center]
    idx = order[:r]
    return NeighborIndex(center=center, neighbors=idx, distances=np.sqrt(d2[idx]))


def knn_table(cloud, r, include_self=True):
    """Neighbor indices for every point, shape ``(N, r)``; same ordering rules as :func:`knn`."""
    pts = as_cloud(cloud)
    n = len(pts)
    limit = n if include_self else n - 1
    if r < 1 or r > limit:
        raise InvalidArgumentError(f"r={r} out of range [1, {limit}]")
    d2 = pairwise_sq_dists(pts, pts)
    if not include_self:
        # self sorts last; ties among the rest keep their index order
        d2[np.arange(n), np.arange(n)] = np.inf
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :r]


def farthest_point_sampling(cloud, k, start_index=0):
    """Greedy max-min subset of ``k`` indices starting from ``start_index``."""
    pts = as_cloud(cloud)
    n = len(pts)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k={k} out of range [1, {n}]")
    if not 0 <= start_index < n:
        raise InvalidArgumentError(f"start index {start_index} out of range for N={n}")
    selected = np.empty(k, dtype=np.intp)
    selected[0] = start_index
    diff = pts - pts[start_index]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    # selected points are parked at -1 so they are never picked again; argmax
    # takes the first maximum, i.e. the lowest index on ties
    min_d2[start_index] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def normalize_unit_sphere(cloud):
    """Center at the centroid and scale so the farthest point has norm 1.

    Returns ``(normalized, centroid, scale)``.  A zero-extent cloud keeps scale 1.
    """
    pts = as_cloud(cloud)
    if np.all(pts == pts[0]):
        # the mean of identical values can miss them by an ulp; keep the output exactly zero
        return np.zeros_like(pts), pts[0].copy(), 1.0
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))
    if scale == 0.0:
        scale = 1.0
    return centered / scale, centroid, scale


@dataclass(frozen=True)
class Patch:
    points: np.ndarray
    seed_index: int
    source_indices: np.ndarray
    centroid: np.ndarray
    scale: float


def extract_patches(cloud, patch_count=195, patch_size=256, start_index=0):
    """FPS-seeded kNN patches, each normalized to the unit sphere."""
    pts = as_cloud(cloud)
    n = len(pts)
    if patch_size < 1 or patch_size > n:
        raise InvalidArgumentError(f"patch size {patch_size} out of range [1, {n}]")
    if patch_count < 1 or patch_count > n:
        raise InvalidArgumentError(f"patch count {patch_count} out of range [1, {n}]")
    seeds = farthest_point_sampling(pts, patch_count, start_index)
    patches = []
    for seed in seeds:
        d2 = pairwise_sq_dists(pts[seed:seed + 1], pts)[0]
        idx = np.argsort(d2, kind="stable")[:patch_size]
        normed, centroid, scale = normalize_unit_sphere(pts[idx])
        patches.append(Patch(normed, int(seed), idx, centroid, scale))
    return patches


def augment(cloud, seed, rotate=True, scale_range=(0.8, 1.2), jitter_sigma=0.01,
            jitter_clip=0.03):
    """Random rotation, isotropic scale and clipped Gaussian jitter.

    Deterministic for a given ``seed``.  With ``rotate=False``,
    ``scale_range=(1, 1)`` and ``jitter_sigma=0`` the input is returned unchanged.
    """
    pts = as_cloud(cloud)
    rng = np.random.default_rng(seed)
    out = pts.copy()
    if rotate:
        rot = Rotation.random(random_state=rng).as_matrix()
        out = out @ rot.T
    lo, hi = scale_range
    if lo != 1.0 or hi != 1.0:
        out = out * rng.uniform(lo, hi)
    if jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, jitter_sigma, size=out.shape), -jitter_clip, jitter_clip)
        out = out + noise
    return out
