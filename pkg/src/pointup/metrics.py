"""Evaluation metrics: Chamfer, symmetric Hausdorff and point-to-surface distance.

Reported values use the x1e3 convention of upsampling benchmark tables.
"""

import math
from dataclasses import dataclass

import numpy as np

from .cloud import as_cloud, pairwise_sq_dists
from .errors import InvalidArgumentError, InvalidInputError

REPORT_SCALE = 1e3
_CHUNK = 2048


@dataclass(frozen=True)
class ReferenceMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        verts = np.asarray(self.vertices, float).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(verts)):
            raise InvalidInputError("mesh has non-finite vertices")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise InvalidInputError("triangle index out of range")
        if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])):
            raise InvalidInputError("triangle repeats a vertex index")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)


def _nearest_sq(a, b):
    """For each row of ``a`` the squared distance to the nearest row of ``b``."""
    out = np.empty(len(a))
    for start in range(0, len(a), _CHUNK):
        out[start:start + _CHUNK] = pairwise_sq_dists(a[start:start + _CHUNK], b).min(axis=1)
    return out


def _pair(a, b):
    try:
        return as_cloud(a), as_cloud(b)
    except InvalidInputError as exc:
        raise InvalidArgumentError(str(exc)) from exc


def chamfer(a, b):
    """Squared Chamfer distance, each direction averaged, directions summed."""
    a, b = _pair(a, b)
    # fsum rounds each side's sum once, independent of summation order
    return math.fsum(_nearest_sq(a, b)) / len(a) + math.fsum(_nearest_sq(b, a)) / len(b)


def hausdorff_metric(a, b):
    """Symmetric (un-squared) Hausdorff distance."""
    a, b = _pair(a, b)
    return float(np.sqrt(max(_nearest_sq(a, b).max(), _nearest_sq(b, a).max())))


def closest_point_on_triangle(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p`` by Voronoi-region classification.

    Vectorized over leading axes; all inputs broadcast to ``(..., 3)``.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(v, float) for v in (p, a, b, c)))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den != 0)

    # interior (face region) by default
    denom = va + vb + vc
    v = ratio(vb, denom)
    w = ratio(vc, denom)
    out = a + v[..., None] * ab + w[..., None] * ac

    def assign(mask, value):
        out[mask] = value[mask] if value.shape == out.shape else value

    # edge regions
    bc_w = ratio(d4 - d3, (d4 - d3) + (d5 - d6))
    assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + bc_w[..., None] * (c - b))
    ac_w = ratio(d2, d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac_w[..., None] * ac)
    ab_v = ratio(d1, d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab_v[..., None] * ab)
    # vertex regions take precedence
    assign((d6 >= 0) & (d5 <= d6), c)
    assign((d3 >= 0) & (d4 <= d3), b)
    assign((d1 <= 0) & (d2 <= 0), a)
    return out


def point_triangle_distance(p, a, b, c):
    q = closest_point_on_triangle(p, a, b, c)
    return np.linalg.norm(np.asarray(p, float) - q, axis=-1)


def point_to_mesh_distances(points, mesh):
    """Unsigned distance from each point to the nearest triangle of ``mesh``."""
    pts = as_cloud(points)
    if len(mesh.triangles) == 0:
        raise InvalidArgumentError("reference mesh has no triangles")
    tri = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    best = np.full(len(pts), np.inf)
    step = max(1, 4_000_000 // max(len(tri), 1))
    for start in range(0, len(pts), step):
        chunk = pts[start:start + step, None, :]
        d = point_triangle_distance(chunk, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        best[start:start + step] = d.min(axis=1)
    return best


def p2f(pred, mesh):
    """Population mean and standard deviation of point-to-surface distances."""
    d = point_to_mesh_distances(pred, mesh)
    return float(d.mean()), float(d.std())


@dataclass(frozen=True)
class MetricReport:
    cd: float
    hd: float
    p2f_mean: float = None
    p2f_std: float = None

    FIELDS = ("cd", "hd", "p2f_mean", "p2f_std")

    def _items(self):
        return [(k, getattr(self, k)) for k in self.FIELDS if getattr(self, k) is not None]

    def to_text(self):
        items = self._items()
        width = max(len(k) for k, _ in items)
        return "\n".join(f"{k.ljust(width)} = {v:.6f}" for k, v in items)

    def csv_header(self):
        return ",".join(k for k, _ in self._items())

    def csv_row(self):
        return ",".join(f"{v:.6f}" for _, v in self._items())


def evaluate(pred, ref_points, mesh=None):
    """Metric report with every value multiplied by 1e3."""
    cd = chamfer(pred, ref_points) * REPORT_SCALE
    hd = hausdorff_metric(pred, ref_points) * REPORT_SCALE
    if mesh is None:
        return MetricReport(cd, hd)
    mean, std = p2f(pred, mesh)
    return MetricReport(cd, hd, mean * REPORT_SCALE, std * REPORT_SCALE)
