"""Training losses and their gradients w.r.t. the dense cloud.

Discrete choices (EMD matching, FPS subset, disk membership, Hausdorff
argmax, normalization argmax) are held at their current values when
differentiating, which yields piecewise-smooth subgradients.
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cloud import as_cloud, farthest_point_sampling, pairwise_sq_dists
from .errors import InvalidArgumentError
from .render import RenderParams, build_view_soups, raster_views

DEFAULT_UNIFORM_P = 0.01


@dataclass(frozen=True)
class LossWeights:
    sc: float = 100.0
    ic: float = 30.0
    hd: float = 10.0
    un: float = 25.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (np.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"loss weight {f.name} must be a finite value >= 0, got {value}")

    @classmethod
    def parse(cls, text):
        """Parse ``"100,30,10,25"`` (order sc, ic, hd, un)."""
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 4:
            raise InvalidArgumentError(f"expected 4 comma-separated weights, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError:
            raise InvalidArgumentError(f"weights must be numbers, got {text!r}")

    def scaled(self, c):
        return LossWeights(self.sc * c, self.ic * c, self.hd * c, self.un * c)

    def __str__(self):
        return f"{self.sc:g},{self.ic:g},{self.hd:g},{self.un:g}"


@dataclass(frozen=True)
class LossReport:
    sc: float
    ic: float
    hd: float
    un: float
    joint: float

    @classmethod
    def combine(cls, sc, ic, hd, un, weights):
        joint = weights.sc * sc + weights.ic * ic + weights.hd * hd + weights.un * un
        return cls(float(sc), float(ic), float(hd), float(un), float(joint))

    def to_text(self):
        return "\n".join(f"{k}={getattr(self, k):.17g}" for k in ("sc", "ic", "hd", "un", "joint"))

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
        return cls(**values)


# -- EMD ---------------------------------------------------------------------

def emd_matching(a, b):
    """Optimal bijection for squared Euclidean cost.

    Returns ``(value, perm)`` where ``a[i]`` is matched with ``b[perm[i]]`` and
    ``value`` is the mean matched squared distance.
    """
    a = as_cloud(a)
    b = as_cloud(b)
    if len(a) != len(b):
        raise InvalidArgumentError(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    cost = pairwise_sq_dists(a, b)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(a), dtype=np.intp)
    perm[rows] = cols
    return float(cost[rows, cols].sum() / len(a)), perm


def emd(a, b):
    """Earth mover's distance with squared cost, averaged over points."""
    return emd_matching(a, b)[0]


def shape_consistent_loss(sparse, dense):
    """EMD between ``sparse`` and the FPS downsampling of ``dense`` to ``len(sparse)`` points."""
    return _shape_consistent(as_cloud(sparse), as_cloud(dense))[0]


def _shape_consistent(S, D):
    if len(D) < len(S):
        raise InvalidArgumentError(f"dense cloud ({len(D)}) is smaller than sparse cloud ({len(S)})")
    idx = farthest_point_sampling(D, len(S), 0)
    value, perm = emd_matching(S, D[idx])
    grad = np.zeros_like(D)
    # d/dD_hat[perm[i]] of mean |S_i - D_hat[perm[i]]|^2
    grad[idx[perm]] = 2.0 * (D[idx[perm]] - S) / len(S)
    return value, grad, (tuple(idx), tuple(perm))


# -- image consistency -------------------------------------------------------

def image_consistent_loss(images_s, images_d):
    """Mean over views of the squared Frobenius difference."""
    a = np.asarray(images_s, float)
    b = np.asarray(images_d, float)
    if a.shape != b.shape or a.ndim != 3:
        raise InvalidArgumentError(f"image stacks differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.einsum("ijk,ijk->", diff, diff) / a.shape[0])


# -- Hausdorff ---------------------------------------------------------------

def hausdorff_loss(dense, sparse):
    """One-sided Hausdorff distance from ``dense`` to ``sparse`` (un-squared)."""
    D = as_cloud(dense, allow_empty=True)
    S = as_cloud(sparse, allow_empty=True)
    if len(D) == 0 or len(S) == 0:
        raise InvalidArgumentError("Hausdorff distance needs two non-empty clouds")
    return _hausdorff(D, S)[0]


def _hausdorff(D, S):
    d2 = pairwise_sq_dists(D, S)
    nearest = np.argmin(d2, axis=1)
    nd2 = d2[np.arange(len(D)), nearest]
    worst = int(np.argmax(nd2))
    value = float(np.sqrt(nd2[worst]))
    grad = np.zeros_like(D)
    if value > 0:
        grad[worst] = (D[worst] - S[nearest[worst]]) / value
    return value, grad, (worst, int(nearest[worst]))


# -- uniformity --------------------------------------------------------------

def default_seed_count(n):
    return max(1, n // 16)


def uniform_constants(n, p):
    """Disk radius, expected count and expected spacing for ``n`` points at fraction ``p``."""
    radius = np.sqrt(p)
    n_hat = n * p
    d_hat = np.sqrt(2.0 * np.pi * radius ** 2 / (np.sqrt(3.0) * n_hat))
    return radius, n_hat, d_hat


def uniform_loss(dense, p=DEFAULT_UNIFORM_P, seeds=None):
    """Imbalance-times-clutter uniformity penalty over FPS-seeded disks.

    The cloud is measured after normalization to the unit sphere.  ``seeds``
    is the number of disks (default ``max(1, N // 16)``).
    """
    return _uniform(as_cloud(dense), p, seeds)[0]


def _uniform(D, p, seeds):
    n = len(D)
    if seeds is None:
        seeds = default_seed_count(n)
    if not 0 < p < 1:
        raise InvalidArgumentError(f"uniform fraction p must lie in (0, 1), got {p}")
    if seeds < 1 or seeds > n:
        raise InvalidArgumentError(f"seed count {seeds} out of range [1, {n}]")
    radius, n_hat, d_hat = uniform_constants(n, p)

    centroid = D.mean(axis=0)
    centered = D - centroid
    if np.all(D == D[0]):
        centered = np.zeros_like(D)
    norms2 = np.einsum("ij,ij->i", centered, centered)
    far = int(np.argmax(norms2))
    sigma = float(np.sqrt(norms2[far]))
    degenerate = sigma == 0.0
    if degenerate:
        sigma = 1.0

    seed_idx = farthest_point_sampling(D, seeds, 0)
    d2 = pairwise_sq_dists(D[seed_idx], D) / sigma ** 2
    grad_q = np.zeros_like(D)  # gradient w.r.t. normalized coordinates
    q = centered / sigma
    total = 0.0
    state = []
    for j in range(seeds):
        members = np.flatnonzero(d2[j] < radius ** 2)
        imbalance = (len(members) - n_hat) ** 2 / n_hat
        state.append(tuple(members))
        if len(members) < 2:
            continue
        local = pairwise_sq_dists(q[members], q[members])
        np.fill_diagonal(local, np.inf)
        nn = np.argmin(local, axis=1)
        dist = np.sqrt(local[np.arange(len(members)), nn])
        state.append(tuple(nn))
        clutter = float(np.sum((dist - d_hat) ** 2) / d_hat)
        total += imbalance * clutter
        if imbalance == 0.0:
            continue
        coef = imbalance * 2.0 * (dist - d_hat) / d_hat
        safe = np.where(dist > 0, dist, 1.0)
        g = (coef / safe)[:, None] * (q[members] - q[members[nn]])
        g[dist == 0] = 0.0
        np.add.at(grad_q, members, g)
        np.add.at(grad_q, members[nn], -g)
    value = total / seeds
    grad_q /= seeds

    # chain through q = (D - mean(D)) / sigma with sigma = |D_far - mean(D)|
    grad = grad_q / sigma
    grad -= grad.mean(axis=0)
    if not degenerate:
        u = centered[far] / sigma
        dsigma = -float(np.sum(grad_q * q)) / sigma
        grad[far] += dsigma * u
        grad -= dsigma * u / n
    state.append(("far", far))
    return value, grad, (tuple(seed_idx), tuple(state))


# -- joint -------------------------------------------------------------------

def _dense_soups(D, rig, render, dense_soups):
    if dense_soups is None:
        return build_view_soups(D, rig, render)
    if len(dense_soups) != len(rig.cameras):
        raise InvalidArgumentError("need one frozen soup per camera")
    return [s.moved(D) for s in dense_soups]


def joint_loss_and_gradient(sparse, dense, rig, weights=LossWeights(), render=RenderParams(),
                            uniform_p=DEFAULT_UNIFORM_P, uniform_seeds=None,
                            sparse_images=None, dense_soups=None, need_grad=True,
                            return_state=False):
    """Evaluate every loss term and (optionally) the gradient w.r.t. ``dense``.

    ``sparse_images`` may carry a precomputed render of ``sparse``;
    ``dense_soups`` freezes the dense triangle frames and scale (the renderer
    treats them as constants when differentiating).
    """
    S = as_cloud(sparse)
    D = as_cloud(dense)
    if sparse_images is None:
        sparse_images = np.stack([p.image for p in raster_views(build_view_soups(S, rig, render), rig, render.gamma)])
    passes = raster_views(_dense_soups(D, rig, render, dense_soups), rig, render.gamma)
    dense_images = np.stack([p.image for p in passes])

    sc, g_sc, st_sc = _shape_consistent(S, D)
    ic = image_consistent_loss(sparse_images, dense_images)
    hd, g_hd, st_hd = _hausdorff(D, S)
    un, g_un, st_un = _uniform(D, uniform_p, uniform_seeds)
    report = LossReport.combine(sc, ic, hd, un, weights)

    grad = None
    if need_grad:
        grad = np.zeros_like(D)
        if weights.sc:
            grad += weights.sc * g_sc
        if weights.ic:
            m = len(passes)
            for view, rp in enumerate(passes):
                upstream = (2.0 * weights.ic / m) * (dense_images[view] - sparse_images[view])
                grad += rp.backward(upstream)
        if weights.hd:
            grad += weights.hd * g_hd
        if weights.un:
            grad += weights.un * g_un
    if return_state:
        return report, grad, (st_sc, st_hd, st_un)
    return report, grad


def joint_loss(sparse, dense, rig, weights=LossWeights(), render=RenderParams(), **kwargs):
    """All four terms plus their weighted sum, as a :class:`LossReport`."""
    return joint_loss_and_gradient(sparse, dense, rig, weights, render, need_grad=False, **kwargs)[0]


def joint_loss_gradient(sparse, dense, rig, weights=LossWeights(), render=RenderParams(), **kwargs):
    """Gradient of the joint loss w.r.t. every coordinate of ``dense``, shape ``(rN, 3)``."""
    return joint_loss_and_gradient(sparse, dense, rig, weights, render, **kwargs)[1]


def combinatorial_state(sparse, dense, uniform_p=DEFAULT_UNIFORM_P, uniform_seeds=None):
    """Discrete choices the gradient holds fixed; compare across perturbations to detect switches."""
    S = as_cloud(sparse)
    D = as_cloud(dense)
    return (_shape_consistent(S, D)[2], _hausdorff(D, S)[2], _uniform(D, uniform_p, uniform_seeds)[2])
