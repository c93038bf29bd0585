"""Finite-difference checks of the analytic gradients (renderer, joint loss, upsampler).

Each suite compares every coordinate against a two-point central difference
and reports the worst offender.  Relative error is ``|a - f| / max(|a|, |f|)``;
coordinates whose magnitude is below ``SMALL`` are instead held to an
absolute bound of ``ABS_TOL``.
"""

from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, combinatorial_state, joint_loss, joint_loss_and_gradient
from .neu import init_params, upsampler_forward, upsampler_gradient
from .render import (Camera, RasterPass, RenderParams, build_tangent_triangles, build_view_soups,
                     make_view_ring, rasterize_silhouette)

SMALL = 1e-6
ABS_TOL = 1e-8
AXES = "xyz"


@dataclass
class Worst:
    rel: float = 0.0
    where: str = "-"
    analytic: float = 0.0
    numeric: float = 0.0


@dataclass
class CheckResult:
    name: str
    tolerance: float
    step: float
    checked: int = 0
    excluded: int = 0
    abs_failures: int = 0
    over: int = 0
    worst: Worst = None
    exclusion_cap: float = None

    @property
    def total(self):
        return self.checked + self.excluded

    @property
    def excluded_fraction(self):
        return self.excluded / self.total if self.total else 0.0

    @property
    def passed(self):
        ok = self.worst.rel < self.tolerance and self.abs_failures == 0
        if self.exclusion_cap is not None:
            ok = ok and self.excluded_fraction < self.exclusion_cap
        return ok

    def summary(self):
        w = self.worst
        text = (f"{self.name}: {'PASS' if self.passed else 'FAIL'} worst rel {w.rel:.3e} "
                f"(tol {self.tolerance:g}, h {self.step:g}) at {w.where} "
                f"analytic {w.analytic:.9g} fd {w.numeric:.9g}; {self.checked} checked")
        if self.exclusion_cap is not None:
            text += f", {self.excluded} excluded ({100 * self.excluded_fraction:.1f}%, cap {100 * self.exclusion_cap:g}%)"
        if self.over:
            text += f", {self.over} over tolerance"
        if self.abs_failures:
            text += f", {self.abs_failures} small-magnitude failures"
        return text


def _compare(result, analytic, numeric, where):
    mag = max(abs(analytic), abs(numeric))
    result.checked += 1
    if mag < SMALL:
        if abs(analytic - numeric) >= ABS_TOL:
            result.abs_failures += 1
        return
    rel = abs(analytic - numeric) / mag
    if rel >= result.tolerance:
        result.over += 1
    if result.worst is None or rel > result.worst.rel:
        result.worst = Worst(rel, where, analytic, numeric)


def central_difference(f, x, index, step, stencil=2):
    """Central difference of scalar ``f`` along one coordinate of array ``x``.

    ``stencil=2`` is the plain two-point rule; ``stencil=4`` adds the
    +/-2h samples and cancels the leading truncation term.
    """
    def at(offset):
        moved = x.copy()
        moved[index] += offset
        return f(moved)

    d1 = (at(step) - at(-step)) / (2 * step)
    if stencil == 2:
        return d1
    if stencil != 4:
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    d2 = (at(2 * step) - at(-2 * step)) / (4 * step)
    return (4 * d1 - d2) / 3


def _finish(result):
    if result.worst is None:
        result.worst = Worst()
    return result


def random_camera(rng, radius=2.5):
    """Camera on a sphere of ``radius`` looking at the origin, kept away from the poles."""
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-np.pi / 3, np.pi / 3)
    pos = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]))


def renderer_suite(seed=0, configs=50, step=1e-4, tolerance=1e-4, gamma=1e-4, size=16,
                   max_points=10, rebuild_frames=False, stencil=2):
    """Gradient of ``sum(G * image)`` w.r.t. point positions on random small scenes.

    With ``rebuild_frames`` the perturbed render rebuilds each point's
    camera-facing frame, which the analytic gradient ignores.
    """
    result = CheckResult("renderer" + (" (frames rebuilt)" if rebuild_frames else ""), tolerance, step)
    image_size = (size, size)
    for c in range(configs):
        rng = np.random.default_rng([seed, c])
        n = int(rng.integers(1, max_points + 1))
        pts = rng.uniform(-0.8, 0.8, (n, 3))
        cam = random_camera(rng)
        soup = build_tangent_triangles(pts, cam, "auto")
        upstream = rng.normal(size=(size, size))
        grad = RasterPass(soup, cam, image_size, gamma).backward(upstream)

        def f(moved):
            s = build_tangent_triangles(moved, cam, soup.scale) if rebuild_frames else soup.moved(moved)
            return float(np.sum(upstream * rasterize_silhouette(s, cam, image_size, gamma)))

        for i in range(n):
            for k in range(3):
                fd = central_difference(f, pts, (i, k), step, stencil)
                _compare(result, grad[i, k], fd, f"config {c} point {i} axis {AXES[k]}")
    return _finish(result)


def _raster_states(soups, rig, dense, gamma, min_x=-30.0):
    return [RasterPass(s.moved(dense), cam, rig.image_size, gamma).state(min_x)
            for s, cam in zip(soups, rig.cameras)]


def _same_raster_state(ref, other):
    """True when every significant pair of ``ref`` keeps its nearest feature and inside flag.

    ``other`` should hold every pair (no ``min_x`` filter) so that pairs near
    the significance threshold are not mistaken for switches.
    """
    for a, b in zip(ref, other):
        for key, value in a.items():
            if b.get(key) != value:
                return False
    return True


def joint_suite(seed=0, instances=20, step=1e-4, tolerance=1e-3, exclusion_cap=0.10,
                sparse_count=8, rate=4, views=2, size=16, weights=LossWeights(), stencil=2):
    """Joint-loss gradient w.r.t. the dense cloud, skipping coordinates whose
    perturbation changes a discrete choice the gradient holds fixed (EMD
    matching, FPS subset, Hausdorff pair, disk membership, normalization
    argmax, or a renderer nearest-edge/inside decision).
    """
    result = CheckResult("joint loss", tolerance, step, exclusion_cap=exclusion_cap)
    rig = make_view_ring(views, image_size=(size, size))
    render = RenderParams()
    for inst in range(instances):
        rng = np.random.default_rng([seed, inst])
        S = rng.normal(size=(sparse_count, 3))
        S /= np.linalg.norm(S, axis=1, keepdims=True)
        D = np.repeat(S, rate, axis=0) + rng.normal(scale=0.1, size=(sparse_count * rate, 3))
        soups = build_view_soups(D, rig, render)
        _, grad = joint_loss_and_gradient(S, D, rig, weights, render, dense_soups=soups)
        state = combinatorial_state(S, D)
        raster = _raster_states(soups, rig, D, render.gamma)
        for i in range(len(D)):
            for k in range(3):
                switched = False
                for offset in (step, -step, 2 * step, -2 * step)[:stencil]:
                    Dm = D.copy()
                    Dm[i, k] += offset
                    if (combinatorial_state(S, Dm) != state
                            or not _same_raster_state(raster, _raster_states(soups, rig, Dm, render.gamma, -np.inf))):
                        switched = True
                        break
                if switched:
                    result.excluded += 1
                    continue
                fd = central_difference(lambda Dm: joint_loss(S, Dm, rig, weights, render, dense_soups=soups).joint,
                                        D, (i, k), step, stencil)
                _compare(result, grad[i, k], fd, f"instance {inst} point {i} axis {AXES[k]}")
    return _finish(result)


def neu_suite(seed=0, instances=1, step=1e-4, tolerance=1e-4, points=8, rate=2, width=4, stencil=2):
    """Upsampler parameter gradients under a smooth quadratic tail."""
    result = CheckResult("upsampler", tolerance, step)
    for inst in range(instances):
        rng = np.random.default_rng([seed, inst])
        cloud = rng.normal(size=(points, 3))
        params = init_params(int(rng.integers(2**31)), width, rate)
        target = rng.normal(size=(rate * points, 3))

        def tail(dense):
            return float(np.sum(target * dense) + 0.5 * np.sum(dense * dense)), target + dense

        _, grads = upsampler_gradient(cloud, rate, params, tail)
        for name, arr in params.arrays.items():
            def f(moved, name=name):
                q = params.copy()
                q.arrays[name][...] = moved
                return tail(upsampler_forward(cloud, rate, q))[0]

            for idx in np.ndindex(arr.shape):
                fd = central_difference(f, arr, idx, step, stencil)
                _compare(result, grads[name][idx], fd, f"instance {inst} {name}{list(idx)}")
    return _finish(result)


def run_all(seed=0, step=1e-4, quick=False):
    """The three suites at their contract tolerances; ``quick`` shrinks the instance counts."""
    return [
        renderer_suite(seed, configs=10 if quick else 50, step=step),
        joint_suite(seed, instances=4 if quick else 20, step=step),
        neu_suite(seed, step=step),
    ]
