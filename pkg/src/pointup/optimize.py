"""Adam-driven self-supervised upsampling: direct coordinate optimization and NEU training."""

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import as_cloud, augment, knn_table
from .errors import DivergedError, InvalidArgumentError, InvalidInputError
from .losses import DEFAULT_UNIFORM_P, LossReport, LossWeights, joint_loss_and_gradient
from .neu import init_params, upsampler_gradient
from .render import RenderParams, build_view_soups, raster_views

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "sc", "ic", "hd", "un", "joint", "millis")


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    iterations: int = 200
    epochs: int = 30
    batch_size: int = 28
    rate: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_jitter: float = 0.01
    render: RenderParams = field(default_factory=RenderParams)
    uniform_p: float = DEFAULT_UNIFORM_P
    width: int = 32
    augment: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value}")
        if self.rate < 1:
            raise InvalidArgumentError(f"rate must be positive, got {self.rate}")
        if self.iterations < 0 or self.epochs < 0:
            raise InvalidArgumentError("iteration and epoch counts must be non-negative")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch size must be positive, got {self.batch_size}")


@dataclass
class OptimTrace:
    reports: list = field(default_factory=list)
    millis: list = field(default_factory=list)
    final: object = None

    def __len__(self):
        return len(self.reports)

    def joint(self):
        return np.array([r.joint for r in self.reports])

    def append(self, report, millis):
        self.reports.append(report)
        self.millis.append(millis)

    def write_csv(self, path, timing=True):
        """One row per iteration; ``timing=False`` writes 0 for millis (byte-stable output)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for i, (rep, ms) in enumerate(zip(self.reports, self.millis)):
                writer.writerow([i, *(f"{getattr(rep, k):.10g}" for k in TRACE_COLUMNS[1:6]),
                                 f"{ms if timing else 0:.3f}"])


def read_trace_csv(path):
    trace = OptimTrace()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rep = LossReport(*(float(row[k]) for k in TRACE_COLUMNS[1:6]))
            trace.append(rep, float(row["millis"]))
    return trace


@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0


def adam_init(values):
    if isinstance(values, dict):
        return AdamState({k: np.zeros_like(v) for k, v in values.items()},
                         {k: np.zeros_like(v) for k, v in values.items()})
    return AdamState(np.zeros_like(values), np.zeros_like(values))


def _adam_array(x, g, m, v, t, config):
    x = np.asarray(x, float)
    g = np.asarray(g, float)
    if not (x.shape == g.shape == m.shape == v.shape):
        raise InvalidArgumentError(f"Adam shape mismatch: values {x.shape}, grads {g.shape}, state {m.shape}")
    m = config.beta1 * m + (1.0 - config.beta1) * g
    v = config.beta2 * v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    return x - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps), m, v


def adam_step(values, grads, state, config):
    """One bias-corrected Adam update.  ``values`` is an array or a dict of arrays.

    Returns ``(new_values, new_state)``; inputs are not modified.
    """
    t = state.t + 1
    if isinstance(values, dict):
        if set(values) != set(grads):
            raise InvalidArgumentError("Adam: value and gradient keys differ")
        new_x, new_m, new_v = {}, {}, {}
        for k in values:
            new_x[k], new_m[k], new_v[k] = _adam_array(values[k], grads[k], state.m[k], state.v[k], t, config)
        return new_x, AdamState(new_m, new_v, t)
    x, m, v = _adam_array(values, grads, state.m, state.v, t, config)
    return x, AdamState(m, v, t)


def initial_dense(sparse, r, jitter=0.01, seed=0):
    """Replicate each point toward its ``r`` nearest neighbors (self first) at fractions ``j / (r + 1)``."""
    S = as_cloud(sparse)
    nbr = knn_table(S, r, include_self=True)
    frac = (np.arange(1, r + 1) / (r + 1.0))[None, :, None]
    D = S[:, None, :] + frac * (S[nbr] - S[:, None, :])
    D = D.reshape(-1, 3)
    if jitter > 0:
        D = D + np.random.default_rng(seed).normal(0.0, jitter, size=D.shape)
    return D


def sparse_views(sparse, rig, render):
    passes = raster_views(build_view_soups(sparse, rig, render), rig, render.gamma)
    return np.stack([p.image for p in passes])


def upsample_direct(sparse, r, rig, config=OptimConfig(), callback=None):
    """Optimize dense coordinates directly under the joint loss.

    Returns ``(dense, trace)``.  Each trace entry is the loss evaluated before
    that iteration's update.
    """
    S = as_cloud(sparse)
    if len(S) < 2:
        raise InvalidArgumentError("direct upsampling needs at least two points")
    if r > len(S):
        raise InvalidArgumentError(f"rate r={r} exceeds the number of points {len(S)}")
    D = initial_dense(S, r, config.init_jitter, config.seed)
    images_s = sparse_views(S, rig, config.render)
    state = adam_init(D)
    trace = OptimTrace()
    for it in range(config.iterations):
        t0 = time.perf_counter()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                report, grad = joint_loss_and_gradient(S, D, rig, config.weights, config.render,
                                                       uniform_p=config.uniform_p, sparse_images=images_s)
        except InvalidInputError as exc:
            # the input was validated up front, so a bad state here came from the updates
            trace.final = D
            raise DivergedError(f"iteration {it}: {exc}", trace) from exc
        if not np.isfinite(report.joint) or not np.all(np.isfinite(grad)):
            trace.final = D
            raise DivergedError(f"non-finite loss at iteration {it}", trace)
        D, state = adam_step(D, grad, state, config)
        trace.append(report, 1000.0 * (time.perf_counter() - t0))
        if not np.all(np.isfinite(D)):
            trace.final = D
            raise DivergedError(f"non-finite coordinates after iteration {it}", trace)
        if callback is not None:
            callback(it, report)
        log.debug("iter %d joint=%.6g", it, report.joint)
    trace.final = D
    return D, trace


def _mean_report(reports):
    return LossReport(*(float(np.mean([getattr(r, k) for r in reports])) for k in ("sc", "ic", "hd", "un", "joint")))


def train_neu(patches, r, rig, config=OptimConfig(), params=None, callback=None):
    """Minibatch Adam training of the upsampler on patches (arrays or :class:`Patch`).

    The trace holds one epoch-mean :class:`LossReport` per epoch.  Batch
    gradients are the mean over members, summed in batch order.
    """
    clouds = [as_cloud(getattr(p, "points", p)) for p in patches]
    if not clouds:
        raise InvalidArgumentError("training needs at least one patch")
    for cloud in clouds:
        if len(cloud) < r:
            raise InvalidArgumentError(f"patch of {len(cloud)} points is smaller than rate {r}")
    if params is None:
        params = init_params(config.seed, config.width, r)
    params = params.copy()
    state = adam_init(params.arrays)
    batch = min(config.batch_size, len(clouds))
    trace = OptimTrace()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(len(clouds))
        aug_seeds = rng.integers(0, 2**63 - 1, size=len(clouds))
        reports = []
        for start in range(0, len(order), batch):
            members = order[start:start + batch]
            total = params.zeros_like()
            for idx in members:
                cloud = clouds[idx]
                if config.augment:
                    cloud = augment(cloud, int(aug_seeds[idx]))
                images_s = sparse_views(cloud, rig, config.render)
                box = {}

                def tail(dense, cloud=cloud, images_s=images_s, box=box):
                    rep, grad = joint_loss_and_gradient(cloud, dense, rig, config.weights, config.render,
                                                        uniform_p=config.uniform_p, sparse_images=images_s)
                    box["report"] = rep
                    return rep.joint, grad

                value, grads = upsampler_gradient(cloud, r, params, tail)
                if not np.isfinite(value):
                    trace.final = params
                    raise DivergedError(f"non-finite loss in epoch {epoch}", trace)
                reports.append(box["report"])
                for k in total:
                    total[k] += grads[k]
            for k in total:
                total[k] /= len(members)
            arrays, state = adam_step(params.arrays, total, state, config)
            params = replace(params, arrays=arrays)
            if not all(np.all(np.isfinite(v)) for v in arrays.values()):
                trace.final = params
                raise DivergedError(f"non-finite parameters in epoch {epoch}", trace)
        epoch_report = _mean_report(reports)
        trace.append(epoch_report, 1000.0 * (time.perf_counter() - t0))
        if callback is not None:
            callback(epoch, epoch_report)
        log.debug("epoch %d mean joint=%.6g", epoch, epoch_report.joint)
    trace.final = params
    return params, trace
