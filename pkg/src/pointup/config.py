"""Run configuration: built-in defaults, an optional key=value file, then command-line flags."""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import InvalidArgumentError, ParseError
from .losses import DEFAULT_UNIFORM_P, LossWeights
from .optimize import OptimConfig
from .render import RenderParams, make_view_ring


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _scale(text):
    return "auto" if str(text).strip() == "auto" else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _weights(text):
    return text if isinstance(text, LossWeights) else LossWeights.parse(text)


@dataclass(frozen=True)
class RunConfig:
    # optimization
    rate: int = 4
    mode: str = "direct"
    iters: int = 200
    epochs: int = 30
    batch: int = 28
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    jitter: float = 0.01
    width: int = 32
    augment: bool = True
    # losses
    weights: LossWeights = LossWeights()
    uniform_p: float = DEFAULT_UNIFORM_P
    # rendering
    views: int = 8
    img_size: int = 64
    gamma: float = 1e-4
    radius: float = 2.5
    elevation: float = 20.0
    half_extent: float = 1.3
    scale: object = "auto"
    triangle_mode: str = "tangent"
    # patches and io
    patch_count: int = 195
    patch_size: int = 256
    params: str = ""
    trace: str = ""
    plot: str = ""
    pgm: str = "p5"
    png: bool = False

    def optim_config(self):
        return OptimConfig(learning_rate=self.lr, iterations=self.iters, epochs=self.epochs,
                           batch_size=self.batch, rate=self.rate, weights=self.weights,
                           beta1=self.beta1, beta2=self.beta2, eps=self.eps, seed=self.seed,
                           init_jitter=self.jitter, render=self.render_params(),
                           uniform_p=self.uniform_p, width=self.width, augment=self.augment)

    def render_params(self):
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")
        return RenderParams(gamma=self.gamma, scale=self.scale, mode=self.triangle_mode)

    def rig(self):
        return make_view_ring(self.views, self.radius, self.elevation, (self.img_size, self.img_size),
                              self.half_extent)


PARSERS = {
    "mode": _choice("direct", "neu"),
    "weights": _weights,
    "scale": _scale,
    "triangle_mode": _choice("tangent", "paper-literal"),
    "pgm": _choice("p2", "p5"),
    "augment": _bool,
    "png": _bool,
}
for _f in fields(RunConfig):
    PARSERS.setdefault(_f.name, {int: int, float: float, str: str}.get(type(_f.default)))
KEYS = tuple(f.name for f in fields(RunConfig))


def coerce(key, value):
    """Parse ``value`` for setting ``key``; unknown keys and bad values raise."""
    if key not in PARSERS:
        raise InvalidArgumentError(f"unknown setting {key!r}")
    try:
        return PARSERS[key](value)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad value for {key}: {exc}") from None


def read_config_file(path):
    """Parse ``key = value`` lines (``#`` comments, blank lines allowed) into raw strings."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc.strerror}") from None
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ParseError("expected key = value", lineno, path)
        if key not in PARSERS:
            raise InvalidArgumentError(f"{path}:line {lineno}: unknown setting {key!r}")
        raw[key] = value.strip()
    return raw


def resolve(flags=None, config_path=None, base=RunConfig()):
    """Merge settings: ``flags`` (already-given only) > config file > ``base`` defaults."""
    merged = {}
    if config_path:
        merged.update({k: coerce(k, v) for k, v in read_config_file(config_path).items()})
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = coerce(key, value) if isinstance(value, str) else value
    unknown = set(merged) - set(KEYS)
    if unknown:
        raise InvalidArgumentError(f"unknown setting(s): {', '.join(sorted(unknown))}")
    return replace(base, **merged)
