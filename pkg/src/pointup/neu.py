"""Neighbor expansion upsampler with hand-written reverse-mode gradients.

Pipeline for a cloud of N points and rate r (feature width C)::

    lift (3 -> C)
    NEU 1: neighbor interpolation (rN x C) -> grid codes -> self-attention -> fuse (rN x C)
    reshape rN x C -> N x rC -> compress (N x C) -> subtract lifted features
    NEU 2: same structure with its own weights (rN x C)
    coordinate head (C -> 3), added to the replicated source point

The neighborhood of each point is its r nearest points *including itself*,
ordered by distance; neighbor selection is not differentiated.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cloud import as_cloud, knn_table
from .errors import InvalidArgumentError, ParseError

GRID_RANGE = 0.2
MAGIC = b"NEUP"
FORMAT_VERSION = 1


# -- parameters ---------------------------------------------------------------

def layer_shapes(width, rate):
    """Ordered ``name -> shape`` map of every learnable array."""
    c = width
    ca = c + 2
    shapes = {
        "lift.w1": (3, c), "lift.b1": (c,),
        "lift.w2": (c, c), "lift.b2": (c,),
    }
    for stage in ("neu1", "neu2"):
        shapes.update({
            f"{stage}.interp.w1": (2 * c, c), f"{stage}.interp.b1": (c,),
            f"{stage}.interp.w2": (c, 2), f"{stage}.interp.b2": (2,),
            f"{stage}.attn.wq": (ca, ca), f"{stage}.attn.bq": (ca,),
            f"{stage}.attn.wk": (ca, ca), f"{stage}.attn.bk": (ca,),
            f"{stage}.attn.wv": (ca, ca), f"{stage}.attn.bv": (ca,),
            f"{stage}.fuse.w": (ca, c), f"{stage}.fuse.b": (c,),
        })
    shapes.update({
        "compress.w": (rate * c, c), "compress.b": (c,),
        "head.w1": (c, c), "head.b1": (c,),
        "head.w2": (c, 3), "head.b2": (3,),
    })
    return shapes


@dataclass
class NeuParams:
    width: int
    rate: int
    arrays: dict
    seed: int = None

    def copy(self):
        return NeuParams(self.width, self.rate, {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def __getitem__(self, name):
        return self.arrays[name]

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def num_values(self):
        return sum(v.size for v in self.arrays.values())


def init_params(seed, width=32, rate=4):
    """Xavier-uniform weights and zero biases, deterministic per ``seed``."""
    if width < 1 or rate < 1:
        raise InvalidArgumentError(f"layer widths must be positive (width={width}, rate={rate})")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layer_shapes(width, rate).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NeuParams(width, rate, arrays, seed)


def save_params(params, path):
    """Write the flat little-endian ``NEUP`` container."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params.arrays)))
        for arr in params.arrays.values():
            mat = np.atleast_2d(arr)
            fh.write(struct.pack("<II", *mat.shape))
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError("not a NEUP parameter file", path=path)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported NEUP version {version}", path=path)
    offset = 12
    mats = []
    for _ in range(count):
        if offset + 8 > len(blob):
            raise ParseError("truncated NEUP file", path=path)
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        nbytes = rows * cols * 8
        if offset + nbytes > len(blob):
            raise ParseError("truncated NEUP file", path=path)
        mats.append(np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).astype(float))
        offset += nbytes
    if offset != len(blob):
        raise ParseError("trailing bytes after NEUP layers", path=path)
    if not mats or mats[0].shape[0] != 3:
        raise ParseError("NEUP file does not start with the 3 -> C lifter", path=path)
    width = mats[0].shape[1]
    shapes = layer_shapes(width, 1)
    names = list(shapes)
    if len(mats) != len(names):
        raise ParseError(f"expected {len(names)} layers, found {len(mats)}", path=path)
    rate = mats[names.index("compress.w")].shape[0] // width
    shapes = layer_shapes(width, rate)
    arrays = {}
    for name, mat in zip(names, mats):
        shape = shapes[name]
        arr = mat.reshape(shape) if len(shape) == 1 and mat.shape == (1, shape[0]) else mat
        if arr.shape != shape:
            raise ParseError(f"layer {name} has shape {mat.shape}, expected {shape}", path=path)
        arrays[name] = arr
    return NeuParams(width, rate, arrays)


# -- building blocks -------------------------------------------------------------

def grid_codes(r):
    """``r`` distinct 2D codes: a row-major sqrt(r) x sqrt(r) grid over [-0.2, 0.2]^2,
    or evenly spaced points on [-0.2, 0.2] x {0} when r is not a perfect square."""
    if r < 1:
        raise InvalidArgumentError(f"rate must be positive, got {r}")
    if r == 1:
        return np.zeros((1, 2))
    side = int(round(np.sqrt(r)))
    if side * side == r:
        ticks = np.linspace(-GRID_RANGE, GRID_RANGE, side)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)
    return np.stack([np.linspace(-GRID_RANGE, GRID_RANGE, r), np.zeros(r)], axis=1)


def grid_code_append(features, r):
    """Append each replica's 2D code; rows are grouped as ``r`` consecutive replicas per point."""
    Y = np.asarray(features, float)
    if Y.ndim != 2 or Y.shape[0] % r:
        raise InvalidArgumentError(f"row count {Y.shape[0]} is not divisible by r={r}")
    codes = np.tile(grid_codes(r), (Y.shape[0] // r, 1))
    return np.concatenate([Y, codes], axis=1)


def _relu(x):
    return np.maximum(x, 0.0)


def attention_weights(Y, wq, bq, wk, bk):
    """Row-stochastic scaled dot-product attention matrix."""
    Q = Y @ wq + bq
    K = Y @ wk + bk
    logits = Q @ K.T / np.sqrt(Y.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return P, Q, K


def self_attention(Y, params, stage="neu1"):
    """``Y + softmax(Q K^T / sqrt(c')) V`` with linear Q/K/V maps."""
    a = params.arrays if isinstance(params, NeuParams) else params
    P, _, _ = attention_weights(Y, a[f"{stage}.attn.wq"], a[f"{stage}.attn.bq"],
                                a[f"{stage}.attn.wk"], a[f"{stage}.attn.bk"])
    V = Y @ a[f"{stage}.attn.wv"] + a[f"{stage}.attn.bv"]
    return Y + P @ V


def lift_features(cloud, params):
    """Per-point two-layer MLP ``3 -> C -> C``."""
    pts = as_cloud(cloud)
    a = params.arrays
    return _relu(pts @ a["lift.w1"] + a["lift.b1"]) @ a["lift.w2"] + a["lift.b2"]


def interpolation_weights(X, neighbors, params, stage="neu1"):
    """Raw (pre-sigmoid) ``alpha, beta`` per (point, neighbor), each shape ``(N, r)``."""
    a = params.arrays
    A = X[neighbors]
    B = np.broadcast_to(X[:, None, :], A.shape)
    F = np.concatenate([A, B], axis=-1)
    W = _relu(F @ a[f"{stage}.interp.w1"] + a[f"{stage}.interp.b1"]) @ a[f"{stage}.interp.w2"] + a[f"{stage}.interp.b2"]
    return W[..., 0], W[..., 1]


def interpolate(x_center, x_neighbor, alpha, beta):
    """``sigmoid(alpha) * x_center + sigmoid(beta) * x_neighbor``."""
    return expit(alpha) * np.asarray(x_center, float) + expit(beta) * np.asarray(x_neighbor, float)


def neu_interpolate(X, cloud, r, params, stage="neu1"):
    """Expand an ``N x C`` feature map to ``rN x C`` rows ordered by (point, neighbor rank)."""
    pts = as_cloud(cloud)
    if r < 1 or r > len(pts):
        raise InvalidArgumentError(f"r={r} out of range [1, {len(pts)}]")
    nbr = knn_table(pts, r, include_self=True)
    alpha, beta = interpolation_weights(X, nbr, params, stage)
    H = expit(alpha)[..., None] * X[:, None, :] + expit(beta)[..., None] * X[nbr]
    return H.reshape(-1, X.shape[1])


# -- forward / backward ------------------------------------------------------------

def _neu_forward(a, stage, X, nbr, r):
    n, c = X.shape
    cache = {"X": X}
    A = X[nbr]
    B = np.broadcast_to(X[:, None, :], A.shape)
    F = np.concatenate([A, B], axis=-1)
    z = F @ a[f"{stage}.interp.w1"] + a[f"{stage}.interp.b1"]
    hidden = _relu(z)
    W = hidden @ a[f"{stage}.interp.w2"] + a[f"{stage}.interp.b2"]
    sa = expit(W[..., 0])
    sb = expit(W[..., 1])
    H = sa[..., None] * B + sb[..., None] * A
    G = np.concatenate([H.reshape(n * r, c), np.tile(grid_codes(r), (n, 1))], axis=1)
    P, Q, K = attention_weights(G, a[f"{stage}.attn.wq"], a[f"{stage}.attn.bq"],
                                a[f"{stage}.attn.wk"], a[f"{stage}.attn.bk"])
    V = G @ a[f"{stage}.attn.wv"] + a[f"{stage}.attn.bv"]
    O = G + P @ V
    out = O @ a[f"{stage}.fuse.w"] + a[f"{stage}.fuse.b"]
    cache.update(A=A, B=B, F=F, z=z, hidden=hidden, sa=sa, sb=sb, G=G, P=P, Q=Q, K=K, V=V, O=O)
    return out, cache


def _neu_backward(a, grads, stage, cache, d_out, nbr):
    X = cache["X"]
    n, c = X.shape
    r = nbr.shape[1]
    grads[f"{stage}.fuse.w"] += cache["O"].T @ d_out
    grads[f"{stage}.fuse.b"] += d_out.sum(axis=0)
    dO = d_out @ a[f"{stage}.fuse.w"].T

    G, P, Q, K, V = cache["G"], cache["P"], cache["Q"], cache["K"], cache["V"]
    scale = 1.0 / np.sqrt(G.shape[1])
    dV = P.T @ dO
    dP = dO @ V.T
    dS = P * (dP - np.sum(dP * P, axis=1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.T @ Q
    dG = dO.copy()
    for key, dproj in (("q", dQ), ("k", dK), ("v", dV)):
        grads[f"{stage}.attn.w{key}"] += G.T @ dproj
        grads[f"{stage}.attn.b{key}"] += dproj.sum(axis=0)
        dG += dproj @ a[f"{stage}.attn.w{key}"].T

    dH = dG[:, :c].reshape(n, r, c)
    sa, sb, A, B = cache["sa"], cache["sb"], cache["A"], cache["B"]
    dA = sb[..., None] * dH
    dB = sa[..., None] * dH
    dW = np.stack([np.sum(dH * B, axis=-1) * sa * (1.0 - sa),
                   np.sum(dH * A, axis=-1) * sb * (1.0 - sb)], axis=-1)
    hidden = cache["hidden"]
    grads[f"{stage}.interp.w2"] += hidden.reshape(-1, c).T @ dW.reshape(-1, 2)
    grads[f"{stage}.interp.b2"] += dW.reshape(-1, 2).sum(axis=0)
    dz = (dW @ a[f"{stage}.interp.w2"].T) * (cache["z"] > 0)
    grads[f"{stage}.interp.w1"] += cache["F"].reshape(-1, 2 * c).T @ dz.reshape(-1, c)
    grads[f"{stage}.interp.b1"] += dz.reshape(-1, c).sum(axis=0)
    dF = dz @ a[f"{stage}.interp.w1"].T
    dA = dA + dF[..., :c]
    dB = dB + dF[..., c:]

    dX = dB.sum(axis=1)
    np.add.at(dX, nbr.reshape(-1), dA.reshape(-1, c))
    return dX


def _check_rate(pts, r, params):
    if r < 1 or r > len(pts):
        raise InvalidArgumentError(f"rate r={r} out of range [1, N={len(pts)}]")
    if params.rate != r:
        raise InvalidArgumentError(f"parameters were built for rate {params.rate}, got r={r}")


def _forward(pts, r, params):
    a = params.arrays
    n = len(pts)
    c = params.width
    nbr = knn_table(pts, r, include_self=True)
    cache = {"nbr": nbr, "pts": pts}
    z0 = pts @ a["lift.w1"] + a["lift.b1"]
    h0 = _relu(z0)
    X = h0 @ a["lift.w2"] + a["lift.b2"]
    cache.update(z0=z0, h0=h0)
    Y1, c1 = _neu_forward(a, "neu1", X, nbr, r)
    R = Y1.reshape(n, r * c)
    X2 = R @ a["compress.w"] + a["compress.b"] - X
    Y2, c2 = _neu_forward(a, "neu2", X2, nbr, r)
    zh = Y2 @ a["head.w1"] + a["head.b1"]
    hh = _relu(zh)
    offsets = hh @ a["head.w2"] + a["head.b2"]
    out = np.repeat(pts, r, axis=0) + offsets
    cache.update(c1=c1, c2=c2, R=R, Y2=Y2, zh=zh, hh=hh)
    return out, cache


def upsampler_forward(cloud, r, params):
    """Upsample ``cloud`` to ``r * N`` points; output group ``i`` (rows ``i*r .. i*r+r-1``) follows point ``i``."""
    pts = as_cloud(cloud)
    _check_rate(pts, r, params)
    return _forward(pts, r, params)[0]


def _backward(params, cache, d_out):
    a = params.arrays
    grads = params.zeros_like()
    nbr = cache["nbr"]
    pts = cache["pts"]
    n = len(pts)
    c = params.width
    r = nbr.shape[1]
    grads["head.w2"] += cache["hh"].T @ d_out
    grads["head.b2"] += d_out.sum(axis=0)
    dzh = (d_out @ a["head.w2"].T) * (cache["zh"] > 0)
    grads["head.w1"] += cache["Y2"].T @ dzh
    grads["head.b1"] += dzh.sum(axis=0)
    dY2 = dzh @ a["head.w1"].T
    dX2 = _neu_backward(a, grads, "neu2", cache["c2"], dY2, nbr)
    grads["compress.w"] += cache["R"].T @ dX2
    grads["compress.b"] += dX2.sum(axis=0)
    dY1 = (dX2 @ a["compress.w"].T).reshape(n * r, c)
    dX = -dX2 + _neu_backward(a, grads, "neu1", cache["c1"], dY1, nbr)
    grads["lift.w2"] += cache["h0"].T @ dX
    grads["lift.b2"] += dX.sum(axis=0)
    dz0 = (dX @ a["lift.w2"].T) * (cache["z0"] > 0)
    grads["lift.w1"] += pts.T @ dz0
    grads["lift.b1"] += dz0.sum(axis=0)
    return grads


def upsampler_gradient(cloud, r, params, loss_tail):
    """Reverse-mode gradient of ``loss_tail(upsampler_forward(cloud))`` w.r.t. every parameter.

    ``loss_tail(dense)`` must return ``(value, d value / d dense)``.
    Returns ``(value, grads)`` with ``grads`` keyed like ``params.arrays``.
    """
    pts = as_cloud(cloud)
    _check_rate(pts, r, params)
    out, cache = _forward(pts, r, params)
    value, d_out = loss_tail(out)
    d_out = np.asarray(d_out, float)
    if d_out.shape != out.shape:
        raise InvalidArgumentError(f"loss gradient shape {d_out.shape} != output shape {out.shape}")
    return value, _backward(params, cache, d_out)
