"""Multiresolution UV texture field with a normal-aware cross-attention decoder.

Forward: per-level bilinear lookups are concatenated and layer-normalised into
an embedding; a query embedding attends over anchor embeddings from the same
(instance, normal group) bucket; a residual plus linear head gives RGB through
a logistic squash. ``backward`` is written out by hand for every stage.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError, ParameterError, ParseError
from .geometry import uv_to_sphere

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
DEFAULT_LEVELS = (16, 32, 64, 128)
DEFAULT_FEATURES = 8
DEFAULT_HEADS = 4
MAGIC = b"CTXF"


# ---------------------------------------------------------------- grid


@dataclass
class MultiResGrid:
    tables: list  # per level, (r, r, F)

    def __post_init__(self):
        res = [t.shape[0] for t in self.tables]
        if any(t.ndim != 3 or t.shape[0] != t.shape[1] or t.shape[0] < 2 for t in self.tables):
            raise ParameterError("each level must be an (r, r, F) lattice with r >= 2")
        if len({t.shape[2] for t in self.tables}) != 1:
            raise ParameterError("all levels need the same feature width")
        if res != sorted(set(res)):
            raise ParameterError(f"resolutions must increase strictly, got {res}")

    @classmethod
    def create(cls, levels=DEFAULT_LEVELS, features=DEFAULT_FEATURES, rng=None, scale=1.0):
        rng = rng or np.random.default_rng(0)
        return cls([rng.normal(scale=scale, size=(r, r, features)) for r in levels])

    @property
    def levels(self):
        return tuple(t.shape[0] for t in self.tables)

    @property
    def features(self):
        return self.tables[0].shape[2]

    @property
    def width(self):
        return len(self.tables) * self.features

    def copy(self):
        return MultiResGrid([t.copy() for t in self.tables])


def _clamp_uv(uv):
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    if np.any((uv < 0) | (uv > 1)):
        warnings.warn("uv outside [0, 1]; clamping", RuntimeWarning, stacklevel=3)
        uv = np.clip(uv, 0.0, 1.0)
    return np.ascontiguousarray(uv)


def gather(grid, uv):
    """Concatenated per-level bilinear features, (n, L*F)."""
    return np.concatenate([kernels.bilinear_gather(np.ascontiguousarray(t), uv) for t in grid.tables], axis=1)


def layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mu) * inv, inv


def layernorm_backward(dn, n, inv):
    return inv * (dn - dn.mean(axis=-1, keepdims=True) - n * (dn * n).mean(axis=-1, keepdims=True))


def query_embedding(grid, uv):
    """Layer-normalised (no affine) concatenated features at each uv, (n, L*F)."""
    uv = _clamp_uv(uv)
    n, _ = layernorm(gather(grid, uv))
    return n


# ------------------------------------------------------------- decoder


PARAM_NAMES = ("ln_gamma", "ln_beta", "Wq", "Wk", "Wv", "Wo", "Ws", "Wrgb", "b_rgb")


@dataclass
class DecoderParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    Ws: np.ndarray
    Wrgb: np.ndarray
    b_rgb: np.ndarray
    heads: int = DEFAULT_HEADS

    def __post_init__(self):
        d = self.ln_gamma.shape[0]
        if d % self.heads:
            raise ParameterError(f"embedding width {d} not divisible by {self.heads} heads")
        want = {"ln_beta": (d,), "Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
                "Ws": (3, d), "Wrgb": (d, 3), "b_rgb": (3,)}
        for k, shape in want.items():
            if getattr(self, k).shape != shape:
                raise ParameterError(f"{k} has shape {getattr(self, k).shape}, expected {shape}")

    @classmethod
    def create(cls, width, heads=DEFAULT_HEADS, rng=None):
        rng = rng or np.random.default_rng(1)
        s = 1.0 / np.sqrt(width)
        return cls(
            ln_gamma=np.ones(width), ln_beta=np.zeros(width),
            Wq=rng.normal(scale=s, size=(width, width)), Wk=rng.normal(scale=s, size=(width, width)),
            Wv=rng.normal(scale=s, size=(width, width)), Wo=rng.normal(scale=s, size=(width, width)),
            Ws=rng.normal(scale=s, size=(3, width)), Wrgb=rng.normal(scale=s, size=(width, 3)),
            b_rgb=np.zeros(3), heads=heads,
        )

    @property
    def width(self):
        return self.ln_gamma.shape[0]

    def arrays(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self):
        return DecoderParams(**{k: v.copy() for k, v in self.arrays().items()}, heads=self.heads)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}


# -------------------------------------------------------------- anchors


NORMAL_AXES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def normal_group(normal):
    """Quantise a face normal to one of six axis-aligned classes (0..5 = +x, -x, +y, -y, +z, -z)."""
    n = np.asarray(normal, dtype=float)
    if not np.any(n):
        raise ParameterError("zero normal")
    axis = int(np.argmax(np.abs(n)))
    return 2 * axis + (0 if n[axis] > 0 else 1)


@dataclass
class AnchorSet:
    buckets: dict = field(default_factory=dict)  # (instance, group) -> (m, 2) uv

    @classmethod
    def stratified(cls, keys, per_bucket=64, rng=None, regions=None):
        """Jittered-stratified anchors; ``regions`` maps key -> (u0, v0, u1, v1)."""
        rng = rng or np.random.default_rng(2)
        side = int(np.ceil(np.sqrt(per_bucket)))
        out = {}
        for key in sorted(keys):
            u0, v0, u1, v1 = (regions or {}).get(key, (0.0, 0.0, 1.0, 1.0))
            cells = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), axis=-1).reshape(-1, 2)
            cells = cells[np.sort(rng.choice(cells.shape[0], per_bucket, replace=False))]
            jit = (cells + rng.random(cells.shape)) / side
            out[key] = np.column_stack([u0 + (u1 - u0) * jit[:, 0], v0 + (v1 - v0) * jit[:, 1]])
        return cls(out)

    def get(self, key):
        return self.buckets.get(tuple(int(k) for k in key), np.zeros((0, 2)))


@dataclass
class Samples:
    uv: np.ndarray
    instance: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.uv = _clamp_uv(self.uv)
        n = self.uv.shape[0]
        self.instance = np.broadcast_to(np.asarray(self.instance, dtype=int), (n,)).copy()
        self.group = np.broadcast_to(np.asarray(self.group, dtype=int), (n,)).copy()

    def __len__(self):
        return self.uv.shape[0]

    def keys(self):
        return sorted({(int(i), int(g)) for i, g in zip(self.instance, self.group)})

    def subset(self, idx):
        return Samples(self.uv[idx], self.instance[idx], self.group[idx])


# -------------------------------------------------------------- forward


def _embed(grid, params, uv):
    raw = gather(grid, uv)
    n, inv = layernorm(raw)
    return params.ln_gamma * n + params.ln_beta, n, inv


def _split(x, heads):
    return x.reshape(x.shape[0], heads, -1).transpose(1, 0, 2)  # (H, n, dh)


def _merge(x):
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(y):
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def _forward_bucket(grid, params, uv_q, uv_a):
    eq, nq, invq = _embed(grid, params, uv_q)
    sph = uv_to_sphere(uv_q[:, 0], uv_q[:, 1])
    c = {"uv_q": uv_q, "uv_a": uv_a, "eq": eq, "nq": nq, "invq": invq, "sph": sph}
    if uv_a.shape[0] == 0:
        o = eq @ params.Wv
        c["fallback"] = True
    else:
        ea, na, inva = _embed(grid, params, uv_a)
        q = eq @ params.Wq + sph @ params.Ws
        k = ea @ params.Wk
        v = ea @ params.Wv
        qh, kh, vh = _split(q, params.heads), _split(k, params.heads), _split(v, params.heads)
        scale = 1.0 / np.sqrt(qh.shape[2])
        p = _softmax(qh @ kh.transpose(0, 2, 1) * scale)
        o = _merge(p @ vh)
        c.update(ea=ea, na=na, inva=inva, qh=qh, kh=kh, vh=vh, p=p, scale=scale, fallback=False)
    z = eq + o @ params.Wo
    rgb = _sigmoid(z @ params.Wrgb + params.b_rgb)
    c.update(o=o, z=z, rgb=rgb)
    return rgb, c


@dataclass
class RenderCache:
    buckets: list  # (sample indices, cache dict)
    n: int

    @property
    def fallback(self):
        """Sample indices that took the query-only path (empty anchor bucket)."""
        idx = [i for i, c in self.buckets if c["fallback"]]
        return np.sort(np.concatenate(idx)) if idx else np.zeros(0, dtype=int)


def render_patch(grid, params, samples, anchors, return_cache=False):
    """Colours (n, 3) for every sample; each sample attends only to its own bucket."""
    out = np.empty((len(samples), 3))
    caches = []
    for key in samples.keys():
        idx = np.nonzero((samples.instance == key[0]) & (samples.group == key[1]))[0]
        uv_a = anchors.get(key)
        if uv_a.shape[0] == 0:
            logger.debug("bucket %s has no anchors; using the query-only path", key)
        rgb, c = _forward_bucket(grid, params, samples.uv[idx], uv_a)
        out[idx] = rgb
        caches.append((idx, c))
    if return_cache:
        return out, RenderCache(caches, len(samples))
    return out


def decode_rgb(grid, params, uv, bucket_uv):
    """Colour at a single uv against one anchor bucket; returns (rgb, attention-output, fallback flag)."""
    rgb, c = _forward_bucket(grid, params, _clamp_uv(uv), np.atleast_2d(np.asarray(bucket_uv, dtype=float)).reshape(-1, 2))
    return rgb[0], c["o"][0], c["fallback"]


def attention_weights(grid, params, uv, bucket_uv):
    _, c = _forward_bucket(grid, params, _clamp_uv(uv), np.asarray(bucket_uv, dtype=float).reshape(-1, 2))
    return c.get("p")


# ------------------------------------------------------------- backward


@dataclass
class Gradients:
    tables: list
    params: dict

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tables] + [self.params[k].ravel() for k in PARAM_NAMES])


def backward(grid, params, cache, upstream):
    """Gradients of sum(upstream * colours) w.r.t. grid tables and decoder params."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (cache.n, 3):
        raise ParameterError(f"upstream must be ({cache.n}, 3), got {upstream.shape}")
    g = params.zeros_like()
    d_raw_parts = []  # (uv, d_raw)
    for idx, c in cache.buckets:
        rgb = c["rgb"]
        dy = upstream[idx] * rgb * (1.0 - rgb)
        g["Wrgb"] += c["z"].T @ dy
        g["b_rgb"] += dy.sum(axis=0)
        dz = dy @ params.Wrgb.T
        deq = dz.copy()
        g["Wo"] += c["o"].T @ dz
        do = dz @ params.Wo.T
        eq = c["eq"]
        if c["fallback"]:
            g["Wv"] += eq.T @ do
            deq += do @ params.Wv.T
        else:
            doh = _split(do, params.heads)
            p, qh, kh, vh, scale = c["p"], c["qh"], c["kh"], c["vh"], c["scale"]
            dvh = p.transpose(0, 2, 1) @ doh
            dp = doh @ vh.transpose(0, 2, 1)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            dqh = ds @ kh * scale
            dkh = ds.transpose(0, 2, 1) @ qh * scale
            dq, dk, dv = _merge(dqh), _merge(dkh), _merge(dvh)
            ea = c["ea"]
            g["Wq"] += eq.T @ dq
            g["Ws"] += c["sph"].T @ dq
            deq += dq @ params.Wq.T
            g["Wk"] += ea.T @ dk
            g["Wv"] += ea.T @ dv
            dea = dk @ params.Wk.T + dv @ params.Wv.T
            g["ln_gamma"] += (dea * c["na"]).sum(axis=0)
            g["ln_beta"] += dea.sum(axis=0)
            d_raw_parts.append((c["uv_a"], layernorm_backward(dea * params.ln_gamma, c["na"], c["inva"])))
        g["ln_gamma"] += (deq * c["nq"]).sum(axis=0)
        g["ln_beta"] += deq.sum(axis=0)
        d_raw_parts.append((c["uv_q"], layernorm_backward(deq * params.ln_gamma, c["nq"], c["invq"])))
    f = grid.features
    tables = [np.zeros_like(t) for t in grid.tables]
    for uv, d_raw in d_raw_parts:
        for lvl, t in enumerate(grid.tables):
            tables[lvl] += kernels.bilinear_scatter(np.ascontiguousarray(d_raw[:, lvl * f:(lvl + 1) * f]),
                                                    np.ascontiguousarray(uv), t.shape[0])
    return Gradients(tables, g)


# ------------------------------------------------------- fitting (Adam)


def image_samples(res, instance=0, group=0):
    """Pixel-centre samples of a res x res UV image, row-major with u along columns."""
    c = (np.arange(res) + 0.5) / res
    vv, uu = np.meshgrid(c, c, indexing="ij")
    return Samples(np.column_stack([uu.ravel(), vv.ravel()]), instance, group)


def _pack(grid, params):
    return [*grid.tables, *(getattr(params, k) for k in PARAM_NAMES)]


@dataclass
class FitResult:
    losses: list
    status: str = "completed"


def fit_to_target(grid, params, samples, anchors, target, steps=500, lr=1e-2,
                  betas=(0.9, 0.999), eps=1e-8, divergence=1e6):
    """Adam on mean squared colour error; grid and params are updated in place."""
    target = np.asarray(target, dtype=float).reshape(len(samples), 3)
    if not np.all(np.isfinite(target)):
        raise ParameterError("target has non-finite values")
    arrays = _pack(grid, params)
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    res = FitResult([])
    for step in range(1, steps + 1):
        rgb, cache = render_patch(grid, params, samples, anchors, return_cache=True)
        diff = rgb - target
        loss = float(np.mean(diff * diff))
        res.losses.append(loss)
        if not np.isfinite(loss) or loss > divergence:
            res.status = "diverged"
            logger.warning("fit diverged at step %d (loss %r)", step, loss)
            break
        gr = backward(grid, params, cache, 2.0 * diff / diff.size)
        grads = [*gr.tables, *(gr.params[k] for k in PARAM_NAMES)]
        for a, g, mi, vi in zip(arrays, grads, m, v):
            mi *= betas[0]
            mi += (1 - betas[0]) * g
            vi *= betas[1]
            vi += (1 - betas[1]) * g * g
            mhat = mi / (1 - betas[0] ** step)
            vhat = vi / (1 - betas[1] ** step)
            a -= lr * mhat / (np.sqrt(vhat) + eps)
    else:
        rgb = render_patch(grid, params, samples, anchors)
        res.losses.append(float(np.mean((rgb - target) ** 2)))
    return res


# ------------------------------------------------------------ gradcheck


def gradcheck(grid, params, samples, anchors, step=1e-4, rng=None):
    """Max relative error between analytic and central-difference gradients per array.

    The scalar checked is sum(w * colours) for a fixed random weight w.
    """
    rng = rng or np.random.default_rng(3)
    w = rng.normal(size=(len(samples), 3))

    def f():
        return float(np.sum(w * render_patch(grid, params, samples, anchors)))

    _, cache = render_patch(grid, params, samples, anchors, return_cache=True)
    an = backward(grid, params, cache, w)
    report = {}
    targets = [(f"level{i}", t, an.tables[i]) for i, t in enumerate(grid.tables)]
    targets += [(k, getattr(params, k), an.params[k]) for k in PARAM_NAMES]
    for name, arr, ga in targets:
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + step
            fp = f()
            arr[ix] = old - step
            fm = f()
            arr[ix] = old
            fd[ix] = (fp - fm) / (2 * step)
        denom = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-12)
        report[name] = float(np.linalg.norm(ga - fd) / denom)
    return report


def tiny_config(seed=0):
    """L=2, F=4, H=2, three anchors and five samples, all in one bucket."""
    rng = np.random.default_rng(seed)
    grid = MultiResGrid.create(levels=(4, 6), features=4, rng=rng)
    params = DecoderParams.create(grid.width, heads=2, rng=rng)
    params.ln_gamma = 1.0 + 0.1 * rng.normal(size=grid.width)
    params.ln_beta = 0.1 * rng.normal(size=grid.width)
    params.b_rgb = 0.1 * rng.normal(size=3)
    anchors = AnchorSet({(0, 4): rng.uniform(0.05, 0.95, size=(3, 2))})
    samples = Samples(rng.uniform(0.05, 0.95, size=(5, 2)), 0, 4)
    return grid, params, samples, anchors


# ------------------------------------------------------------ container


def save_container(path_or_buf, grid, params):
    arrays = [(f"level{i}", t) for i, t in enumerate(grid.tables)] + list(params.arrays().items())
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = json.dumps({"levels": list(grid.levels), "features": grid.features, "heads": params.heads,
                         "dtype": "<f8", "arrays": entries}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<I", len(header)) + header
    blob += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    if isinstance(path_or_buf, io.IOBase):
        path_or_buf.write(blob)
    else:
        with open(path_or_buf, "wb") as fh:
            fh.write(blob)
    return len(blob)


def load_container(path_or_bytes):
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else open(path_or_bytes, "rb").read()
    if data[:4] != MAGIC:
        raise ParseError("not a texture container (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad container header: {exc}") from exc
    base = 8 + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data[start:start + 8 * count], dtype="<f8").reshape(e["shape"]).copy()
    grid = MultiResGrid([arrays[f"level{i}"] for i in range(len(header["levels"]))])
    params = DecoderParams(**{k: arrays[k] for k in PARAM_NAMES}, heads=int(header["heads"]))
    return grid, params


# ------------------------------------------------- optimizer renderer


class TextureRenderer:
    """Renderer contract for the trajectory optimizer: theta is the flattened
    grid plus decoder parameters, x_pi the flattened colour patch."""

    def __init__(self, grid, params, samples, anchors):
        self.grid = grid.copy()
        self.params = params.copy()
        self.samples = samples
        self.anchors = anchors
        self.shapes = [a.shape for a in _pack(self.grid, self.params)]

    def theta0(self):
        return np.concatenate([a.ravel() for a in _pack(self.grid, self.params)])

    def _load(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for a in _pack(self.grid, self.params):
            a[...] = theta[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != theta.size:
            raise ParameterError(f"theta has {theta.size} entries, expected {pos}")

    def render(self, theta, pose=None):
        self._load(theta)
        return render_patch(self.grid, self.params, self.samples, self.anchors).ravel()

    def vjp(self, theta, pose, grad_x):
        self._load(theta)
        _, cache = render_patch(self.grid, self.params, self.samples, self.anchors, return_cache=True)
        g = backward(self.grid, self.params, cache, np.asarray(grad_x).reshape(-1, 3))
        out = g.flat()
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite texture gradient")
        return out
