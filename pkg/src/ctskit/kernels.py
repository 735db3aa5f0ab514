"""Hot numeric kernels, each with a numba path and a pure-numpy path.

The public names at the bottom dispatch on ``_accel.USE_NUMBA``. Both
implementations stay importable (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them directly.
"""
import math

import numpy as np
from scipy.special import logsumexp

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# Gaussian-mixture marginals: component k at time (alpha, sigma) is
# N(alpha * mu_k, diag(alpha^2 * var_k + sigma^2)).
# --------------------------------------------------------------------------


def gm_eps_numpy(x, alpha, sigma, weights, means, variances):
    v = alpha * alpha * variances[None, :, :] + sigma * sigma
    d = x[:, None, :] - alpha * means[None, :, :]
    logp = np.log(weights)[None, :] - 0.5 * np.sum(np.log(2.0 * np.pi * v) + d * d / v, axis=2)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return sigma * np.sum(resp[:, :, None] * d / v, axis=1)


def gm_logpdf_numpy(x, alpha, sigma, weights, means, variances):
    v = alpha * alpha * variances[None, :, :] + sigma * sigma
    d = x[:, None, :] - alpha * means[None, :, :]
    logp = np.log(weights)[None, :] - 0.5 * np.sum(np.log(2.0 * np.pi * v) + d * d / v, axis=2)
    return logsumexp(logp, axis=1)


@njit
def gm_eps_numba(x, alpha, sigma, weights, means, variances):
    n, dim = x.shape
    k_count = weights.shape[0]
    out = np.zeros((n, dim))
    logp = np.empty(k_count)
    a2 = alpha * alpha
    s2 = sigma * sigma
    for i in range(n):
        top = -np.inf
        for k in range(k_count):
            acc = math.log(weights[k])
            for j in range(dim):
                v = a2 * variances[k, j] + s2
                d = x[i, j] - alpha * means[k, j]
                acc -= 0.5 * (math.log(2.0 * math.pi * v) + d * d / v)
            logp[k] = acc
            if acc > top:
                top = acc
        total = 0.0
        for k in range(k_count):
            logp[k] = math.exp(logp[k] - top)
            total += logp[k]
        for k in range(k_count):
            r = logp[k] / total
            for j in range(dim):
                v = a2 * variances[k, j] + s2
                out[i, j] += r * (x[i, j] - alpha * means[k, j]) / v
        for j in range(dim):
            out[i, j] *= sigma
    return out


@njit
def gm_logpdf_numba(x, alpha, sigma, weights, means, variances):
    n, dim = x.shape
    k_count = weights.shape[0]
    out = np.empty(n)
    logp = np.empty(k_count)
    a2 = alpha * alpha
    s2 = sigma * sigma
    for i in range(n):
        top = -np.inf
        for k in range(k_count):
            acc = math.log(weights[k])
            for j in range(dim):
                v = a2 * variances[k, j] + s2
                d = x[i, j] - alpha * means[k, j]
                acc -= 0.5 * (math.log(2.0 * math.pi * v) + d * d / v)
            logp[k] = acc
            if acc > top:
                top = acc
        total = 0.0
        for k in range(k_count):
            total += math.exp(logp[k] - top)
        out[i] = top + math.log(total)
    return out


# --------------------------------------------------------------------------
# Depth compositing: furniture wins ties.
# --------------------------------------------------------------------------


def composite_numpy(color_f, depth_f, color_l, depth_l):
    mask = depth_f <= depth_l
    return np.where(mask[..., None], color_f, color_l)


@njit
def composite_numba(color_f, depth_f, color_l, depth_l):
    h, w, c = color_f.shape
    out = np.empty_like(color_f)
    for i in range(h):
        for j in range(w):
            if depth_f[i, j] <= depth_l[i, j]:
                for k in range(c):
                    out[i, j, k] = color_f[i, j, k]
            else:
                for k in range(c):
                    out[i, j, k] = color_l[i, j, k]
    return out


# --------------------------------------------------------------------------
# Axis-aligned box intersections.
# --------------------------------------------------------------------------


def overlap_matrix_numpy(lo, hi):
    ext = np.minimum(hi[:, None, :], hi[None, :, :]) - np.maximum(lo[:, None, :], lo[None, :, :])
    return np.prod(np.clip(ext, 0.0, None), axis=2)


@njit
def overlap_matrix_numba(lo, hi):
    n, dim = lo.shape
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            vol = 1.0
            for j in range(dim):
                e = min(hi[a, j], hi[b, j]) - max(lo[a, j], lo[b, j])
                if e <= 0.0:
                    vol = 0.0
                    break
                vol *= e
            out[a, b] = vol
            out[b, a] = vol
    return out


def overlap_against_numpy(lo, hi, others_lo, others_hi):
    """Intersection volume of one box (lo, hi) against each row of others."""
    ext = np.minimum(hi[None, :], others_hi) - np.maximum(lo[None, :], others_lo)
    return np.prod(np.clip(ext, 0.0, None), axis=1)


@njit
def overlap_against_numba(lo, hi, others_lo, others_hi):
    m, dim = others_lo.shape
    out = np.zeros(m)
    for i in range(m):
        vol = 1.0
        for j in range(dim):
            e = min(hi[j], others_hi[i, j]) - max(lo[j], others_lo[i, j])
            if e <= 0.0:
                vol = 0.0
                break
            vol *= e
        out[i] = vol
    return out


# --------------------------------------------------------------------------
# Bilinear lattice lookups over [0, 1]^2 with r x r nodes.
# --------------------------------------------------------------------------


def _bilinear_setup(uv, res):
    p = uv * (res - 1)
    i0 = np.minimum(np.floor(p).astype(np.int64), res - 2)
    i0 = np.maximum(i0, 0)
    f = p - i0
    return i0, f


def bilinear_gather_numpy(table, uv):
    res = table.shape[0]
    i0, f = _bilinear_setup(uv, res)
    iu, iv = i0[:, 0], i0[:, 1]
    fu, fv = f[:, 0:1], f[:, 1:2]
    return (
        table[iu, iv] * (1 - fu) * (1 - fv)
        + table[iu + 1, iv] * fu * (1 - fv)
        + table[iu, iv + 1] * (1 - fu) * fv
        + table[iu + 1, iv + 1] * fu * fv
    )


def bilinear_scatter_numpy(grad, uv, res):
    feat = grad.shape[1]
    out = np.zeros((res, res, feat))
    i0, f = _bilinear_setup(uv, res)
    iu, iv = i0[:, 0], i0[:, 1]
    fu, fv = f[:, 0:1], f[:, 1:2]
    np.add.at(out, (iu, iv), grad * (1 - fu) * (1 - fv))
    np.add.at(out, (iu + 1, iv), grad * fu * (1 - fv))
    np.add.at(out, (iu, iv + 1), grad * (1 - fu) * fv)
    np.add.at(out, (iu + 1, iv + 1), grad * fu * fv)
    return out


@njit
def bilinear_gather_numba(table, uv):
    res = table.shape[0]
    feat = table.shape[2]
    n = uv.shape[0]
    out = np.empty((n, feat))
    for i in range(n):
        pu = uv[i, 0] * (res - 1)
        pv = uv[i, 1] * (res - 1)
        iu = min(max(int(math.floor(pu)), 0), res - 2)
        iv = min(max(int(math.floor(pv)), 0), res - 2)
        fu = pu - iu
        fv = pv - iv
        w00 = (1 - fu) * (1 - fv)
        w10 = fu * (1 - fv)
        w01 = (1 - fu) * fv
        w11 = fu * fv
        for c in range(feat):
            out[i, c] = (
                table[iu, iv, c] * w00
                + table[iu + 1, iv, c] * w10
                + table[iu, iv + 1, c] * w01
                + table[iu + 1, iv + 1, c] * w11
            )
    return out


@njit
def bilinear_scatter_numba(grad, uv, res):
    n, feat = grad.shape
    out = np.zeros((res, res, feat))
    for i in range(n):
        pu = uv[i, 0] * (res - 1)
        pv = uv[i, 1] * (res - 1)
        iu = min(max(int(math.floor(pu)), 0), res - 2)
        iv = min(max(int(math.floor(pv)), 0), res - 2)
        fu = pu - iu
        fv = pv - iv
        w00 = (1 - fu) * (1 - fv)
        w10 = fu * (1 - fv)
        w01 = (1 - fu) * fv
        w11 = fu * fv
        for c in range(feat):
            g = grad[i, c]
            out[iu, iv, c] += g * w00
            out[iu + 1, iv, c] += g * w10
            out[iu, iv + 1, c] += g * w01
            out[iu + 1, iv + 1, c] += g * w11
    return out


if USE_NUMBA:
    gm_eps = gm_eps_numba
    gm_logpdf = gm_logpdf_numba
    composite = composite_numba
    overlap_matrix = overlap_matrix_numba
    overlap_against = overlap_against_numba
    bilinear_gather = bilinear_gather_numba
    bilinear_scatter = bilinear_scatter_numba
else:
    gm_eps = gm_eps_numpy
    gm_logpdf = gm_logpdf_numpy
    composite = composite_numpy
    overlap_matrix = overlap_matrix_numpy
    overlap_against = overlap_against_numpy
    bilinear_gather = bilinear_gather_numpy
    bilinear_scatter = bilinear_scatter_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
