"""Dense layers with ReLU and batch/group normalization, forward and reverse mode.

Parameters live in a flat ``dict[str, ndarray]`` owned by the model; a stack is
described by a prefix and its widths, so ``mlp_forward`` only needs the names.
"""
from __future__ import annotations

import numpy as np

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1
GROUPS = 4


def init_stack(params: dict, buffers: dict, prefix: str, n_in: int, widths, norm_kind: str,
               rng: np.random.Generator, last_plain: bool) -> None:
    """Add weights for ``len(widths)`` dense layers named ``{prefix}.{i}.*``."""
    for i, w in enumerate(widths):
        bound = 1.0 / np.sqrt(n_in)
        params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(n_in, w))
        params[f"{prefix}.{i}.b"] = rng.uniform(-bound, bound, size=w)
        if not (last_plain and i == len(widths) - 1):
            params[f"{prefix}.{i}.gamma"] = np.ones(w)
            params[f"{prefix}.{i}.beta"] = np.zeros(w)
            if norm_kind == "batch":
                buffers[f"{prefix}.{i}.mean"] = np.zeros(w)
                buffers[f"{prefix}.{i}.var"] = np.ones(w)
        n_in = w


def _norm_forward(x, gamma, beta, kind, training, buffers, name):
    if kind == "batch":
        if training:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            buffers[name + ".mean"] *= 1 - BN_MOMENTUM
            buffers[name + ".mean"] += BN_MOMENTUM * mu
            n = len(x)
            buffers[name + ".var"] *= 1 - BN_MOMENTUM
            buffers[name + ".var"] += BN_MOMENTUM * var * (n / max(n - 1, 1))
        else:
            mu, var = buffers[name + ".mean"], buffers[name + ".var"]
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        return xhat * gamma + beta, (xhat, inv, training)
    # group norm: statistics per row and group of channels
    n, c = x.shape
    xg = x.reshape(n, GROUPS, c // GROUPS)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = ((xg - mu) * inv).reshape(n, c)
    return xhat * gamma + beta, (xhat, inv, True)


def _norm_backward(dy, gamma, cache, kind):
    xhat, inv, batch_stats = cache
    dgamma = np.einsum("ij,ij->j", dy, xhat)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if kind == "batch":
        if not batch_stats:
            return dxhat * inv, dgamma, dbeta
        n = len(dxhat)
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.einsum("ij,ij->j", dxhat, xhat))
        return dx, dgamma, dbeta
    n, c = dxhat.shape
    g = c // GROUPS
    dh = dxhat.reshape(n, GROUPS, g)
    xh = xhat.reshape(n, GROUPS, g)
    dx = inv / g * (g * dh - dh.sum(axis=2, keepdims=True) - xh * (dh * xh).sum(axis=2, keepdims=True))
    return dx.reshape(n, c), dgamma, dbeta


def mlp_forward(params, buffers, prefix, n_layers, x, norm_kind, training, last_plain):
    """Apply linear -> ReLU -> norm per layer; the last one is linear only if ``last_plain``."""
    caches = []
    for i in range(n_layers):
        name = f"{prefix}.{i}"
        z = x @ params[name + ".W"] + params[name + ".b"]
        if last_plain and i == n_layers - 1:
            caches.append((x, None, None))
            x = z
            continue
        r = np.maximum(z, 0.0)
        y, nc = _norm_forward(r, params[name + ".gamma"], params[name + ".beta"],
                              norm_kind, training, buffers, name)
        caches.append((x, z > 0, nc))
        x = y
    return x, caches


def mlp_backward(params, prefix, caches, dy, norm_kind, grads, need_input=True):
    """Accumulate parameter gradients into ``grads``; returns the input gradient."""
    for i in reversed(range(len(caches))):
        name = f"{prefix}.{i}"
        x, mask, nc = caches[i]
        if nc is not None:
            dr, dgamma, dbeta = _norm_backward(dy, params[name + ".gamma"], nc, norm_kind)
            grads[name + ".gamma"] += dgamma
            grads[name + ".beta"] += dbeta
            dy = dr * mask
        grads[name + ".W"] += x.T @ dy
        grads[name + ".b"] += dy.sum(axis=0)
        if i or need_input:
            dy = dy @ params[name + ".W"].T
    return dy if need_input else None


def maxpool_forward(x):
    """Max over axis 1 of ``(B, k, C)``; ties go to the first row."""
    idx = x.argmax(axis=1)
    return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :], idx


def maxpool_backward(dy, idx, k):
    b, c = dy.shape
    dx = np.zeros((b, k, c))
    np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
    return dx


def l2_normalize(z):
    norm = np.maximum(np.sqrt(np.einsum("ij,ij->i", z, z)), 1e-12)[:, None]
    return z / norm, norm


def l2_normalize_backward(dy, y, norm):
    return (dy - y * np.einsum("ij,ij->i", dy, y)[:, None]) / norm
