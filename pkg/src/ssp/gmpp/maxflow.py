"""Exact s-t minimum cut (Dinic's algorithm) for binary Potts labelings."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _dinic(start, to, cap, rev, s, t, eps):
    n = start.shape[0] - 1
    level = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    it = np.empty(n, np.int64)
    path = np.empty(n, np.int64)  # arc taken out of each depth
    total = 0.0
    while True:
        level[:] = -1
        level[s] = 0
        head, tail = 0, 1
        queue[0] = s
        while head < tail:
            u = queue[head]
            head += 1
            for a in range(start[u], start[u + 1]):
                v = to[a]
                if level[v] < 0 and cap[a] > eps:
                    level[v] = level[u] + 1
                    queue[tail] = v
                    tail += 1
        if level[t] < 0:
            return total
        for u in range(n):
            it[u] = start[u]
        depth = 0
        u = s
        while True:
            if u == t:
                # augment along the stored path by its bottleneck
                f = np.inf
                for d in range(depth):
                    if cap[path[d]] < f:
                        f = cap[path[d]]
                cut = depth
                for d in range(depth):
                    a = path[d]
                    cap[a] -= f
                    cap[rev[a]] += f
                    if cut == depth and cap[a] <= eps:
                        cut = d
                total += f
                depth = cut
                u = s if depth == 0 else to[path[depth - 1]]
                continue
            advanced = False
            while it[u] < start[u + 1]:
                a = it[u]
                v = to[a]
                if cap[a] > eps and level[v] == level[u] + 1:
                    path[depth] = a
                    depth += 1
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if advanced:
                continue
            # dead end: retreat
            level[u] = -1
            if depth == 0:
                break
            depth -= 1
            a = path[depth]
            u = to[rev[a]]
            it[u] += 1


@njit(cache=True)
def _reachable(start, to, cap, s, eps):
    n = start.shape[0] - 1
    seen = np.zeros(n, np.bool_)
    stack = np.empty(n, np.int64)
    seen[s] = True
    stack[0] = s
    top = 1
    while top > 0:
        top -= 1
        u = stack[top]
        for a in range(start[u], start[u + 1]):
            v = to[a]
            if not seen[v] and cap[a] > eps:
                seen[v] = True
                stack[top] = v
                top += 1
    return seen


def binary_labeling(unary: np.ndarray, pairs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Exact minimizer of ``sum_i unary[i, x_i] + sum_ij w_ij [x_i != x_j]``.

    ``unary`` is (n, 2), ``pairs`` (E, 2) vertex indices, ``weights`` >= 0.
    Returns labels in {0, 1}; vertices free to take either label get 1.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n = unary.shape[0]
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if (weights < 0).any():
        raise ValueError("pairwise weights must be non-negative")
    d = unary - unary.min(axis=1, keepdims=True)
    src, snk = d[:, 1], d[:, 0]  # cut s->i puts i on the sink side (label 1)
    keep = weights > 0
    pi, pj, pw = pairs[keep, 0], pairs[keep, 1], weights[keep]
    s, t = n, n + 1
    ts, tt = np.flatnonzero(src > 0), np.flatnonzero(snk > 0)
    tails = np.concatenate([pi, pj, np.full(len(ts), s), ts, tt, np.full(len(tt), t)])
    heads = np.concatenate([pj, pi, ts, np.full(len(ts), s), np.full(len(tt), t), tt])
    caps = np.concatenate([pw, pw, src[ts], np.zeros(len(ts)), snk[tt], np.zeros(len(tt))])
    m, nts, ntt = len(pw), len(ts), len(tt)
    rev = np.concatenate([np.arange(m, 2 * m), np.arange(m),
                          2 * m + nts + np.arange(nts), 2 * m + np.arange(nts),
                          2 * m + 2 * nts + ntt + np.arange(ntt), 2 * m + 2 * nts + np.arange(ntt)])
    order = np.argsort(tails, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    to = heads[order]
    cap = caps[order].copy()
    rev = inv[rev[order]]
    start = np.zeros(n + 3, dtype=np.int64)
    np.cumsum(np.bincount(tails, minlength=n + 2), out=start[1:])
    scale = max(float(caps.max()) if len(caps) else 0.0, 1e-300)
    eps = 1e-13 * scale
    _dinic(start, to, cap, rev, s, t, eps)
    source_side = _reachable(start, to, cap, s, eps)[:n]
    return (~source_side).astype(np.int64)
