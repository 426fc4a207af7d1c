"""Greedy l0 cut pursuit for the generalized minimal partition problem.

The energy of a partition with piecewise-constant values ``f`` is::

    sum_i |f_seg(i) - a_i|^2 + sum_{(i,j) cut} lambda * exp(-|a_i - a_j|^2 / sigma)

where ``a`` are the (augmented) vertex vectors and, for a fixed partition,
the optimal ``f`` on each segment is the mean of its members.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..errors import ValidationError
from ..graph import Graph, Partition, connected_components, graph_components
from .maxflow import binary_labeling

log = logging.getLogger(__name__)

EXACT_DIAMETER_MAX = 128


@dataclass
class GmppConfig:
    lambda_tilde: float = 1.0
    sigma: float = 0.5
    alpha_spat: float = 0.2
    n_min_base: int = 40
    schedule_factor: float = 0.7
    outer_iters: int = 10
    split_iters: int = 10
    tol: float = 1e-4

    def validate(self) -> None:
        if self.lambda_tilde <= 0:
            raise ValidationError("lambda_tilde must be positive")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if self.alpha_spat < 0:
            raise ValidationError("alpha_spat must be non-negative")
        if self.n_min_base < 1:
            raise ValidationError("n_min_base must be at least 1")
        if not 0 < self.schedule_factor < 1:
            raise ValidationError("schedule_factor must lie in (0, 1)")
        if self.outer_iters < 1 or self.split_iters < 1:
            raise ValidationError("outer_iters and split_iters must be at least 1")
        if self.tol < 0:
            raise ValidationError("tol must be non-negative")


@dataclass
class GmppResult:
    partition: Partition
    values: np.ndarray  # (n_segments, dim) segment means
    energy: float
    energy_trace: list = field(default_factory=list)
    lambda_eff: float = 0.0
    n_min: int = 1


def n_min_of_lambda(n_min_base: float, lambda_tilde: float) -> int:
    """Smallest allowed segment size for a given normalized strength.

    ``ceil(max(n/2, n + n/2 * log10(lambda_tilde)))``, at least 1.
    """
    if lambda_tilde <= 0:
        raise ValidationError("lambda_tilde must be positive")
    x = max(0.5 * n_min_base, n_min_base + 0.5 * n_min_base * math.log10(lambda_tilde))
    return max(1, math.ceil(x - 1e-9))


def lambda_effective(g: Graph, lambda_tilde: float) -> float:
    """``lambda_tilde / (4 c)`` with ``c = |E| / |V|``."""
    if g.n_edges == 0:
        return 0.0
    return lambda_tilde / (4.0 * g.connectivity)


def augment_embeddings(e: np.ndarray, positions: np.ndarray, alpha_spat: float) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if e.shape[0] != positions.shape[0]:
        raise ValidationError(f"{e.shape[0]} embeddings but {positions.shape[0]} positions")
    return np.hstack([e, alpha_spat * positions])


def edge_contrast(g: Graph, a: np.ndarray, sigma: float) -> np.ndarray:
    """Unscaled edge weights ``exp(-|a_i - a_j|^2 / sigma)``."""
    d = a[g.edges[:, 0]] - a[g.edges[:, 1]]
    return np.exp(-np.einsum("ij,ij->i", d, d) / sigma)


def segment_means(a: np.ndarray, labels: np.ndarray, n_segments: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_segments).astype(np.float64)
    sums = np.stack([np.bincount(labels, weights=a[:, k], minlength=n_segments)
                     for k in range(a.shape[1])], axis=1)
    return sums / np.maximum(counts, 1)[:, None]


def _fidelity_per_segment(a, labels, n_segments):
    mean = segment_means(a, labels, n_segments)
    r = a - mean[labels]
    return np.bincount(labels, weights=np.einsum("ij,ij->i", r, r), minlength=n_segments)


def gmpp_energy(g: Graph, a: np.ndarray, partition: Partition, lambda_eff: float, sigma: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    if partition.n_vertices != g.n_vertices or a.shape[0] != g.n_vertices:
        raise ValidationError("partition, vectors and graph disagree on the vertex count")
    labels = partition.segment_of
    fid = _fidelity_per_segment(a, labels, partition.n_segments).sum()
    cut = labels[g.edges[:, 0]] != labels[g.edges[:, 1]]
    return float(fid + lambda_eff * edge_contrast(g, a, sigma)[cut].sum())


# --------------------------------------------------------------------------- split step

def _farthest_pairs(a, labels, n_segments):
    """Per segment, the indices of two far-apart members.

    Exact diameter for segments up to EXACT_DIAMETER_MAX members, a double
    sweep (farthest from the mean, then farthest from that) beyond.
    """
    n = len(labels)
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=n_segments)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    h0 = np.full(n_segments, -1, dtype=np.int64)
    h1 = np.full(n_segments, -1, dtype=np.int64)

    small = np.flatnonzero((sizes >= 2) & (sizes <= EXACT_DIAMETER_MAX))
    if len(small):
        m = sizes[small]
        per = m * m
        seg = np.repeat(small, per)
        q = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
        mm = np.repeat(m, per)
        i = order[np.repeat(starts[small], per) + q // mm]
        j = order[np.repeat(starts[small], per) + q % mm]
        d = a[i] - a[j]
        d2 = np.einsum("ij,ij->i", d, d)
        # first maximum per segment, in (i, j) scan order
        best = np.lexsort((np.arange(len(d2)), -d2, seg))
        first = np.flatnonzero(np.r_[True, seg[best][1:] != seg[best][:-1]])
        pick = best[first]
        h0[seg[pick]], h1[seg[pick]] = i[pick], j[pick]

    big = (sizes > EXACT_DIAMETER_MAX)
    if big.any():
        in_big = big[labels]
        mean = segment_means(a, labels, n_segments)

        def farthest(ref):
            d = a - ref[labels]
            d2 = np.where(in_big, np.einsum("ij,ij->i", d, d), -1.0)
            o = np.lexsort((np.arange(n), -d2, labels))
            f = np.flatnonzero(np.r_[True, labels[o][1:] != labels[o][:-1]])
            out = np.full(n_segments, -1, dtype=np.int64)
            out[labels[o[f]]] = o[f]
            return out

        x0 = farthest(mean)
        x1 = farthest(a[np.maximum(x0, 0)])
        x2 = farthest(a[np.maximum(x1, 0)])
        h0[big], h1[big] = x1[big], x2[big]
    return h0, h1


def _split_step(g, a, labels, n_segments, wbar, lam, split_iters):
    """Try to split every segment in two; keep splits that lower its energy.

    Returns the refined labels (not renumbered) and the number of accepted splits.
    """
    h0, h1 = _farthest_pairs(a, labels, n_segments)
    ok = h0 >= 0
    ok[ok] = np.any(a[h0[ok]] != a[h1[ok]], axis=1)
    if not ok.any():
        return labels, 0
    c0 = np.zeros((n_segments, a.shape[1]))
    c1 = np.zeros_like(c0)
    c0[ok], c1[ok] = a[h0[ok]], a[h1[ok]]

    active = ok[labels]
    verts = np.flatnonzero(active)
    remap = np.full(len(labels), -1, dtype=np.int64)
    remap[verts] = np.arange(len(verts))
    u, v = g.edges[:, 0], g.edges[:, 1]
    internal = (labels[u] == labels[v]) & active[u]
    pairs = np.stack([remap[u[internal]], remap[v[internal]]], axis=1)
    pw = lam * wbar[internal]
    seg = labels[verts]
    av = a[verts]

    binary = np.zeros(len(verts), dtype=np.int64)
    for it in range(split_iters):
        d0 = av - c0[seg]
        d1 = av - c1[seg]
        unary = np.stack([np.einsum("ij,ij->i", d0, d0), np.einsum("ij,ij->i", d1, d1)], axis=1)
        new = binary_labeling(unary, pairs, pw)
        if it > 0 and np.array_equal(new, binary):
            break
        binary = new
        key = seg * 2 + binary
        cnt = np.bincount(key, minlength=2 * n_segments)
        means = segment_means(av, key, 2 * n_segments)
        both = (cnt[0::2] > 0) & (cnt[1::2] > 0)
        c0 = np.where(both[:, None], means[0::2], c0)
        c1 = np.where(both[:, None], means[1::2], c1)

    # refine each tentative half into connected components
    lab2 = labels * 2
    lab2[verts] += binary
    pieces = connected_components(g, lab2[u] == lab2[v]).segment_of
    n_pieces = int(pieces.max()) + 1
    fid_new = _fidelity_per_segment(a, pieces, n_pieces)
    piece_seg = np.zeros(n_pieces, dtype=np.int64)
    piece_seg[pieces] = labels
    after = np.bincount(piece_seg, weights=fid_new, minlength=n_segments)
    newly_cut = (labels[u] == labels[v]) & (pieces[u] != pieces[v])
    after += np.bincount(labels[u[newly_cut]], weights=lam * wbar[newly_cut], minlength=n_segments)
    before = _fidelity_per_segment(a, labels, n_segments)
    accept = ok & (after < before - 1e-12 * np.maximum(before, 1e-300))
    out = np.where(accept[labels], n_segments + pieces, labels)
    return out, int(accept.sum())


# --------------------------------------------------------------------------- merge step

class _SegmentGraph:
    """Mutable reduced graph: segment sizes, sums and summed cut weights."""

    def __init__(self, g, a, labels, n_segments, wbar):
        self.size = np.bincount(labels, minlength=n_segments).astype(np.float64)
        self.sum = np.stack([np.bincount(labels, weights=a[:, k], minlength=n_segments)
                             for k in range(a.shape[1])], axis=1)
        self.parent = np.arange(n_segments)
        self.alive = np.ones(n_segments, dtype=bool)
        su, sv = labels[g.edges[:, 0]], labels[g.edges[:, 1]]
        cut = su != sv
        lo, hi = np.minimum(su[cut], sv[cut]), np.maximum(su[cut], sv[cut])
        key = lo * n_segments + hi
        uk, inv = np.unique(key, return_inverse=True)
        wsum = np.bincount(inv.reshape(-1), weights=wbar[cut], minlength=len(uk))
        self.adj = [dict() for _ in range(n_segments)]
        for k, w in zip(uk.tolist(), wsum.tolist()):
            s, t = divmod(k, n_segments)
            self.adj[s][t] = w
            self.adj[t][s] = w
        self.stamp = np.zeros(n_segments, dtype=np.int64)

    def gain(self, s, t, lam):
        """Energy decrease obtained by merging s and t."""
        ns, nt = self.size[s], self.size[t]
        d = self.sum[s] / ns - self.sum[t] / nt
        return lam * self.adj[s][t] - ns * nt / (ns + nt) * float(d @ d)

    def merge(self, s, t):
        """Merge t into s (s keeps its id)."""
        self.size[s] += self.size[t]
        self.sum[s] += self.sum[t]
        self.alive[t] = False
        self.parent[t] = s
        del self.adj[s][t]
        del self.adj[t][s]
        for r, w in self.adj[t].items():
            del self.adj[r][t]
            self.adj[s][r] = self.adj[s].get(r, 0.0) + w
            self.adj[r][s] = self.adj[s][r]
        self.adj[t] = {}
        self.stamp[s] += 1
        self.stamp[t] += 1

    def labels(self, labels):
        root = self.parent.copy()
        while True:
            nxt = root[root]
            if np.array_equal(nxt, root):
                break
            root = nxt
        return root[labels]


def _greedy_merge(sg: _SegmentGraph, lam: float) -> int:
    heap = []
    for s in np.flatnonzero(sg.alive).tolist():
        for t in sg.adj[s]:
            if s < t:
                gn = sg.gain(s, t, lam)
                if gn > 0:
                    heap.append((-gn, s, t, 0, 0))
    heapq.heapify(heap)
    merges = 0
    while heap:
        neg, s, t, ss, st = heapq.heappop(heap)
        if ss != sg.stamp[s] or st != sg.stamp[t] or not sg.alive[s] or not sg.alive[t]:
            continue
        sg.merge(s, t)
        merges += 1
        for r in sorted(sg.adj[s]):
            gn = sg.gain(s, r, lam)
            if gn > 0:
                a, b = (s, r) if s < r else (r, s)
                heapq.heappush(heap, (-gn, a, b, int(sg.stamp[a]), int(sg.stamp[b])))
    return merges


def _forced_merge(sg: _SegmentGraph, lam: float, n_min: int) -> int:
    """Merge segments smaller than ``n_min`` into their cheapest neighbor."""
    if n_min <= 1:
        return 0
    heap = [(sg.size[s], s, int(sg.stamp[s])) for s in np.flatnonzero(sg.alive & (sg.size < n_min)).tolist()]
    heapq.heapify(heap)
    merges = 0
    while heap:
        _, s, st = heapq.heappop(heap)
        if not sg.alive[s] or st != sg.stamp[s] or sg.size[s] >= n_min or not sg.adj[s]:
            continue
        best = max(sorted(sg.adj[s]), key=lambda r: sg.gain(s, r, lam))
        keep, gone = (s, best) if s < best else (best, s)
        sg.merge(keep, gone)
        merges += 1
        if sg.size[keep] < n_min:
            heapq.heappush(heap, (sg.size[keep], keep, int(sg.stamp[keep])))
    return merges


# --------------------------------------------------------------------------- driver

def solve_augmented(g: Graph, a: np.ndarray, lambda_eff: float, sigma: float, n_min: int = 1,
                    cfg: Optional[GmppConfig] = None, check_energy: bool = False) -> GmppResult:
    """Cut pursuit on vectors ``a`` at a fixed effective strength ``lambda_eff``."""
    cfg = cfg or GmppConfig()
    a = np.asarray(a, dtype=np.float64)
    if g.n_vertices == 0:
        raise ValidationError("cannot partition an empty graph")
    if a.shape[0] != g.n_vertices:
        raise ValidationError(f"{a.shape[0]} vectors for {g.n_vertices} vertices")
    wbar = edge_contrast(g, a, sigma)
    components = graph_components(g)
    labels = components.segment_of.copy()
    trace = []
    T = cfg.outer_iters
    t = 1
    while t <= T:
        lam = lambda_eff * cfg.schedule_factor ** (T - t)
        part = Partition(labels)
        e_before = gmpp_energy(g, a, part, lam, sigma)
        labels, n_split = _split_step(g, a, part.segment_of, part.n_segments, wbar, lam, cfg.split_iters)
        part = Partition(labels)
        if check_energy:
            e_split = gmpp_energy(g, a, part, lam, sigma)
            assert e_split <= e_before * (1 + 1e-9) + 1e-12, (e_split, e_before)
        sg = _SegmentGraph(g, a, part.segment_of, part.n_segments, wbar)
        n_merge = _greedy_merge(sg, lam)
        if check_energy:
            e_merge = gmpp_energy(g, a, Partition(sg.labels(part.segment_of)), lam, sigma)
            assert e_merge <= e_split * (1 + 1e-9) + 1e-12, (e_merge, e_split)
        n_forced = _forced_merge(sg, lam, n_min)
        labels = Partition(sg.labels(part.segment_of)).segment_of
        e_after = gmpp_energy(g, a, Partition(labels), lam, sigma)
        trace.append(e_after)
        log.debug("iter %d lambda %.4g: %d splits, %d merges, %d forced, energy %.6g",
                  t, lam, n_split, n_merge, n_forced, e_after)
        if t < T and e_before - e_after <= cfg.tol * abs(e_before):
            t = T  # converged at this strength: finish with one pass at full strength
        else:
            t += 1

    best = Partition(labels)
    energy = gmpp_energy(g, a, best, lambda_eff, sigma)
    fallbacks = [components] + ([Partition.singletons(g.n_vertices)] if n_min <= 1 else [])
    for cand in fallbacks:
        ce = gmpp_energy(g, a, cand, lambda_eff, sigma)
        if ce < energy:
            best, energy = cand, ce
    values = segment_means(a, best.segment_of, best.n_segments)
    return GmppResult(best, values, energy, trace, lambda_eff, n_min)


def solve(g: Graph, e: np.ndarray, positions: np.ndarray, cfg: GmppConfig,
          check_energy: bool = False) -> GmppResult:
    """Partition ``g`` from embeddings ``e`` and point positions.

    Positions scaled by ``cfg.alpha_spat`` are appended to the embeddings;
    the effective strength is ``lambda_tilde / (4 |E|/|V|)``.
    """
    cfg.validate()
    if g.n_vertices == 0:
        raise ValidationError("cannot partition an empty graph")
    a = augment_embeddings(e, positions, cfg.alpha_spat)
    n_min = n_min_of_lambda(cfg.n_min_base, cfg.lambda_tilde)
    return solve_augmented(g, a, lambda_effective(g, cfg.lambda_tilde), cfg.sigma, n_min, cfg, check_energy)


def regularization_path(g: Graph, e: np.ndarray, positions: np.ndarray, cfg: GmppConfig,
                        lambdas: Sequence[float]) -> list[GmppResult]:
    lambdas = list(lambdas)
    if not lambdas:
        raise ValidationError("the regularization path needs at least one strength")
    if any(b < a for a, b in zip(lambdas, lambdas[1:])):
        raise ValidationError("regularization strengths must be ascending")
    return [solve(g, e, positions, replace(cfg, lambda_tilde=lt)) for lt in lambdas]
