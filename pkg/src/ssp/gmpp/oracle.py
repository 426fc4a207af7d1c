"""Exhaustive minimizer of the partition energy for tiny graphs (test oracle)."""
from __future__ import annotations

import numpy as np

from ..errors import RefusalError, ValidationError
from ..graph import Graph, Partition
from .solver import GmppResult, edge_contrast, gmpp_energy, segment_means


def restricted_growth_strings(n: int) -> np.ndarray:
    """All set partitions of ``n`` items as rows of block labels, lexicographic."""
    rows = np.zeros((1, 1), dtype=np.int8) if n else np.zeros((1, 0), dtype=np.int8)
    for k in range(1, n):
        top = rows.max(axis=1)
        reps = top.astype(np.int64) + 2
        base = np.repeat(rows, reps, axis=0)
        nxt = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
        rows = np.hstack([base, nxt[:, None].astype(np.int8)])
    return rows


def _n_components(labels: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Number of connected pieces of each row's label classes."""
    p, n = labels.shape
    comp = np.tile(np.arange(n), (p, 1))
    u, v = edges[:, 0], edges[:, 1]
    same = labels[:, u] == labels[:, v]
    for _ in range(n):
        cu, cv = comp[:, u], comp[:, v]
        m = np.where(same, np.minimum(cu, cv), n)
        new = comp.copy()
        for k in range(len(u)):
            np.minimum(new[:, u[k]], m[:, k], out=new[:, u[k]])
            np.minimum(new[:, v[k]], m[:, k], out=new[:, v[k]])
        if np.array_equal(new, comp):
            break
        comp = new
    return (comp == np.arange(n)).sum(axis=1)


def brute_force_oracle(g: Graph, a: np.ndarray, lambda_eff: float, sigma: float,
                       n_max: int = 10) -> GmppResult:
    """Global minimum over partitions whose blocks are connected in ``g``.

    Among equal energies (to 1e-12 relative) the lexicographically smallest
    block assignment wins.
    """
    n = g.n_vertices
    if n > n_max:
        raise RefusalError(f"brute force refused: {n} vertices > n_max={n_max}")
    if n == 0:
        raise ValidationError("cannot partition an empty graph")
    a = np.asarray(a, dtype=np.float64)
    rgs = restricted_growth_strings(n).astype(np.int64)
    n_blocks = rgs.max(axis=1) + 1
    if g.n_edges:
        rgs = rgs[_n_components(rgs, g.edges) == n_blocks]
        n_blocks = rgs.max(axis=1) + 1
    # fidelity: sum |a|^2 - sum_b |S_b|^2 / n_b
    onehot = (rgs[:, :, None] == np.arange(n)[None, None, :]).astype(np.float64)
    counts = onehot.sum(axis=1)
    sums = np.einsum("pib,id->pbd", onehot, a)
    with np.errstate(invalid="ignore", divide="ignore"):
        block = np.where(counts > 0, np.einsum("pbd,pbd->pb", sums, sums) / counts, 0.0)
    fid = np.einsum("id,id->", a, a) - block.sum(axis=1)
    w = lambda_eff * edge_contrast(g, a, sigma)
    cut = rgs[:, g.edges[:, 0]] != rgs[:, g.edges[:, 1]]
    energy = np.maximum(fid, 0.0) + cut.astype(np.float64) @ w
    lo = energy.min()
    best = int(np.flatnonzero(energy <= lo + 1e-12 * max(abs(lo), 1e-300))[0])
    part = Partition(rgs[best])
    exact = gmpp_energy(g, a, part, lambda_eff, sigma)
    return GmppResult(part, segment_means(a, part.segment_of, part.n_segments), exact, [exact], lambda_eff, 1)
