"""Graph-structured contrastive loss and its transition-edge weightings.

Non-transition edges are pulled together by a pseudo-Huber penalty ``phi``;
transition edges of the ground truth are pushed to distance >= 1 by the
truncated penalty ``psi``, each weighted by ``mu``.  Weights are constants
with respect to the embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .graph import CrossPartitionGraph, Graph, Partition, cross_partition, transition_edges

WEIGHTINGS = ("cross_partition", "proportional")


@dataclass
class LossConfig:
    delta: float = 0.3
    mu_tilde: float = 5.0
    weighting: str = "cross_partition"
    m0_override: Optional[float] = None

    def validate(self) -> None:
        if self.delta <= 0:
            raise ValidationError("delta must be positive")
        if self.mu_tilde <= 0:
            raise ValidationError("mu_tilde must be positive")
        if self.weighting == "seal":
            raise ValidationError("the SEAL weighting is not implemented")
        if self.weighting not in WEIGHTINGS:
            raise ValidationError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.m0_override is not None and self.m0_override <= 0:
            raise ValidationError("m0_override must be positive")

    def m0(self, g: Graph) -> float:
        return self.m0_override if self.m0_override is not None else self.mu_tilde * g.connectivity


@dataclass(frozen=True, eq=False)
class EdgeWeights:
    """Per-edge weights ``mu``, meaningful on the transition edges only.

    ``mu`` is a full-length array over edge indices (zero elsewhere) and
    ``edges`` lists the transition edges the weights are defined on.
    """
    mu: np.ndarray
    edges: np.ndarray
    kind: str

    def on_transitions(self) -> np.ndarray:
        return self.mu[self.edges]


# --------------------------------------------------------------------------- penalties

def _norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", x, x))


def phi(x: np.ndarray, delta: float) -> np.ndarray:
    """Pseudo-Huber ``delta * (sqrt(|x|^2 / delta^2 + 1) - 1)`` over the last axis."""
    sq = np.einsum("...i,...i->...", x, x)
    # written as sq / (sqrt(..) + 1) to stay accurate for tiny x
    r = np.sqrt(sq / delta**2 + 1.0)
    return sq / (delta * (r + 1.0))


def phi_grad(x: np.ndarray, delta: float) -> np.ndarray:
    sq = np.einsum("...i,...i->...", x, x)
    return x / (delta * np.sqrt(sq / delta**2 + 1.0))[..., None]


def psi(x: np.ndarray) -> np.ndarray:
    """Truncated contrast ``max(1 - |x|, 0)``."""
    return np.maximum(1.0 - _norms(x), 0.0)


def psi_grad(x: np.ndarray) -> np.ndarray:
    """Gradient of ``psi``; zero at ``|x| = 0`` and for ``|x| >= 1``."""
    n = _norms(x)
    active = (n > 0) & (n < 1)
    scale = np.zeros_like(n)
    scale[active] = -1.0 / n[active]
    return x * scale[..., None]


# --------------------------------------------------------------------------- weights

def cross_partition_weights(cpg: CrossPartitionGraph, g: Graph, m0: float) -> EdgeWeights:
    """Spread ``m0 * min(|U|, |V|)`` evenly over the edges of each superedge."""
    if cpg.n_graph_edges != g.n_edges or cpg.node_of.shape[0] != g.n_vertices:
        raise ValidationError("cross-partition graph was built on a different graph")
    if m0 <= 0:
        raise ValidationError("m0 must be positive")
    mu = np.zeros(g.n_edges)
    for (a, b), members in zip(cpg.superedges, cpg.members):
        mass = m0 * min(cpg.node_size[a], cpg.node_size[b])
        mu[members] = mass / len(members)
    edges = np.sort(np.concatenate(cpg.members)) if cpg.members else np.zeros(0, dtype=np.int64)
    return EdgeWeights(mu, edges, "cross_partition")


def proportional_weights(g: Graph, e_tra: np.ndarray, mu_tilde: float) -> EdgeWeights:
    """Uniform transition weight making total inter weight = ``mu_tilde`` x intra count."""
    if mu_tilde <= 0:
        raise ValidationError("mu_tilde must be positive")
    e_tra = np.asarray(e_tra, dtype=bool)
    edges = np.flatnonzero(e_tra)
    mu = np.zeros(g.n_edges)
    if len(edges):
        mu[edges] = mu_tilde * (g.n_edges - len(edges)) / len(edges)
    return EdgeWeights(mu, edges, "proportional")


def edge_weights(g: Graph, gt: Partition, proposed: Optional[Partition], cfg: LossConfig) -> EdgeWeights:
    """Weights for ``cfg.weighting``; ``proposed`` is needed for cross-partition."""
    cfg.validate()
    if cfg.weighting == "proportional":
        return proportional_weights(g, transition_edges(g, gt), cfg.mu_tilde)
    if proposed is None:
        raise ValidationError("cross-partition weighting needs a proposed partition")
    return cross_partition_weights(cross_partition(g, gt, proposed), g, cfg.m0(g))


# --------------------------------------------------------------------------- loss

def loss_and_grad(e: np.ndarray, g: Graph, gt: Partition, weights: EdgeWeights,
                  cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Per-edge averaged loss and its gradient with respect to ``e``.

    Returns ``(loss, grad)`` with ``grad`` of the same shape as ``e``.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape[0] != g.n_vertices:
        raise ValidationError(f"{e.shape[0]} embeddings for {g.n_vertices} vertices")
    tra = transition_edges(g, gt)
    if weights.mu.shape != (g.n_edges,) or not np.array_equal(weights.edges, np.flatnonzero(tra)):
        raise ValidationError("edge weights are not defined on the ground-truth transition edges")
    if g.n_edges == 0:
        return 0.0, np.zeros_like(e)
    u, v = g.edges[:, 0], g.edges[:, 1]
    diff = e[u] - e[v]
    intra = ~tra
    total = phi(diff[intra], cfg.delta).sum() + (weights.mu[tra] * psi(diff[tra])).sum()

    gd = np.empty_like(diff)
    gd[intra] = phi_grad(diff[intra], cfg.delta)
    gd[tra] = weights.mu[tra, None] * psi_grad(diff[tra])
    grad = np.zeros_like(e)
    np.add.at(grad, u, gd)
    np.add.at(grad, v, -gd)
    return float(total) / g.n_edges, grad / g.n_edges
