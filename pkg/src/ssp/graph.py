"""Sparse undirected graphs, vertex partitions and cross-partition graphs.

Edges are stored once as ``(u, v)`` with ``u < v``, sorted lexicographically,
and every other module refers to an edge by its row index in ``Graph.edges``.
Transition-edge sets are boolean masks over that index.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class Graph:
    n_vertices: int
    edges: np.ndarray  # (E, 2) int64, u < v, lexicographically sorted
    indptr: np.ndarray  # (n+1,) CSR offsets into neighbors / neighbor_edge
    neighbors: np.ndarray
    neighbor_edge: np.ndarray  # edge index of each CSR entry

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def connectivity(self) -> float:
        """Average connectivity c = |E| / |V|."""
        return self.n_edges / self.n_vertices

    def neighbors_of(self, v: int) -> np.ndarray:
        return self.neighbors[self.indptr[v]:self.indptr[v + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency(self, weights: np.ndarray | None = None) -> sparse.csr_matrix:
        w = np.ones(self.n_edges) if weights is None else np.asarray(weights, dtype=float)
        u, v = self.edges[:, 0], self.edges[:, 1]
        a = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
                              shape=(self.n_vertices, self.n_vertices))
        return a.tocsr()

    def subgraph(self, vertices: np.ndarray) -> tuple["Graph", np.ndarray]:
        """Induced subgraph on ``vertices`` (kept in the given order).

        Returns the subgraph and the indices of the kept edges in ``self``.
        """
        vertices = np.asarray(vertices, dtype=np.int64)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[vertices] = np.arange(len(vertices))
        ru, rv = remap[self.edges[:, 0]], remap[self.edges[:, 1]]
        keep = np.flatnonzero((ru >= 0) & (rv >= 0))
        sub = build_graph(len(vertices), np.stack([ru[keep], rv[keep]], axis=1))
        # build_graph re-sorts; map each kept parent edge to its new position
        pairs = np.sort(np.stack([ru[keep], rv[keep]], axis=1), axis=1)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return sub, keep[order]

    def to_json(self) -> dict:
        return {"n_vertices": self.n_vertices, "edges": self.edges.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        try:
            return build_graph(int(obj["n_vertices"]), obj["edges"])
        except KeyError as exc:
            raise ValidationError(f"graph JSON is missing key {exc}") from None

    def to_bytes(self) -> bytes:
        head = struct.pack("<II", self.n_vertices, self.n_edges)
        return head + self.edges.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Graph":
        if len(blob) < 8:
            raise ValidationError("binary graph is truncated")
        n, m = struct.unpack("<II", blob[:8])
        if len(blob) != 8 + 8 * m:
            raise ValidationError(f"binary graph declares {m} edges but holds {(len(blob) - 8) / 8:g}")
        edges = np.frombuffer(blob, dtype="<u4", offset=8).reshape(m, 2).astype(np.int64)
        return build_graph(n, edges)


def build_graph(n_vertices: int, edges: Union[Sequence[Sequence[int]], np.ndarray]) -> Graph:
    """Canonical graph from a possibly unsorted, duplicated edge list."""
    n_vertices = int(n_vertices)
    if n_vertices < 0:
        raise ValidationError("n_vertices must be non-negative")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size:
        if (e < 0).any() or (e >= n_vertices).any():
            bad = e[((e < 0) | (e >= n_vertices)).any(axis=1)][0]
            raise ValidationError(f"edge {tuple(bad.tolist())} has an endpoint outside [0, {n_vertices})")
        loops = e[:, 0] == e[:, 1]
        if loops.any():
            raise ValidationError(f"self-loop on vertex {int(e[loops][0, 0])}")
        e = np.unique(np.sort(e, axis=1), axis=0)
    # CSR over both directions; the (row, col) order makes neighbor lists sorted
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    eid = np.concatenate([np.arange(len(e)), np.arange(len(e))])
    order = np.lexsort((dst, src))
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n_vertices), out=indptr[1:])
    return Graph(n_vertices, e, indptr, dst[order], eid[order])


def disjoint_union(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray]:
    """Disjoint union of graphs; also returns each graph's vertex offset."""
    offsets = np.cumsum([0] + [g.n_vertices for g in graphs])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]) if graphs else np.zeros((0, 2))
    return build_graph(int(offsets[-1]), edges), offsets[:-1]


def save_graph(g: Graph, path: Union[str, Path]) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(g.to_json()))
    else:
        path.write_bytes(g.to_bytes())


def load_graph(path: Union[str, Path]) -> Graph:
    path = Path(path)
    if path.suffix == ".json":
        return Graph.from_json(json.loads(path.read_text()))
    return Graph.from_bytes(path.read_bytes())


class Partition:
    """Assignment of every vertex to a segment.

    Segment ids are dense and numbered by first appearance when scanning
    vertices in increasing order, so equal partitions compare equal.
    """

    __slots__ = ("segment_of", "n_segments", "segment_sizes")

    def __init__(self, labels: Union[Sequence[int], np.ndarray]):
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ValidationError("partition labels must be one-dimensional")
        if labels.size == 0:
            self.segment_of = np.zeros(0, dtype=np.int64)
        else:
            _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
            rank = np.empty(len(first), dtype=np.int64)
            rank[np.argsort(first, kind="stable")] = np.arange(len(first))
            self.segment_of = rank[inverse.reshape(-1)]
        self.segment_of.setflags(write=False)
        self.n_segments = int(self.segment_of.max()) + 1 if self.segment_of.size else 0
        self.segment_sizes = np.bincount(self.segment_of, minlength=self.n_segments)

    @property
    def n_vertices(self) -> int:
        return int(self.segment_of.shape[0])

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.segment_of, kind="stable")
        return np.split(order, np.cumsum(self.segment_sizes)[:-1])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Partition) and np.array_equal(self.segment_of, other.segment_of)

    def __hash__(self) -> int:
        return hash(self.segment_of.tobytes())

    def __repr__(self) -> str:
        return f"Partition(n_vertices={self.n_vertices}, n_segments={self.n_segments})"

    def to_json(self) -> dict:
        return {"n_segments": self.n_segments, "segment_of": self.segment_of.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Partition":
        p = cls(obj["segment_of"])
        if "n_segments" in obj and int(obj["n_segments"]) != p.n_segments:
            raise ValidationError("n_segments does not match segment_of")
        return p

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(np.arange(n))

    @classmethod
    def single(cls, n: int) -> "Partition":
        return cls(np.zeros(n, dtype=np.int64))


def _check_cover(g: Graph, p: Partition, what: str = "partition") -> None:
    if p.n_vertices != g.n_vertices:
        raise ValidationError(f"{what} covers {p.n_vertices} vertices but the graph has {g.n_vertices}")


def transition_edges(g: Graph, p: Partition) -> np.ndarray:
    """Boolean edge mask of the edges joining two different segments."""
    _check_cover(g, p)
    s = p.segment_of
    return s[g.edges[:, 0]] != s[g.edges[:, 1]]


EdgePredicate = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def connected_components(g: Graph, same: EdgePredicate) -> Partition:
    """Components of the subgraph keeping edges where ``same`` holds.

    ``same`` is either a boolean mask over edge indices or a vectorized
    callable ``same(u, v) -> mask``.
    """
    if callable(same):
        mask = np.asarray(same(g.edges[:, 0], g.edges[:, 1]), dtype=bool)
    else:
        mask = np.asarray(same, dtype=bool)
    if mask.shape != (g.n_edges,):
        raise ValidationError(f"edge predicate has shape {mask.shape}, expected ({g.n_edges},)")
    kept = g.edges[mask]
    a = sparse.coo_matrix((np.ones(len(kept)), (kept[:, 0], kept[:, 1])),
                          shape=(g.n_vertices, g.n_vertices))
    _, labels = csgraph.connected_components(a, directed=False)
    return Partition(labels)


def graph_components(g: Graph) -> Partition:
    return connected_components(g, np.ones(g.n_edges, dtype=bool))


def refine(g: Graph, labels: np.ndarray) -> Partition:
    """Split every label class into its connected components."""
    labels = np.asarray(labels)
    return connected_components(g, labels[g.edges[:, 0]] == labels[g.edges[:, 1]])


@dataclass(frozen=True, eq=False)
class CrossPartitionGraph:
    """Adjacency graph of the nonempty intersections of two partitions.

    Only ground-truth transition edges link nodes.  ``superedges`` rows are
    ``(node_a, node_b)`` with ``node_a < node_b``; ``members[k]`` holds the
    edge indices of superedge ``k`` in increasing order.
    """
    node_gt: np.ndarray
    node_proposed: np.ndarray
    node_size: np.ndarray
    node_of: np.ndarray  # per-vertex node id
    superedges: np.ndarray
    members: list
    n_graph_edges: int

    @property
    def n_nodes(self) -> int:
        return int(self.node_size.shape[0])

    @property
    def n_superedges(self) -> int:
        return int(self.superedges.shape[0])


def cross_partition(g: Graph, gt: Partition, proposed: Partition) -> CrossPartitionGraph:
    _check_cover(g, gt, "ground-truth partition")
    _check_cover(g, proposed, "proposed partition")
    key = gt.segment_of * max(proposed.n_segments, 1) + proposed.segment_of
    nodes = Partition(key)
    node_of = nodes.segment_of
    first = np.zeros(nodes.n_segments, dtype=np.int64)
    first[node_of[::-1]] = np.arange(g.n_vertices)[::-1]

    tra = np.flatnonzero(transition_edges(g, gt))
    na, nb = node_of[g.edges[tra, 0]], node_of[g.edges[tra, 1]]
    lo, hi = np.minimum(na, nb), np.maximum(na, nb)
    if len(tra):
        order = np.lexsort((tra, hi, lo))
        lo, hi, tra = lo[order], hi[order], tra[order]
        starts = np.flatnonzero(np.r_[True, (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])])
        superedges = np.stack([lo[starts], hi[starts]], axis=1)
        members = np.split(tra, starts[1:])
    else:
        superedges = np.zeros((0, 2), dtype=np.int64)
        members = []
    return CrossPartitionGraph(
        node_gt=gt.segment_of[first],
        node_proposed=proposed.segment_of[first],
        node_size=nodes.segment_sizes,
        node_of=node_of,
        superedges=superedges,
        members=members,
        n_graph_edges=g.n_edges,
    )
