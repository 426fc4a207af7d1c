"""Oversegmentation metrics: undersegmentation error, OOA, boundary recall/precision."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .graph import Graph, Partition, transition_edges


@dataclass
class MetricsReport:
    undersegmentation_error: float
    ooa: float
    br: float
    bp: float
    n_segments: int
    n_transition_pred: int
    n_transition_gt: int

    def to_json(self) -> dict:
        return asdict(self)


def _contingency(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    return np.bincount(a * nb + b, minlength=na * nb).reshape(na, nb)


def undersegmentation_error(gt: Partition, s: Partition) -> float:
    """Sum over proposed segments of the vertices outside their best-overlapping gt segment, over |V|."""
    if gt.n_vertices != s.n_vertices:
        raise ValidationError(f"partitions cover {gt.n_vertices} and {s.n_vertices} vertices")
    if s.n_vertices == 0:
        return 0.0
    table = _contingency(s.segment_of, gt.segment_of, s.n_segments, gt.n_segments)
    leftover = s.segment_sizes - table.max(axis=1)
    return float(leftover.sum()) / s.n_vertices


def segment_modes(labels: np.ndarray, s: Partition) -> np.ndarray:
    """Majority label of each segment (smallest label on ties)."""
    labels = np.asarray(labels, dtype=np.int64)
    values, inverse = np.unique(labels, return_inverse=True)
    table = _contingency(s.segment_of, inverse.reshape(-1), s.n_segments, len(values))
    return values[table.argmax(axis=1)]


def ooa(labels: np.ndarray, s: Partition) -> float:
    """Accuracy of labeling each segment with its majority label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (s.n_vertices,):
        raise ValidationError("one label per vertex is required")
    if s.n_vertices == 0:
        return 1.0
    return float(np.mean(segment_modes(labels, s)[s.segment_of] == labels))


def expanded_transitions(g: Graph, e_tra: np.ndarray) -> np.ndarray:
    """Edges sharing an endpoint with some transition edge (one-edge tolerance)."""
    e_tra = np.asarray(e_tra, dtype=bool)
    touched = np.zeros(g.n_vertices, dtype=bool)
    touched[g.edges[e_tra, 0]] = True
    touched[g.edges[e_tra, 1]] = True
    return touched[g.edges[:, 0]] | touched[g.edges[:, 1]]


def boundary_metrics(g: Graph, gt_tra: np.ndarray, pred_tra: np.ndarray) -> tuple[float, float]:
    """Boundary recall and precision with a one-edge tolerance.

    A true transition counts as recalled when a predicted one lies within one
    edge of it, and symmetrically for precision. BR is 1 when there are no true
    transitions; BP is 1 when nothing is predicted.
    """
    gt_tra = np.asarray(gt_tra, dtype=bool)
    pred_tra = np.asarray(pred_tra, dtype=bool)
    if gt_tra.shape != (g.n_edges,) or pred_tra.shape != (g.n_edges,):
        raise ValidationError("transition masks must cover the graph's edges")
    n_gt, n_pred = int(gt_tra.sum()), int(pred_tra.sum())
    recalled = int((gt_tra & expanded_transitions(g, pred_tra)).sum())
    precise = int((pred_tra & expanded_transitions(g, gt_tra)).sum())
    br = recalled / n_gt if n_gt else 1.0
    bp = precise / n_pred if n_pred else 1.0
    return br, bp


def evaluate(g: Graph, gt: Partition, labels: np.ndarray, s: Partition) -> MetricsReport:
    """All metrics for proposal ``s`` against objects ``gt`` and class ``labels``."""
    if not (gt.n_vertices == s.n_vertices == g.n_vertices):
        raise ValidationError("graph, ground truth and proposal disagree on the vertex count")
    gt_tra, pred_tra = transition_edges(g, gt), transition_edges(g, s)
    br, bp = boundary_metrics(g, gt_tra, pred_tra)
    return MetricsReport(
        undersegmentation_error=undersegmentation_error(gt, s),
        ooa=ooa(labels, s),
        br=br,
        bp=bp,
        n_segments=s.n_segments,
        n_transition_pred=int(pred_tra.sum()),
        n_transition_gt=int(gt_tra.sum()),
    )
