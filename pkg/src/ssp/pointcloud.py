"""Point clouds: I/O, exact k-NN graphs, synthetic scenes and augmentation."""
from __future__ import annotations

import colorsys
import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError
from .graph import Graph, Partition, build_graph

COLUMNS = ("x", "y", "z", "r", "g", "b", "object_id", "class_id")
_INT_RE = re.compile(r"^[+-]?\d+$")

PLANE, BOX, SPHERE = 0, 1, 2


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray  # (n, 3) float64, meters
    colors: np.ndarray  # (n, 3) float64 in [0, 1]
    object_id: np.ndarray  # (n,) int64
    class_id: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.object_id = np.asarray(self.object_id, dtype=np.int64).reshape(-1)
        self.class_id = np.asarray(self.class_id, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if n < 1:
            raise ValidationError("a point cloud needs at least one point")
        if not (len(self.colors) == len(self.object_id) == len(self.class_id) == n):
            raise ValidationError("point cloud arrays have different lengths")
        if not np.isfinite(self.positions).all():
            raise ValidationError("non-finite coordinate in point cloud")
        if (self.colors < 0).any() or (self.colors > 1).any():
            raise ValidationError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def objects(self) -> Partition:
        return Partition(self.object_id)

    def take(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[idx], self.colors[idx], self.object_id[idx], self.class_id[idx])


# --------------------------------------------------------------------------- I/O

def _parse_row(tokens: Sequence[str], line: int) -> list[float]:
    if len(tokens) != len(COLUMNS):
        raise ParseError(f"expected {len(COLUMNS)} columns, got {len(tokens)}", line)
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric field in {tokens!r}", line) from None
    if not all(math.isfinite(v) for v in vals[:3]):
        raise ParseError("NaN or infinite coordinate", line)
    return vals


def _finish(rows: list[list[float]], int_colors: bool) -> PointCloud:
    if not rows:
        raise ParseError("no points in file")
    a = np.array(rows, dtype=np.float64)
    colors = a[:, 3:6] / 255.0 if int_colors else a[:, 3:6]
    if (colors < 0).any() or (colors > 1).any():
        raise ParseError("color outside [0, 1] (or [0, 255] for integer colors)")
    return PointCloud(a[:, :3], colors, a[:, 6].astype(np.int64), a[:, 7].astype(np.int64))


def _load_csv(path: Path) -> PointCloud:
    rows, int_colors, width = [], True, len(COLUMNS)
    with open(path, newline="") as fh:
        for line, tokens in enumerate(csv.reader(fh), start=1):
            tokens = [t.strip() for t in tokens]
            if not tokens or tokens == [""]:
                continue
            if line == 1 and not _looks_numeric(tokens[0]):
                header = tuple(t.lower() for t in tokens)
                missing = [c for c in COLUMNS if c not in header]
                if missing:
                    raise ParseError(f"missing column(s) {', '.join(missing)}", line)
                if header[:len(COLUMNS)] != COLUMNS:
                    raise ParseError(f"columns must start with {','.join(COLUMNS)}", line)
                width = len(header)
                continue
            if len(tokens) != width:
                raise ParseError(f"expected {width} columns, got {len(tokens)}", line)
            tokens = tokens[:len(COLUMNS)]
            rows.append(_parse_row(tokens, line))
            int_colors &= all(_INT_RE.match(t) for t in tokens[3:6])
    return _finish(rows, int_colors)


def _looks_numeric(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


_PLY_NAMES = {"x": "x", "y": "y", "z": "z", "red": "r", "green": "g", "blue": "b",
              "r": "r", "g": "g", "b": "b", "object_id": "object_id", "class_id": "class_id"}
_PLY_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
                  "int16", "uint16", "int32", "uint32"}


def _load_ply(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("not a PLY file", 1)
    props, n_vertex, in_vertex, body = [], None, False, None
    for i, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ParseError(f"only ASCII PLY is supported, got {parts[1]}", i)
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[-1], parts[1]))
        elif parts[0] == "end_header":
            body = i
            break
    if body is None or n_vertex is None:
        raise ParseError("incomplete PLY header")
    names = [_PLY_NAMES.get(name) for name, _ in props]
    missing = [c for c in COLUMNS if c not in names]
    if missing:
        raise ParseError(f"missing column(s) {', '.join(missing)}", body)
    pick = [names.index(c) for c in COLUMNS]
    int_colors = all(props[names.index(c)][1] in _PLY_INT_TYPES for c in "rgb")
    rows = []
    for i in range(body, body + n_vertex):
        if i >= len(lines):
            raise ParseError(f"expected {n_vertex} vertices, file ends early", i)
        tokens = lines[i].split()
        if len(tokens) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", i + 1)
        rows.append(_parse_row([tokens[j] for j in pick], i + 1))
    return _finish(rows, int_colors)


def load_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read a CSV (``x,y,z,r,g,b,object_id,class_id``) or ASCII PLY cloud.

    Integer-typed colors are taken to be in [0, 255] and rescaled.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "ply":
        return _load_ply(path)
    raise ValidationError(f"unknown point cloud format {fmt!r}")


def save_cloud(pc: PointCloud, path, extra: Optional[dict] = None) -> None:
    """Write ``pc`` as CSV; ``extra`` maps column name -> per-point values."""
    extra = extra or {}
    cols = list(COLUMNS) + list(extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        ext = [np.asarray(v) for v in extra.values()]
        for i in range(len(pc)):
            row = [repr(float(v)) for v in pc.positions[i]] + [repr(float(v)) for v in pc.colors[i]]
            row += [str(int(pc.object_id[i])), str(int(pc.class_id[i]))]
            row += [str(v[i].item()) for v in ext]
            w.writerow(row)


# --------------------------------------------------------------------------- k-NN

@dataclass(frozen=True, eq=False)
class NeighborhoodSet:
    k: int
    neighbor_ids: np.ndarray  # (n, k), ascending distance, vertex-id tiebreak


def _sq_dist(pos: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    d = pos[j] - pos[i][..., None, :] if j.ndim == 2 else pos[j] - pos[i]
    return np.einsum("...k,...k->...", d, d)


def knn(positions: np.ndarray, k: int) -> NeighborhoodSet:
    """Exact k nearest neighbors (self excluded) with id tiebreak."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if not 1 <= k < n:
        raise ValidationError(f"k must satisfy 1 <= k < n_points (k={k}, n={n})")
    q = min(k + 2, n)
    tree = cKDTree(pos)
    _, cand = tree.query(pos, k=q)
    cand = cand.reshape(n, q)
    rows = np.arange(n)
    d2 = _sq_dist(pos, rows, cand)
    d2[cand == rows[:, None]] = np.inf  # exclude self by id, duplicates stay
    o = _row_lexsort(d2, cand)
    cand = np.take_along_axis(cand, o, axis=1)
    d2 = np.take_along_axis(d2, o, axis=1)
    out = cand[:, :k].copy()
    # the kd-tree may drop points tied with the k-th neighbor; re-query those rows
    if q > k:
        gap = d2[:, k] > d2[:, k - 1] * (1 + 1e-9) + 1e-300
    else:
        gap = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(~gap):
        r = math.sqrt(d2[i, k - 1]) * (1 + 1e-6) + 1e-12
        ball = np.asarray(tree.query_ball_point(pos[i], r), dtype=np.int64)
        ball = ball[ball != i]
        dd = _sq_dist(pos, np.full(len(ball), i), ball)
        out[i] = ball[np.lexsort((ball, dd))][:k]
    return NeighborhoodSet(k, out)


def _row_lexsort(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    """Per-row argsort by ``primary`` then ``secondary``."""
    o2 = np.argsort(secondary, axis=1, kind="stable")
    p = np.take_along_axis(primary, o2, axis=1)
    o1 = np.argsort(p, axis=1, kind="stable")
    return np.take_along_axis(o2, o1, axis=1)


def symmetrized_graph(nbrs: NeighborhoodSet) -> Graph:
    n = nbrs.neighbor_ids.shape[0]
    src = np.repeat(np.arange(n), nbrs.k)
    return build_graph(n, np.stack([src, nbrs.neighbor_ids.reshape(-1)], axis=1))


def knn_graph(pc: PointCloud, k: int) -> tuple[Graph, NeighborhoodSet]:
    """Symmetrized k-NN adjacency graph and the underlying neighborhoods."""
    nbrs = knn(pc.positions, k)
    return symmetrized_graph(nbrs), nbrs


# --------------------------------------------------------------------------- synthetic scenes

@dataclass
class SceneSpec:
    """Counts of primitives and sampling parameters for a synthetic room.

    The first plane is the floor; further planes are upright panels.  Boxes
    and spheres rest on the floor inside disjoint grid cells.
    """
    n_planes: int = 3
    n_boxes: int = 4
    n_spheres: int = 2
    points_per_object: int = 500
    min_points: int = 50
    noise: float = 0.005
    color_noise: float = 0.03
    room_size: float = 6.0
    size_range: tuple = (0.6, 1.2)
    height_range: tuple = (0.4, 1.2)

    @property
    def n_objects(self) -> int:
        return self.n_planes + self.n_boxes + self.n_spheres

    def validate(self) -> None:
        if min(self.n_planes, self.n_boxes, self.n_spheres) < 0:
            raise ValidationError("object counts must be non-negative")
        if self.n_objects == 0:
            raise ValidationError("a scene needs at least one object")
        if self.points_per_object < self.min_points or self.min_points < 1:
            raise ValidationError("points_per_object must be >= min_points >= 1")
        if self.noise < 0 or self.color_noise < 0:
            raise ValidationError("noise levels must be non-negative")


def _box_surface(rng, n, lo, hi):
    """Points on the five visible faces (no bottom) of an axis-aligned box."""
    dx, dy, dz = hi - lo
    areas = np.array([dx * dy, dx * dz, dx * dz, dy * dz, dy * dz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random((n, 3)) * (hi - lo) + lo
    u[face == 0, 2] = hi[2]
    u[face == 1, 1] = lo[1]
    u[face == 2, 1] = hi[1]
    u[face == 3, 0] = lo[0]
    u[face == 4, 0] = hi[0]
    return u


def _sphere_surface(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _hue_color(hue: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.75, 0.85))


def synth_scene(spec: SceneSpec, seed: int) -> PointCloud:
    """Deterministic labeled room: floor, upright panels, boxes and spheres."""
    spec.validate()
    rng = np.random.default_rng(seed)
    L = spec.room_size
    n_placed = max(spec.n_planes - 1, 0) + spec.n_boxes + spec.n_spheres
    if spec.n_planes == 0:
        n_placed = spec.n_boxes + spec.n_spheres
    side = max(1, math.ceil(math.sqrt(n_placed)))
    cell = L / side
    cells = rng.permutation(side * side)[:n_placed]
    hues = (rng.random() + np.arange(spec.n_objects) * 0.618034) % 1.0
    hues = rng.permutation(hues)

    pieces, footprints = [], []
    kinds = []
    if spec.n_planes:
        kinds.append("floor")
    kinds += ["panel"] * max(spec.n_planes - 1, 0) + ["box"] * spec.n_boxes + ["sphere"] * spec.n_spheres
    placed = iter(cells)
    npts = spec.points_per_object
    smin, smax = spec.size_range
    for kind in kinds:
        if kind == "floor":
            continue
        c = next(placed)
        cx, cy = (c % side + 0.5) * cell, (c // side + 0.5) * cell
        size = min(rng.uniform(smin, smax), 0.8 * cell)
        h = rng.uniform(*spec.height_range)
        if kind == "panel":
            lo = np.array([cx - size / 2, cy - 0.01, 0.0])
            hi = np.array([cx + size / 2, cy + 0.01, h + 0.5])
            u = rng.random((npts, 3))
            pts = np.stack([lo[0] + u[:, 0] * size, np.full(npts, cy), u[:, 2] * hi[2]], axis=1)
            if rng.random() < 0.5:  # rotate a quarter turn about the cell center
                pts[:, :2] = np.stack([cx - (pts[:, 1] - cy), cy + (pts[:, 0] - cx)], axis=1)
                lo, hi = np.array([cx - 0.01, cy - size / 2, 0]), np.array([cx + 0.01, cy + size / 2, hi[2]])
            pieces.append((pts, PLANE))
        elif kind == "box":
            w2 = min(rng.uniform(smin, smax), 0.8 * cell)
            lo = np.array([cx - size / 2, cy - w2 / 2, 0.0])
            hi = np.array([cx + size / 2, cy + w2 / 2, h])
            pieces.append((_box_surface(rng, npts, lo, hi), BOX))
        else:
            r = size / 2
            lo, hi = np.array([cx - r, cy - r, 0.0]), np.array([cx + r, cy + r, 2 * r])
            pts = _sphere_surface(rng, npts, np.array([cx, cy, r]), r)
            pieces.append((pts, SPHERE))
        footprints.append((lo, hi))

    if spec.n_planes:
        # floor points, rejecting those hidden under boxes and spheres
        pts = np.zeros((0, 3))
        while len(pts) < npts:
            cand = np.c_[rng.random((2 * npts, 2)) * L, np.zeros(2 * npts)]
            hidden = np.zeros(len(cand), dtype=bool)
            for (lo, hi), (_, cls) in zip(footprints, pieces):
                if cls != PLANE:
                    hidden |= ((cand[:, 0] > lo[0]) & (cand[:, 0] < hi[0])
                               & (cand[:, 1] > lo[1]) & (cand[:, 1] < hi[1]))
            pts = np.concatenate([pts, cand[~hidden]])
        pieces.insert(0, (pts[:npts], PLANE))

    positions, colors, obj, cls = [], [], [], []
    for oid, (pts, kind) in enumerate(pieces):
        n = len(pts)
        positions.append(pts + rng.normal(scale=spec.noise, size=pts.shape) if spec.noise else pts)
        col = _hue_color(hues[oid]) + rng.normal(scale=spec.color_noise, size=(n, 3)) if spec.color_noise \
            else np.tile(_hue_color(hues[oid]), (n, 1))
        colors.append(np.clip(col, 0.0, 1.0))
        obj.append(np.full(n, oid))
        cls.append(np.full(n, kind))
    return PointCloud(np.concatenate(positions), np.concatenate(colors), np.concatenate(obj), np.concatenate(cls))


# --------------------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    sigma: float = 0.03
    clamp: float = 0.1
    rotate: bool = True

    def validate(self) -> None:
        if self.sigma < 0:
            raise ValidationError("augmentation noise sigma must be non-negative")
        if self.clamp < 0:
            raise ValidationError("augmentation clamp must be non-negative")


def rotate_z(positions: np.ndarray, angle: float) -> np.ndarray:
    """Rotate positions about the vertical axis through their xy centroid."""
    c, s = math.cos(angle), math.sin(angle)
    center = positions.mean(axis=0)
    center[2] = 0.0
    p = positions - center
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1]
    out[:, 1] = s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out + center


def augment(pc: PointCloud, params: AugmentParams, rng: np.random.Generator) -> PointCloud:
    """Rotate the whole cloud about z by a random angle.

    Per-feature jitter is applied later, on normalized neighborhoods, by
    :func:`jitter`.
    """
    params.validate()
    if not params.rotate:
        return pc
    angle = rng.uniform(0.0, 2 * math.pi)
    return PointCloud(rotate_z(pc.positions, angle), pc.colors, pc.object_id, pc.class_id)


def jitter(x: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Add clamped Gaussian noise to ``x``."""
    params.validate()
    if params.sigma == 0:
        return x
    noise = np.clip(rng.normal(scale=params.sigma, size=x.shape), -params.clamp, params.clamp)
    return x + noise
