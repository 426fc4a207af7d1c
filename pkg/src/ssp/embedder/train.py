"""Supervised training of the embedder through the partition-aware loss."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import csgraph

from ..errors import ValidationError
from ..gmpp import GmppConfig, GmppResult, solve
from ..graph import Graph, Partition
from ..loss import LossConfig, edge_weights, loss_and_grad
from ..metrics import MetricsReport, evaluate
from ..pointcloud import AugmentParams, NeighborhoodSet, PointCloud, jitter, knn, rotate_z, symmetrized_graph
from .model import LpeInputs, LpeModel, lpe_inputs
from .optim import Adam, clip_global_norm

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    decay_epochs: list = field(default_factory=lambda: [20, 35, 45])
    decay_factor: float = 0.7
    clip_norm: float = 1.0
    batch_size: int = 16
    subgraph_size: int = 10000
    augment: AugmentParams = field(default_factory=AugmentParams)
    gmpp_outer_iters: Optional[int] = None  # cheaper solves during training if set
    val_every: int = 1  # validate every n epochs and always after the last

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentParams(**self.augment)
        self.decay_epochs = [int(d) for d in self.decay_epochs]

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.lr <= 0 or not 0 < self.decay_factor <= 1:
            raise ValidationError("lr must be positive and decay_factor in (0, 1]")
        if self.batch_size < 1 or self.subgraph_size < 2:
            raise ValidationError("batch_size must be positive and subgraph_size at least 2")
        if self.clip_norm < 0:
            raise ValidationError("clip_norm must be non-negative")
        if self.gmpp_outer_iters is not None and self.gmpp_outer_iters < 1:
            raise ValidationError("gmpp_outer_iters must be at least 1")
        if self.val_every < 1:
            raise ValidationError("val_every must be positive")
        self.augment.validate()

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch``."""
        return self.lr * self.decay_factor ** sum(epoch >= d for d in self.decay_epochs)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    cloud: PointCloud
    graph: Graph
    neighbor_ids: np.ndarray  # (n, k)

    @property
    def gt(self) -> Partition:
        return self.cloud.objects


def prepare_scene(pc: PointCloud, k: int, k_adj: int) -> Scene:
    """Adjacency graph on ``k_adj`` neighbors and embedding neighborhoods of size ``k``."""
    nbrs = knn(pc.positions, max(k, k_adj))
    graph = symmetrized_graph(NeighborhoodSet(k_adj, nbrs.neighbor_ids[:, :k_adj]))
    return Scene(pc, graph, nbrs.neighbor_ids[:, :k].copy())


def sample_subgraph(graph: Graph, size: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted vertex ids of a breadth-first ball of ``size`` vertices around a random seed."""
    if size >= graph.n_vertices:
        return np.arange(graph.n_vertices)
    seed = int(rng.integers(graph.n_vertices))
    order = csgraph.breadth_first_order(graph.adjacency(), seed, directed=False,
                                        return_predecessors=False)
    return np.sort(order[:size])


def embed_scene(model: LpeModel, scene: Scene) -> np.ndarray:
    return model.embed(lpe_inputs(scene.cloud.positions, scene.cloud.colors, scene.neighbor_ids))


def partition_scene(model: LpeModel, scene: Scene, gmpp_cfg: GmppConfig) -> GmppResult:
    return solve(scene.graph, embed_scene(model, scene), scene.cloud.positions, gmpp_cfg)


def evaluate_scene(model: LpeModel, scene: Scene, gmpp_cfg: GmppConfig) -> MetricsReport:
    res = partition_scene(model, scene, gmpp_cfg)
    return evaluate(scene.graph, scene.gt, scene.cloud.class_id, res.partition)


def mean_report(reports: Sequence[MetricsReport]) -> dict:
    keys = ("undersegmentation_error", "ooa", "br", "bp", "n_segments")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


class Trainer:
    """Owns the model, optimizer state, RNG and epoch counter."""

    def __init__(self, model: LpeModel, train_scenes: Sequence[Scene], cfg: TrainConfig,
                 gmpp_cfg: GmppConfig, loss_cfg: LossConfig, rng: np.random.Generator,
                 val_scenes: Sequence[Scene] = ()):
        cfg.validate()
        gmpp_cfg.validate()
        loss_cfg.validate()
        if not train_scenes:
            raise ValidationError("training needs at least one scene")
        self.model = model
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes)
        self.cfg = cfg
        self.gmpp_cfg = gmpp_cfg
        self.train_gmpp = (gmpp_cfg if cfg.gmpp_outer_iters is None
                           else replace(gmpp_cfg, outer_iters=cfg.gmpp_outer_iters))
        self.loss_cfg = loss_cfg
        self.rng = rng
        self.adam = Adam(model.params)
        self.epoch = 0
        self.step_count = 0
        self.history: list[dict] = []

    def _sample(self, scene: Scene) -> tuple[Graph, Partition, LpeInputs, np.ndarray]:
        cfg, rng = self.cfg, self.rng
        verts = sample_subgraph(scene.graph, cfg.subgraph_size, rng)
        sub, _ = scene.graph.subgraph(verts)
        positions = scene.cloud.positions
        if cfg.augment.rotate:
            positions = rotate_z(positions, rng.uniform(0.0, 2 * math.pi))
        inp = lpe_inputs(positions, scene.cloud.colors, scene.neighbor_ids, verts)
        inp.offsets = jitter(inp.offsets, cfg.augment, rng)
        inp.colors = jitter(inp.colors, cfg.augment, rng)
        return sub, Partition(scene.cloud.object_id[verts]), inp, positions[verts]

    def step(self, scenes: Sequence[Scene], lr: float) -> tuple[float, float]:
        """One optimizer update on a batch of scenes; returns (loss, raw gradient norm)."""
        samples = [self._sample(s) for s in scenes]
        inp = LpeInputs(*(np.concatenate([getattr(s[2], f) for s in samples])
                          for f in ("offsets", "colors", "height", "rad", "own_color")))
        self.model.training = True
        e = self.model.forward(inp)
        de = np.empty_like(e)
        total, start = 0.0, 0
        for sub, gt, _, pos in samples:
            stop = start + sub.n_vertices
            part = solve(sub, e[start:stop], pos, self.train_gmpp).partition
            weights = edge_weights(sub, gt, part, self.loss_cfg)
            loss, grad = loss_and_grad(e[start:stop], sub, gt, weights, self.loss_cfg)
            total += loss
            de[start:stop] = grad
            start = stop
        de /= len(samples)
        grads = self.model.backward(de)
        norm = clip_global_norm(grads, self.cfg.clip_norm)
        self.adam.step(self.model.params, grads, lr)
        self.step_count += 1
        return total / len(samples), norm

    def validate_scenes(self) -> Optional[dict]:
        if not self.val_scenes:
            return None
        return mean_report([evaluate_scene(self.model, s, self.gmpp_cfg) for s in self.val_scenes])

    def run_epoch(self) -> dict:
        lr = self.cfg.lr_at(self.epoch)
        order = self.rng.permutation(len(self.train_scenes))
        losses, norms = [], []
        bs = self.cfg.batch_size
        for s in range(0, len(order), bs):
            loss, norm = self.step([self.train_scenes[i] for i in order[s:s + bs]], lr)
            losses.append(loss)
            norms.append(norm)
        self.epoch += 1
        due = self.epoch % self.cfg.val_every == 0 or self.epoch >= self.cfg.epochs
        entry = dict(epoch=self.epoch, step=self.step_count, lr=lr, loss=float(np.mean(losses)),
                     grad_norm=float(np.mean(norms)), val=self.validate_scenes() if due else None)
        self.history.append(entry)
        log.info("epoch %d loss %.5f val %s", self.epoch, entry["loss"], entry["val"])
        return entry

    def run(self, on_epoch: Optional[Callable[["Trainer", dict], None]] = None) -> list[dict]:
        """Train until ``cfg.epochs``; ``on_epoch`` is called after each epoch."""
        while self.epoch < self.cfg.epochs:
            entry = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self, entry)
        return self.history


def write_log(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
