"""Command-line entry point: ``ssp synth|graph|train|partition|eval|oracle``."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, config_from_dict, load_config
from .embedder import (
    LpeModel,
    Trainer,
    embed_scene,
    load_checkpoint,
    prepare_scene,
    save_checkpoint,
    write_log,
)
from .errors import SspError, ValidationError
from .gmpp import brute_force_oracle, regularization_path
from .graph import Partition, load_graph, save_graph
from .metrics import evaluate
from .pointcloud import load_cloud, save_cloud, synth_scene

log = logging.getLogger("ssp")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3


# --------------------------------------------------------------------------- helpers

def _versions() -> dict:
    import numba
    import scipy
    return dict(ssp=__version__, numpy=np.__version__, scipy=scipy.__version__,
                numba=numba.__version__, python=platform.python_version())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _check_writable(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_manifest(path: Path, command: str, cfg: RunConfig, args: dict, outputs: Sequence[Path]) -> None:
    _write_json(path, dict(
        manifest_version=1, command=command, args=args, seed=cfg.seed, config=cfg.to_json(),
        versions=_versions(),
        outputs=[dict(path=p.name, sha256=_sha256(p)) for p in outputs]))


def _resolve_config(ns) -> RunConfig:
    cfg = load_config(ns.config) if ns.config else RunConfig()
    if ns.seed is not None:
        cfg.seed = ns.seed
    cfg.validate()
    return cfg


def _scene_seeds(seed: int, n: int) -> list[int]:
    seeds = np.random.SeedSequence(seed).generate_state(max(n, 1)).tolist()[:n]
    if len(set(seeds)) != n:
        raise ValidationError("scene seeds collided; choose another seed")
    return [int(s) for s in seeds]


def _lambda_tag(lt: float) -> str:
    return f"{lt:g}".replace(".", "p")


def _load_scenes(data: Path, prefix: str, cfg: RunConfig):
    files = sorted(data.glob(f"{prefix}_*.csv"))
    return [prepare_scene(load_cloud(f), cfg.lpe.k, cfg.graph.k_adj) for f in files]


# --------------------------------------------------------------------------- commands

def cmd_synth(ns, cfg: RunConfig) -> int:
    out = Path(ns.out)
    seeds = _scene_seeds(cfg.seed, cfg.n_train + cfg.n_val)
    names = [f"train_{i:03d}.csv" for i in range(cfg.n_train)] + [f"val_{i:03d}.csv" for i in range(cfg.n_val)]
    paths = [out / n for n in names]
    _check_writable(paths + [out / "manifest.json"], ns.force)
    out.mkdir(parents=True, exist_ok=True)
    for path, seed in zip(paths, seeds):
        save_cloud(synth_scene(cfg.scene, seed), path)
    _write_manifest(out / "manifest.json", "synth", cfg, dict(out=str(out)), paths)
    print(json.dumps(dict(written=len(paths), out=str(out))))
    return EXIT_OK


def cmd_graph(ns, cfg: RunConfig) -> int:
    out = Path(ns.out)
    manifest = out.with_name(out.name + ".manifest.json")
    _check_writable([out, manifest], ns.force)
    pc = load_cloud(ns.cloud)
    scene = prepare_scene(pc, min(cfg.lpe.k, len(pc) - 1), cfg.graph.k_adj)
    save_graph(scene.graph, out)
    _write_manifest(manifest, "graph", cfg, dict(cloud=str(ns.cloud), out=str(out)), [out])
    print(json.dumps(dict(n_vertices=scene.graph.n_vertices, n_edges=scene.graph.n_edges)))
    return EXIT_OK


def cmd_train(ns, cfg: RunConfig) -> int:
    data, out = Path(ns.data), Path(ns.out)
    if ns.epochs is not None:
        cfg.train.epochs = ns.epochs
    cfg.validate()
    if not ns.force and (out / "model.json").exists():
        raise FileExistsError(f"refusing to overwrite {out / 'model.json'} (use --force)")
    train_scenes = _load_scenes(data, "train", cfg)
    val_scenes = _load_scenes(data, "val", cfg)
    if not train_scenes:
        raise ValidationError(f"no train_*.csv scenes in {data}")
    out.mkdir(parents=True, exist_ok=True)
    model = LpeModel(cfg.lpe, np.random.default_rng([cfg.seed, 0]))
    trainer = Trainer(model, train_scenes, cfg.train, cfg.gmpp, cfg.loss,
                      np.random.default_rng([cfg.seed, 1]), val_scenes=val_scenes)
    if ns.resume:
        load_checkpoint(ns.resume, model, trainer)
    log.info("embedder has %d parameters", model.param_count)
    written = []

    def on_epoch(tr: Trainer, entry: dict) -> None:
        if tr.epoch in cfg.train.decay_epochs:
            written.append(save_checkpoint(out / f"ckpt_epoch{tr.epoch:03d}.json", model, tr))

    trainer.run(on_epoch)
    written.append(save_checkpoint(out / "model.json", model, trainer))
    write_log(trainer.history, out / "log.jsonl")
    outputs = [out / "log.jsonl"] + [p for w in written for p in (w, w.with_suffix(".bin"))]
    _write_manifest(out / "manifest.json", "train", cfg,
                    dict(data=str(data), out=str(out), resume=ns.resume, epochs=ns.epochs), outputs)
    print(json.dumps(dict(epochs=trainer.epoch, param_count=model.param_count,
                          final=trainer.history[-1] if trainer.history else None)))
    return EXIT_OK


def cmd_partition(ns, cfg: RunConfig) -> int:
    out = Path(ns.out)
    lambdas = ns.lambdas or cfg.lambda_path or [cfg.gmpp.lambda_tilde]
    lambdas = sorted(float(x) for x in lambdas)
    files = [out / f"partition_{_lambda_tag(lt)}.json" for lt in lambdas]
    cloud_out = out / "cloud_partitioned.csv"
    _check_writable(files + [cloud_out, out / "manifest.json"], ns.force)
    model = load_checkpoint(ns.checkpoint, LpeModel(cfg.lpe))
    pc = load_cloud(ns.cloud)
    scene = prepare_scene(pc, cfg.lpe.k, cfg.graph.k_adj)
    e = embed_scene(model, scene)
    results = regularization_path(scene.graph, e, pc.positions, cfg.gmpp, lambdas)
    out.mkdir(parents=True, exist_ok=True)
    extra, summary = {}, []
    for lt, res, path in zip(lambdas, results, files):
        doc = res.partition.to_json()
        doc.update(lambda_tilde=lt, lambda_eff=res.lambda_eff, n_min=res.n_min, energy=res.energy,
                   energy_trace=res.energy_trace)
        _write_json(path, doc)
        extra[f"segment_{_lambda_tag(lt)}"] = res.partition.segment_of
        summary.append(dict(lambda_tilde=lt, n_segments=res.partition.n_segments, energy=res.energy))
    save_cloud(pc, cloud_out, extra=extra)
    _write_manifest(out / "manifest.json", "partition", cfg,
                    dict(checkpoint=str(ns.checkpoint), cloud=str(ns.cloud), out=str(out), lambdas=lambdas),
                    files + [cloud_out])
    print(json.dumps(summary))
    return EXIT_OK


def _report_text(report: dict, kind: str) -> str:
    if kind == "csv":
        keys = list(report)
        return ",".join(keys) + "\n" + ",".join(repr(report[k]) for k in keys) + "\n"
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def cmd_eval(ns, cfg: RunConfig) -> int:
    pc = load_cloud(ns.cloud)
    doc = json.loads(Path(ns.partition).read_text())
    part = Partition.from_json(doc)
    if part.n_vertices != len(pc):
        raise ValidationError(f"partition covers {part.n_vertices} vertices, cloud has {len(pc)}")
    graph = load_graph(ns.graph) if ns.graph else prepare_scene(pc, min(cfg.lpe.k, len(pc) - 1),
                                                                  cfg.graph.k_adj).graph
    report = evaluate(graph, pc.objects, pc.class_id, part).to_json()
    text = _report_text(report, ns.report)
    if ns.out:
        out = Path(ns.out)
        _check_writable([out], ns.force)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_vectors(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    delimiter = "," if path.suffix == ".csv" else None
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=delimiter, dtype=np.float64))
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def cmd_oracle(ns, cfg: RunConfig) -> int:
    g = load_graph(ns.graph)
    a = _load_vectors(Path(ns.vectors))
    if a.shape[0] != g.n_vertices:
        raise ValidationError(f"{a.shape[0]} vectors for {g.n_vertices} vertices")
    res = brute_force_oracle(g, a, ns.lam, ns.sigma, n_max=ns.n_max)
    doc = res.partition.to_json()
    doc.update(energy=res.energy, lambda_eff=ns.lam, sigma=ns.sigma)
    text = json.dumps(doc, sort_keys=True) + "\n"
    if ns.out:
        out = Path(ns.out)
        _check_writable([out], ns.force)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (a run manifest is accepted too)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--report", choices=("json", "csv"), default="json")

    p = argparse.ArgumentParser(prog="ssp", description="Supervised superpoint oversegmentation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic train/val scenes")
    s.add_argument("--out", required=True)

    s = sub.add_parser("graph", parents=[common], help="build the k-NN adjacency graph of a cloud")
    s.add_argument("cloud")
    s.add_argument("--out", required=True, help=".json or binary graph file")

    s = sub.add_parser("train", parents=[common], help="train the embedder")
    s.add_argument("--data", required=True, help="directory with train_*.csv and val_*.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint manifest to continue from")

    s = sub.add_parser("partition", parents=[common], help="embed a cloud and partition it")
    s.add_argument("cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", dest="lambdas", type=float, nargs="+")

    s = sub.add_parser("eval", parents=[common], help="score a partition against ground truth")
    s.add_argument("cloud")
    s.add_argument("partition")
    s.add_argument("--graph", help="adjacency graph file (rebuilt from the cloud if omitted)")
    s.add_argument("--out")

    s = sub.add_parser("oracle", parents=[common], help="exact partition of a tiny graph")
    s.add_argument("graph")
    s.add_argument("vectors", help=".npy, .csv or whitespace-separated vectors, one row per vertex")
    s.add_argument("--lambda", dest="lam", type=float, required=True, help="effective strength")
    s.add_argument("--sigma", type=float, default=0.5)
    s.add_argument("--n-max", type=int, default=10)
    s.add_argument("--out")
    return p


COMMANDS = dict(synth=cmd_synth, graph=cmd_graph, train=cmd_train, partition=cmd_partition,
                eval=cmd_eval, oracle=cmd_oracle)


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("SSP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    threads = 1 if ns.deterministic else ns.threads
    try:
        cfg = _resolve_config(ns)
        if threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=threads)
        else:
            limiter = contextlib.nullcontext()
        with limiter:
            return COMMANDS[ns.command](ns, cfg)
    except SspError as exc:
        print(f"ssp {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"ssp {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
