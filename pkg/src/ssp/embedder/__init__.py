from .model import LpeConfig, LpeInputs, LpeModel, apply_transform, lpe_inputs, neighborhood_radius
from .optim import Adam, clip_global_norm, global_norm
from .train import (
    Scene,
    TrainConfig,
    Trainer,
    embed_scene,
    evaluate_scene,
    mean_report,
    partition_scene,
    prepare_scene,
    sample_subgraph,
    write_log,
)
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
