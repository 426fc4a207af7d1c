from .maxflow import binary_labeling
from .oracle import brute_force_oracle
from .solver import (
    GmppConfig,
    GmppResult,
    augment_embeddings,
    edge_contrast,
    gmpp_energy,
    lambda_effective,
    n_min_of_lambda,
    regularization_path,
    solve,
    solve_augmented,
)

__all__ = [
    "GmppConfig",
    "GmppResult",
    "augment_embeddings",
    "binary_labeling",
    "brute_force_oracle",
    "edge_contrast",
    "gmpp_energy",
    "lambda_effective",
    "n_min_of_lambda",
    "regularization_path",
    "solve",
    "solve_augmented",
]
