"""Local point embedder: a small PointNet with a 2x2 spatial transform."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..errors import StateError, ValidationError
from .layers import (
    init_stack,
    l2_normalize,
    l2_normalize_backward,
    maxpool_backward,
    maxpool_forward,
    mlp_backward,
    mlp_forward,
)

RAD_FLOOR = 1e-6
POINT_FEATURES = 9  # height, radius, 2x2 transform, rgb
STACKS = ("st1", "st2", "mlp1", "mlp2")


@dataclass
class LpeConfig:
    k: int = 20
    m: int = 4
    mlp1_widths: list = field(default_factory=lambda: [32, 128])
    mlp2_widths: Optional[list] = None  # defaults to [64, 32, 32, m]
    st_mlp1_widths: list = field(default_factory=lambda: [16, 64])
    st_mlp2_widths: list = field(default_factory=lambda: [32, 16, 4])
    norm_kind: str = "batch"

    def __post_init__(self):
        if self.mlp2_widths is None:
            self.mlp2_widths = [64, 32, 32, self.m]
        for name in ("mlp1_widths", "mlp2_widths", "st_mlp1_widths", "st_mlp2_widths"):
            setattr(self, name, [int(w) for w in getattr(self, name)])

    def validate(self) -> None:
        if self.k < 2:
            raise ValidationError("neighborhoods need k >= 2")
        if self.m < 1:
            raise ValidationError("embedding dimension must be positive")
        stacks = dict(mlp1=self.mlp1_widths, mlp2=self.mlp2_widths,
                      st_mlp1=self.st_mlp1_widths, st_mlp2=self.st_mlp2_widths)
        for name, widths in stacks.items():
            if not widths or min(widths) < 1:
                raise ValidationError(f"{name} widths must be nonempty and positive")
        if self.mlp2_widths[-1] != self.m:
            raise ValidationError(f"last mlp2 width {self.mlp2_widths[-1]} != m={self.m}")
        if self.st_mlp2_widths[-1] != 4:
            raise ValidationError("last st_mlp2 width must be 4 (a 2x2 matrix)")
        if self.norm_kind not in ("batch", "group"):
            raise ValidationError(f"unknown norm_kind {self.norm_kind!r}")
        if self.norm_kind == "group":
            normed = (self.mlp1_widths + self.st_mlp1_widths + self.mlp2_widths[:-1]
                      + self.st_mlp2_widths[:-1])
            if any(w % 4 for w in normed):
                raise ValidationError("group norm needs normalized widths divisible by 4")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LpeInputs:
    """Per-point network inputs for a batch of B points with k neighbors."""
    offsets: np.ndarray  # (B, k, 3) neighbor offsets divided by rad
    colors: np.ndarray  # (B, k, 3) neighbor colors
    height: np.ndarray  # (B,)
    rad: np.ndarray  # (B,)
    own_color: np.ndarray  # (B, 3)

    def __len__(self):
        return len(self.offsets)

    def take(self, idx) -> "LpeInputs":
        return LpeInputs(self.offsets[idx], self.colors[idx], self.height[idx], self.rad[idx],
                         self.own_color[idx])


def neighborhood_radius(centered: np.ndarray) -> np.ndarray:
    """RMS over all 3k centered coordinates of each neighborhood, floored."""
    rad = np.sqrt(np.mean(centered.reshape(len(centered), -1) ** 2, axis=1))
    return np.maximum(rad, RAD_FLOOR)


def lpe_inputs(positions: np.ndarray, colors: np.ndarray, neighbor_ids: np.ndarray,
               idx: Optional[np.ndarray] = None) -> LpeInputs:
    """Build network inputs for points ``idx`` (all by default)."""
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    neighbor_ids = np.asarray(neighbor_ids)
    if idx is None:
        idx = np.arange(len(positions))
    if neighbor_ids.ndim != 2 or neighbor_ids.shape[1] < 2:
        raise ValidationError("neighborhoods need k >= 2")
    nb = neighbor_ids[idx]
    centered = positions[nb] - positions[idx][:, None, :]
    rad = neighborhood_radius(centered)
    return LpeInputs(centered / rad[:, None, None], colors[nb], positions[idx, 2].copy(), rad,
                     colors[idx].copy())


def apply_transform(offsets: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Right-multiply the xy of each offset row by the 2x2 matrix ``omega`` (z untouched)."""
    out = offsets.copy()
    out[..., :2] = np.einsum("bkj,bjl->bkl", offsets[..., :2], omega.reshape(-1, 2, 2))
    return out


class LpeModel:
    """Parameters, running statistics and cached activations of the embedder."""

    def __init__(self, cfg: LpeConfig, rng: Optional[np.random.Generator] = None):
        cfg.validate()
        self.cfg = cfg
        self.training = True
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None
        rng = rng if rng is not None else np.random.default_rng(0)
        nk = cfg.norm_kind
        init_stack(self.params, self.buffers, "st1", 3, cfg.st_mlp1_widths, nk, rng, False)
        init_stack(self.params, self.buffers, "st2", cfg.st_mlp1_widths[-1], cfg.st_mlp2_widths,
                   nk, rng, True)
        last = f"st2.{len(cfg.st_mlp2_widths) - 1}"
        self.params[last + ".W"][:] = 0.0
        self.params[last + ".b"][:] = [1.0, 0.0, 0.0, 1.0]
        init_stack(self.params, self.buffers, "mlp1", 6, cfg.mlp1_widths, nk, rng, False)
        init_stack(self.params, self.buffers, "mlp2", cfg.mlp1_widths[-1] + POINT_FEATURES,
                   cfg.mlp2_widths, nk, rng, True)

    def _depth(self, prefix):
        cfg = self.cfg
        return len(dict(st1=cfg.st_mlp1_widths, st2=cfg.st_mlp2_widths,
                        mlp1=cfg.mlp1_widths, mlp2=cfg.mlp2_widths)[prefix])

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------------ passes

    def spatial_transform(self, offsets: np.ndarray, training: bool):
        """2x2 transform predicted from the normalized neighborhood ``(B, k, 3)``."""
        b, k, _ = offsets.shape
        nk = self.cfg.norm_kind
        h, c1 = mlp_forward(self.params, self.buffers, "st1", self._depth("st1"),
                            offsets.reshape(b * k, 3), nk, training, False)
        pooled, arg = maxpool_forward(h.reshape(b, k, -1))
        omega, c2 = mlp_forward(self.params, self.buffers, "st2", self._depth("st2"),
                                pooled, nk, training, True)
        return omega, (c1, arg, c2)

    def forward(self, inp: LpeInputs, training: Optional[bool] = None) -> np.ndarray:
        """Unit embeddings ``(B, m)``; activations are kept for ``backward``."""
        training = self.training if training is None else training
        b, k = inp.offsets.shape[:2]
        if inp.offsets.shape != (b, k, 3) or inp.colors.shape != (b, k, 3):
            raise ValidationError("neighbor offsets and colors must have shape (B, k, 3)")
        if inp.height.shape != (b,) or inp.rad.shape != (b,) or inp.own_color.shape != (b, 3):
            raise ValidationError("point features have the wrong shape")
        nk = self.cfg.norm_kind
        omega, st_cache = self.spatial_transform(inp.offsets, training)
        moved = apply_transform(inp.offsets, omega)
        rows = np.concatenate([moved, inp.colors], axis=2).reshape(b * k, 6)
        h, c1 = mlp_forward(self.params, self.buffers, "mlp1", self._depth("mlp1"), rows, nk,
                            training, False)
        pooled, arg = maxpool_forward(h.reshape(b, k, -1))
        feat = np.concatenate([pooled, inp.height[:, None], inp.rad[:, None], omega, inp.own_color],
                              axis=1)
        z, c2 = mlp_forward(self.params, self.buffers, "mlp2", self._depth("mlp2"), feat, nk,
                            training, True)
        e, norm = l2_normalize(z)
        self._cache = (inp.offsets, st_cache, c1, arg, c2, e, norm)
        return e

    def backward(self, de: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(de * e)`` for the last forward batch."""
        if self._cache is None:
            raise StateError("backward called without a preceding forward")
        offsets, (s1, sarg, s2), c1, arg, c2, e, norm = self._cache
        self._cache = None
        de = np.asarray(de, dtype=np.float64)
        if de.shape != e.shape:
            raise ValidationError(f"upstream gradient shape {de.shape} != {e.shape}")
        b, k = offsets.shape[:2]
        nk = self.cfg.norm_kind
        grads = self.zero_grads()
        dz = l2_normalize_backward(de, e, norm)
        dfeat = mlp_backward(self.params, "mlp2", c2, dz, nk, grads)
        c = self.cfg.mlp1_widths[-1]
        domega = dfeat[:, c + 2:c + 6].copy()
        dh = maxpool_backward(dfeat[:, :c], arg, k).reshape(b * k, c)
        drows = mlp_backward(self.params, "mlp1", c1, dh, nk, grads).reshape(b, k, 6)
        domega += np.einsum("bkj,bkl->bjl", offsets[..., :2], drows[..., :2]).reshape(b, 4)
        dpooled = mlp_backward(self.params, "st2", s2, domega, nk, grads)
        dh = maxpool_backward(dpooled, sarg, k).reshape(b * k, -1)
        mlp_backward(self.params, "st1", s1, dh, nk, grads, need_input=False)
        return grads

    def activation_pattern(self) -> np.ndarray:
        """ReLU masks and max-pool winners of the last forward pass, flattened.

        Two inputs with equal patterns lie on the same smooth piece of the network.
        """
        if self._cache is None:
            raise StateError("no forward pass cached")
        _, (s1, sarg, s2), c1, arg, c2, _, _ = self._cache
        parts = [sarg.ravel(), arg.ravel()]
        parts += [mask.ravel() for stack in (s1, s2, c1, c2) for _, mask, _ in stack if mask is not None]
        return np.concatenate([p.astype(np.int64) for p in parts])

    def embed(self, inp: LpeInputs, chunk: int = 2048) -> np.ndarray:
        """Inference-mode embeddings, computed in chunks to bound memory."""
        out = [self.forward(inp.take(slice(s, s + chunk)), training=False)
               for s in range(0, len(inp), chunk)]
        self._cache = None
        return np.concatenate(out, axis=0)

    # ------------------------------------------------------------------ state

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then running statistics, in declaration order."""
        return list(self.params.items()) + [("buffer:" + k, v) for k, v in self.buffers.items()]
