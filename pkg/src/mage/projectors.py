"""Projector variants sharing the ``forward(image, features) -> (tokens, attn)`` contract."""

from __future__ import annotations

import math

import numpy as np

from .ian import ConfigError, IanConfig, IanProjector, conv_geometry
from .rng import SplitMix64
from .tensor import Tensor

PROJECTOR_KINDS = ("linear", "avgpool_linear", "ian")


class LinearProjector:
    """Token-wise affine map; keeps every encoder token."""

    kind = "linear"

    def __init__(self, cfg: IanConfig, rng: SplitMix64):
        self.cfg = cfg
        b = 1.0 / math.sqrt(cfg.d_v)
        self.w = Tensor(rng.uniform((cfg.d_v, cfg.d_l), -b, b), requires_grad=True)
        self.b = Tensor(np.zeros(cfg.d_l), requires_grad=True)

    @property
    def n_out(self) -> int:
        return self.cfg.n_in

    def named_parameters(self) -> dict[str, Tensor]:
        return {"linear.w": self.w, "linear.b": self.b}

    def forward(self, image, v: Tensor):
        return v @ self.w + self.b, None


def pooling_matrix(grid_in: int, grid_out: int) -> np.ndarray:
    """``N_out x N_in`` window-average operator following :func:`conv_geometry`."""
    k, s = conv_geometry(grid_in, grid_out)
    m = np.zeros((grid_out * grid_out, grid_in * grid_in))
    for oy in range(grid_out):
        for ox in range(grid_out):
            row = oy * grid_out + ox
            for dy in range(k):
                for dx in range(k):
                    m[row, (oy * s + dy) * grid_in + ox * s + dx] = 1.0 / (k * k)
    return m


class AvgPoolLinearProjector(LinearProjector):
    """Fixed window averaging down to the token budget, then the affine map."""

    kind = "avgpool_linear"

    def __init__(self, cfg: IanConfig, rng: SplitMix64):
        super().__init__(cfg, rng)
        self.pool = Tensor(pooling_matrix(cfg.grid_in, cfg.grid_out))

    @property
    def n_out(self) -> int:
        return self.cfg.n_out

    def forward(self, image, v: Tensor):
        return (self.pool @ v) @ self.w + self.b, None


def make_projector(kind: str, cfg: IanConfig, rng: SplitMix64):
    if kind == "ian":
        return IanProjector(cfg, rng)
    if kind == "linear":
        return LinearProjector(cfg, rng)
    if kind == "avgpool_linear":
        return AvgPoolLinearProjector(cfg, rng)
    raise ConfigError(f"unknown projector kind {kind!r}; expected one of {PROJECTOR_KINDS}")
