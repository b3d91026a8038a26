"""Intelligent Alignment Network: vector alignment (VAB) + semantic enhancement (SEB).

VAB lifts encoder features into the language-model width with a two-layer
GELU MLP and a learnable layer norm. SEB runs a strided convolution over the
raw image to produce one query per output token and cross-attends over the
VAB sequence, so the token budget is set entirely by the conv geometry.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class IanConfig:
    d_v: int = 32
    d_l: int = 64
    d_b: int = 32
    d_attn: int | None = None
    grid_in: int = 24
    grid_out: int = 12
    hidden: int = 64
    patch: int = 2
    c_img: int = 3

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if val is not None and (not isinstance(val, int) or val < 1):
                raise ConfigError(f"IanConfig.{f.name} must be a positive integer, got {val!r}")
        if self.grid_out > self.grid_in:
            raise ConfigError(f"grid_out ({self.grid_out}) exceeds grid_in ({self.grid_in})")

    @property
    def attn_dim(self) -> int:
        return self.d_attn if self.d_attn is not None else self.d_l

    @property
    def n_in(self) -> int:
        return self.grid_in**2

    @property
    def n_out(self) -> int:
        return self.grid_out**2

    @property
    def image_side(self) -> int:
        return self.grid_in * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown IanConfig keys: {sorted(unknown)}")
        return cls(**d)


def conv_geometry(grid_in: int, grid_out: int) -> tuple[int, int]:
    """(kernel, stride) in patch units mapping a ``grid_in`` grid onto ``grid_out``.

    Divisible budgets use non-overlapping windows; others fall back to
    stride-1 windows of side ``grid_in - grid_out + 1``.
    """
    if grid_out < 1 or grid_out > grid_in:
        raise ConfigError(f"cannot reduce a {grid_in}x{grid_in} grid to {grid_out}x{grid_out}")
    if grid_in % grid_out == 0:
        k = grid_in // grid_out
        return k, k
    return grid_in - grid_out + 1, 1


def grid_for_budget(tokens: int) -> int:
    side = math.isqrt(tokens)
    if side * side != tokens:
        raise ConfigError(f"token budget {tokens} is not a perfect square")
    return side


@dataclass
class VabParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor


@dataclass
class SebParams:
    conv_kernels: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    stride: int


def _uniform(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


def init_vab(cfg: IanConfig, rng: SplitMix64) -> VabParams:
    return VabParams(
        w1=_uniform(rng, (cfg.d_v, cfg.hidden), cfg.d_v),
        b1=Tensor(np.zeros(cfg.hidden), requires_grad=True),
        w2=_uniform(rng, (cfg.hidden, cfg.d_l), cfg.hidden),
        b2=Tensor(np.zeros(cfg.d_l), requires_grad=True),
        norm_gamma=Tensor(np.ones(cfg.d_l), requires_grad=True),
        norm_beta=Tensor(np.zeros(cfg.d_l), requires_grad=True),
    )


def init_seb(cfg: IanConfig, rng: SplitMix64) -> SebParams:
    k, s = conv_geometry(cfg.grid_in, cfg.grid_out)
    kpx, spx = k * cfg.patch, s * cfg.patch
    da = cfg.attn_dim
    return SebParams(
        conv_kernels=_uniform(rng, (cfg.d_b, cfg.c_img, kpx, kpx), cfg.c_img * kpx * kpx),
        wq=_uniform(rng, (cfg.d_b, da), cfg.d_b),
        wk=_uniform(rng, (cfg.d_l, da), cfg.d_l),
        wv=_uniform(rng, (cfg.d_l, da), cfg.d_l),
        wo=_uniform(rng, (da, cfg.d_l), da),
        stride=spx,
    )


def vab_forward(v: Tensor, p: VabParams, eps: float = 1e-5) -> Tensor:
    if len(v.shape) != 2 or v.shape[1] != p.w1.shape[0]:
        raise DimensionError(f"vab_forward: features {v.shape} do not match w1 {p.w1.shape}")
    h = T.gelu(v @ p.w1 + p.b1)
    return T.layer_norm(h @ p.w2 + p.b2, p.norm_gamma, p.norm_beta, eps)


def seb_query(image: Tensor, p: SebParams) -> Tensor:
    """Conv features laid out as ``N_out x d_b`` rows in row-major grid order."""
    fmap = T.conv2d(image, p.conv_kernels, p.stride)
    d_b, gh, gw = fmap.shape
    return T.transpose(T.reshape(fmap, (d_b, gh * gw)))


def seb_attend(b: Tensor, a: Tensor, p: SebParams) -> tuple[Tensor, Tensor]:
    """Single-head cross attention; ``b`` queries, ``a`` is key and value.

    Returns the attended tokens and the ``N_out x N_in`` attention matrix.
    """
    if b.shape[1] != p.wq.shape[0]:
        raise DimensionError(f"seb_attend: queries {b.shape} vs wq {p.wq.shape}")
    if a.shape[1] != p.wk.shape[0]:
        raise DimensionError(f"seb_attend: keys {a.shape} vs wk {p.wk.shape}")
    q = b @ p.wq
    k = a @ p.wk
    v = a @ p.wv
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(p.wq.shape[1]))
    attn = T.softmax(scores)
    return (attn @ v) @ p.wo, attn


class IanProjector:
    """VAB followed by SEB; the learnable projector of the full pipeline."""

    kind = "ian"

    def __init__(self, cfg: IanConfig, rng: SplitMix64):
        self.cfg = cfg
        self.vab = init_vab(cfg, rng)
        self.seb = init_seb(cfg, rng)
        h = (cfg.image_side - self.seb.conv_kernels.shape[2]) // self.seb.stride + 1
        if h != cfg.grid_out:
            raise ConfigError(f"conv geometry yields a {h}x{h} grid, expected {cfg.grid_out}")

    @property
    def n_out(self) -> int:
        return self.cfg.n_out

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "vab.w1": self.vab.w1,
            "vab.b1": self.vab.b1,
            "vab.w2": self.vab.w2,
            "vab.b2": self.vab.b2,
            "vab.norm_gamma": self.vab.norm_gamma,
            "vab.norm_beta": self.vab.norm_beta,
            "seb.conv": self.seb.conv_kernels,
            "seb.wq": self.seb.wq,
            "seb.wk": self.seb.wk,
            "seb.wv": self.seb.wv,
            "seb.wo": self.seb.wo,
        }

    def forward(self, image: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        """Projected tokens plus the SEB attention matrix."""
        a = vab_forward(v, self.vab)
        b = seb_query(image, self.seb)
        return seb_attend(b, a, self.seb)


def ian_forward(image: Tensor, v: Tensor, proj: IanProjector) -> Tensor:
    return proj.forward(image, v)[0]
