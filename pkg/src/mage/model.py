"""Encoder -> projector -> LM bundle with named parameter groups."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .ian import ConfigError, IanConfig
from .projectors import make_projector
from .rng import SplitMix64, derive_seed
from .tensor import Tensor
from .toy_models import LmConfig, ToyCausalLM, ToyVisualEncoder

GROUPS = ("encoder", "ian", "lm")


class MageModel:
    def __init__(self, ian: IanConfig, lm: LmConfig, seed: int, projector: str = "ian"):
        if ian.d_l != lm.d_l:
            raise ConfigError(f"projector width d_l={ian.d_l} differs from LM width {lm.d_l}")
        self.ian_cfg = ian
        self.lm_cfg = lm
        self.projector_kind = projector
        self.encoder = ToyVisualEncoder(
            ian.patch, ian.d_v, SplitMix64(derive_seed(seed, "encoder")), ian.c_img, ian.n_in
        )
        self.projector = make_projector(projector, ian, SplitMix64(derive_seed(seed, "projector")))
        self.lm = ToyCausalLM(lm, SplitMix64(derive_seed(seed, "lm")))

    def group_parameters(self, group: str) -> dict[str, Tensor]:
        if group == "encoder":
            return self.encoder.named_parameters()
        if group == "ian":
            return self.projector.named_parameters()
        if group == "lm":
            return self.lm.named_parameters()
        raise ConfigError(f"unknown parameter group {group!r}; expected one of {GROUPS}")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            for name, p in self.group_parameters(g).items():
                out[f"{g}.{name}"] = p
        return out

    def project(self, image: np.ndarray) -> tuple[Tensor, Tensor | None]:
        v = self.encoder.encode(image)
        return self.projector.forward(Tensor(image), v)

    def prefix(self, visual: Tensor, instruction) -> Tensor:
        return T.concat_rows([visual, self.lm.embed(instruction)])


def group_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()
