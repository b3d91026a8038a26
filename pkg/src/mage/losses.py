"""Generation loss (ITG), embedding-distance loss (ITDM) and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class LossBreakdown:
    itg: float
    itdm: float
    total: float
    batch_size: int
    seq_len: int
    loss: Tensor | None = None


def itg_loss(logits: Tensor, caption: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the caption under teacher forcing."""
    if len(caption) == 0:
        raise ValueError("itg_loss: empty caption")
    return T.cross_entropy(logits, caption)


def pool(seq: Tensor) -> Tensor:
    if seq.shape[0] == 0:
        raise ValueError("pool: empty sequence")
    return T.mean_rows(seq)


def itdm_loss(ian_out: Sequence[Tensor], text_emb: Sequence[Tensor]) -> Tensor:
    """``(1/B) sum_i ||pool(ian_i) - pool(text_i)||^2``."""
    if len(ian_out) != len(text_emb):
        raise DimensionError(f"itdm_loss: batch sizes differ ({len(ian_out)} vs {len(text_emb)})")
    if not ian_out:
        raise ValueError("itdm_loss: empty batch")
    a = T.concat_rows([T.reshape(pool(x), (1, -1)) for x in ian_out])
    b = T.concat_rows([T.reshape(pool(x), (1, -1)) for x in text_emb])
    return T.mse(a, b)


def combined_loss(batch, model, lambda_itdm: float = 1.0) -> LossBreakdown:
    """One shared forward through encoder -> projector -> LM for a batch.

    ITDM is always measured; it only enters the differentiable total when
    ``lambda_itdm > 0``.
    """
    if lambda_itdm < 0:
        raise ValueError("lambda_itdm must be >= 0")
    itg_terms, visual, text = [], [], []
    for s in batch:
        out, _ = model.project(s.image)
        logits = model.lm.forward(model.prefix(out, s.instruction), s.caption)
        itg_terms.append(itg_loss(logits, s.caption))
        visual.append(out)
        text.append(model.lm.embed(s.caption))
    itg = T.mean_scalars(itg_terms)
    itdm = itdm_loss(visual, text)
    if lambda_itdm == 0:
        total = itg
    elif lambda_itdm == 1.0:
        total = itg + itdm
    else:
        total = itg + T.scale(itdm, lambda_itdm)
    return LossBreakdown(
        itg=itg.item(),
        itdm=itdm.item(),
        total=total.item(),
        batch_size=len(batch),
        seq_len=max(len(s.caption) for s in batch),
        loss=total,
    )
