"""Desk-scale stand-ins for the frozen vision encoder and the decoder-only LM."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, COLS, EOS, ROWS, TOKEN, VOCAB_SIZE, gen_dataset, gen_instruction_set
from .ian import ConfigError
from .optim import AdamState, adam_step
from .rng import SplitMix64, derive_seed
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e30


class ToyVisualEncoder:
    """Patchify -> linear embed + position embedding -> fixed orthogonal mix.

    No class token and no bias. The position table gives every patch a
    location signature, so blank patches still map to distinct features.
    """

    def __init__(self, patch: int, d_v: int, rng: SplitMix64, c_img: int = 3, n_tokens: int | None = None):
        self.patch = patch
        self.c_img = c_img
        fan_in = c_img * patch * patch
        bound = 1.0 / math.sqrt(fan_in)
        self.embed = Tensor(rng.uniform((fan_in, d_v), -bound, bound), requires_grad=True)
        q, r = np.linalg.qr(rng.normal((d_v, d_v)))
        self.mix = Tensor(q * np.sign(np.diag(r)), requires_grad=True)
        self.pos = None
        if n_tokens is not None:
            b = 1.0 / math.sqrt(d_v)
            self.pos = Tensor(rng.uniform((n_tokens, d_v), -b, b), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "mix": self.mix}
        if self.pos is not None:
            out["pos"] = self.pos
        return out

    def patchify(self, img: np.ndarray) -> np.ndarray:
        c, h, w = img.shape
        p = self.patch
        if c != self.c_img:
            raise ConfigError(f"encoder expects {self.c_img} channels, got {c}")
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        return img.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)

    def premix(self, img: np.ndarray) -> Tensor:
        x = Tensor(self.patchify(img)) @ self.embed
        if self.pos is not None:
            if self.pos.shape[0] != x.shape[0]:
                raise DimensionError(f"image yields {x.shape[0]} patches, position table has {self.pos.shape[0]}")
            x = x + self.pos
        return x

    def encode(self, img: np.ndarray) -> Tensor:
        return self.premix(img) @ self.mix


@dataclass(frozen=True)
class LmConfig:
    vocab: int = VOCAB_SIZE
    d_l: int = 64
    n_blocks: int = 2
    d_ff: int = 128
    max_text: int = 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown LmConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DecoderBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _u(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    b = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -b, b), requires_grad=True)


def _block(rng: SplitMix64, d: int, d_ff: int) -> DecoderBlock:
    ones = lambda n: Tensor(np.ones(n), requires_grad=True)  # noqa: E731
    zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)  # noqa: E731
    return DecoderBlock(
        ln1_g=ones(d), ln1_b=zeros(d),
        wq=_u(rng, (d, d), d), wk=_u(rng, (d, d), d), wv=_u(rng, (d, d), d), wo=_u(rng, (d, d), d),
        ln2_g=ones(d), ln2_b=zeros(d),
        w1=_u(rng, (d, d_ff), d), b1=zeros(d_ff), w2=_u(rng, (d_ff, d), d_ff), b2=zeros(d),
    )


def attention_mask(prefix_len: int, text_len: int) -> np.ndarray:
    """Additive mask: the prefix is fully visible, text is causal."""
    n = prefix_len + text_len
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    allowed = (j < prefix_len) | (j <= i)
    return np.where(allowed, 0.0, MASK_VALUE)


def block_forward(x: Tensor, blk: DecoderBlock, mask: np.ndarray) -> Tensor:
    h = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
    q, k, v = h @ blk.wq, h @ blk.wk, h @ blk.wv
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(q.shape[1])) + Tensor(mask)
    x = x + (T.softmax(scores) @ v) @ blk.wo
    h = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
    return x + (T.gelu(h @ blk.w1 + blk.b1) @ blk.w2 + blk.b2)


class ToyCausalLM:
    """Pre-LN single-head decoder; a continuous prefix is prepended to text embeddings."""

    def __init__(self, cfg: LmConfig, rng: SplitMix64):
        self.cfg = cfg
        d = cfg.d_l
        self.tok_embed = _u(rng, (cfg.vocab, d), d)
        self.pos_embed = _u(rng, (cfg.max_text, d), d)
        self.blocks = [_block(rng, d, cfg.d_ff) for _ in range(cfg.n_blocks)]
        self.lnf_g = Tensor(np.ones(d), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True)
        self.head = _u(rng, (d, cfg.vocab), d)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"tok_embed": self.tok_embed, "pos_embed": self.pos_embed}
        for i, blk in enumerate(self.blocks):
            for f in fields(blk):
                out[f"blocks.{i}.{f.name}"] = getattr(blk, f.name)
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "head": self.head})
        return out

    def embed(self, tokens: Sequence[int]) -> Tensor:
        """Token-embedding lookup, ``L x d_l`` (``0 x d_l`` when empty)."""
        return T.take_rows(self.tok_embed, list(tokens))

    def forward_inputs(self, prefix: Tensor, input_ids: Sequence[int]) -> Tensor:
        """Logits at every text input position."""
        n = len(input_ids)
        if n > self.cfg.max_text:
            raise DimensionError(f"text length {n} exceeds max_text {self.cfg.max_text}")
        if prefix.shape[1:] != (self.cfg.d_l,):
            raise DimensionError(f"prefix width {prefix.shape} does not match d_l={self.cfg.d_l}")
        p = prefix.shape[0]
        x_text = self.embed(input_ids) + T.slice_rows(self.pos_embed, 0, n)
        x = T.concat_rows([prefix, x_text])
        mask = attention_mask(p, n)
        for blk in self.blocks:
            x = block_forward(x, blk, mask)
        x = T.layer_norm(T.slice_rows(x, p, p + n), self.lnf_g, self.lnf_b)
        return x @ self.head

    def forward(self, prefix: Tensor, text: Sequence[int]) -> Tensor:
        """Teacher-forced logits: position i predicts ``text[i]`` from ``text[:i]``."""
        text = list(text)
        return self.forward_inputs(prefix, [BOS] + text[:-1])

    def generate(self, prefix: Tensor, max_len: int | None = None) -> list[int]:
        """Greedy decoding until EOS or ``max_len`` tokens."""
        max_len = max_len or self.cfg.max_text
        ids = [BOS]
        out: list[int] = []
        for _ in range(max_len):
            logits = self.forward_inputs(prefix, ids)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if nxt == EOS or len(ids) >= self.cfg.max_text:
                break
            ids.append(nxt)
        return out


def lm_embed(lm: ToyCausalLM, tokens: Sequence[int]) -> Tensor:
    return lm.embed(tokens)


def lm_forward(lm: ToyCausalLM, prefix: Tensor, text: Sequence[int]) -> Tensor:
    return lm.forward(prefix, text)


def _scene_words(sample) -> list[int]:
    s = sample.scene_spec
    return [TOKEN[s["color"]], TOKEN[s["shape"]], TOKEN[ROWS[s["row"]]], TOKEN[COLS[s["col"]]]]


def warm_start_lm(lm: ToyCausalLM, seed: int, steps: int = 300, batch_size: int = 8, lr: float = 3e-3) -> list[float]:
    """Text-conditioned pretraining so the frozen LM stand-in can read a prefix.

    The prefix is the shuffled embeddings of the scene words followed by the
    instruction; the target is the caption or answer. This plays the role of
    a pretrained language model: stage-1 alignment then has to map images
    into the part of the embedding space the LM already understands.
    Returns the per-step loss trace.
    """
    if steps <= 0:
        return []
    corpus = gen_dataset(128, derive_seed(seed, "lm-warmup"), side=3) + gen_instruction_set(
        128, derive_seed(seed, "lm-warmup"), side=3
    )
    params = lm.named_parameters()
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = True
    state = AdamState()
    trace = []
    try:
        for step in range(steps):
            rng = SplitMix64(derive_seed(seed, "lm-warmup-step", step))
            terms = []
            for i in rng.integers(len(corpus), batch_size):
                s = corpus[i]
                words = _scene_words(s)
                words = [words[j] for j in rng.permutation(len(words))]
                prefix = T.concat_rows([lm.embed(words), lm.embed(s.instruction)])
                terms.append(T.cross_entropy(lm.forward(prefix, s.caption), s.caption))
            loss = T.mean_scalars(terms)
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr=lr)
            trace.append(loss.item())
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
            p.grad = None
    return trace
