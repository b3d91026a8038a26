"""Three-stage training: frozen-backbone alignment, full fine-tuning, tool-plan tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetBundle, PairedSample, gen_dataset, gen_instruction_set, read_dataset, split_instruction_set
from .ian import ConfigError, IanConfig
from .losses import LossBreakdown, combined_loss
from .model import GROUPS, MageModel
from .optim import AdamState, adam_step, clip_grad_norm
from .rng import SplitMix64, derive_seed
from .tensor import Tensor
from .toy_models import LmConfig, warm_start_lm

log = logging.getLogger(__name__)

STAGE_FREEZE = {1: ("encoder", "lm"), 2: (), 3: ()}
# Per-invocation settings left out of the checkpoint so a resumed run and an
# uninterrupted one serialise to the same bytes.
RUN_CONTROL = ("steps", "checkpoint_out", "metrics_out", "init_checkpoint", "resume_from")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    ian: IanConfig = field(default_factory=IanConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    projector: str = "ian"
    stage: int = 1
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_itdm: float = 1.0
    seed: int = 0
    freeze: list[str] | None = None
    data: str | None = None
    n_samples: int = 256
    checkpoint_out: str | None = None
    metrics_out: str | None = None
    init_checkpoint: str | None = None
    resume_from: str | None = None
    max_grad_norm: float | None = None
    lm_warmup_steps: int = 300

    def __post_init__(self):
        if isinstance(self.ian, dict):
            self.ian = IanConfig.from_dict(self.ian)
        if isinstance(self.lm, dict):
            self.lm = LmConfig.from_dict(self.lm)
        if self.freeze is None:
            self.freeze = list(STAGE_FREEZE.get(self.stage, ()))
        self.freeze = sorted(set(self.freeze))
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGE_FREEZE:
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage!r}")
        unknown = set(self.freeze) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown freeze group(s) {sorted(unknown)}; expected a subset of {GROUPS}")
        expected = sorted(STAGE_FREEZE[self.stage])
        if self.freeze != expected:
            raise ConfigError(f"stage {self.stage} requires freeze={expected}, got {self.freeze}")
        if self.steps < 0 or self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("steps must be >= 0, batch_size and n_samples >= 1")
        if self.lambda_itdm < 0:
            raise ConfigError("lambda_itdm must be >= 0")
        if self.ian.d_l != self.lm.d_l:
            raise ConfigError(f"ian.d_l={self.ian.d_l} and lm.d_l={self.lm.d_l} must agree")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.to_dict() if hasattr(val, "to_dict") else val
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def apply_freeze(model: MageModel, freeze: Sequence[str]) -> dict[str, Tensor]:
    """Mark frozen groups as constant and return the trainable parameters."""
    unknown = set(freeze) - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown freeze group(s) {sorted(unknown)}")
    trainable = {}
    for g in GROUPS:
        frozen = g in freeze
        for name, p in model.group_parameters(g).items():
            p.requires_grad = not frozen
            p.grad = None
            if not frozen:
                trainable[f"{g}.{name}"] = p
    return trainable


def stage_samples(bundle: DatasetBundle, stage: int, seed: int) -> list[PairedSample]:
    if stage == 1:
        if not bundle.captions:
            raise ConfigError("stage 1 needs caption samples")
        return bundle.captions
    head, tail = split_instruction_set(bundle.instruct, seed)
    if stage == 2:
        if not head:
            raise ConfigError("stage 2 needs instruction samples")
        return head
    if not bundle.plans:
        raise ConfigError("stage 3 needs tool-plan samples in the dataset")
    return tail + bundle.plans


def default_bundle(cfg: TrainConfig) -> DatasetBundle:
    from .agent import default_registry, gen_plan_samples

    side = cfg.ian.image_side
    return DatasetBundle(
        captions=gen_dataset(cfg.n_samples, cfg.seed, side),
        instruct=gen_instruction_set(cfg.n_samples, cfg.seed, side),
        plans=gen_plan_samples(default_registry(), cfg.seed, side),
    )


def load_bundle(cfg: TrainConfig) -> DatasetBundle:
    if cfg.data is None:
        return default_bundle(cfg)
    return DatasetBundle.from_samples(read_dataset(cfg.data))


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices for global step ``step`` (0-based); last partial batch dropped."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ConfigError(f"{n} samples cannot fill one batch of {batch_size}")
    epoch, b = divmod(step, per_epoch)
    perm = SplitMix64(derive_seed(seed, "shuffle", epoch)).permutation(n)
    return perm[b * batch_size:(b + 1) * batch_size]


_WARM_LM: dict[tuple, dict[str, np.ndarray]] = {}


def build_model(cfg: TrainConfig) -> MageModel:
    """Fresh model whose LM is warm-started (cached per seed, LM config and length).

    The LM initialisation does not depend on the projector kind, so arms of
    an ablation that share a seed also share an identical warm LM.
    """
    model = MageModel(cfg.ian, cfg.lm, cfg.seed, cfg.projector)
    key = (cfg.seed, cfg.lm, cfg.lm_warmup_steps)
    if key not in _WARM_LM:
        warm_start_lm(model.lm, cfg.seed, cfg.lm_warmup_steps)
        _WARM_LM[key] = {k: p.data.copy() for k, p in model.lm.named_parameters().items()}
    for k, p in model.lm.named_parameters().items():
        p.data = _WARM_LM[key][k].copy()
    return model


def load_model_state(model: MageModel, ckpt: Checkpoint) -> None:
    for name, p in model.named_parameters().items():
        if name not in ckpt.tensors:
            raise TrainingError(f"checkpoint lacks parameter {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise TrainingError(f"checkpoint parameter {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()


def model_from_checkpoint(ckpt: Checkpoint) -> MageModel:
    cfg = ckpt.meta["config"]
    model = MageModel(
        IanConfig.from_dict(cfg["ian"]), LmConfig.from_dict(cfg["lm"]), cfg["seed"], cfg["projector"]
    )
    load_model_state(model, ckpt)
    return model


def make_checkpoint(model: MageModel, cfg: TrainConfig, step: int, adam: AdamState) -> Checkpoint:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    for name in sorted(adam.m):
        tensors[f"adam.m.{name}"] = adam.m[name]
        tensors[f"adam.v.{name}"] = adam.v[name]
    meta = {
        "adam_step": adam.step,
        "config": {k: v for k, v in cfg.to_dict().items() if k not in RUN_CONTROL},
        "format_version": 1,
        "rng": {"algorithm": "splitmix64", "seed": cfg.seed, "step": step},
        "step": step,
    }
    return Checkpoint(tensors=tensors, meta=meta)


@dataclass
class RunResult:
    model: MageModel
    checkpoint: Checkpoint
    metrics: list[LossBreakdown]
    first_step: int


def write_metrics(rows: Sequence[LossBreakdown], path: str | Path, first_step: int = 1) -> None:
    lines = ["step,itg,itdm,total"]
    for i, r in enumerate(rows):
        lines.append(f"{first_step + i},{r.itg:.17g},{r.itdm:.17g},{r.total:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: str | Path) -> list[tuple[int, float, float, float]]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for line in rows:
        s, a, b, c = line.split(",")
        out.append((int(s), float(a), float(b), float(c)))
    return out


def run_stage(
    cfg: TrainConfig,
    bundle: DatasetBundle | None = None,
    model: MageModel | None = None,
) -> RunResult:
    """Run ``cfg.steps`` optimizer steps of ``cfg.stage``.

    ``resume_from`` restores parameters, optimizer moments and the step
    counter, so a split run reproduces an uninterrupted one exactly.
    ``init_checkpoint`` only seeds the parameters (stage hand-off).
    """
    cfg.validate()
    bundle = bundle if bundle is not None else load_bundle(cfg)
    samples = stage_samples(bundle, cfg.stage, cfg.seed)

    adam = AdamState()
    start = 0
    if cfg.resume_from:
        ckpt = load_checkpoint(cfg.resume_from)
        model = model_from_checkpoint(ckpt)
        start = int(ckpt.meta["step"])
        adam.step = int(ckpt.meta["adam_step"])
        for name, arr in ckpt.tensors.items():
            if name.startswith("adam.m."):
                adam.m[name[7:]] = arr.copy()
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = arr.copy()
    elif cfg.init_checkpoint:
        model = model_from_checkpoint(load_checkpoint(cfg.init_checkpoint))
    elif model is None:
        model = build_model(cfg)

    trainable = apply_freeze(model, cfg.freeze)
    rows: list[LossBreakdown] = []
    for step in range(start, start + cfg.steps):
        batch = [samples[i] for i in batch_indices(cfg.seed, step, len(samples), cfg.batch_size)]
        for p in trainable.values():
            p.grad = None
        lb = combined_loss(batch, model, cfg.lambda_itdm)
        if not np.isfinite(lb.total) or not np.isfinite(lb.itdm):
            raise TrainingError(f"non-finite loss at step {step + 1}", step + 1)
        if trainable:
            lb.loss.backward()
            grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
            if cfg.max_grad_norm:
                clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(trainable, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        lb.loss = None
        rows.append(lb)
        log.debug("step %d itg=%.6f itdm=%.6f total=%.6f", step + 1, lb.itg, lb.itdm, lb.total)

    ckpt = make_checkpoint(model, cfg, start + cfg.steps, adam)
    if cfg.checkpoint_out:
        save_checkpoint(ckpt, cfg.checkpoint_out)
    if cfg.metrics_out:
        write_metrics(rows, cfg.metrics_out, start + 1)
    return RunResult(model=model, checkpoint=ckpt, metrics=rows, first_step=start + 1)
