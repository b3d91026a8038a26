"""Experiment harness: projector ablation, token-budget sweep, attention export."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetBundle, PairedSample, dataset_bytes, fnv1a64, gen_dataset
from .ian import ConfigError, IanConfig, grid_for_budget
from .losses import itg_loss, pool
from .model import MageModel
from .projectors import PROJECTOR_KINDS
from .rng import derive_seed
from .training import TrainConfig, run_stage

ProjectorKind = str  # one of PROJECTOR_KINDS

ARMS: dict[str, tuple[ProjectorKind, float]] = {
    "full": ("ian", 1.0),
    "no_ian": ("linear", 1.0),
    "no_align": ("ian", 0.0),
    "neither": ("linear", 0.0),
}

# 24 px images, 12x12 encoder grid reduced to 6x6: small enough for 5-seed ablations.
SMALL_IAN = IanConfig(grid_in=12, grid_out=6)


@dataclass
class ExperimentReport:
    arm: str
    seed: int
    steps: int
    tokens: int
    itg: float
    itdm: float
    total: float
    heldout_distance: float
    heldout_itg: float
    combined: float
    dataset_hash: str
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("itg", "itdm", "total", "heldout_distance", "heldout_itg", "combined"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"report {self.arm}/{self.seed}: {name} is not finite")


# wall-clock stays out of the CSV so that reports are byte-reproducible
CSV_FIELDS = [f.name for f in fields(ExperimentReport) if f.name != "wall_clock"]


def dataset_hash(samples: Iterable[PairedSample]) -> str:
    return f"{fnv1a64(dataset_bytes(samples)):016x}"


def heldout_set(seed: int, n: int, side: int) -> list[PairedSample]:
    return gen_dataset(n, derive_seed(seed, "heldout"), side)


def heldout_metrics(model: MageModel, samples: Sequence[PairedSample]) -> tuple[float, float]:
    """Mean squared pooled distance and mean ITG over ``samples``."""
    dists, itgs = [], []
    for s in samples:
        out, _ = model.project(s.image)
        diff = pool(out).data - pool(model.lm.embed(s.caption)).data
        dists.append(float(diff @ diff))
        logits = model.lm.forward(model.prefix(out, s.instruction), s.caption)
        itgs.append(itg_loss(logits, s.caption).item())
    return float(np.mean(dists)), float(np.mean(itgs))


def _experiment(
    arm: str,
    cfg: TrainConfig,
    train: list[PairedSample],
    heldout: list[PairedSample],
    digest: str,
) -> ExperimentReport:
    t0 = time.perf_counter()
    result = run_stage(cfg, bundle=DatasetBundle(captions=train))
    dist, itg = heldout_metrics(result.model, heldout)
    last = result.metrics[-1] if result.metrics else None
    return ExperimentReport(
        arm=arm,
        seed=cfg.seed,
        steps=cfg.steps,
        tokens=result.model.projector.n_out,
        itg=last.itg if last else itg,
        itdm=last.itdm if last else dist,
        total=last.total if last else itg + dist,
        heldout_distance=dist,
        heldout_itg=itg,
        combined=itg + dist,
        dataset_hash=digest,
        wall_clock=time.perf_counter() - t0,
    )


def run_ablation(
    arms: Iterable[str],
    seeds: Sequence[int],
    steps: int = 200,
    ian: IanConfig = SMALL_IAN,
    n_samples: int = 256,
    n_heldout: int = 64,
    base: TrainConfig | None = None,
) -> list[ExperimentReport]:
    """Stage-1 runs for every (arm, seed); all arms of a seed see the same bytes."""
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ConfigError(f"unknown arm(s) {sorted(unknown)}; expected {sorted(ARMS)}")
    arms = sorted(set(arms), key=list(ARMS).index)
    if len(seeds) < 3:
        raise ConfigError("an ablation needs at least 3 seeds")
    base = base or TrainConfig(ian=ian, steps=steps, n_samples=n_samples)
    reports = []
    for seed in seeds:
        train = gen_dataset(base.n_samples, seed, base.ian.image_side)
        held = heldout_set(seed, n_heldout, base.ian.image_side)
        digest = dataset_hash(train + held)
        for arm in arms:
            kind, lam = ARMS[arm]
            cfg = replace(base, seed=seed, projector=kind, lambda_itdm=lam, stage=1, freeze=None)
            reports.append(_experiment(arm, cfg, train, held, digest))
    return reports


@dataclass
class AblationVerdict:
    seeds: int
    full_beats_no_align: int
    neither_best_seeds: list[int]

    @property
    def passed(self) -> bool:
        return self.full_beats_no_align >= math.ceil(0.8 * self.seeds) and not self.neither_best_seeds


def ablation_verdict(reports: Sequence[ExperimentReport]) -> AblationVerdict:
    """Directional checks: full vs ITG-only on held-out distance; `neither` never best."""
    by_seed: dict[int, dict[str, ExperimentReport]] = {}
    for r in reports:
        by_seed.setdefault(r.seed, {})[r.arm] = r
    wins, neither_best = 0, []
    for seed, arms in sorted(by_seed.items()):
        if "full" in arms and "no_align" in arms:
            wins += arms["full"].heldout_distance < arms["no_align"].heldout_distance
        if "neither" in arms:
            others = [r.combined for a, r in arms.items() if a != "neither"]
            if others and arms["neither"].combined < min(others):
                neither_best.append(seed)
    return AblationVerdict(len(by_seed), wins, neither_best)


def budget_config(tokens: int, base: IanConfig | None = None) -> IanConfig:
    base = base or IanConfig()
    return replace(base, grid_out=grid_for_budget(tokens))


def token_sweep(
    budgets: Iterable[int] = (64, 144, 256),
    seed: int = 0,
    steps: int = 200,
    n_samples: int = 256,
    n_heldout: int = 64,
    base: TrainConfig | None = None,
) -> list[ExperimentReport]:
    """Same recipe, data and seed for every visual-token budget."""
    base = base or TrainConfig(steps=steps, n_samples=n_samples)
    side = base.ian.image_side
    train = gen_dataset(base.n_samples, seed, side)
    held = heldout_set(seed, n_heldout, side)
    digest = dataset_hash(train + held)
    reports = []
    for b in sorted(set(budgets)):
        cfg = replace(base, ian=budget_config(b, base.ian), seed=seed, projector="ian", stage=1, freeze=None)
        reports.append(_experiment(f"tokens={b}", cfg, train, held, digest))
    return reports


def write_reports(reports: Sequence[ExperimentReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            d = asdict(r)
            w.writerow([f"{d[k]:.17g}" if isinstance(d[k], float) else d[k] for k in CSV_FIELDS])


def read_reports(path: str | Path) -> list[ExperimentReport]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for f in fields(ExperimentReport):
                if f.name not in row:
                    continue
                kw[f.name] = int(row[f.name]) if f.type in ("int", int) else (
                    float(row[f.name]) if f.type in ("float", float) else row[f.name]
                )
            out.append(ExperimentReport(**kw))
    return out


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def quantize_row(row: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant row maps to 255 everywhere."""
    lo, hi = float(row.min()), float(row.max())
    if hi == lo:
        return np.full(row.shape, 255, dtype=np.uint8)
    return np.rint((row - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> bytes:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM export needs a 2-D uint8 array")
    h, w = img.shape
    buf = f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()
    Path(path).write_bytes(buf)
    return buf


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def attention_map(image: np.ndarray, model: MageModel, token_index: int) -> np.ndarray:
    """Quantized ``G_in x G_in`` map of one SEB attention row."""
    _, attn = model.project(image)
    if attn is None:
        raise ConfigError(f"projector {model.projector_kind!r} has no attention to export")
    n_out, n_in = attn.shape
    if not 0 <= token_index < n_out:
        raise IndexError(f"token_index {token_index} out of range for {n_out} visual tokens")
    g = model.ian_cfg.grid_in
    return quantize_row(attn.data[token_index]).reshape(g, g)


def export_attention(image: np.ndarray, model: MageModel, token_index: int, path: str | Path) -> np.ndarray:
    img = attention_map(image, model, token_index)
    write_pgm(img, path)
    return img


__all__ = [
    "ARMS",
    "PROJECTOR_KINDS",
    "SMALL_IAN",
    "ExperimentReport",
    "ablation_verdict",
    "attention_map",
    "budget_config",
    "dataset_hash",
    "export_attention",
    "heldout_metrics",
    "quantize_row",
    "read_pgm",
    "read_reports",
    "run_ablation",
    "token_sweep",
    "write_pgm",
    "write_reports",
]
