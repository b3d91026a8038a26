"""Synthetic paired data: colored-shape scenes, captions, questions and tool requests.

A scene is one shape of one color placed in a 3x3 grid cell. The caption is
a fixed template over the scene attributes, so the image -> caption mapping
is learnable and the caption is a pure function of the scene.
"""

from __future__ import annotations

import base64
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import SplitMix64, derive_seed

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")
SHAPES = ("square", "ring", "plus", "diamond")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
MODALITIES = ("text", "image", "audio", "video")

_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

MAX_TOOLS = 12
MAX_STEPS = 8


def _build_vocab() -> list[str]:
    words = ["<pad>", "<bos>", "<eos>", "a", "at"]
    words += list(COLORS) + list(SHAPES) + list(ROWS) + list(COLS)
    words += ["describe", "this", "image_word", ":", "what", "color", "shape", "where", "?"]
    words += ["have", "want"] + [f"<{m}>" for m in MODALITIES]
    words += [f"<tool{i}>" for i in range(MAX_TOOLS)]
    words += [f"<s{i}>" for i in range(1, MAX_STEPS + 1)]
    words += [";"]
    return words


WORDS = _build_vocab()
TOKEN = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = 64
assert len(WORDS) <= VOCAB_SIZE

PAD, BOS, EOS = TOKEN["<pad>"], TOKEN["<bos>"], TOKEN["<eos>"]
CAPTION_PROMPT = (TOKEN["describe"], TOKEN["this"], TOKEN["image_word"], TOKEN[":"])


@dataclass(frozen=True)
class SceneSpec:
    row: int
    col: int
    color: str
    shape: str

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "color": self.color, "shape": self.shape}


def all_scenes() -> list[SceneSpec]:
    return [
        SceneSpec(r, c, color, shape)
        for r, c, color, shape in itertools.product(range(3), range(3), COLORS, SHAPES)
    ]


def caption_tokens(scene: SceneSpec) -> tuple[int, ...]:
    return (
        TOKEN["a"],
        TOKEN[scene.color],
        TOKEN[scene.shape],
        TOKEN["at"],
        TOKEN[ROWS[scene.row]],
        TOKEN[COLS[scene.col]],
        EOS,
    )


def render_scene(scene: SceneSpec, side: int = 48) -> np.ndarray:
    """3 x side x side float image, black background."""
    if side % 3:
        raise ValueError(f"image side must be divisible by 3, got {side}")
    cell = side // 3
    img = np.zeros((3, side, side))
    yy, xx = np.mgrid[0:cell, 0:cell]
    c = (cell - 1) / 2.0
    dy, dx = np.abs(yy - c), np.abs(xx - c)
    half = cell * 0.4
    if scene.shape == "square":
        mask = (dy <= half) & (dx <= half)
    elif scene.shape == "ring":
        mask = (np.maximum(dy, dx) <= half) & (np.maximum(dy, dx) >= half - max(1, cell // 8))
    elif scene.shape == "plus":
        arm = max(1, cell // 8)
        mask = ((dy <= arm) & (dx <= half)) | ((dx <= arm) & (dy <= half))
    elif scene.shape == "diamond":
        mask = dy + dx <= half
    else:
        raise ValueError(f"unknown shape {scene.shape!r}")
    y0, x0 = scene.row * cell, scene.col * cell
    for ch, val in enumerate(_RGB[scene.color]):
        img[ch, y0:y0 + cell, x0:x0 + cell][mask] = val
    return img


@dataclass
class PairedSample:
    image: np.ndarray
    instruction: tuple[int, ...]
    caption: tuple[int, ...]
    scene_spec: dict
    kind: str = "caption"

    def to_record(self) -> dict:
        raw = np.ascontiguousarray(self.image, dtype="<f8").tobytes()
        return {
            "caption": list(self.caption),
            "image": {"b64": base64.b64encode(raw).decode("ascii"), "shape": list(self.image.shape)},
            "instruction": list(self.instruction),
            "kind": self.kind,
            "scene_spec": self.scene_spec,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PairedSample":
        img = np.frombuffer(base64.b64decode(rec["image"]["b64"]), dtype="<f8")
        return cls(
            image=img.reshape(rec["image"]["shape"]).astype(np.float64),
            instruction=tuple(rec["instruction"]),
            caption=tuple(rec["caption"]),
            scene_spec=rec["scene_spec"],
            kind=rec.get("kind", "caption"),
        )


def _draw_scenes(n: int, rng: SplitMix64) -> list[SceneSpec]:
    grammar = all_scenes()
    return [grammar[i] for i in rng.integers(len(grammar), n)]


def gen_dataset(n: int, seed: int, side: int = 48) -> list[PairedSample]:
    """``n`` caption samples with the constant describe-prompt."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    rng = SplitMix64(derive_seed(seed, "captions"))
    return [
        PairedSample(render_scene(s, side), CAPTION_PROMPT, caption_tokens(s), s.to_dict(), "caption")
        for s in _draw_scenes(n, rng)
    ]


_QUESTIONS = {
    "color": (TOKEN["what"], TOKEN["color"], TOKEN["?"]),
    "shape": (TOKEN["what"], TOKEN["shape"], TOKEN["?"]),
    "where": (TOKEN["where"], TOKEN["?"]),
    "describe": CAPTION_PROMPT,
}


def answer_tokens(scene: SceneSpec, question: str) -> tuple[int, ...]:
    if question == "color":
        return (TOKEN[scene.color], EOS)
    if question == "shape":
        return (TOKEN[scene.shape], EOS)
    if question == "where":
        return (TOKEN[ROWS[scene.row]], TOKEN[COLS[scene.col]], EOS)
    return caption_tokens(scene)


def gen_instruction_set(n: int, seed: int, side: int = 48) -> list[PairedSample]:
    """Question/answer samples standing in for the instruction-tuning mixture."""
    rng = SplitMix64(derive_seed(seed, "instruct"))
    scenes = _draw_scenes(n, rng)
    kinds = sorted(_QUESTIONS)
    qs = rng.integers(len(kinds), n)
    out = []
    for s, qi in zip(scenes, qs):
        q = kinds[qi]
        spec = dict(s.to_dict(), question=q)
        out.append(PairedSample(render_scene(s, side), _QUESTIONS[q], answer_tokens(s, q), spec, "instruct"))
    return out


def split_instruction_set(samples: Sequence[PairedSample], seed: int) -> tuple[list, list]:
    """Seeded 90/10 split: (stage-2 portion, stage-3 remainder)."""
    perm = SplitMix64(derive_seed(seed, "split")).permutation(len(samples))
    cut = (len(samples) * 9) // 10
    return [samples[i] for i in sorted(perm[:cut])], [samples[i] for i in sorted(perm[cut:])]


def write_dataset(samples: Iterable[PairedSample], path: str | Path) -> bytes:
    blob = dataset_bytes(samples)
    Path(path).write_bytes(blob)
    return blob


def dataset_bytes(samples: Iterable[PairedSample]) -> bytes:
    lines = [json.dumps(s.to_record(), sort_keys=True, separators=(",", ":")) for s in samples]
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_dataset(path: str | Path) -> list[PairedSample]:
    text = Path(path).read_text(encoding="utf-8")
    return [PairedSample.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class DatasetBundle:
    """Everything the three stages draw from, as one file."""

    captions: list[PairedSample] = field(default_factory=list)
    instruct: list[PairedSample] = field(default_factory=list)
    plans: list[PairedSample] = field(default_factory=list)

    def all(self) -> list[PairedSample]:
        return self.captions + self.instruct + self.plans

    @classmethod
    def from_samples(cls, samples: Iterable[PairedSample]) -> "DatasetBundle":
        b = cls()
        for s in samples:
            {"caption": b.captions, "instruct": b.instruct, "plan": b.plans}[s.kind].append(s)
        return b
