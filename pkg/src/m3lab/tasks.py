"""Synthetic visual question answering task with known granularity needs.

Each image is a ``G x G`` grid of colored cells. More than half of the cells
share one dominant color, so "which color dominates?" is answerable from the
global mean (one pooled token). One cell is marked and carries a glyph drawn
as a checkerboard of two palette colors; naming that glyph requires resolving
the single cell, because after pooling the glyph is indistinguishable from the
color histogram of its neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
import json
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, EOS, Q_COLOR, Q_GLYPH, IMAGE, QMARK = range(6)
ROW0 = 8
COL0 = 20
COLOR0 = 32
GLYPH0 = 40
VOCAB_SIZE = 64
MAX_GRID = 12
MAX_COLORS = 8
MAX_GLYPHS = VOCAB_SIZE - GLYPH0

COLOR_NAMES = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "grey"]

KINDS = ("global-color", "local-glyph")

# brightness jitter per cell, stored as an integer level
BRIGHT_LEVELS = 9
BRIGHT_LOW = 0.8
BRIGHT_STEP = 0.05


@dataclass(frozen=True)
class TaskConfig:
    grid: int = 12
    patch: int = 2
    colors: int = 4
    glyphs: int = 6
    dominant_min: float = 0.6
    dominant_max: float = 0.8
    clutter: float = 1.0  # chance that an unmarked cell carries one stray ink pixel

    def __post_init__(self):
        if not 1 <= self.grid <= MAX_GRID:
            raise ValueError(f"grid must be in [1, {MAX_GRID}]")
        if self.patch < 2 or self.patch % 2:
            raise ValueError("patch must be an even number >= 2")
        if not 2 <= self.colors <= MAX_COLORS:
            raise ValueError(f"colors must be in [2, {MAX_COLORS}]")
        if not 2 <= self.glyphs <= min(MAX_GLYPHS, self.colors * (self.colors - 1) // 2):
            raise ValueError("glyphs must be >= 2 and at most colors*(colors-1)/2")
        if not 0.5 < self.dominant_min <= self.dominant_max < 1.0:
            raise ValueError("need 0.5 < dominant_min <= dominant_max < 1")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError("clutter must be a probability")

    @property
    def channels(self) -> int:
        # background colors, ink colors, marker
        return 2 * self.colors + 1

    @property
    def resolution(self) -> int:
        return self.grid * self.patch

    def glyph_colors(self, glyph: int) -> tuple[int, int]:
        return list(combinations(range(self.colors), 2))[glyph]


@dataclass
class SyntheticImage:
    colors: np.ndarray  # (G, G) color ids
    brightness: np.ndarray  # (G, G) jitter levels
    marked: tuple[int, int]
    glyph: int
    dominant: int
    clutter: np.ndarray  # (G, G) stray ink: -1 for none, else pixel * colors + ink color

    def to_dict(self) -> dict:
        return {
            "colors": self.colors.tolist(),
            "brightness": self.brightness.tolist(),
            "marked": list(self.marked),
            "glyph": self.glyph,
            "dominant": self.dominant,
            "clutter": self.clutter.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticImage":
        return cls(
            colors=np.asarray(d["colors"], dtype=np.int64),
            brightness=np.asarray(d["brightness"], dtype=np.int64),
            marked=(int(d["marked"][0]), int(d["marked"][1])),
            glyph=int(d["glyph"]),
            dominant=int(d["dominant"]),
            clutter=np.asarray(d["clutter"], dtype=np.int64),
        )


@dataclass
class TaskInstance:
    image: SyntheticImage
    kind: str
    question: list[int]
    answer: list[int]
    split: str
    seed: int = field(default=0)

    @property
    def label(self) -> int:
        return self.image.dominant if self.kind == "global-color" else self.image.glyph

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "split": self.split,
            "seed": self.seed,
            "question": self.question,
            "answer": self.answer,
            "image": self.image.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(
            image=SyntheticImage.from_dict(d["image"]),
            kind=d["kind"],
            question=list(d["question"]),
            answer=list(d["answer"]),
            split=d["split"],
            seed=int(d["seed"]),
        )


def token_names() -> list[str]:
    names = [f"<unused{i}>" for i in range(VOCAB_SIZE)]
    names[:6] = ["<pad>", "<eos>", "what-color", "what-glyph", "image", "?"]
    for i in range(MAX_GRID):
        names[ROW0 + i] = f"row{i}"
        names[COL0 + i] = f"col{i}"
    for i, c in enumerate(COLOR_NAMES):
        names[COLOR0 + i] = c
    for i in range(MAX_GLYPHS):
        names[GLYPH0 + i] = f"glyph{i}"
    return names


def decode(tokens: Iterable[int]) -> str:
    names = token_names()
    return " ".join(names[t] for t in tokens)


def make_image(rng: np.random.Generator, cfg: TaskConfig, dominant: int, glyph: int) -> SyntheticImage:
    g = cfg.grid
    n = g * g
    lo = int(np.floor(cfg.dominant_min * n))
    hi = int(np.floor(cfg.dominant_max * n))
    n_dom = max(int(rng.integers(lo, hi + 1)), n // 2 + 1)
    others = [c for c in range(cfg.colors) if c != dominant]
    cells = np.concatenate([
        np.full(n_dom, dominant),
        rng.choice(others, size=n - n_dom),
    ])
    rng.shuffle(cells)
    bright = rng.integers(0, BRIGHT_LEVELS, size=n)
    flat = int(rng.integers(n))
    clutter = rng.integers(0, cfg.patch * cfg.patch * cfg.colors, size=n)
    clutter[rng.random(n) >= cfg.clutter] = -1
    clutter[flat] = -1
    return SyntheticImage(
        colors=cells.reshape(g, g).astype(np.int64),
        brightness=bright.reshape(g, g).astype(np.int64),
        marked=(flat // g, flat % g),
        glyph=glyph,
        dominant=dominant,
        clutter=clutter.reshape(g, g).astype(np.int64),
    )


def render(image: SyntheticImage, cfg: TaskConfig) -> np.ndarray:
    """Rasterize to a ``(G*p, G*p, 2*colors + 1)`` float32 image.

    Channels: background color intensity, ink color, marker. The marked cell
    carries its glyph as an ink checkerboard of the glyph's two colors; other
    cells may carry a single stray ink pixel (clutter), so pooled ink only
    identifies the glyph once the marked cell is resolved from its neighbours.
    """
    g, p, k = cfg.grid, cfg.patch, cfg.colors
    scale = BRIGHT_LOW + BRIGHT_STEP * image.brightness
    cells = np.zeros((g, g, cfg.channels), dtype=np.float64)
    cells[np.arange(g)[:, None], np.arange(g)[None, :], image.colors] = scale
    out = np.repeat(np.repeat(cells, p, axis=0), p, axis=1)
    for r, c in zip(*np.nonzero(image.clutter >= 0)):
        pix, ink = divmod(int(image.clutter[r, c]), k)
        out[r * p + pix // p, c * p + pix % p, k + ink] = 1.0
    r, c = image.marked
    a, b = cfg.glyph_colors(image.glyph)
    block = out[r * p:(r + 1) * p, c * p:(c + 1) * p]
    checker = (np.add.outer(np.arange(p), np.arange(p)) % 2).astype(bool)
    block[~checker, k + a] = 1.0
    block[checker, k + b] = 1.0
    block[:, :, -1] = 1.0
    return out.astype(np.float32)


def palette(cfg: TaskConfig) -> np.ndarray:
    """Nominal per-channel color vectors (unit brightness, no ink or marker)."""
    return np.eye(cfg.colors, cfg.channels)


def dominant_margin(cfg: TaskConfig) -> float:
    """Upper bound on the max-norm gap between an image's mean color and its
    dominant palette vector, given the construction parameters."""
    hi = BRIGHT_LOW + BRIGHT_STEP * (BRIGHT_LEVELS - 1)
    n = cfg.grid * cfg.grid
    dom_min = max(int(np.floor(cfg.dominant_min * n)), n // 2 + 1) / n
    # dominant channel: at least dom_min*LOW (minus the marked cell), at most hi;
    # any other channel: at most (1 - dom_min) * hi
    return max(1.0 - dom_min * BRIGHT_LOW, hi - 1.0, (1.0 - dom_min) * hi)


def make_question(kind: str, image: SyntheticImage) -> tuple[list[int], list[int]]:
    if kind == "global-color":
        return [Q_COLOR, IMAGE, QMARK], [COLOR0 + image.dominant, EOS]
    if kind == "local-glyph":
        r, c = image.marked
        return [Q_GLYPH, ROW0 + r, COL0 + c], [GLYPH0 + image.glyph, EOS]
    raise ValueError(f"unknown question kind {kind!r}")


def _split(seed: int, split_id: int, kind: str, count: int, cfg: TaskConfig, split: str) -> list[TaskInstance]:
    n_classes = cfg.colors if kind == "global-color" else cfg.glyphs
    kind_id = KINDS.index(kind)
    order_rng = np.random.default_rng([seed, split_id, kind_id, 0])
    labels = order_rng.permutation(np.arange(count) % n_classes)
    out = []
    for i, label in enumerate(labels):
        # image seeds are distinct per split, so train and test never share an image
        img_seed = [seed, split_id, kind_id, 1, i]
        rng = np.random.default_rng(img_seed)
        if kind == "global-color":
            dominant = int(label)
            glyph = int(rng.integers(cfg.glyphs))
        else:
            dominant = int(rng.integers(cfg.colors))
            glyph = int(label)
        image = make_image(rng, cfg, dominant, glyph)
        q, a = make_question(kind, image)
        out.append(TaskInstance(image, kind, q, a, split, seed=i))
    return out


def generate_dataset(
    seed: int,
    train_counts: dict[str, int],
    test_counts: dict[str, int],
    cfg: TaskConfig | None = None,
) -> tuple[list[TaskInstance], list[TaskInstance]]:
    cfg = cfg or TaskConfig()
    train, test = [], []
    for kind in KINDS:
        for counts in (train_counts, test_counts):
            if counts.get(kind, 0) < 1:
                raise ValueError(f"need at least one {kind} instance per split")
        train += _split(seed, 0, kind, train_counts[kind], cfg, "train")
        test += _split(seed, 1, kind, test_counts[kind], cfg, "test")
    # interleave kinds deterministically so minibatches mix both
    perm = np.random.default_rng([seed, 99]).permutation(len(train))
    train = [train[i] for i in perm]
    return train, test


def save_dataset(path: str | Path, instances: list[TaskInstance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> list[TaskInstance]:
    with open(path) as f:
        return [TaskInstance.from_dict(json.loads(line)) for line in f if line.strip()]
