"""Deterministic synthetic "shape-world" images with captions and VQA triples.

An 8x8 grid is split into four 4x4 quadrants.  A scene holds one or two
shapes of distinct kinds in distinct quadrants; each shape is a 3x3 stamp at
one of four offsets inside its quadrant, painted at a dim (0.4) or bright
(0.9) level.

Randomness comes from numpy's Philox counter-based generator keyed through
``SeedSequence([seed, stream_tag])``, so every stream is reproducible across
platforms and independent of the others.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPECIALS = ("[PAD]", "[CLS]", "[MASK]", "[ANS]", "[END]", "[SEP]")
SHAPES = ("square", "cross", "diag")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
BRIGHTNESS = {"dim": 0.4, "bright": 0.9}
CONTENT_WORDS = (
    *SHAPES, *QUADRANTS, *BRIGHTNESS,
    "is", "there", "a", "what", "shape", "at", "where", "the", "how", "yes", "no",
    "an", "image", "of", "with", "and", "in", "shows", "corner", "one", "two",
    "shapes", "which", "are", "any", "does", "contain", "empty", "dark", "light",
    "object", "scene", "picture",
)

STAMPS = {
    "square": np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.float64),
    "cross": np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.float64),
    "diag": np.eye(3),
}

# stream tags for Philox keys
_PRETRAIN, _VQA = 1, 2


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *tags])))


class Vocab:
    """Fixed token table: six specials at ids 0-5, then content words."""

    def __init__(self, words: Sequence[str] = SPECIALS + CONTENT_WORDS):
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.ids[word]

    def tokenize(self, words: Iterable[str]) -> list[int]:
        out = []
        for w in words:
            if w == "[PAD]":
                raise ValueError("[PAD] is not a tokenizable word")
            try:
                out.append(self.ids[w])
            except KeyError:
                raise KeyError(f"unknown word {w!r}") from None
        return out

    def detokenize(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]


VOCAB = Vocab()


@dataclass(frozen=True)
class Shape:
    kind: str
    quadrant: str
    brightness: str
    offset: tuple[int, int]  # top-left corner of the 3x3 stamp inside its quadrant, each 0 or 1


@dataclass(frozen=True)
class ShapeScene:
    shapes: tuple[Shape, ...]

    def render(self) -> np.ndarray:
        grid = np.zeros((8, 8))
        for s in self.shapes:
            q = QUADRANTS.index(s.quadrant)
            r0 = 4 * (q // 2) + s.offset[0]
            c0 = 4 * (q % 2) + s.offset[1]
            grid[r0:r0 + 3, c0:c0 + 3] = STAMPS[s.kind] * BRIGHTNESS[s.brightness]
        return grid

    @property
    def grid(self) -> np.ndarray:
        return self.render()

    def at(self, quadrant: str) -> Shape | None:
        return next((s for s in self.shapes if s.quadrant == quadrant), None)

    def find(self, kind: str) -> Shape | None:
        return next((s for s in self.shapes if s.kind == kind), None)

    def caption_words(self) -> list[str]:
        words: list[str] = []
        for i, s in enumerate(self.shapes):
            if i:
                words.append("[SEP]")
            words += [s.brightness, s.kind, s.quadrant]
        return words


@dataclass(frozen=True)
class VqaSample:
    scene: ShapeScene
    question_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]
    question_type: str  # "open" | "closed"

    @property
    def grid(self) -> np.ndarray:
        return self.scene.render()


def random_scene(rng: np.random.Generator) -> ShapeScene:
    n = 1 + int(rng.integers(2))
    kinds = rng.permutation(len(SHAPES))[:n]
    quads = np.sort(rng.permutation(len(QUADRANTS))[:n])
    shapes = []
    for k, q in zip(kinds, quads):
        shapes.append(Shape(SHAPES[k], QUADRANTS[q],
                            ("dim", "bright")[int(rng.integers(2))],
                            (int(rng.integers(2)), int(rng.integers(2)))))
    return ShapeScene(tuple(shapes))


def text_ids(words: Sequence[str]) -> tuple[int, ...]:
    """[CLS] followed by the word ids."""
    return (VOCAB["[CLS]"], *VOCAB.tokenize(words))


def gen_pretrain_set(seed: int, n: int) -> list[tuple[ShapeScene, tuple[int, ...]]]:
    """``n`` (scene, caption ids) pairs; captions start with [CLS]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, _PRETRAIN)
    out = []
    for _ in range(n):
        scene = random_scene(rng)
        out.append((scene, text_ids(scene.caption_words())))
    return out


def _closed_question(scene: ShapeScene, rng) -> tuple[list[str], str]:
    want_yes = bool(rng.integers(2))
    if rng.integers(2):
        present = [s.kind for s in scene.shapes]
        pool = present if want_yes else [k for k in SHAPES if k not in present]
        kind = pool[int(rng.integers(len(pool)))]
        return ["is", "there", "a", kind], "yes" if want_yes else "no"
    if want_yes:
        s = scene.shapes[int(rng.integers(len(scene.shapes)))]
        return ["is", "there", "a", s.kind, "at", s.quadrant], "yes"
    # a (kind, quadrant) combination that is absent
    options = [(k, q) for k in SHAPES for q in QUADRANTS
               if not any(s.kind == k and s.quadrant == q for s in scene.shapes)]
    kind, quad = options[int(rng.integers(len(options)))]
    return ["is", "there", "a", kind, "at", quad], "no"


def _open_question(scene: ShapeScene, rng) -> tuple[list[str], str]:
    s = scene.shapes[int(rng.integers(len(scene.shapes)))]
    form = int(rng.integers(3))
    if form == 0:
        return ["what", "shape", "is", "at", "the", s.quadrant], s.kind
    if form == 1:
        return ["where", "is", "the", s.kind], s.quadrant
    return ["how", "bright", "is", "the", s.kind], s.brightness


def answer_question(scene: ShapeScene, words: Sequence[str]) -> str:
    """Rule-based evaluation of a templated question on a scene."""
    w = list(words)
    if w[:3] == ["is", "there", "a"]:
        kind = w[3]
        if len(w) == 4:
            return "yes" if scene.find(kind) else "no"
        s = scene.at(w[5])
        return "yes" if s is not None and s.kind == kind else "no"
    if w[:2] == ["what", "shape"]:
        return scene.at(w[-1]).kind
    if w[0] == "where":
        return scene.find(w[-1]).quadrant
    if w[0] == "how":
        return scene.find(w[-1]).brightness
    raise ValueError(f"unrecognized question {' '.join(w)!r}")


def make_vqa_sample(scene: ShapeScene, rng) -> VqaSample:
    closed = bool(rng.integers(2))
    words, answer = (_closed_question if closed else _open_question)(scene, rng)
    answer_ids = (VOCAB["[ANS]"], VOCAB[answer], VOCAB["[END]"])
    return VqaSample(scene, text_ids(words), answer_ids, "closed" if closed else "open")


def gen_vqa_set(seed: int, n_train: int = 256, n_val: int = 256) -> tuple[list[VqaSample], list[VqaSample]]:
    """Train/validation splits over pairwise-distinct scenes."""
    if n_train < 1 or n_val < 1:
        raise ValueError("split sizes must be >= 1")
    rng = make_rng(seed, _VQA)
    seen: set[ShapeScene] = set()
    samples = []
    while len(samples) < n_train + n_val:
        scene = random_scene(rng)
        if scene in seen:
            continue
        seen.add(scene)
        samples.append(make_vqa_sample(scene, rng))
    return samples[:n_train], samples[n_train:]


# ------------------------------------------------------------------ batching

def pad_ids(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def stack_grids(scenes: Sequence[ShapeScene]) -> np.ndarray:
    return np.stack([s.render() for s in scenes])


# -------------------------------------------------------------------- export

def export_jsonl(records, path) -> Path:
    """One JSON object per line: 64-float grid, token id arrays, type tag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            if isinstance(rec, VqaSample):
                row = {"type": rec.question_type, "grid": rec.grid.ravel().tolist(),
                       "question_ids": list(rec.question_ids), "answer_ids": list(rec.answer_ids)}
            else:
                scene, caption = rec
                row = {"type": "caption", "grid": scene.render().ravel().tolist(),
                       "caption_ids": list(caption)}
            fh.write(json.dumps(row) + "\n")
    return path
