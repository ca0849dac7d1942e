"""Procedural glyph-grid tasks with exact scoring.

Images are 16x16 RGB grids of 4x4 cells.  Each cell is empty or holds one of
eight glyph shapes in one of four colours.  Four families:

* ``count``    -- "count <colour> ?"            -> number of glyphs in that colour
* ``retrieve`` -- "glyph at r<i> c<j> ?"        -> glyph in that cell
* ``rule``     -- "which has <attribute> ?"     -> the unique glyph whose rulebook
                  attribute matches (needs the rulebook plus the image)
* ``mixed``    -- a retrieve question followed by a rule question, same image
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

GRID = 4
CELL = 4
IMAGE_SIZE = GRID * CELL
N_GLYPHS = 8
BASE_VOCAB = 128

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
COLOR_NAMES = tuple(COLORS)
ATTRIBUTES = ("promo", "sale", "fresh", "rare")

_GLYPH_ROWS = (
    "XXXX X..X X..X XXXX",
    "X..X .XX. .XX. X..X",
    ".XX. XXXX XXXX .XX.",
    "X... XX.. XXX. XXXX",
    "XXXX .... XXXX ....",
    "X.X. .X.X X.X. .X.X",
    ".X.. XXXX .X.. .X..",
    "XXXX X... X... X...",
)
GLYPH_SHAPES = np.array(
    [[[c == "X" for c in row] for row in g.split()] for g in _GLYPH_ROWS], dtype=np.float64
)

# token table --------------------------------------------------------------
_WORDS = (
    ["<pad>", "<bos>", "<eos>", ".", "\n", "?", "count", "glyph", "at", "which", "has"]
    + [f"r{i}" for i in range(GRID)]
    + [f"c{j}" for j in range(GRID)]
    + list(COLOR_NAMES)
    + [f"g{k}" for k in range(N_GLYPHS)]
    + [f"n{k}" for k in range(GRID * GRID + 1)]
    + list(ATTRIBUTES)
)
TOKENS = _WORDS + [f"<unused{i}>" for i in range(BASE_VOCAB - len(_WORDS))]
TOKEN_ID = {w: i for i, w in enumerate(TOKENS)}

PAD, BOS, EOS = TOKEN_ID["<pad>"], TOKEN_ID["<bos>"], TOKEN_ID["<eos>"]
PERIOD, NEWLINE, QMARK = TOKEN_ID["."], TOKEN_ID["\n"], TOKEN_ID["?"]
DELIMITERS = frozenset({PERIOD, NEWLINE})
GLYPH_TOKENS = tuple(TOKEN_ID[f"g{k}"] for k in range(N_GLYPHS))
NUMBER_TOKENS = tuple(TOKEN_ID[f"n{k}"] for k in range(GRID * GRID + 1))
STRUCTURAL = frozenset({PAD, BOS, EOS, PERIOD, NEWLINE})

FAMILIES = ("count", "retrieve", "rule", "mixed")


@dataclass(frozen=True)
class RuleBook:
    """Glyph class -> semantic attribute.  Fixed for the whole run."""

    version: str = "rulebook-v1"
    table: tuple[str, ...] = ("promo", "sale", "fresh", "rare", "promo", "sale", "fresh", "rare")

    def attribute(self, glyph: int) -> str:
        return self.table[glyph]

    def glyphs_with(self, attribute: str) -> tuple[int, ...]:
        return tuple(g for g, a in enumerate(self.table) if a == attribute)


RULEBOOK = RuleBook()


@dataclass(frozen=True)
class TaskInstance:
    family: str
    seed: int
    image: np.ndarray            # (16, 16, 3) in {0, 1}
    instruction: tuple[int, ...]
    answer: tuple[int, ...]      # scored content tokens
    target: tuple[int, ...]      # full supervised output, ends with EOS
    cells: tuple[tuple[int, int], ...]  # (glyph, colour) per cell, glyph -1 when empty
    query_cell: int | None = None

    @property
    def task_id(self) -> str:
        return f"{self.family}-{self.seed}"


def render(cells: Sequence[tuple[int, int]]) -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for idx, (glyph, color) in enumerate(cells):
        if glyph < 0:
            continue
        r, c = divmod(idx, GRID)
        rgb = np.array(COLORS[COLOR_NAMES[color]])
        patch = GLYPH_SHAPES[glyph][:, :, None] * rgb
        img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = patch
    return img


def _random_cells(rng: np.random.Generator, empty_prob: float = 0.25,
                  glyph_pool: Sequence[int] = tuple(range(N_GLYPHS))) -> list[tuple[int, int]]:
    cells = []
    for _ in range(GRID * GRID):
        if rng.random() < empty_prob:
            cells.append((-1, 0))
        else:
            cells.append((int(rng.choice(glyph_pool)), int(rng.integers(len(COLORS)))))
    return cells


def _rule_cells(rng: np.random.Generator, attribute: str) -> tuple[list[tuple[int, int]], int]:
    """Cells where exactly one glyph carries ``attribute``."""
    others = [g for g in range(N_GLYPHS) if RULEBOOK.attribute(g) != attribute]
    cells = _random_cells(rng, glyph_pool=others)
    answer = int(rng.choice(RULEBOOK.glyphs_with(attribute)))
    slot = int(rng.integers(GRID * GRID))
    cells[slot] = (answer, int(rng.integers(len(COLORS))))
    return cells, answer


def _retrieve_question(rng, cells) -> tuple[list[int], int, int]:
    filled = [i for i, (g, _) in enumerate(cells) if g >= 0]
    idx = int(rng.choice(filled))
    r, c = divmod(idx, GRID)
    q = [TOKEN_ID["glyph"], TOKEN_ID["at"], TOKEN_ID[f"r{r}"], TOKEN_ID[f"c{c}"], QMARK]
    return q, cells[idx][0], idx


def sample_task(family: str, seed: int) -> TaskInstance:
    """Deterministic task instance for ``(family, seed)``."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng([FAMILIES.index(family), seed])
    query_cell = None
    if family == "count":
        cells = _random_cells(rng)
        color = int(rng.integers(len(COLORS)))
        n = sum(1 for g, c in cells if g >= 0 and c == color)
        instruction = [TOKEN_ID["count"], TOKEN_ID[COLOR_NAMES[color]], QMARK]
        answers = [[NUMBER_TOKENS[n]]]
    elif family == "retrieve":
        cells = _random_cells(rng)
        instruction, glyph, query_cell = _retrieve_question(rng, cells)
        answers = [[GLYPH_TOKENS[glyph]]]
    else:
        attribute = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
        cells, glyph = _rule_cells(rng, attribute)
        rule_q = [TOKEN_ID["which"], TOKEN_ID["has"], TOKEN_ID[attribute], QMARK]
        if family == "rule":
            instruction = rule_q
            answers = [[GLYPH_TOKENS[glyph]]]
        else:
            ret_q, ret_glyph, query_cell = _retrieve_question(rng, cells)
            instruction = ret_q + rule_q
            answers = [[GLYPH_TOKENS[ret_glyph]], [GLYPH_TOKENS[glyph]]]
    target: list[int] = []
    for part in answers:
        target += [NEWLINE] + part
    target.append(EOS)
    return TaskInstance(
        family=family,
        seed=seed,
        image=render(cells),
        instruction=tuple(instruction),
        answer=tuple(t for part in answers for t in part),
        target=tuple(target),
        cells=tuple(cells),
        query_cell=query_cell,
    )


def task_suite(families: Iterable[str], seeds: Iterable[int]) -> list[TaskInstance]:
    return [sample_task(f, s) for s in seeds for f in families]


# scoring -------------------------------------------------------------------

def content_tokens(tokens: Iterable[int]) -> list[int]:
    """Drop structural and memory tokens, keep what is scored."""
    return [t for t in tokens if t < BASE_VOCAB and t not in STRUCTURAL]


def token_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def score_tokens(output: Iterable[int], instance: TaskInstance) -> float:
    """1.0 on exact match of content tokens, otherwise token-level F1."""
    pred = content_tokens(output)
    gold = list(instance.answer)
    if pred == gold:
        return 1.0
    return min(token_f1(pred, gold), 1.0 - 1e-12)


def score(trajectory, instance: TaskInstance) -> float:
    return score_tokens(trajectory.output_tokens, instance)


# dumps ---------------------------------------------------------------------

def image_hex(image: np.ndarray) -> list[str]:
    bits = (image[..., 0] > 0.5) * 4 + (image[..., 1] > 0.5) * 2 + (image[..., 2] > 0.5) * 1
    return ["".join("0123456789abcdef"[int(v)] for v in row) for row in bits]


def image_from_hex(rows: Sequence[str]) -> np.ndarray:
    vals = np.array([[int(ch, 16) for ch in row] for row in rows])
    return np.stack([(vals >> 2) & 1, (vals >> 1) & 1, vals & 1], axis=-1).astype(np.float64)


def task_record(inst: TaskInstance) -> str:
    return json.dumps({
        "family": inst.family,
        "seed": inst.seed,
        "image": image_hex(inst.image),
        "instruction": [TOKENS[t] for t in inst.instruction],
        "answer": [TOKENS[t] for t in inst.answer],
    })


def decode_tokens(ids: Iterable[int]) -> str:
    out = []
    for t in ids:
        out.append(TOKENS[t] if t < BASE_VOCAB else f"<mem{t - BASE_VOCAB}>")
    return " ".join(out)
