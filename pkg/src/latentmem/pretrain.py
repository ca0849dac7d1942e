"""Supervised pretraining of the base policy on the task families.

The base model sees a pooled visual prefix, the instruction and the target
answer.  Some examples also carry a "glimpse": projected per-cell visual
tokens spliced into the answer between newline tokens, in the same place a
latent span sits at inference time.  This makes mid-stream visual vectors
in-distribution for the decoder that later stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamW, ParamGroup
from .tasks import BOS, FAMILIES, GLYPH_TOKENS, GRID, NEWLINE, TaskInstance, sample_task
from .vlm import ToyVLM, patchify

PREFIX = -1  # placeholder for the pooled visual prefix token


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    glimpse_prob: float = 0.5
    target_in_glimpse: float = 0.7
    families: tuple[str, ...] = FAMILIES
    seed_base: int = 0


def _glimpse(rng: np.random.Generator, target_cell: int | None, p_target: float) -> list[int]:
    n_cells = GRID * GRID
    size = int(rng.integers(1, n_cells + 1))
    cells = list(rng.permutation(n_cells)[:size])
    if target_cell is not None:
        cells = [c for c in cells if c != target_cell]
        if rng.random() < p_target:
            cells.insert(int(rng.integers(len(cells) + 1)), target_cell)
        cells = cells[:size] if cells else [int(rng.integers(n_cells))]
    return [int(c) for c in cells]


def answer_cells(task: TaskInstance) -> list[int | None]:
    """The cell that holds each answer segment's evidence (None for counts)."""
    if task.family == "count":
        return [None]
    out = []
    if task.query_cell is not None:
        out.append(task.query_cell)
    if task.family in ("rule", "mixed"):
        glyph = GLYPH_TOKENS.index(task.answer[-1])
        # exactly one cell carries the rule answer by construction
        out.append(next(i for i, (g, _) in enumerate(task.cells) if g == glyph))
    return out


def build_sequence(task: TaskInstance, rng: np.random.Generator, glimpse_prob: float,
                   p_target: float) -> tuple[list, list[int]]:
    """Stream layout and loss positions.

    Entries are token ids, ``PREFIX`` or ``("cell", j)`` for a glimpse row.
    ``loss_at`` lists positions whose *next* entry is supervised.
    """
    seq: list = [BOS, PREFIX, *task.instruction]
    loss_at: list[int] = []
    segments = []
    cur: list[int] = []
    for tok in task.target:
        if tok == NEWLINE and cur:
            segments.append(cur)
            cur = []
        cur.append(tok)
    segments.append(cur)
    cells = answer_cells(task)
    for k, seg in enumerate(segments):
        for j, tok in enumerate(seg):
            loss_at.append(len(seq) - 1)
            seq.append(tok)
            if j == 0 and tok == NEWLINE and rng.random() < glimpse_prob:
                if rng.random() < 0.5:
                    seq.append(NEWLINE)
                seq += [("cell", c) for c in _glimpse(rng, cells[min(k, len(cells) - 1)], p_target)]
                seq.append(NEWLINE)
    return seq, loss_at


def batch_loss(model: ToyVLM, tasks: list[TaskInstance], rng: np.random.Generator,
               cfg: PretrainConfig) -> T.Tensor:
    B = len(tasks)
    V = model.config.vocab_size
    n_p = model.config.n_patches
    images = np.stack([t.image for t in tasks])
    proj = model.project_visual(model.encode_image(images))          # (B, y, d)
    prefix = model.visual_prefix(proj)                                # (B, 1, d)
    d = proj.shape[-1]
    src = T.concat([model.embed, proj.reshape(B * n_p, d), prefix.reshape(B * prefix.shape[1], d)], axis=0)
    seqs = [build_sequence(t, rng, cfg.glimpse_prob, cfg.target_in_glimpse) for t in tasks]
    n = max(len(s) for s, _ in seqs)
    index = np.zeros((B, n), dtype=np.int64)
    rows, cols, targets = [], [], []
    for b, (seq, loss_at) in enumerate(seqs):
        for i, e in enumerate(seq):
            if e == PREFIX:
                index[b, i] = V + B * n_p + b * prefix.shape[1]
            elif isinstance(e, tuple):
                index[b, i] = V + b * n_p + e[1]
            else:
                index[b, i] = e
        for pos in loss_at:
            rows.append(b)
            cols.append(pos)
            targets.append(seq[pos + 1])
    hidden = model.decoder_stack(src[index])
    h = hidden[np.array(rows), np.array(cols)]
    logp = T.log_softmax(h @ model.embed.transpose())
    picked = logp[np.arange(len(targets)), np.array(targets)]
    return -picked.mean()


def pretrain(model: ToyVLM, cfg: PretrainConfig, seed: int, log=None) -> list[float]:
    """Train the base parameters in place; returns the loss curve."""
    rng = np.random.default_rng([seed, 101])
    opt = AdamW([ParamGroup(model.base_parameters())], cfg.learning_rate, cfg.warmup_ratio,
                weight_decay=cfg.weight_decay)
    losses = []
    for step in range(cfg.steps):
        fams = rng.choice(cfg.families, size=cfg.batch_size)
        seeds = rng.integers(cfg.seed_base, cfg.seed_base + 10**6, size=cfg.batch_size)
        tasks = [sample_task(str(f), int(s)) for f, s in zip(fams, seeds)]
        opt.zero_grad()
        loss = batch_loss(model, tasks, rng, cfg)
        T.backward(loss)
        opt.step(step / cfg.steps)
        losses.append(float(loss.data))
        if log is not None and step % 100 == 0:
            log(f"pretrain step {step} loss {losses[-1]:.4f}")
    model.reset_memory_tokens()
    return losses
