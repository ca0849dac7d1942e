"""The toy vision-language policy: patch encoder, projector, causal decoder.

Vocabulary ids ``V .. V+3`` are the memory tokens, in the order short
invocation, short end, long invocation, long end.  Their embedding rows are
separate parameters so they can be trained while the base rows stay frozen;
the output head is tied to the full (V+4)-row embedding matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import Block, LayerNorm, Linear, Module, adapters, as_batch, causal_mask
from .tasks import BASE_VOCAB, CELL, DELIMITERS, GRID, NEWLINE
from .tensor import Tensor

SHORT, LONG = "short", "long"
KINDS = (SHORT, LONG)


@dataclass
class ModelConfig:
    d: int = 32
    n_dec_layers: int = 2
    n_enc_layers: int = 2
    n_heads: int = 4
    vocab_size: int = BASE_VOCAB
    grid: int = GRID
    cell: int = CELL
    channels: int = 3
    max_seq_len: int = 160
    prefix_grid: int = 1
    projector_bias: bool = False
    K: int = 8
    N_s: int = 8
    N_l: int = 16
    builder_layers: int = 2
    rank: int = 16
    alpha: float = 32.0
    drop_out_rate: float = 0.1
    target_module: tuple[str, ...] = ("q_proj", "v_proj")
    delimiter_id: int = NEWLINE
    end_lr_mult: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.target_module = tuple(self.target_module)
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if min(self.K, self.N_s, self.N_l) < 1:
            raise ValueError("K, N_s and N_l must all be >= 1")
        if self.grid % self.prefix_grid:
            raise ValueError("prefix_grid must divide grid")
        unknown = set(self.target_module) - {"q_proj", "k_proj", "v_proj", "o_proj"}
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")

    @property
    def d_vision(self) -> int:
        return self.d

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.cell * self.cell * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Vocabulary:
    base_size: int = BASE_VOCAB
    delimiters: frozenset = field(default_factory=lambda: DELIMITERS)

    @property
    def short_inv(self) -> int:
        return self.base_size

    @property
    def short_end(self) -> int:
        return self.base_size + 1

    @property
    def long_inv(self) -> int:
        return self.base_size + 2

    @property
    def long_end(self) -> int:
        return self.base_size + 3

    @property
    def size(self) -> int:
        return self.base_size + 4

    @property
    def memory_ids(self) -> tuple[int, int, int, int]:
        return (self.short_inv, self.short_end, self.long_inv, self.long_end)

    def invocation(self, kind: str) -> int:
        return self.short_inv if kind == SHORT else self.long_inv

    def end(self, kind: str) -> int:
        return self.short_end if kind == SHORT else self.long_end


def extend_vocabulary(base_embedding: np.ndarray, delimiter_id: int, seed: int,
                      noise_scale: float = 0.01) -> np.ndarray:
    """Append four memory-token rows initialised from a delimiter row.

    Each new row is the delimiter embedding plus Gaussian noise with standard
    deviation ``noise_scale * rms(delimiter row)``.
    """
    base_embedding = np.asarray(base_embedding, dtype=np.float64)
    V, d = base_embedding.shape
    if not 0 <= delimiter_id < V:
        raise ValueError(f"delimiter id {delimiter_id} outside base vocabulary of size {V}")
    row = base_embedding[delimiter_id]
    sigma = noise_scale * float(np.sqrt(np.mean(row * row)))
    rng = np.random.default_rng(seed)
    new = row + rng.normal(0.0, 1.0, size=(4, d)) * sigma
    return np.concatenate([base_embedding, new], axis=0)


def patchify(images: np.ndarray, grid: int = GRID, cell: int = CELL) -> np.ndarray:
    """(..., H, W, C) images -> (..., grid*grid, cell*cell*C) patch vectors."""
    images = np.asarray(images, dtype=np.float64)
    *lead, H, W, C = images.shape
    if H != grid * cell or W != grid * cell:
        raise ValueError(f"image is {H}x{W}, expected {grid * cell}x{grid * cell}")
    x = images.reshape(*lead, grid, cell, grid, cell, C)
    x = np.moveaxis(x, -3, -4)  # (..., grid, grid, cell, cell, C)
    return x.reshape(*lead, grid * grid, cell * cell * C)


class ToyVLM(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, dv = cfg.d, cfg.d_vision
        self.vocab = Vocabulary(cfg.vocab_size)

        self.patch_embed = Linear(cfg.patch_dim, dv, rng, bias=True)
        self.patch_pos = T.parameter(rng.normal(0.0, 0.5, size=(cfg.n_patches, dv)))
        self.enc_blocks = [Block(dv, cfg.n_heads, rng) for _ in range(cfg.n_enc_layers)]
        self.enc_ln = LayerNorm(dv)
        self.projector = Linear(dv, d, rng, bias=cfg.projector_bias)

        self.embed = T.parameter(rng.normal(0.0, 0.3, size=(cfg.vocab_size, d)))
        self.mem_inv = T.parameter(np.zeros((2, d)))
        self.mem_end = T.parameter(np.zeros((2, d)))
        self.reset_memory_tokens()
        self.dec_blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_dec_layers)]
        self.dec_ln = LayerNorm(d)

        arng = np.random.default_rng(cfg.seed + 2)
        for blk in self.dec_blocks:
            for lin in self._targets(blk):
                lin.add_adapter("policy", cfg.rank, cfg.alpha, cfg.drop_out_rate, arng)

    def reset_memory_tokens(self, noise_scale: float = 0.01) -> None:
        """Re-derive the four memory-token rows from the current delimiter row."""
        cfg = self.config
        V = cfg.vocab_size
        ext = extend_vocabulary(self.embed.data, cfg.delimiter_id, cfg.seed + 1, noise_scale)
        self.mem_inv.data = ext[[V, V + 2]]
        self.mem_end.data = ext[[V + 1, V + 3]]

    # -- parameter groups -----------------------------------------------
    def _targets(self, blk: Block) -> list[Linear]:
        names = {"q_proj": blk.attn.q, "k_proj": blk.attn.k, "v_proj": blk.attn.v,
                 "o_proj": blk.attn.o}
        return [names[t] for t in self.config.target_module]

    def adapter_targets(self, stack: str) -> list[Linear]:
        blocks = self.enc_blocks if stack == "encoder" else self.dec_blocks
        return [lin for blk in blocks for lin in self._targets(blk)]

    def base_parameters(self) -> dict[str, Tensor]:
        params = self.named_parameters("vlm.")
        params.pop("vlm.mem_inv")
        params.pop("vlm.mem_end")
        return params

    def policy_parameters(self) -> dict[str, Tensor]:
        """Stage II trainables: memory-token rows plus the decoder policy adapter."""
        out = {"vlm.mem_inv": self.mem_inv, "vlm.mem_end": self.mem_end}
        for i, blk in enumerate(self.dec_blocks):
            out.update(blk.named_adapters("policy", f"vlm.adapter.policy.dec_blocks.{i}."))
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base_parameters(), **self.policy_parameters()}

    # -- embeddings -------------------------------------------------------
    def embedding_matrix(self) -> Tensor:
        """Full (V+4, d) matrix; memory rows ordered short-inv, short-end, long-inv, long-end."""
        mem = T.stack([self.mem_inv[0], self.mem_end[0], self.mem_inv[1], self.mem_end[1]])
        return T.concat([self.embed, mem], axis=0)

    def token_embeddings(self) -> np.ndarray:
        return self.embedding_matrix().data

    # -- vision -----------------------------------------------------------
    def patch_inputs(self, patches) -> Tensor:
        """Patch vectors (..., y, patch_dim) -> encoder inputs with positions added."""
        patches = T.as_tensor(patches)
        if patches.shape[-2:] != (self.config.n_patches, self.config.patch_dim):
            raise ValueError(
                f"patch grid {patches.shape[-2:]} does not match "
                f"({self.config.n_patches}, {self.config.patch_dim})")
        return self.patch_embed(patches) + self.patch_pos

    def encoder_stack(self, x: Tensor, record: list | None = None) -> Tensor:
        x, squeeze = as_batch(x)
        for blk in self.enc_blocks:
            x = blk(x, None, record)
        x = self.enc_ln(x)
        return x.reshape(x.shape[1:]) if squeeze else x

    def encode_image(self, images) -> Tensor:
        """Images (..., 16, 16, 3) -> visual hidden states (..., y, d_vision)."""
        patches = patchify(images, self.config.grid, self.config.cell)
        return self.encoder_stack(self.patch_inputs(patches))

    def project_visual(self, tokens) -> Tensor:
        tokens = T.as_tensor(tokens)
        if tokens.shape[-1] != self.config.d_vision:
            raise ValueError(f"projector expects width {self.config.d_vision}, got {tokens.shape[-1]}")
        return self.projector(tokens)

    def visual_prefix(self, projected: Tensor) -> Tensor:
        """Average-pool projected patch tokens down to ``prefix_grid**2`` tokens."""
        g, p = self.config.grid, self.config.prefix_grid
        if p == g:
            return projected
        lead = projected.shape[:-2]
        d = projected.shape[-1]
        f = g // p
        x = projected.reshape(*lead, p, f, p, f, d)
        x = x.mean(axis=(len(lead) + 1, len(lead) + 3))
        return x.reshape(*lead, p * p, d)

    # -- decoder ----------------------------------------------------------
    def decoder_stack(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x, squeeze = as_batch(x)
        n = x.shape[1]
        if n > self.config.max_seq_len:
            raise ValueError(f"context of {n} positions exceeds max_seq_len={self.config.max_seq_len}")
        m = causal_mask(n) if mask is None else mask
        for blk in self.dec_blocks:
            x = blk(x, m)
        x = self.dec_ln(x)
        return x.reshape(x.shape[1:]) if squeeze else x

    def logits(self, hidden: Tensor, E: Tensor | None = None) -> Tensor:
        E = self.embedding_matrix() if E is None else E
        return hidden @ E.transpose()

    def decode_step(self, context, position: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Logits at ``position`` (default: last) and hidden states up to it.

        ``context`` holds input embeddings (n, d).  The policy adapter is active.
        """
        context = T.as_tensor(context)
        n = context.shape[0]
        if n == 0:
            raise ValueError("decode_step needs a nonempty context")
        position = n - 1 if position is None else position
        with T.no_grad(), adapters("policy"):
            h = self.decoder_stack(context[: position + 1])
            logits = self.logits(h[position:position + 1])
        return logits.data[0], h.data
