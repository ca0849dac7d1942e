"""Autoregressive generation with latent memory insertion.

The engine decodes one token at a time.  When an invocation token appears
(sampled by the policy or forced by the engine) it builds a memory query from
the current visual + segment hidden states, forms the latent span, splices
it into the stream and appends the matching end token.  Span insertion is
atomic, so the stream is always well formed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .layers import adapters
from .memory import MemorySystem, sample_memory
from .tasks import BASE_VOCAB, BOS, EOS, TaskInstance, score_tokens
from .vlm import KINDS, LONG, SHORT, ToyVLM, Vocabulary, patchify

NEG_INF = -np.inf
ELIGIBILITY = ("delimiter", "anywhere")
INVOCATION_MODES = ("model", "forbid", "forced")


@dataclass(frozen=True)
class DecodePolicy:
    temperature: float = 1.0
    greedy: bool = False
    top_k: int | None = None
    max_new_tokens: int = 8
    constrained: bool = True
    eligibility: str = "delimiter"
    invocation: str = "model"
    force_prob: float = 1.0
    kinds: tuple[str, ...] = KINDS
    swap_kinds: bool = False
    memory_sigma: float = 0.0
    max_invocations: int = 8

    def __post_init__(self):
        if self.eligibility not in ELIGIBILITY:
            raise ValueError(f"eligibility must be one of {ELIGIBILITY}")
        if self.invocation not in INVOCATION_MODES:
            raise ValueError(f"invocation must be one of {INVOCATION_MODES}")
        if not self.greedy and self.temperature <= 0:
            raise ValueError("sampling needs temperature > 0")
        if self.memory_sigma < 0:
            raise ValueError("memory_sigma must be >= 0")
        if not set(self.kinds) <= set(KINDS):
            raise ValueError(f"kinds must be drawn from {KINDS}")

    def with_(self, **kw) -> "DecodePolicy":
        return replace(self, **kw)


@dataclass
class Element:
    token: int | None = None
    vector: np.ndarray | None = None
    memory: str | None = None  # kind of a latent vector

    @property
    def is_latent(self) -> bool:
        return self.token is None


@dataclass
class Step:
    """One policy-sampled discrete token."""

    element: int
    token: int
    logprob: float
    masked: tuple[int, ...]


@dataclass
class Invocation:
    element: int       # index of the invocation token in ``elements``
    position: int      # index among discrete output tokens
    kind: str
    length: int
    forced: bool
    H: np.ndarray
    X: np.ndarray
    mean: np.ndarray
    sample: np.ndarray
    logdensity: float
    sigma: float


@dataclass
class Trajectory:
    task_id: str
    seed: int
    prompt: list[int]
    prefix: np.ndarray
    elements: list[Element] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    invocations: list[Invocation] = field(default_factory=list)
    temperature: float = 1.0
    forward_positions: int = 0
    score: float | None = None

    @property
    def output_tokens(self) -> list[int]:
        return [e.token for e in self.elements if e.token is not None]

    @property
    def prompt_length(self) -> int:
        """Stream positions before the first generated element."""
        return 1 + len(self.prefix) + len(self.prompt) - 1

    def logprob_sum(self) -> float:
        return float(sum(s.logprob for s in self.steps))

    def to_record(self) -> dict:
        elems = []
        for e in self.elements:
            if e.is_latent:
                elems.append({"kind": "latent", "memory": e.memory})
            else:
                elems.append({"kind": "token", "id": int(e.token)})
        return {
            "task_id": self.task_id,
            "seed": int(self.seed),
            "elements": elems,
            "output_length": len(self.output_tokens),
            "invocations": [
                {"position": inv.position, "element": inv.element, "kind": inv.kind,
                 "length": inv.length, "forced": inv.forced}
                for inv in self.invocations
            ],
            "score": self.score,
        }


def detect_invocation(token_id: int, vocab: Vocabulary) -> str | None:
    """Map an invocation token to its memory kind; everything else -> None."""
    if token_id == vocab.short_inv:
        return SHORT
    if token_id == vocab.long_inv:
        return LONG
    return None


@dataclass
class StreamState:
    in_span: bool = False
    invocation_allowed: bool = True
    allowed_kinds: tuple[str, ...] = KINDS


def constrain_logits(logits: np.ndarray, state: StreamState, vocab: Vocabulary) -> np.ndarray:
    out = np.array(logits, dtype=np.float64, copy=True)
    if state.in_span:
        out[:] = NEG_INF
        return out
    out[vocab.short_end] = NEG_INF
    out[vocab.long_end] = NEG_INF
    for kind in KINDS:
        if not state.invocation_allowed or kind not in state.allowed_kinds:
            out[vocab.invocation(kind)] = NEG_INF
    return out


def sample_token(logits: np.ndarray, temperature: float, greedy: bool, top_k: int | None,
                 rng: np.random.Generator) -> tuple[int, float]:
    """Draw from softmax(logits / temperature) over finite entries.

    Returns the token and its log-probability under the (untruncated)
    temperature-scaled distribution.
    """
    idx = np.flatnonzero(np.isfinite(logits))
    z = logits[idx] / temperature
    z = z - z.max()
    p = np.exp(z)
    total = p.sum()
    logz = np.log(total)
    if greedy:
        k = int(np.argmax(z))
    else:
        q = p
        if top_k is not None and top_k < len(idx):
            cut = np.partition(z, -top_k)[-top_k]
            q = np.where(z >= cut, p, 0.0)
        c = np.cumsum(q)
        k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        k = min(k, len(idx) - 1)
    return int(idx[k]), float(z[k] - logz)


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def encode_context(model: ToyVLM, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patch inputs, projected visual states and the pooled prefix for one image."""
    with T.no_grad():
        X = model.patch_inputs(patchify(image, model.config.grid, model.config.cell))
        proj = model.project_visual(model.encoder_stack(X))
        prefix = model.visual_prefix(proj)
    return X.data, proj.data, prefix.data


def _mean(memory: MemorySystem, kind: str, H: np.ndarray, X: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return memory.memory_mean(kind, H, X).data


def _cached(cache: dict | None, args, fn):
    if cache is None:
        return fn(args)
    parts = args if isinstance(args, tuple) else (args,)
    key = tuple(a if isinstance(a, str) else (a.shape, a.tobytes()) for a in parts)
    hit = cache.get(key)
    if hit is None:
        hit = cache[key] = fn(args)
    return hit


def generate(model: ToyVLM, memory: MemorySystem | None, image: np.ndarray,
             instruction: Sequence[int], policy: DecodePolicy, seed: int,
             task_id: str = "", cache: dict | None = None) -> Trajectory:
    """Decode one stream.

    ``cache`` (optional, caller-owned) memoises decoder passes and memory
    means by exact input bytes; sharing it across a rollout group avoids
    recomputing identical prefixes without changing any result.
    """
    vocab = model.vocab
    tok_rng, inv_rng, mem_rng = _rngs(seed)
    E = model.token_embeddings()
    X_short, proj, prefix = _cached(cache, ("image", np.asarray(image)),
                                    lambda a: encode_context(model, a[1]))

    prompt = [BOS] + list(instruction)
    rows: list[np.ndarray] = [E[BOS], *prefix, *(E[t] for t in instruction)]
    if len(rows) > model.config.max_seq_len:
        raise ValueError("instruction does not fit in max_seq_len")
    segment = [0] + list(range(1 + len(prefix), len(rows)))
    traj = Trajectory(task_id=task_id, seed=seed, prompt=prompt, prefix=prefix,
                      temperature=policy.temperature)
    ends = {vocab.short_end, vocab.long_end}
    mode = policy.invocation if memory is not None else "forbid"
    prev = prompt[-1]
    n_new = 0
    n_out = 0

    while n_new < policy.max_new_tokens:
        logits, hidden = _cached(cache, np.asarray(rows), model.decode_step)
        traj.forward_positions += len(rows)
        eligible = (policy.eligibility == "anywhere" or prev in vocab.delimiters) \
            and prev not in ends and len(traj.invocations) < policy.max_invocations

        forced = False
        if mode == "forced" and eligible and inv_rng.random() < policy.force_prob:
            kind = policy.kinds[int(inv_rng.integers(len(policy.kinds)))]
            token, step = vocab.invocation(kind), None
            forced = True
        else:
            state = StreamState(invocation_allowed=eligible and mode == "model",
                                allowed_kinds=policy.kinds)
            if policy.constrained or mode != "model":
                masked_logits = constrain_logits(logits, state, vocab)
            else:
                masked_logits = logits
            token, lp = sample_token(masked_logits, policy.temperature, policy.greedy,
                                     policy.top_k, tok_rng)
            masked = tuple(int(i) for i in np.flatnonzero(~np.isfinite(masked_logits)))
            step = Step(element=len(traj.elements), token=token, logprob=lp, masked=masked)

        kind = detect_invocation(token, vocab)
        if kind is not None and policy.swap_kinds:
            kind = LONG if kind == SHORT else SHORT
            token = vocab.invocation(kind)
            if step is not None:
                step.token = token
        if step is not None:
            traj.steps.append(step)
        traj.elements.append(Element(token=token))
        rows.append(E[token])
        n_new += 1
        n_out += 1
        prev = token
        if token == EOS:
            break
        if kind is None:
            segment.append(len(rows) - 1)
            continue

        seg_hidden = hidden[segment]
        H = np.concatenate([proj, seg_hidden], axis=0)
        X = X_short if kind == SHORT else seg_hidden
        mean = _cached(cache, (kind, H, X), lambda a: _mean(memory, *a))
        sample, logp = sample_memory(mean, policy.memory_sigma, mem_rng)
        n_span = len(sample)
        traj.forward_positions += len(H) + model.config.K + len(X) + model.config.K + n_span
        traj.invocations.append(Invocation(
            element=len(traj.elements) - 1, position=n_out - 1, kind=kind, length=n_span,
            forced=forced, H=H, X=X, mean=mean, sample=sample, logdensity=logp,
            sigma=policy.memory_sigma))
        for vec in sample:
            traj.elements.append(Element(vector=vec, memory=kind))
            rows.append(vec)
        end = vocab.end(kind)
        traj.elements.append(Element(token=end))
        rows.append(E[end])
        n_new += 1
        n_out += 1
        prev = end
        segment = []
        if len(rows) >= model.config.max_seq_len:
            break
    return traj


def generate_plain(model: ToyVLM, image: np.ndarray, instruction: Sequence[int],
                   policy: DecodePolicy, seed: int) -> list[int]:
    """Reference decoder over the base vocabulary only -- no memory machinery."""
    tok_rng, _, _ = _rngs(seed)
    E = model.token_embeddings()
    _, _, prefix = encode_context(model, image)
    rows = [E[BOS], *prefix, *(E[t] for t in instruction)]
    out: list[int] = []
    for _ in range(policy.max_new_tokens):
        logits, _ = model.decode_step(np.asarray(rows))
        token, _ = sample_token(logits[:BASE_VOCAB], policy.temperature, policy.greedy,
                                policy.top_k, tok_rng)
        out.append(token)
        rows.append(E[token])
        if token == EOS:
            break
    return out


def run_task(model: ToyVLM, memory: MemorySystem | None, task: TaskInstance,
             policy: DecodePolicy, seed: int) -> Trajectory:
    traj = generate(model, memory, task.image, task.instruction, policy, seed, task.task_id)
    traj.score = score_tokens(traj.output_tokens, task)
    return traj


# -- teacher-forced re-scoring ------------------------------------------

def stream_inputs(trajs: Sequence[Trajectory], vocab_size: int) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Gather plan for a batch of streams.

    Returns the constant rows (prefix + latent vectors), an index array
    (B, n_max) into ``[embedding rows; constant rows]`` and the true lengths.
    """
    consts: list[np.ndarray] = []
    n_const = 0
    plans = []
    for tr in trajs:
        idx = [tr.prompt[0]]
        consts.append(tr.prefix)
        idx += list(range(vocab_size + n_const, vocab_size + n_const + len(tr.prefix)))
        n_const += len(tr.prefix)
        idx += tr.prompt[1:]
        for e in tr.elements:
            if e.is_latent:
                consts.append(e.vector[None, :])
                idx.append(vocab_size + n_const)
                n_const += 1
            else:
                idx.append(e.token)
        plans.append(idx)
    lengths = np.array([len(p) for p in plans])
    index = np.zeros((len(plans), lengths.max()), dtype=np.int64)
    for i, p in enumerate(plans):
        index[i, :len(p)] = p
    return consts, index, lengths


def rescore(model: ToyVLM, trajs: Sequence[Trajectory],
            dropout_rng: np.random.Generator | None = None) -> list[T.Tensor]:
    """Log-probabilities of every policy-sampled token, recomputed in one pass.

    Differentiable in the policy parameters when grad is enabled.
    """
    vocab_size = model.vocab.size
    consts, index, lengths = stream_inputs(trajs, vocab_size)
    E = model.embedding_matrix()
    src = T.concat([E, T.Tensor(np.concatenate(consts, axis=0))], axis=0)
    with adapters("policy", dropout_rng=dropout_rng):
        hidden = model.decoder_stack(src[index])
    logits = model.logits(hidden, E)
    out = []
    for b, tr in enumerate(trajs):
        if not tr.steps:
            out.append(T.Tensor(np.zeros(0)))
            continue
        pos = np.array([tr.prompt_length + s.element - 1 for s in tr.steps])
        mask = np.zeros((len(tr.steps), vocab_size))
        for i, s in enumerate(tr.steps):
            if s.masked:
                mask[i, list(s.masked)] = NEG_INF
        rows = logits[b, pos] * (1.0 / tr.temperature)
        logp = T.log_softmax(rows, mask)
        toks = np.array([s.token for s in tr.steps])
        out.append(logp[np.arange(len(toks)), toks])
    return out


# -- well-formedness -------------------------------------------------------

def check_well_formed(traj: Trajectory, vocab: Vocabulary, spans: dict[str, int]) -> list[str]:
    """Scan a stream; return a list of violations (empty when well formed)."""
    problems = []
    els = traj.elements
    i = 0
    inv_tokens = {vocab.short_inv: SHORT, vocab.long_inv: LONG}
    end_tokens = {vocab.short_end: SHORT, vocab.long_end: LONG}
    while i < len(els):
        e = els[i]
        if e.is_latent:
            problems.append(f"latent vector outside a span at {i}")
            i += 1
            continue
        if e.token in end_tokens:
            problems.append(f"unmatched end token at {i}")
            i += 1
            continue
        if e.token in inv_tokens:
            kind = inv_tokens[e.token]
            n = 0
            j = i + 1
            while j < len(els) and els[j].is_latent:
                if els[j].memory != kind:
                    problems.append(f"latent of wrong kind at {j}")
                n += 1
                j += 1
            if n != spans[kind]:
                problems.append(f"span at {i} has {n} vectors, expected {spans[kind]}")
            if j >= len(els) or els[j].token != vocab.end(kind):
                problems.append(f"span at {i} not closed by its end token")
                i = j
            else:
                i = j + 1
            continue
        i += 1
    return problems


# -- latency ------------------------------------------------------------------

@dataclass
class LatencyReport:
    n_samples: int
    total_seconds: float
    forward_positions: int
    generated_elements: int
    invocations: int

    @property
    def seconds_per_sample(self) -> float:
        return self.total_seconds / max(self.n_samples, 1)

    @property
    def samples_per_second(self) -> float:
        return self.n_samples / self.total_seconds if self.total_seconds > 0 else float("inf")


def measure_latency(model: ToyVLM, memory: MemorySystem | None, tasks: Sequence[TaskInstance],
                    policy: DecodePolicy, seed: int, warmup: int = 2) -> LatencyReport:
    """Wall-clock a suite after ``warmup`` untimed generations."""
    for task in tasks[:warmup]:
        generate(model, memory, task.image, task.instruction, policy, seed)
    positions = elements = invs = 0
    start = time.perf_counter()
    for i, task in enumerate(tasks):
        tr = generate(model, memory, task.image, task.instruction, policy, seed + i)
        positions += tr.forward_positions
        elements += len(tr.elements)
        invs += len(tr.invocations)
    total = time.perf_counter() - start
    return LatencyReport(len(tasks), total, positions, elements, invs)


def overhead(base: LatencyReport, other: LatencyReport) -> tuple[float, float]:
    """(measured time overhead, position-count prediction) of ``other`` over ``base``."""
    measured = (other.total_seconds - base.total_seconds) / base.total_seconds
    predicted = (other.forward_positions - base.forward_positions) / base.forward_positions
    return measured, predicted


def dump_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for tr in trajs:
            fh.write(json.dumps(tr.to_record()) + "\n")
