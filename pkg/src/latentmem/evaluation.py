"""Held-out evaluation: score gains, harmful invocations and ablation modes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import DecodePolicy, Trajectory, generate
from .grpo import delta_score
from .memory import MemorySystem
from .tasks import TaskInstance, sample_task, score_tokens
from .vlm import KINDS, LONG, SHORT, ToyVLM

ABLATION_MODES = ("vanilla", "random-25", "random-50", "random-75", "random-100",
                  "short-only", "long-only", "full")


def held_out_suite(families: Sequence[str], n: int, seed_base: int = 10_000_000) -> list[TaskInstance]:
    """``n`` tasks cycling through ``families`` on seeds disjoint from training."""
    return [sample_task(families[i % len(families)], seed_base + i) for i in range(n)]


def run(model: ToyVLM, memory: MemorySystem | None, task: TaskInstance, policy: DecodePolicy,
        seed: int, cache: dict | None = None) -> Trajectory:
    tr = generate(model, memory, task.image, task.instruction, policy, seed, task.task_id, cache)
    tr.score = score_tokens(tr.output_tokens, task)
    return tr


def forced_policy(max_new_tokens: int = 8, p: float = 1.0, kinds=KINDS,
                  eligibility: str = "delimiter") -> DecodePolicy:
    """Greedy decoding with engine-forced invocations and noiseless memory."""
    return DecodePolicy(greedy=True, max_new_tokens=max_new_tokens, invocation="forced",
                        force_prob=p, kinds=tuple(kinds), eligibility=eligibility)


def mean_delta_score(model: ToyVLM, memory: MemorySystem, tasks: Sequence[TaskInstance],
                     policy: DecodePolicy, seed: int = 0) -> float:
    """Mean S(tau) - S(tau_base) with tau_base the memory-masked rollout on the same seed."""
    gains = []
    base_policy = policy.with_(invocation="forbid")
    for i, task in enumerate(tasks):
        tr = run(model, memory, task, policy, seed + i)
        base = run(model, None, task, base_policy, seed + i)
        gains.append(delta_score(tr, base))
    return float(np.mean(gains))


@dataclass
class HarmReport:
    invoking: int
    harmful: int
    samples: int

    @property
    def fraction(self) -> float:
        """Harmful share of invoking trajectories (0 when nothing invokes)."""
        return self.harmful / self.invoking if self.invoking else 0.0

    @property
    def invocation_rate(self) -> float:
        return self.invoking / self.samples if self.samples else 0.0


def harmful_invocations(model: ToyVLM, memory: MemorySystem, tasks: Sequence[TaskInstance],
                        policy: DecodePolicy, samples_per_task: int, seed: int = 0) -> HarmReport:
    """Count invoking trajectories whose score falls below their memory-free twin."""
    invoking = harmful = total = 0
    base_policy = policy.with_(invocation="forbid")
    for i, task in enumerate(tasks):
        cache: dict = {}
        for j in range(samples_per_task):
            s = seed + i * samples_per_task + j
            tr = run(model, memory, task, policy, s, cache)
            total += 1
            if not tr.invocations:
                continue
            base = run(model, None, task, base_policy, s, cache)
            invoking += 1
            harmful += tr.score < base.score
    return HarmReport(invoking, harmful, total)


def mode_policy(mode: str, max_new_tokens: int = 8, temperature: float = 1.0,
                greedy: bool = True) -> DecodePolicy:
    """Decoding policy for an ablation mode."""
    common = dict(max_new_tokens=max_new_tokens, temperature=temperature, greedy=greedy)
    if mode == "vanilla":
        return DecodePolicy(invocation="forbid", **common)
    if mode.startswith("random-"):
        p = int(mode.split("-", 1)[1]) / 100.0
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        return DecodePolicy(invocation="forced", force_prob=p, eligibility="delimiter", **common)
    if mode == "short-only":
        return DecodePolicy(invocation="model", eligibility="anywhere", kinds=(SHORT,), **common)
    if mode == "long-only":
        return DecodePolicy(invocation="model", eligibility="anywhere", kinds=(LONG,), **common)
    if mode == "full":
        return DecodePolicy(invocation="model", eligibility="anywhere", **common)
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def evaluate_mode(model: ToyVLM, memory: MemorySystem, tasks: Sequence[TaskInstance], mode: str,
                  seed: int = 0, **policy_kw) -> tuple[float, list[Trajectory]]:
    policy = mode_policy(mode, **policy_kw)
    trajs = [run(model, memory, t, policy, seed + i) for i, t in enumerate(tasks)]
    return float(np.mean([t.score for t in trajs])), trajs
