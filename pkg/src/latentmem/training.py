"""The two GRPO stages.

Stage I trains the memory system (builder, initialisers, former adapters)
with the policy frozen; invocations are forced by the engine, first at
delimiters and then anywhere.  Its stochastic action is the Gaussian memory
sample, scored per latent row.

Stage II trains the policy's memory-token rows and decoder adapter with the
memory system frozen; the policy chooses invocations itself.  Its actions
are the sampled discrete tokens.
"""

from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import StageConfig
from .decoding import DecodePolicy, Trajectory, generate, rescore
from .grpo import (delta_score, group_advantages, group_stats, grpo_loss, kl_k3,
                   penalty_neg, penalty_type)
from .layers import adapters
from .memory import MemorySystem, gaussian_row_logdensity
from .optim import AdamW, ParamGroup
from .tasks import TaskInstance, sample_task, score_tokens
from .vlm import LONG, SHORT, ToyVLM

METRIC_FIELDS = ("stage", "epoch", "step", "phase", "lr", "sigma", "mean_S", "mean_dS",
                 "inv_rate_short", "inv_rate_long", "p_type", "p_neg", "adv_post_mean",
                 "kl", "drift_kl", "clip_frac", "loss", "seconds")


class DivergenceError(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class StageReport:
    stage: str
    steps: int
    early_stops: int
    seconds: float
    metrics: list[dict] = field(default_factory=list)
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""


def snapshot(params: Mapping[str, T.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


@contextlib.contextmanager
def swapped(params: Mapping[str, T.Tensor], values: Mapping[str, np.ndarray]):
    """Temporarily load ``values`` into ``params``."""
    saved = {k: params[k].data for k in values}
    try:
        for k, v in values.items():
            params[k].data = v
        yield
    finally:
        for k, v in saved.items():
            params[k].data = v


def training_tasks(cfg: StageConfig, rng: np.random.Generator, n: int) -> list[TaskInstance]:
    fams = rng.choice(cfg.families, size=n)
    seeds = rng.integers(cfg.task_seed_base, cfg.task_seed_base + 1_000_000, size=n)
    return [sample_task(str(f), int(s)) for f, s in zip(fams, seeds)]


def _run(model, memory, task, policy, seed, cache) -> Trajectory:
    tr = generate(model, memory, task.image, task.instruction, policy, seed, task.task_id, cache)
    tr.score = score_tokens(tr.output_tokens, task)
    return tr


def _inv_rates(trajs: Sequence[Trajectory]) -> tuple[float, float]:
    n = max(len(trajs), 1)
    short = sum(any(i.kind == SHORT for i in t.invocations) for t in trajs) / n
    long = sum(any(i.kind == LONG for i in t.invocations) for t in trajs) / n
    return short, long


class _Writer:
    def __init__(self, path):
        self.fh = open(path, "w", newline="") if path else None
        self.w = csv.DictWriter(self.fh, fieldnames=METRIC_FIELDS) if self.fh else None
        if self.w:
            self.w.writeheader()

    def row(self, row: dict) -> None:
        if self.w:
            self.w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _check_finite(loss: T.Tensor, stage: str, step: int) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(f"stage {stage}: non-finite loss at step {step}")


# -- Stage I -------------------------------------------------------------------

def memory_logdensities(memory: MemorySystem, trajs: Sequence[Trajectory], sigma: float) -> list[T.Tensor]:
    """Per-row Gaussian log-densities of every stored span under current weights.

    Memory means are computed once per distinct (kind, H, X).
    """
    means: dict = {}
    out = []
    for tr in trajs:
        rows = []
        for inv in tr.invocations:
            key = (inv.kind, inv.H.tobytes(), inv.X.shape, inv.X.tobytes())
            if key not in means:
                means[key] = memory.memory_mean(inv.kind, inv.H, inv.X)
            rows.append(gaussian_row_logdensity(inv.sample, means[key], sigma))
        out.append(T.concat(rows) if rows else T.Tensor(np.zeros(0)))
    return out


def _behaviour_logdensities(trajs: Sequence[Trajectory], sigma: float) -> list[np.ndarray]:
    out = []
    for tr in trajs:
        rows = [gaussian_row_logdensity(inv.sample, T.Tensor(inv.mean), sigma).data
                for inv in tr.invocations]
        out.append(np.concatenate(rows) if rows else np.zeros(0))
    return out


def stage1_group(model: ToyVLM, memory: MemorySystem, task: TaskInstance, cfg: StageConfig,
                 policy: DecodePolicy, seeds: Sequence[int]) -> tuple[list[Trajectory], list[float]]:
    """G forced-invocation rollouts and their seed-matched score gains."""
    cache: dict = {}
    base_policy = policy.with_(invocation="forbid")
    trajs, gains = [], []
    for s in seeds:
        tr = _run(model, memory, task, policy, int(s), cache)
        base = _run(model, None, task, base_policy, int(s), cache)
        trajs.append(tr)
        gains.append(delta_score(tr, base))
    return trajs, gains


def run_stage1(model: ToyVLM, memory: MemorySystem, cfg: StageConfig, seed: int,
               metrics_path=None, log: Callable[[str], None] | None = None) -> StageReport:
    if cfg.stage != "I":
        raise ValueError("run_stage1 needs a stage I config")
    rng = np.random.default_rng([seed, 1])
    params = memory.parameters()
    opt = AdamW([ParamGroup(params)], cfg.learning_rate, cfg.warmup_ratio,
                weight_decay=cfg.weight_decay)
    ref = snapshot(params)
    frozen = model.parameters()
    report = StageReport("I", 0, 0, 0.0, frozen_digest_before=checkpoint.digest(frozen))
    writer = _Writer(metrics_path)
    start = time.perf_counter()
    total = cfg.total_steps
    step = 0
    try:
        for epoch in range(cfg.epoch):
            phase, force = cfg.phase(epoch)
            sigma = cfg.memory_sigma * cfg.sigma_anneal ** epoch
            policy = DecodePolicy(temperature=cfg.temperature, max_new_tokens=cfg.max_new_tokens,
                                  eligibility=phase, invocation="forced", force_prob=force,
                                  memory_sigma=sigma)
            for _ in range(cfg.steps_per_epoch):
                t0 = time.perf_counter()
                tasks = training_tasks(cfg, rng, cfg.batch_size)
                batch, advs, gains_all, scores = [], [], [], []
                for task in tasks:
                    seeds = rng.integers(0, 2**31, size=cfg.group_size)
                    trajs, gains = stage1_group(model, memory, task, cfg, policy, seeds)
                    batch += trajs
                    advs += list(group_advantages(gains))
                    gains_all += gains
                    scores += [t.score for t in trajs]
                old = _behaviour_logdensities(batch, sigma)
                with swapped(params, ref), T.no_grad():
                    ref_lp = [x.data for x in memory_logdensities(memory, batch, sigma)]
                opt.zero_grad()
                new = memory_logdensities(memory, batch, sigma)
                parts = grpo_loss(advs, new, old, ref_lp, cfg.clip_ratio, cfg.kl_penalty_coefficient)
                _check_finite(parts.loss, "I", step)
                if parts.n_tokens:
                    T.backward(parts.loss)
                lr = opt.step(step / total)
                with T.no_grad():
                    after = memory_logdensities(memory, batch, sigma)
                drift = _drift(after, old)
                short, long = _inv_rates(batch)
                row = dict(stage="I", epoch=epoch, step=step, phase=phase, lr=lr, sigma=sigma,
                           mean_S=float(np.mean(scores)), mean_dS=float(np.mean(gains_all)),
                           inv_rate_short=short, inv_rate_long=long, p_type=0.0, p_neg=0.0,
                           adv_post_mean=float(np.mean(advs)), kl=parts.kl, drift_kl=drift,
                           clip_frac=parts.clip_frac, loss=float(parts.loss.data),
                           seconds=time.perf_counter() - t0)
                report.metrics.append(row)
                writer.row(row)
                if log is not None and step % 50 == 0:
                    log(f"stage I step {step} dS {row['mean_dS']:+.3f} S {row['mean_S']:.3f} "
                        f"kl {parts.kl:.4f} drift {drift:.4f}")
                step += 1
                if cfg.early_stop and drift > cfg.target_kl_per_token:
                    report.early_stops += 1
                    break
    finally:
        writer.close()
    report.steps = step
    report.seconds = time.perf_counter() - start
    report.frozen_digest_after = checkpoint.digest(frozen)
    return report


def _drift(after: Sequence[T.Tensor], old: Sequence[np.ndarray]) -> float:
    """Mean per-token k3 estimate of KL(behaviour || updated) on behaviour samples."""
    vals = [kl_k3(T.Tensor(o), a.data).data for a, o in zip(after, old) if len(o)]
    return float(np.mean(np.concatenate(vals))) if vals else 0.0


# -- Stage II ------------------------------------------------------------------

@dataclass
class GroupOutcome:
    trajs: list[Trajectory]
    scores: list[float]
    gains: list[float]
    p_type: list[float]
    p_neg: list[float]
    rewards: list[float]
    advantages: np.ndarray
    adv_post: np.ndarray


def stage2_group(model: ToyVLM, memory: MemorySystem, task: TaskInstance, cfg: StageConfig,
                 policy: DecodePolicy, seeds: Sequence[int]) -> GroupOutcome:
    cache: dict = {}
    trajs, gains, ptype = [], [], []
    for s in seeds:
        tr = _run(model, memory, task, policy, int(s), cache)
        base = _run(model, None, task, policy.with_(invocation="forbid"), int(s), cache)
        if tr.invocations:
            rev = _run(model, memory, task, policy.with_(swap_kinds=True), int(s), cache)
            ptype.append(penalty_type(tr, rev))
        else:
            ptype.append(0.0)
        trajs.append(tr)
        gains.append(delta_score(tr, base))
    scores = [t.score for t in trajs]
    mean, _ = group_stats(scores)
    pneg = [penalty_neg(t, mean) for t in trajs]
    alpha = cfg.penalty_intensity
    rewards = [g - alpha * (a + b) for g, a, b in zip(gains, ptype, pneg)]
    adv = group_advantages(rewards)
    # the other reading: penalise after normalising the score gain
    adv_post = group_advantages(gains) - alpha * (np.array(ptype) + np.array(pneg))
    return GroupOutcome(trajs, scores, gains, ptype, pneg, rewards, adv, adv_post)


def run_stage2(model: ToyVLM, memory: MemorySystem, cfg: StageConfig, seed: int,
               metrics_path=None, log: Callable[[str], None] | None = None) -> StageReport:
    if cfg.stage != "II":
        raise ValueError("run_stage2 needs a stage II config")
    rng = np.random.default_rng([seed, 2])
    drop_rng = np.random.default_rng([seed, 3])
    policy_params = model.policy_parameters()
    ends = {"vlm.mem_end": policy_params["vlm.mem_end"]}
    rest = {k: v for k, v in policy_params.items() if k not in ends}
    opt = AdamW([ParamGroup(rest), ParamGroup(ends, lr_mult=model.config.end_lr_mult)],
                cfg.learning_rate, cfg.warmup_ratio, weight_decay=cfg.weight_decay)
    ref = snapshot(policy_params)
    frozen = memory.parameters()
    report = StageReport("II", 0, 0, 0.0, frozen_digest_before=checkpoint.digest(frozen))
    writer = _Writer(metrics_path)
    policy = DecodePolicy(temperature=cfg.temperature, max_new_tokens=cfg.max_new_tokens,
                          eligibility=cfg.curriculum[0], invocation="model",
                          memory_sigma=cfg.memory_sigma)
    start = time.perf_counter()
    total = cfg.total_steps
    step = 0
    try:
        for epoch in range(cfg.epoch):
            for _ in range(cfg.steps_per_epoch):
                t0 = time.perf_counter()
                groups = []
                for task in training_tasks(cfg, rng, cfg.batch_size):
                    seeds = rng.integers(0, 2**31, size=cfg.group_size)
                    groups.append(stage2_group(model, memory, task, cfg, policy, seeds))
                batch = [t for g in groups for t in g.trajs]
                advs = np.concatenate([g.advantages for g in groups])
                old = [np.array([s.logprob for s in t.steps]) for t in batch]
                with swapped(policy_params, ref), T.no_grad():
                    ref_lp = [x.data for x in rescore(model, batch)]
                opt.zero_grad()
                new = rescore(model, batch, dropout_rng=drop_rng)
                parts = grpo_loss(advs, new, old, ref_lp, cfg.clip_ratio, cfg.kl_penalty_coefficient)
                _check_finite(parts.loss, "II", step)
                if parts.n_tokens:
                    T.backward(parts.loss)
                lr = opt.step(step / total)
                with T.no_grad():
                    after = rescore(model, batch)
                drift = _drift(after, old)
                short, long = _inv_rates(batch)
                row = dict(stage="II", epoch=epoch, step=step, phase=policy.eligibility, lr=lr,
                           sigma=cfg.memory_sigma,
                           mean_S=float(np.mean([s for g in groups for s in g.scores])),
                           mean_dS=float(np.mean([s for g in groups for s in g.gains])),
                           inv_rate_short=short, inv_rate_long=long,
                           p_type=float(np.mean([p for g in groups for p in g.p_type])),
                           p_neg=float(np.mean([p for g in groups for p in g.p_neg])),
                           adv_post_mean=float(np.mean(np.concatenate([g.adv_post for g in groups]))),
                           kl=parts.kl, drift_kl=drift, clip_frac=parts.clip_frac,
                           loss=float(parts.loss.data), seconds=time.perf_counter() - t0)
                report.metrics.append(row)
                writer.row(row)
                if log is not None and step % 25 == 0:
                    log(f"stage II step {step} S {row['mean_S']:.3f} dS {row['mean_dS']:+.3f} "
                        f"inv {short:.2f}/{long:.2f} p_neg {row['p_neg']:.3f}")
                step += 1
                if cfg.early_stop and drift > cfg.target_kl_per_token:
                    report.early_stops += 1
                    break
    finally:
        writer.close()
    report.steps = step
    report.seconds = time.perf_counter() - start
    report.frozen_digest_after = checkpoint.digest(frozen)
    return report


def run_stage(cfg: StageConfig, model: ToyVLM, memory: MemorySystem, seed: int,
              stage1_checkpoint=None, metrics_path=None, log=None) -> StageReport:
    """Dispatch on ``cfg.stage``; stage II loads the memory system from a stage I checkpoint."""
    if cfg.stage == "I":
        return run_stage1(model, memory, cfg, seed, metrics_path, log)
    if stage1_checkpoint is None:
        raise FileNotFoundError("stage II needs a stage I checkpoint; run stage I first")
    values = checkpoint.load(stage1_checkpoint)
    checkpoint.assign(memory.parameters(), checkpoint.select(values, "mem."))
    return run_stage2(model, memory, cfg, seed, metrics_path, log)
