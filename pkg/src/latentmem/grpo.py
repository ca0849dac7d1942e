"""Group-relative policy optimisation: statistics, penalties and the loss.

The clipped surrogate uses one importance ratio per token: a latent row of a
memory span in the formation stage, a sampled discrete token in the
invocation stage.  Per-token terms are averaged within a trajectory and the
trajectory terms are averaged over the group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ADV_EPS = 1e-6


def group_stats(scores: Sequence[float]) -> tuple[float, float]:
    """Group mean and population standard deviation."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError(f"a group needs at least 2 scores, got {len(s)}")
    mean = float(s.mean())
    return mean, float(np.sqrt(np.mean((s - mean) ** 2)))


def advantage(score: float, mean: float, spread: float, eps: float = ADV_EPS) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return (score - mean) / (spread + eps)


def group_advantages(scores: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    mean, spread = group_stats(scores)
    return (np.asarray(scores, dtype=np.float64) - mean) / (spread + eps)


def delta_score(traj, base) -> float:
    """S(tau) - S(tau_base) for a seed-matched memory-free counterpart."""
    if traj.task_id != base.task_id:
        raise ValueError(f"task mismatch: {traj.task_id!r} vs {base.task_id!r}")
    return float(traj.score) - float(base.score)


def penalty_type(traj, rev) -> float:
    """How much the kind-swapped counterfactual would have gained."""
    if not traj.invocations:
        return 0.0
    return max(0.0, float(rev.score) - float(traj.score))


def penalty_neg(traj, group_mean: float) -> float:
    """Shortfall below the group mean; zero when nothing was invoked."""
    if not traj.invocations:
        return 0.0
    return max(0.0, group_mean - float(traj.score))


def kl_k3(new_logp: Tensor, ref_logp: np.ndarray) -> Tensor:
    """Per-token ``exp(r) - r - 1`` with ``r = ref - new``; always >= 0."""
    r = T.as_tensor(ref_logp) - new_logp
    return r.exp() - r - 1.0


@dataclass
class LossParts:
    loss: Tensor
    kl: float           # mean per-token k3 against the reference
    clip_frac: float
    ratio_mean: float
    n_tokens: int = 0
    per_traj: list[float] = field(default_factory=list)


def grpo_loss(advantages: Sequence[float], new: Sequence[Tensor], old: Sequence[np.ndarray],
              ref: Sequence[np.ndarray] | None, clip_eps: float, beta: float) -> LossParts:
    """Negated clipped-surrogate objective with a k3 KL penalty.

    ``new[i]`` holds differentiable per-token log-densities of trajectory i;
    ``old[i]`` and ``ref[i]`` are the behaviour and reference values.
    Trajectories without tokens contribute zero to the group mean.
    """
    if ref is None:
        raise ValueError("grpo_loss needs reference log-densities")
    G = len(advantages)
    if not (len(new) == len(old) == len(ref) == G):
        raise ValueError("advantages and density lists must align per trajectory")
    total = None
    kl_sum = 0.0
    clipped = 0
    ratio_sum = 0.0
    n_tok = 0
    per_traj = []
    for A, lp, lp_old, lp_ref in zip(advantages, new, old, ref):
        lp_old = np.asarray(lp_old, dtype=np.float64)
        lp_ref = np.asarray(lp_ref, dtype=np.float64)
        if lp.shape != lp_old.shape or lp.shape != lp_ref.shape:
            raise ValueError(f"density shapes differ: {lp.shape}, {lp_old.shape}, {lp_ref.shape}")
        n = lp.shape[0] if lp.ndim else 0
        if n == 0:
            per_traj.append(0.0)
            continue
        ratio = (lp - lp_old).exp()
        surr = T.minimum(ratio * A, T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * A)
        kl = kl_k3(lp, lp_ref)
        term = (surr - kl * beta).mean()
        per_traj.append(float(term.data))
        total = term if total is None else total + term
        kl_sum += float(kl.data.sum())
        r = ratio.data
        clipped += int(np.sum((r < 1.0 - clip_eps) | (r > 1.0 + clip_eps)))
        ratio_sum += float(r.sum())
        n_tok += n
    if total is None:
        loss = T.Tensor(np.array(0.0))
    else:
        loss = total * (-1.0 / G)
    return LossParts(loss=loss, kl=kl_sum / max(n_tok, 1), clip_frac=clipped / max(n_tok, 1),
                     ratio_mean=ratio_sum / max(n_tok, 1), n_tokens=n_tok, per_traj=per_traj)

