import math

import numpy as np
import pytest

from latentmem import tensor as T
from latentmem.optim import AdamW, ParamGroup, lr_factor


def test_warmup_start_is_zero():
    assert lr_factor(0.0, 0.2) == 0.0


def test_warmup_end_is_one():
    assert lr_factor(0.2, 0.2) == 1.0


def test_cosine_reaches_zero_at_end():
    assert abs(lr_factor(1.0, 0.2)) < 1e-15
    assert abs(lr_factor(0.6, 0.2) - 0.5) < 1e-12


def _scalar_adamw(x, g, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8, warmup=0.0, total=3):
    m = v = 0.0
    for t in range(1, steps + 1):
        pos = (t - 1) / total
        if warmup > 0 and pos < warmup:
            f = pos / warmup
        else:
            f = 0.5 * (1 + math.cos(math.pi * (pos - warmup) / (1 - warmup)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * f * wd * x
        x = x - lr * f * mhat / (math.sqrt(vhat) + eps)
    return x


def test_three_steps_match_scalar_reimplementation():
    p = T.parameter([1.5])
    opt = AdamW([ParamGroup({"p": p})], lr=0.1, weight_decay=0.01)
    for step in range(3):
        p.grad = np.array([0.7])
        opt.step(step / 3)
    ref = _scalar_adamw(1.5, 0.7, 3, 0.1, 0.01)
    assert abs(p.data[0] - ref) < 1e-12


def test_group_multiplier_scales_update():
    a, b = T.parameter([0.0]), T.parameter([0.0])
    opt = AdamW([ParamGroup({"a": a}), ParamGroup({"b": b}, lr_mult=0.1)], lr=0.01)
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    opt.step(0.0)
    assert abs(b.data[0] - 0.1 * a.data[0]) < 1e-15


def test_missing_grad_is_error():
    p = T.parameter([1.0])
    opt = AdamW([ParamGroup({"p": p})], lr=0.1)
    with pytest.raises(ValueError, match="'p'"):
        opt.step(0.0)


def test_step_counter_increases_and_moments_match_shapes():
    p = T.parameter(np.zeros((2, 3)))
    opt = AdamW([ParamGroup({"p": p})], lr=0.1)
    for i in range(3):
        p.grad = np.ones((2, 3))
        opt.step(0.5)
        assert opt.state.step == i + 1
    assert opt.state.m["p"].shape == p.shape == opt.state.v["p"].shape


def test_duplicate_registration_is_error():
    p = T.parameter([1.0])
    with pytest.raises(ValueError):
        AdamW([ParamGroup({"p": p}), ParamGroup({"p": p})], lr=0.1)


def test_same_seed_same_trajectory():
    def run():
        rng = np.random.default_rng(9)
        p = T.parameter(rng.normal(size=4))
        opt = AdamW([ParamGroup({"p": p})], lr=0.05, warmup_ratio=0.2, weight_decay=0.1)
        for i in range(10):
            opt.zero_grad()
            T.backward((p * p * T.Tensor(rng.normal(size=4))).sum())
            opt.step(i / 10)
        return p.data.tobytes()
    assert run() == run()
