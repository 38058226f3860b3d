"""Hand-checked AdamW updates and the warmup-cosine schedule."""

import math

import numpy as np
import pytest

from popcontrast.errors import MissingGradient
from popcontrast.numerics import ParamSet
from popcontrast.optim import AdamW, lr_at


def test_lr_warmup_linear():
    assert lr_at(0, 10, 100, 1.0) == pytest.approx(0.1)
    assert lr_at(4, 10, 100, 1.0) == pytest.approx(0.5)
    assert lr_at(9, 10, 100, 1.0) == pytest.approx(1.0)


def test_lr_cosine_landmarks():
    w, s, m = 10, 110, 2.0
    assert lr_at(w, w, s, m) == pytest.approx(m)
    assert lr_at(w + (s - w) // 2, w, s, m) == pytest.approx(m / 2)
    assert lr_at(s - 1, w, s, m) == pytest.approx(
        m * 0.5 * (1 + math.cos(math.pi * (s - 1 - w) / (s - w)))
    )
    assert lr_at(s - 1, w, s, m) < 0.01 * m


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(100, 10, 100, 1.0)


def _single_param(value, grad):
    ps = ParamSet()
    t = ps.add("w", np.array([value]))
    t.grad = np.array([grad])
    return ps


def test_adamw_first_step_hand_value():
    # at t=1 the bias-corrected m/v ratio is g/|g|, so theta moves by lr
    ps = _single_param(1.0, 1.0)
    opt = AdamW(ps, weight_decay=0.0)
    opt.step(lr=0.1)
    assert ps["w"].data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)


def test_adamw_zero_grad_zero_decay_no_move():
    ps = _single_param(3.0, 0.0)
    AdamW(ps, weight_decay=0.0).step(lr=0.1)
    assert ps["w"].data[0] == pytest.approx(3.0)


def test_adamw_decay_only_path():
    ps = _single_param(2.0, 0.0)
    AdamW(ps, weight_decay=0.01).step(lr=0.1)
    assert ps["w"].data[0] == pytest.approx(2.0 * 0.999)


def test_adamw_two_steps_match_reference():
    # straight transcription of the AdamW recurrences
    theta, m, v = 1.5, 0.0, 0.0
    b1, b2, eps, lr, wd, g = 0.9, 0.999, 1e-8, 0.05, 0.01, 0.7
    ps = _single_param(theta, g)
    opt = AdamW(ps, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    for t in (1, 2):
        theta *= 1 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta -= lr * mh / (math.sqrt(vh) + eps)
        ps["w"].grad = np.array([g])
        opt.step(lr=lr)
        assert ps["w"].data[0] == pytest.approx(theta, abs=1e-12)


def test_adamw_missing_gradient():
    ps = ParamSet()
    ps.add("w", np.ones(2))
    ps["w"].grad = None
    with pytest.raises(MissingGradient):
        AdamW(ps).step(lr=0.1)


def test_grad_clip_rescales_global_norm():
    ps = ParamSet()
    a = ps.add("a", np.zeros(1))
    b = ps.add("b", np.zeros(1))
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])  # global norm 5
    opt = AdamW(ps, weight_decay=0.0)
    opt.step(lr=1.0, grad_clip=1.0)
    # direction preserved: both params move the same sign-weighted amount
    assert a.data[0] < 0 and b.data[0] < 0


def test_update_order_is_name_deterministic():
    rng = np.random.default_rng(0)
    ws = {f"p{i}": rng.normal(size=4) for i in range(5)}

    def run():
        ps = ParamSet()
        for name in ["p3", "p0", "p4", "p1", "p2"]:
            t = ps.add(name, ws[name])
            t.grad = ws[name] * 0.1
        AdamW(ps).step(lr=0.01)
        return np.concatenate([t.data for _, t in ps.items()])

    assert np.array_equal(run(), run())
