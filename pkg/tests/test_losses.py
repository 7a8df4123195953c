import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rasd import losses
from rasd.dsp import InvalidInputError
from rasd.weigher import classification_loss


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def loop_l1(p, g):
    b, f, t = p.shape
    total = 0.0
    for i in range(b):
        per_item = 0.0
        for k in range(t):
            col = 0.0
            for j in range(f):
                col += abs(p[i, j, k] - g[i, j, k])
            per_item += col / f
        total += per_item / t
    return total / b


def loop_weighted_l1(p, g, w):
    b, f, t = p.shape
    total = 0.0
    for i in range(b):
        acc = 0.0
        for k in range(t):
            acc += w[i, k] * sum(abs(p[i, j, k] - g[i, j, k]) for j in range(f)) / f
        total += acc / t
    return total / b


def loop_bce(s, y):
    acc, n = 0.0, 0
    for si, yi in zip(np.ravel(s), np.ravel(y)):
        p = min(max(si, 1e-7), 1 - 1e-7)
        acc += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
        n += 1
    return acc / n


def test_separation_loss_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        b, f, t = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
        p, g = rng.random((b, f, t)), rng.random((b, f, t))
        assert abs(float(losses.separation_loss(t64(p), t64(g))) - loop_l1(p, g)) <= 1e-12


def test_weighted_separation_loss_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        b, f, t = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
        p, g, w = rng.random((b, f, t)), rng.random((b, f, t)), rng.random((b, t))
        got = float(losses.weighted_separation_loss(t64(p), t64(g), t64(w)))
        assert abs(got - loop_weighted_l1(p, g, w)) <= 1e-12


def test_separation_loss_examples():
    m = t64(np.random.default_rng(2).random((2, 4, 3)))
    assert float(losses.separation_loss(m, m)) == 0.0
    assert float(losses.separation_loss(t64(np.full((4, 5), 0.25)), t64(np.full((4, 5), 0.75)))) == 0.5
    with pytest.raises(InvalidInputError):
        losses.separation_loss(t64(np.ones((2, 3))), t64(np.ones((3, 2))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_unit_weights_reproduce_plain_loss_exactly(b, f, t, seed):
    rng = np.random.default_rng(seed)
    p, g = t64(rng.random((b, f, t))), t64(rng.random((b, f, t)))
    assert float(losses.weighted_separation_loss(p, g, torch.ones(b, t, dtype=torch.float64))) == \
        float(losses.separation_loss(p, g))
    assert float(losses.weighted_separation_loss(p, g, torch.zeros(b, t, dtype=torch.float64))) == 0.0


def test_weighted_hand_case():
    # column L1 (0.2, 0.4), weights (1, 0.5)
    p = t64([[0.2, 0.4]])
    g = t64([[0.0, 0.0]])
    assert float(losses.weighted_separation_loss(p, g, t64([1.0, 0.5]))) == pytest.approx(0.2, abs=1e-15)


def test_asd_loss_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n, t = rng.integers(1, 4), rng.integers(1, 8)
        s = rng.random((n, t))
        s[rng.random((n, t)) < 0.1] = rng.choice([0.0, 1.0])
        y = rng.integers(0, 2, size=(n, t)).astype(float)
        assert abs(float(losses.asd_loss(t64(s), t64(y))) - loop_bce(s, y)) <= 1e-12


def test_asd_loss_examples_and_guards():
    y = t64([[1, 0, 1, 0]])
    assert float(losses.asd_loss(t64([[1, 0, 1, 0]]), y)) < 1e-6
    assert float(losses.asd_loss(t64(np.full((1, 4), 0.5)), y)) == pytest.approx(math.log(2), abs=1e-12)
    for bad in (1.5, -0.1, float("nan"), float("inf")):
        with pytest.raises(FloatingPointError):
            losses.asd_loss(t64([[bad, 0.5]]), t64([[1, 0]]))


def test_classification_loss_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        t = rng.integers(1, 7)
        logits = rng.standard_normal((3, t))
        probs = np.exp(logits) / np.exp(logits).sum(0)
        labels = rng.integers(0, 3, size=t)
        cls_w = rng.random(3) + 0.1
        ref = np.mean([-cls_w[labels[k]] * math.log(probs[labels[k], k]) for k in range(t)])
        got = float(classification_loss(t64(probs)[None], torch.as_tensor(labels)[None], t64(cls_w)))
        assert abs(got - ref) <= 1e-12


def test_total_loss_defaults_and_breakdown():
    assert losses.DEFAULT_LAMBDAS == (0.1, 1.0, 0.1)
    br = losses.total_loss(t64(2.0), t64(3.0), t64(5.0))
    assert float(br.total) == pytest.approx(0.1 * 2 + 3 + 0.1 * 5, abs=1e-15)
    assert br.as_floats() == {"l_asd": 2.0, "l_ss": 3.0, "l_w": 5.0, "total": float(br.total)}
    assert br.is_finite()
    assert not losses.total_loss(t64(float("nan")), t64(0.0), t64(0.0)).is_finite()
    custom = losses.total_loss(t64(1.0), t64(1.0), t64(1.0), (1.0, 0.0, 2.0))
    assert float(custom.total) == 3.0 and custom.lambdas == (1.0, 0.0, 2.0)
