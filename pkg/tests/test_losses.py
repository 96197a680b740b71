import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from mtslu import numerics as nx
from mtslu.losses import (
    InfeasibleTargetError,
    LossWeights,
    ctc_loss,
    joint_loss,
    min_ctc_frames,
    multihot_bce,
    smoothed_ce,
)
from mtslu.numerics import Tensor

from oracles import ctc_brute_force, loss_grad_cases, random_log_probs


def _ctc_cases(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        T = int(rng.integers(1, 7))
        V = int(rng.integers(1, 4))
        U = int(rng.integers(0, 4))
        y = tuple(int(v) for v in rng.integers(1, V + 1, U))
        if min_ctc_frames(y) > T:
            continue
        out.append((random_log_probs(rng, T, V + 1), y))
    return out


def test_ctc_matches_brute_force_enumeration():
    for lp, y in _ctc_cases(220):
        ref = ctc_brute_force(np.exp(lp))[y]
        got = ctc_loss(Tensor(lp, dtype=np.float64), list(y)).item()
        assert abs(got - (-math.log(ref))) < 1e-6, (lp.shape, y)


def test_ctc_probabilities_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(12):
        T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        lp = random_log_probs(rng, T, V + 1)
        ys = [y for n in range(T + 1) for y in itertools.product(range(1, V + 1), repeat=n)
              if min_ctc_frames(y) <= T]
        batch = Tensor(np.broadcast_to(lp, (len(ys), T, V + 1)).copy(), dtype=np.float64)
        nll = ctc_loss(batch, [list(y) for y in ys], reduction="none").data
        assert abs(np.exp(-nll).sum() - 1.0) < 1e-6


def test_ctc_hand_example():
    lp = Tensor(np.log(np.full((2, 2), 0.5)), dtype=np.float64)
    assert ctc_loss(lp, [1]).item() == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_loss(lp, [1]).item() == pytest.approx(0.28768, abs=1e-5)


def test_ctc_infeasible_target():
    lp = Tensor(np.log(np.full((2, 2), 0.5)))
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(lp, [1, 1])
    assert min_ctc_frames([1, 1]) == 3
    assert min_ctc_frames([1, 2, 2, 2]) == 6


def test_ctc_respects_input_lengths():
    rng = np.random.default_rng(3)
    lp = random_log_probs(rng, 6, 3)
    padded = np.concatenate([lp, random_log_probs(rng, 3, 3)])[None]
    a = ctc_loss(Tensor(lp, dtype=np.float64), [1, 2]).item()
    b = ctc_loss(Tensor(padded, dtype=np.float64), [[1, 2]], [6]).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_ctc_gradcheck():
    fn, make = loss_grad_cases()["ctc"]
    for seed in range(20):
        assert nx.gradcheck(lambda x: fn(seed, x), make(np.random.default_rng(seed))) < 1e-3


def test_ctc_rejects_blank_in_target():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.log(np.full((4, 3), 1 / 3))), [0, 1])


@pytest.mark.parametrize("name", ["smoothed_ce", "smoothed_ce_pad", "multihot_bce"])
def test_loss_gradcheck(name):
    fn, make = loss_grad_cases()[name]
    for seed in range(20):
        assert nx.gradcheck(lambda x: fn(seed, x), make(np.random.default_rng(seed))) < 1e-4


def test_smoothed_ce_examples():
    assert smoothed_ce(Tensor(np.zeros((3, 2))), [0, 1, 1], 0.1, None).item() == pytest.approx(math.log(2), abs=1e-6)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    t = rng.integers(0, 4, 5)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(5), t].mean()
    uni = -logp.mean(axis=1).mean()
    assert smoothed_ce(Tensor(x, dtype=np.float64), t, 0.0, None).item() == pytest.approx(ce, abs=1e-12)
    got = smoothed_ce(Tensor(x, dtype=np.float64), t, 0.3, None).item()
    assert got == pytest.approx(0.7 * ce + 0.3 * uni, abs=1e-6)


def test_smoothed_ce_gibbs_bound():
    rng = np.random.default_rng(2)
    for _ in range(50):
        V, eps = int(rng.integers(2, 8)), float(rng.uniform(0, 0.9))
        x = rng.normal(0, 3, (1, V))
        t = int(rng.integers(0, V))
        q = np.full(V, eps / V)
        q[t] += 1 - eps
        entropy = -np.sum(q * np.log(q))
        assert smoothed_ce(Tensor(x, dtype=np.float64), [t], eps, None).item() >= entropy - 1e-9


def test_smoothed_ce_ignores_padding():
    x = np.random.default_rng(0).normal(size=(3, 4))
    full = smoothed_ce(Tensor(x, dtype=np.float64), [2, 1, 3], 0.1, ignore_index=1).item()
    part = smoothed_ce(Tensor(x[[0, 2]], dtype=np.float64), [2, 3], 0.1, ignore_index=None).item()
    assert full == pytest.approx(part, abs=1e-12)
    with pytest.raises(ValueError):
        smoothed_ce(Tensor(x), [1, 1, 1], 0.1, ignore_index=1)


def test_multihot_bce_examples():
    bits = np.array([[1, 0, 0, 1, 0]])
    assert multihot_bce(Tensor(np.zeros((1, 5))), bits).item() == pytest.approx(math.log(2), abs=1e-6)
    logits = np.where(bits == 1, 50.0, -50.0)
    assert multihot_bce(Tensor(logits), bits).item() < 1e-20
    with pytest.raises(ValueError):
        multihot_bce(Tensor(np.zeros((1, 2))), [[2, 0]])


def test_bce_stable_at_extremes():
    out = multihot_bce(Tensor(np.array([[1e4, -1e4]], dtype=np.float32), requires_grad=True), [[0, 1]])
    assert np.isfinite(out.item()) and out.item() == pytest.approx(1e4, rel=1e-6)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_asr=-1)
    with pytest.raises(ValueError):
        LossWeights(ctc_weight=1.5)
    with pytest.raises(ValueError):
        LossWeights(label_smoothing=1.0)


def _fake_output(seed=0, requires_grad=False):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, 8, 5)[None]
    dec = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=requires_grad, dtype=np.float64)
    slu = Tensor(rng.normal(size=(1, 6)), requires_grad=requires_grad, dtype=np.float64)
    out = SimpleNamespace(ctc_log_probs=Tensor(lp, dtype=np.float64), enc_lengths=np.array([8]),
                          dec_logits=dec, slu_logits=slu)
    targets = {"ctc": [np.array([4, 2])], "tokens": np.array([[4, 2, 3]]), "slu": np.array([[1, 0, 0, 0, 1, 0]])}
    return out, targets


def test_joint_loss_composition():
    out, tg = _fake_output()
    _, parts = joint_loss(out, tg, LossWeights(ctc_weight=0.3, w_asr=1.0, w_slu=1.0), "intent")
    ctc, ce, slu = parts["ctc"], parts["ce"], parts["slu"]
    for w_asr, w_slu, lam in [(0.5, 0.5, 0.3), (1.0, 0.0, 0.3), (0.0, 2.0, 0.7), (0.25, 0.5, 1.0)]:
        total, br = joint_loss(out, tg, LossWeights(ctc_weight=lam, w_asr=w_asr, w_slu=w_slu), "intent")
        expect = w_asr * (lam * ctc + (1 - lam) * ce) + w_slu * slu
        assert total.item() == pytest.approx(expect, abs=1e-12)


def test_joint_loss_linear_in_slu_weight():
    out, tg = _fake_output()
    a, br = joint_loss(out, tg, LossWeights(w_asr=0.5, w_slu=0.4), "intent")
    b, _ = joint_loss(out, tg, LossWeights(w_asr=0.5, w_slu=0.8), "intent")
    assert b.item() - 0.5 * br["asr"] == pytest.approx(2 * (a.item() - 0.5 * br["asr"]), abs=1e-12)


def test_joint_loss_lambda_one_gives_decoder_no_gradient():
    out, tg = _fake_output(requires_grad=True)
    total, _ = joint_loss(out, tg, LossWeights(ctc_weight=1.0, w_asr=1.0, w_slu=1.0), "intent")
    nx.backward(total)
    assert np.all(out.dec_logits.grad == 0.0)
    assert np.any(out.slu_logits.grad != 0.0)


def test_joint_loss_zero_weight_terms_do_not_backprop():
    out, tg = _fake_output(requires_grad=True)
    total, br = joint_loss(out, tg, LossWeights(w_asr=1.0, w_slu=0.0), "intent")
    nx.backward(total)
    assert "slu" in br and np.all(out.slu_logits.grad == 0.0)


def test_joint_loss_all_zero_weights_rejected():
    out, tg = _fake_output()
    with pytest.raises(ValueError):
        joint_loss(out, tg, LossWeights(w_asr=0.0, w_slu=0.0), "intent")
