import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtss import losses as L
from mtss.embeddings import LabelDictionary

import oracles as O


def unit2(c):
    """2-D unit vector with cosine ``c`` to (1, 0)."""
    return np.array([c, math.sqrt(1 - c * c)])


D0 = np.array([1.0, 0.0])


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-10 else float(np.linalg.norm(a - b) / scale)


# -- worked values -------------------------------------------------------------

def test_hinge_examples():
    assert L.pairwise_hinge_loss(D0, D0, np.array([0.0, 2.0])) == pytest.approx(0.0, abs=1e-12)
    assert L.pairwise_hinge_loss(D0, D0, D0) == pytest.approx(1.0)
    assert L.pairwise_hinge_loss(D0, unit2(0.2), unit2(0.6)) == pytest.approx(1.4, abs=1e-12)


def test_focal_examples():
    b = L.focal_ranking_loss(D0, unit2(0.8), unit2(0.3), gamma=1.0)
    assert b.p_t == pytest.approx(0.75)
    assert b.loss == pytest.approx(-0.25 * math.log(0.75), abs=1e-12)
    assert b.loss == pytest.approx(0.07192, abs=5e-6)
    b0 = L.focal_ranking_loss(D0, unit2(0.8), unit2(0.3), gamma=0.0)
    assert b0.loss == pytest.approx(0.28768, abs=5e-6)
    perfect = L.focal_ranking_loss(D0, D0, np.array([0.0, 1.0]), gamma=1.0)
    assert perfect.p_raw == pytest.approx(1.0) and perfect.loss == 0.0


def test_focal_upper_clamp_keeps_loss_non_negative():
    # cos(d,e+) = 1 and cos(d,e-) = -1 give p_raw = 1.5 before clamping
    b = L.focal_ranking_loss(D0, D0, -D0, gamma=1.0)
    assert b.p_raw == pytest.approx(1.5)
    assert b.p_t == 1.0 and b.loss == 0.0


def test_focal_lower_clamp():
    b = L.focal_ranking_loss(D0, -D0, D0, gamma=2.0)
    assert b.p_raw == 0.0 and b.p_t == L.EPS
    assert math.isfinite(b.loss) and b.loss > 0


def test_distillation_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert L.distillation_loss([(a, a), (2 * a, a)]) == pytest.approx(0.0, abs=1e-12)
    assert L.distillation_loss([(D0, np.array([0, 1.0])), (np.array([0, 1.0]), D0)]) == pytest.approx(2.0)
    assert L.distillation_loss([(D0, unit2(0.5))]) == pytest.approx(0.5)


def test_weighted_distillation_examples():
    t = unit2(0.8)
    rows = np.vstack([D0, -D0])  # nearest row to t is D0 with cosine 0.8
    s = np.array([0.5 * 0.8 - math.sqrt(0.75) * 0.6, 0.5 * 0.6 + math.sqrt(0.75) * 0.8])  # cos(s,t)=0.5
    assert L.cosine(s, t) == pytest.approx(0.5)
    assert L.weighted_distillation_loss({"a": (s, t)}, {"a": rows}, beta=1.0) == pytest.approx(0.4)
    # teacher exactly on a row -> weight 1
    assert L.weighted_distillation_loss({"a": (unit2(0.5), D0)}, {"a": rows}, 1.0) == pytest.approx(0.5)
    for beta in (0.0, 0.5, 3.0):
        assert L.weighted_distillation_loss({"a": (t, t)}, {"a": rows}, beta) == pytest.approx(0.0, abs=1e-12)


def test_weight_clamped_for_negative_certainty():
    t = np.array([-1.0, 0.1])
    rows = np.array([[1.0, 0.0], [0.9, 0.1]])  # every row points away from t
    w = L.distill_weight(t, rows, beta=0.5)
    assert w.certainty == 0.0 and w.beta_power == 0.0


def test_errors():
    with pytest.raises(L.LossInputError):
        L.pairwise_hinge_loss(np.zeros(2), D0, D0)
    with pytest.raises(L.LossInputError):
        L.pairwise_hinge_loss(D0, D0, np.ones(3))
    with pytest.raises(L.LossInputError):
        L.focal_ranking_loss(D0, D0, D0, gamma=-1)
    with pytest.raises(L.LossInputError):
        L.distillation_loss([])
    with pytest.raises(L.LossInputError):
        L.weighted_distillation_loss({"a": (D0, D0)}, {"b": np.eye(2)}, 1.0)
    with pytest.raises(L.LossInputError):
        L.weighted_distillation_loss({"a": (D0, np.zeros(2))}, {"a": np.eye(2)}, 1.0)


def test_accepts_label_dictionary():
    d = LabelDictionary("a", ("x", "y"), np.eye(2))
    assert L.weighted_distillation_loss({"a": (unit2(0.5), D0)}, {"a": d}, 1.0) == pytest.approx(0.5)


# -- properties ------------------------------------------------------------------

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-2)


@settings(max_examples=100, deadline=None)
@given(vec3, vec3, vec3, st.floats(0.01, 100), st.floats(0, 3))
def test_scale_invariance(d, ep, en, c, gamma):
    d, ep, en = map(np.array, (d, ep, en))
    assert L.pairwise_hinge_loss(d, c * ep, en) == pytest.approx(L.pairwise_hinge_loss(d, ep, en), abs=1e-9)
    a = L.focal_ranking_loss(c * d, ep, c * en, gamma).loss
    b = L.focal_ranking_loss(d, ep, en, gamma).loss
    assert a == pytest.approx(b, abs=1e-9, rel=1e-9)
    assert L.distillation_loss([(c * d, ep)]) == pytest.approx(L.distillation_loss([(d, ep)]), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 4))
def test_focal_non_increasing_in_margin(c_pos, c_neg, delta_raw, gamma):
    delta = abs(delta_raw)
    lo = L.focal_ranking_loss(D0, unit2(c_pos), unit2(c_neg), gamma).loss
    c_pos2 = min(1.0, c_pos + delta)
    hi = L.focal_ranking_loss(D0, unit2(c_pos2), unit2(c_neg), gamma).loss
    assert hi <= lo + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(0.05, 5))
def test_focal_gamma_reduction_and_dominance(c_pos, c_neg, gamma):
    b0 = L.focal_ranking_loss(D0, unit2(c_pos), unit2(c_neg), 0.0)
    assert b0.loss == -math.log(b0.p_t)
    bg = L.focal_ranking_loss(D0, unit2(c_pos), unit2(c_neg), gamma)
    if L.EPS < bg.p_t < 1.0:
        assert bg.loss < b0.loss
    assert bg.loss >= 0 and math.isfinite(bg.loss)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_beta_zero_equals_plain_distillation(seed):
    rng = np.random.default_rng(seed)
    pairs = {f"t{k}": (rng.normal(size=4), rng.normal(size=4)) for k in range(3)}
    dicts = {k: rng.normal(size=(3, 4)) for k in pairs}
    assert L.weighted_distillation_loss(pairs, dicts, 0.0) == L.distillation_loss(pairs)


def test_hinge_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(size=(3, 5))
        assert 0.0 <= L.pairwise_hinge_loss(*v) <= 3.0


# -- torch batch versions agree with the per-instance functions --------------------

def test_batched_focal_matches_scalar():
    rng = np.random.default_rng(1)
    d, ep, en = (rng.normal(size=(32, 6)) for _ in range(3))
    for gamma in (0.0, 1.0, 2.5):
        got = L.focal_ranking_loss_batch(*(torch.tensor(a) for a in (d, ep, en)), gamma).numpy()
        want = [L.focal_ranking_loss(d[i], ep[i], en[i], gamma).loss for i in range(32)]
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_batched_focal_gradient_matches_analytic():
    rng = np.random.default_rng(2)
    d, ep, en = (torch.tensor(rng.normal(size=(16, 5)), requires_grad=True) for _ in range(3))
    L.focal_ranking_loss_batch(d, ep, en, 1.0).sum().backward()
    for i in range(16):
        gd, gp, gn = L.focal_ranking_loss_grad(d[i].detach().numpy(), ep[i].detach().numpy(),
                                               en[i].detach().numpy(), 1.0)
        np.testing.assert_allclose(d.grad[i].numpy(), gd, atol=1e-10)
        np.testing.assert_allclose(ep.grad[i].numpy(), gp, atol=1e-10)
        np.testing.assert_allclose(en.grad[i].numpy(), gn, atol=1e-10)


def test_batched_focal_finite_gradient_at_perfect_separation():
    d = torch.tensor([[1.0, 0.0]], requires_grad=True)
    ep = torch.tensor([[1.0, 0.0]], requires_grad=True)
    en = torch.tensor([[-1.0, 0.0]], requires_grad=True)
    loss = L.focal_ranking_loss_batch(d, ep, en, 0.5).sum()
    loss.backward()
    assert loss.item() == 0.0
    assert torch.isfinite(d.grad).all() and torch.isfinite(ep.grad).all()


def test_batched_weighted_distillation_matches_scalar():
    rng = np.random.default_rng(3)
    types = ("a", "b")
    s = {t: rng.normal(size=(10, 4)) for t in types}
    te = {t: rng.normal(size=(10, 4)) for t in types}
    dicts = {t: rng.normal(size=(5, 4)) for t in types}
    for beta in (0.0, 1.0, 2.0):
        w = {t: L.certainty_weights(torch.tensor(te[t]), torch.tensor(dicts[t]), beta) for t in types}
        got = L.weighted_distillation_loss_batch({t: torch.tensor(s[t]) for t in types},
                                                 {t: torch.tensor(te[t]) for t in types}, w).numpy()
        want = [L.weighted_distillation_loss({t: (s[t][i], te[t][i]) for t in types}, dicts, beta)
                for i in range(10)]
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_oracle_helpers_agree_with_known_values():
    assert O.cos([1, 0], [0.6, 0.8]) == pytest.approx(0.6)
    assert O.focal([1, 0], [0.8, 0.6], [0.3, math.sqrt(0.91)], 1.0) == pytest.approx(0.0719205181129873)
