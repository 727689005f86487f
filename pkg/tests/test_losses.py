import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffattack.losses import (
    FeatureMap,
    GramMatrix,
    LossError,
    LossWeights,
    adversarial_loss,
    content_loss,
    gram_matrix,
    smoothness_loss,
    style_loss,
    total_loss,
    weighted_objective,
)

from oracles import central_difference, cross_entropy_naive, gram_loop, mse_loop, relative_error, smoothness_loop, style_loop


def fm(arr, layer="l"):
    return FeatureMap(layer, torch.as_tensor(np.asarray(arr, dtype=np.float64)))


# ---------------------------------------------------------------- gram_matrix

def test_gram_of_zeros_is_zero():
    g = gram_matrix(fm(np.zeros((2, 3, 3))))
    assert g.data.shape == (2, 2)
    assert torch.count_nonzero(g.data) == 0


def test_gram_of_constant_map():
    g = gram_matrix(fm(np.full((1, 2, 2), 2.0)))
    assert g.data.tolist() == [[4.0]]
    assert g.normalizer == 4.0


def test_gram_matches_loop_oracle(rng):
    f = rng.normal(size=(3, 4, 4))
    g = gram_matrix(fm(f, "conv2"))
    assert g.layer_id == "conv2"
    assert relative_error(g.data.numpy(), gram_loop(f)) < 1e-6


def test_gram_rejects_empty_spatial_extent():
    with pytest.raises(LossError):
        gram_matrix(fm(np.zeros((2, 0, 3))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_gram_symmetric_and_psd(f):
    g = gram_matrix(fm(f)).data
    assert torch.equal(g, g.t())
    assert torch.linalg.eigvalsh(g).min() >= -1e-8


# ---------------------------------------------------------------- content_loss

def test_content_loss_identity_and_constant():
    a = fm(np.random.default_rng(0).normal(size=(2, 3, 3)))
    assert float(content_loss(a, a)) == 0.0
    for shape in [(1, 1, 1), (2, 3, 3), (5, 2, 7)]:
        assert float(content_loss(fm(np.zeros(shape)), fm(np.ones(shape)))) == 1.0


def test_content_loss_oracle_and_symmetry(rng):
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    v = float(content_loss(fm(a), fm(b)))
    assert abs(v - mse_loop(a, b)) < 1e-9
    assert v == float(content_loss(fm(b), fm(a)))


def test_content_loss_shape_mismatch():
    with pytest.raises(LossError):
        content_loss(fm(np.zeros((2, 3, 3))), fm(np.zeros((2, 3, 4))))


# ---------------------------------------------------------------- style_loss

def _gm(arr, layer):
    return GramMatrix(layer, torch.as_tensor(np.asarray(arr, dtype=np.float64)), 1.0)


def test_style_loss_identity():
    rng = np.random.default_rng(3)
    grams = [gram_matrix(fm(rng.normal(size=(3, 4, 4)), f"l{i}")) for i in range(3)]
    assert float(style_loss(grams, grams)) == 0.0


def test_style_loss_single_element():
    assert float(style_loss([_gm([[0.0]], "a")], [_gm([[2.0]], "a")], [1.0])) == 4.0


def test_style_loss_weighted_layers(rng):
    gen = [rng.normal(size=(c, 4, 4)) for c in (2, 3, 4)]
    sty = [rng.normal(size=(c, 4, 4)) for c in (2, 3, 4)]
    weights = (1.0, 0.5, 0.25)
    got = style_loss(
        [gram_matrix(fm(f, f"l{i}")) for i, f in enumerate(gen)],
        [gram_matrix(fm(f, f"l{i}")) for i, f in enumerate(sty)],
        weights,
    )
    assert abs(float(got) - style_loop(gen, sty, weights)) < 1e-9


def test_style_loss_default_uniform_weights(rng):
    gen = [rng.normal(size=(2, 3, 3)) for _ in range(4)]
    sty = [rng.normal(size=(2, 3, 3)) for _ in range(4)]
    g = [gram_matrix(fm(f, f"l{i}")) for i, f in enumerate(gen)]
    s = [gram_matrix(fm(f, f"l{i}")) for i, f in enumerate(sty)]
    assert float(style_loss(g, s)) == pytest.approx(float(style_loss(g, s, [0.25] * 4)), rel=1e-12)


def test_style_loss_errors():
    with pytest.raises(LossError, match="layer mismatch"):
        style_loss([_gm([[0.0]], "a")], [_gm([[0.0]], "b")], [1.0])
    with pytest.raises(LossError, match="shape mismatch"):
        style_loss([_gm([[0.0]], "a")], [_gm(np.zeros((2, 2)), "a")], [1.0])
    with pytest.raises(LossError):
        style_loss([_gm([[0.0]], "a")], [], [1.0])


# ---------------------------------------------------------------- adversarial_loss

def test_adversarial_loss_uniform_logits():
    for t in (0, 17, 999):
        assert float(adversarial_loss(torch.zeros(1000, dtype=torch.float64), t)) == pytest.approx(math.log(1000), abs=1e-12)
    assert math.log(1000) == pytest.approx(6.9078, abs=1e-4)


def test_adversarial_loss_saturated_target():
    logits = torch.zeros(10, dtype=torch.float64)
    logits[4] = 50.0
    assert float(adversarial_loss(logits, 4)) < 1e-10


def test_adversarial_loss_naive_oracle(rng):
    logits = rng.normal(size=10) * 3
    assert abs(float(adversarial_loss(torch.tensor(logits), 3)) - cross_entropy_naive(list(logits), 3)) < 1e-9


def test_adversarial_loss_is_stable_for_huge_logits():
    logits = torch.tensor([1e4, 0.0, -1e4], dtype=torch.float64)
    assert float(adversarial_loss(logits, 1)) == pytest.approx(1e4)


@pytest.mark.parametrize("target", [-1, 10])
def test_adversarial_loss_target_range(target):
    with pytest.raises(LossError):
        adversarial_loss(torch.zeros(10), target)


def test_adversarial_loss_rejects_nonfinite():
    with pytest.raises(LossError):
        adversarial_loss(torch.tensor([0.0, float("nan")]), 0)
    with pytest.raises(LossError):
        adversarial_loss(torch.tensor([1.0]), 0)


# ---------------------------------------------------------------- smoothness_loss

def test_smoothness_constant_image():
    assert float(smoothness_loss(torch.full((3, 5, 5), 0.3))) == 0.0


def test_smoothness_hand_example():
    img = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    assert smoothness_loop(img) == 0.5
    assert float(smoothness_loss(torch.tensor(img))) == 0.5


def test_smoothness_loop_oracle(rng):
    img = rng.uniform(-1, 1, size=(3, 8, 8))
    assert abs(float(smoothness_loss(torch.tensor(img))) - smoothness_loop(img)) < 1e-9


@pytest.mark.parametrize("shape", [(3, 1, 5), (3, 5, 1)])
def test_smoothness_needs_two_pixels(shape):
    with pytest.raises(LossError):
        smoothness_loss(torch.zeros(shape))


# ---------------------------------------------------------------- total_loss

def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 3.0, 4.0, LossWeights(0, 0, 0, 0)).total == 0.0
    assert total_loss(3.5, 2.0, 3.0, 4.0, LossWeights(1, 0, 0, 0)).total == 3.5
    b = total_loss(1.5, 2.0, 0.25, 0.1, LossWeights(1, 10, 100, 5))
    assert b.total == pytest.approx(47.0, rel=1e-12)
    assert (b.content, b.style, b.adv, b.smooth) == (1.5, 2.0, 0.25, 0.1)


def test_total_loss_rejects_nonfinite():
    with pytest.raises(LossError):
        total_loss(float("inf"), 0, 0, 0, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(LossError):
        LossWeights(-1.0, 0, 0, 0)
    assert not LossWeights(0, 0, 0, 0).any_positive()


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 1e3), min_size=4, max_size=4),
    st.lists(st.floats(0, 1e3), min_size=4, max_size=4),
    st.integers(0, 3),
)
def test_total_loss_linear_in_each_weight(terms, weights, k):
    base = total_loss(*terms, LossWeights(*weights))
    doubled = list(weights)
    doubled[k] *= 2
    other = total_loss(*terms, LossWeights(*doubled))
    # doubling lambda_k adds exactly one more copy of that term's contribution
    assert other.total == pytest.approx(base.total + weights[k] * terms[k], rel=1e-12, abs=1e-12)
    expect = sum(w * t for w, t in zip(weights, terms))
    assert base.total == pytest.approx(expect, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, 6, elements=st.floats(-20, 20)), st.integers(0, 5))
def test_all_terms_nonnegative(a, b, logits, target):
    assert float(content_loss(fm(a), fm(b))) >= 0
    assert float(style_loss([gram_matrix(fm(a))], [gram_matrix(fm(b))])) >= 0
    assert float(adversarial_loss(torch.tensor(logits), target)) >= 0
    assert float(smoothness_loss(torch.tensor(a))) >= 0


# ---------------------------------------------------------------- gradients

def _autograd(fn, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def _numeric(fn, x):
    return central_difference(lambda v: float(fn(torch.tensor(v))), x, step=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 6, 6))
    target_feat = torch.tensor(rng.normal(size=(3, 6, 6)))
    style_gram = gram_matrix(fm(rng.normal(size=(3, 6, 6))))
    logits_x = rng.normal(size=10)
    checks = {
        "content": (lambda t: content_loss(FeatureMap("l", t), FeatureMap("l", target_feat)), x),
        "style": (lambda t: style_loss([gram_matrix(FeatureMap("l", t))], [style_gram]), x),
        "smooth": (smoothness_loss, x),
        "adv": (lambda t: adversarial_loss(t, 7), logits_x),
    }
    for name, (fn, at) in checks.items():
        assert relative_error(_autograd(fn, at), _numeric(fn, at)) < 1e-3, name


def test_weighted_total_gradient_and_scale_invariance(rng):
    x = rng.normal(size=(3, 6, 6))
    tf = torch.tensor(rng.normal(size=(3, 6, 6)))
    sg = gram_matrix(fm(rng.normal(size=(3, 6, 6))))
    proj = torch.tensor(rng.normal(size=(10, 3 * 36)))

    def total(t, w):
        f = FeatureMap("l", t)
        return weighted_objective(
            content_loss(f, FeatureMap("l", tf)),
            style_loss([gram_matrix(f)], [sg]),
            adversarial_loss(proj @ t.reshape(-1), 2),
            smoothness_loss(t),
            w,
        )

    w = LossWeights(1.0, 10.0, 0.5, 2.0)
    g = _autograd(lambda t: total(t, w), x)
    assert relative_error(g, _numeric(lambda t: total(t, w), x)) < 1e-3
    c = 3.7
    gc = _autograd(lambda t: total(t, w.scaled(c)), x)
    assert np.max(np.abs(gc - c * g)) <= 1e-9 * max(1.0, np.max(np.abs(gc)))
