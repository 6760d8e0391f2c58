import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from vood.core import AlphaSchedule
from vood.errors import EmptyMask, InvalidPercentage, NonDifferentiableModel, ShapeMismatch
from vood.model import Classifier, ClassifierConfig
from vood.synthesis import (
    SynthesisConfig,
    compute_saliency,
    keep_count,
    random_pixel_mask,
    sparsify,
    synthesize,
    synthesize_gaussian,
    synthesize_grad,
    synthesize_shuffle,
)

from oracles import brute_force_keep, pixel_multiset


class LinearImageModel(nn.Module):
    """z = W flatten(x); saliency of class c is the reshaped row W[c]."""

    def __init__(self, shape, num_classes=3, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.shape = shape
        self.W = nn.Parameter(torch.randn(num_classes, int(np.prod(shape)), generator=g, dtype=torch.float64))

    def forward(self, x):
        return x.reshape(len(x), -1) @ self.W.T


# ---- saliency ----

def test_linear_model_saliency_is_weight_row():
    model = LinearImageModel((2, 3, 3))
    x = torch.randn(4, 2, 3, 3, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 2])
    G = compute_saliency(model, x, y)
    for i in range(4):
        torch.testing.assert_close(G[i], model.W[y[i]].detach().reshape(2, 3, 3))
    assert model.W.grad is None


def test_duplicated_inputs_give_identical_saliency():
    torch.manual_seed(0)
    model = Classifier(ClassifierConfig(backbone="tiny_cnn", feature_dim=8))
    x = torch.randn(1, 3, 6, 6).repeat(3, 1, 1, 1)
    G = compute_saliency(model, x, torch.tensor([1, 1, 1]))
    assert torch.equal(G[0], G[1]) and torch.equal(G[1], G[2])


def test_saliency_matches_central_differences():
    torch.manual_seed(0)
    model = Classifier(ClassifierConfig(num_classes=2, backbone="tiny_cnn", feature_dim=4,
                                        in_channels=1)).double()
    assert sum(p.numel() for p in model.parameters()) <= 1000
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    c = 1
    G = compute_saliency(model, x, torch.tensor([c]))
    h = 1e-3
    fd = torch.zeros_like(x)
    with torch.no_grad():
        for j in range(x.numel()):
            e = torch.zeros(x.numel(), dtype=torch.float64)
            e[j] = h
            e = e.view_as(x)
            fd.view(-1)[j] = (model(x + e)[0, c] - model(x - e)[0, c]) / (2 * h)
    assert (G - fd).abs().max().item() <= 1e-3


def test_prob_saliency_differs_from_logit_saliency():
    model = LinearImageModel((1, 2, 2), num_classes=2)
    x = torch.randn(2, 1, 2, 2, dtype=torch.float64)
    y = torch.tensor([0, 1])
    g_logit = compute_saliency(model, x, y, "logit")
    g_prob = compute_saliency(model, x, y, "prob")
    p = torch.softmax(model(x), 1).detach()
    # d p_c / dx = p_c (1 - p_c) (W_c - W_other) for two classes
    for i in range(2):
        c = int(y[i])
        expect = p[i, c] * (1 - p[i, c]) * (model.W[c] - model.W[1 - c]).detach().view(1, 2, 2)
        torch.testing.assert_close(g_prob[i], expect)
    assert not torch.allclose(g_logit, g_prob)


def test_non_differentiable_model():
    class Frozen(nn.Module):
        def forward(self, x):
            return torch.zeros(len(x), 2)

    with pytest.raises(NonDifferentiableModel):
        compute_saliency(Frozen(), torch.randn(2, 1, 2, 2), torch.tensor([0, 1]))


# ---- sparsify ----

def test_sparsify_flat_example():
    G = torch.tensor([0.1, -0.5, 0.2, 0.9]).view(1, 1, 1, 4)
    G_inv, mask = sparsify(G, 50)
    torch.testing.assert_close(G_inv.view(-1), torch.tensor([0.0, -0.5, 0.0, 0.9]))
    assert brute_force_keep([0.1, -0.5, 0.2, 0.9], 50) == [False, True, False, True]
    assert mask.view(-1).tolist() == [False, True, False, True]


def test_sparsify_full_percentage_is_identity():
    G = torch.randn(3, 2, 4, 4)
    G_inv, mask = sparsify(G, 100)
    assert torch.equal(G_inv, G) and bool(mask.all())


def test_sparsify_ties_all_kept():
    G = torch.full((1, 1, 2, 4), -0.3)
    G_inv, mask = sparsify(G, 25)
    assert int(mask.sum()) == 8
    assert sum(brute_force_keep([0.3] * 8, 25)) == 8


@pytest.mark.parametrize("p", [0, -5, 100.5, float("nan")])
def test_invalid_percentage(p):
    with pytest.raises(InvalidPercentage):
        sparsify(torch.randn(1, 1, 2, 2), p)


def test_keep_count_float_noise():
    assert keep_count(10, 30) == 3
    assert keep_count(20, 5) == 1
    assert keep_count(0.1, 10) == 1


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5),
       st.floats(0.5, 100), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_element_mask_cardinality_and_order(b, c, h, w, p, seed):
    G = torch.randn(b, c, h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    _, mask = sparsify(G, p, "element")
    k = math.ceil(round(p * c * h * w / 100, 9))
    for i in range(b):
        absg, m = G[i].abs().flatten(), mask[i].flatten()
        assert int(m.sum()) == k
        if (~m).any():
            assert absg[m].min() >= absg[~m].max()


def test_pixel_granularity_uses_channel_exp_sum():
    G = torch.randn(2, 3, 4, 5, dtype=torch.float64)
    G_inv, mask = sparsify(G, 20, "pixel")
    assert mask.shape == (2, 4, 5)
    score = G.exp().sum(1)
    for i in range(2):
        oracle = brute_force_keep(score[i].flatten().tolist(), 20, absolute=False)
        assert mask[i].flatten().tolist() == oracle
    torch.testing.assert_close(G_inv, G * mask.unsqueeze(1))


def test_topk_mask_large_gradients_do_not_overflow():
    G = torch.zeros(1, 2, 2, 2)
    G[0, 0, 0, 0] = 500.0
    _, mask = sparsify(G, 25, "pixel")
    assert mask[0, 0, 0] and int(mask.sum()) == 1


# ---- gradient synthesis ----

def test_grad_alpha_zero_is_identity():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(synthesize_grad(x, torch.randn_like(x), 0.0), x)


def test_grad_single_element_superposition():
    x = torch.full((1, 1, 3, 3), 0.5)
    G = torch.zeros_like(x)
    G[0, 0, 1, 2] = 1.0
    out = synthesize_grad(x, G, 10.0, +1)
    assert out[0, 0, 1, 2] == 10.5
    out[0, 0, 1, 2] = 0.5
    assert torch.equal(out, x)


def test_grad_is_not_clamped_and_checks_shapes():
    x = torch.zeros(1, 1, 2, 2)
    assert synthesize_grad(x, torch.ones_like(x), 300.0).max() == 300.0
    with pytest.raises(ShapeMismatch):
        synthesize_grad(x, torch.ones(1, 1, 2, 3), 1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 50.0), st.floats(1.0, 100.0))
@settings(max_examples=50, deadline=None)
def test_linear_model_logit_shift_closed_form(seed, alpha, p):
    torch.manual_seed(seed)
    model = LinearImageModel((2, 3, 3), seed=seed)
    x = torch.randn(3, 2, 3, 3, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    G_inv, mask = sparsify(compute_saliency(model, x, y), p)
    with torch.no_grad():
        z0 = model(x).gather(1, y.view(-1, 1)).squeeze(1)
        up = model(synthesize_grad(x, G_inv, alpha, +1)).gather(1, y.view(-1, 1)).squeeze(1)
        down = model(synthesize_grad(x, G_inv, alpha, -1)).gather(1, y.view(-1, 1)).squeeze(1)
    for i in range(3):
        w = model.W[y[i]].detach().view(2, 3, 3)
        expected = alpha * float((w[mask[i]] ** 2).sum())
        assert float(up[i] - z0[i]) == pytest.approx(expected, rel=1e-9, abs=1e-9)
        assert up[i] >= z0[i] - 1e-9 and down[i] <= z0[i] + 1e-9


def test_grad_preserves_unmasked_elements():
    x = torch.randn(2, 3, 5, 5)
    G_inv, mask = sparsify(torch.randn(2, 3, 5, 5), 10)
    out = synthesize_grad(x, G_inv, 300.0)
    assert torch.equal(out[~mask], x[~mask])


# ---- shuffle ----

def test_single_pixel_mask_is_identity():
    x = torch.randn(1, 3, 4, 4)
    mask = torch.zeros(1, 4, 4, dtype=torch.bool)
    mask[0, 2, 1] = True
    assert torch.equal(synthesize_shuffle(x, mask), x)


def test_full_mask_global_shuffle_preserves_multiset():
    x = torch.randn(2, 3, 6, 6)
    out = synthesize_shuffle(x, torch.ones(2, 6, 6, dtype=torch.bool),
                             torch.Generator().manual_seed(0))
    for i in range(2):
        assert pixel_multiset(out[i]) == pixel_multiset(x[i])
    assert not torch.equal(out, x)


def test_shuffle_reproducible_under_seed():
    x = torch.randn(3, 3, 5, 5)
    mask = random_pixel_mask((3, 5, 5), 40, torch.Generator().manual_seed(1))
    a = synthesize_shuffle(x, mask, torch.Generator().manual_seed(7))
    b = synthesize_shuffle(x, mask, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


def test_shuffle_errors():
    x = torch.randn(1, 3, 4, 4)
    with pytest.raises(EmptyMask):
        synthesize_shuffle(x, torch.zeros(1, 4, 4, dtype=torch.bool))
    with pytest.raises(ShapeMismatch):
        synthesize_shuffle(x, torch.ones(1, 3, 4, 4, dtype=torch.bool))


def test_random_pixel_mask_count():
    mask = random_pixel_mask((4, 8, 8), 20, torch.Generator().manual_seed(0))
    assert mask.sum(dim=(1, 2)).tolist() == [keep_count(20, 64)] * 4


# ---- gaussian ----

def test_gaussian_zero_scale_identity_and_seeded():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(synthesize_gaussian(x, 0.0, torch.Generator().manual_seed(0)), x)
    a = synthesize_gaussian(x, 0.1, torch.Generator().manual_seed(3))
    b = synthesize_gaussian(x, 0.1, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_gaussian_noise_scale_statistics():
    x = torch.zeros(100, 3, 20, 20)  # 120k elements
    d = synthesize_gaussian(x, 0.1, torch.Generator().manual_seed(0)) - x
    assert d.std().item() == pytest.approx(0.1, rel=0.05)


# ---- dispatch ----

def test_synthesize_identity_returns_input():
    torch.manual_seed(0)
    model = Classifier(ClassifierConfig(backbone="tiny_cnn", feature_dim=8))
    x = torch.randn(2, 3, 6, 6)
    out = synthesize(model, x, torch.tensor([0, 1]), SynthesisConfig(method="identity"), 0)
    assert torch.equal(out, x)


@pytest.mark.parametrize("method", ["grad_add", "grad_sub", "invariant_shuffle",
                                    "random_shuffle", "gaussian_noise"])
def test_synthesize_dispatch_detached(method):
    torch.manual_seed(0)
    model = Classifier(ClassifierConfig(backbone="tiny_cnn", feature_dim=8))
    x = torch.randn(2, 3, 6, 6)
    cfg = SynthesisConfig(method=method, p_inv=30, alpha=AlphaSchedule.linear(300, 30, 5))
    out = synthesize(model, x, torch.tensor([0, 1]), cfg, 4, torch.Generator().manual_seed(0))
    assert out.shape == x.shape and not out.requires_grad
    assert all(p.grad is None for p in model.parameters())
    if method.startswith("grad_"):
        G = compute_saliency(model, x, torch.tensor([0, 1]))
        G_inv, _ = sparsify(G, 30)
        sign = 1 if method == "grad_add" else -1
        torch.testing.assert_close(out, x + sign * 30.0 * G_inv)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(method="diffusion")
    with pytest.raises(InvalidPercentage):
        SynthesisConfig(method="invariant_shuffle", p_inv=0)
    with pytest.raises(ValueError):
        SynthesisConfig(method="gaussian_noise", noise_scale=-1)
