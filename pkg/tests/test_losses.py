import dataclasses
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from core.config import EvalConfig
from core.errors import InvalidArgumentError
from core.imagecore import ImageTensor, make_rng
from core.losses import apl, l2softmax, overall_loss
from core.vit import build_model, forward, normalize_images


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def test_uniform_logits_give_ln2():
    features = torch.randn(5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    losses, degenerate = l2softmax(features, torch.zeros(2, 4, dtype=torch.float64),
                                   torch.zeros(2, dtype=torch.float64), [0, 1, 0, 1, 1], alpha=16.0)
    assert torch.allclose(losses, torch.full((5,), math.log(2), dtype=torch.float64), atol=1e-12, rtol=0)
    assert not bool(degenerate.any())


def test_margin_of_two_gives_softplus():
    loss, _ = l2softmax(_t([1.0, 0.0]), _t([[2.0, 0.0], [0.0, 0.0]]), _t([0.0, 0.0]), 0, alpha=1.0)
    assert float(loss) == pytest.approx(0.126928011, abs=1e-9)
    assert float(loss) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)


def test_positive_rescale_invariance():
    gen = torch.Generator().manual_seed(1)
    features = torch.randn(6, 8, dtype=torch.float64, generator=gen)
    weight = torch.randn(2, 8, dtype=torch.float64, generator=gen)
    bias = torch.randn(2, dtype=torch.float64, generator=gen)
    labels = [0, 1, 1, 0, 1, 0]
    base, _ = l2softmax(features, weight, bias, labels, alpha=16.0)
    for scale in (1e-3, 0.5, 7.0, 1e4):
        scaled, _ = l2softmax(features * scale, weight, bias, labels, alpha=16.0)
        assert torch.allclose(scaled, base, atol=1e-12, rtol=0)


def test_zero_weights_bias_gradient_is_softmax_minus_onehot():
    gen = torch.Generator().manual_seed(2)
    features = torch.randn(4, 3, dtype=torch.float64, generator=gen)
    weight = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    labels = [0, 1, 1, 1]
    losses, _ = l2softmax(features, weight, bias, labels, alpha=4.0)
    losses.mean().backward()
    onehot = F.one_hot(torch.tensor(labels), 2).to(torch.float64)
    expected = (torch.full((4, 2), 0.5, dtype=torch.float64) - onehot).mean(dim=0)
    assert torch.allclose(bias.grad, expected, atol=1e-12)


def test_zero_feature_is_flagged_not_raised():
    loss, degenerate = l2softmax(_t([0.0, 0.0]), _t([[1.0, 0.0], [0.0, 1.0]]), _t([0.0, 0.0]), 1, alpha=16.0)
    assert bool(degenerate)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-12)


def test_l2softmax_rejects_bad_alpha_and_label_count():
    with pytest.raises(InvalidArgumentError):
        l2softmax(_t([[1.0, 0.0]]), torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), [0], 0.0)
    with pytest.raises(InvalidArgumentError):
        l2softmax(_t([[1.0, 0.0]]), torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
                  [0, 1], 1.0)


def test_apl_uniform_weights_zero_logits():
    logits = torch.zeros(4, 2, dtype=torch.float64)
    weights = torch.full((4,), 0.25, dtype=torch.float64)
    assert float(apl(logits, [0, 1, 1, 0], weights)) == pytest.approx(math.log(2), abs=1e-12)


def test_apl_one_hot_weights_pick_a_patch():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 5, 2, dtype=torch.float64, generator=gen)
    labels = np.array([[0, 1, 0, 1, 1], [1, 1, 0, 0, 0]])
    weights = torch.zeros(2, 5, dtype=torch.float64)
    weights[0, 3] = 1.0
    weights[1, 0] = 1.0
    out = apl(logits, labels, weights)
    expected = torch.stack([F.cross_entropy(logits[0, 3:4], torch.tensor([1])),
                            F.cross_entropy(logits[1, 0:1], torch.tensor([1]))])
    assert torch.allclose(out, expected, atol=1e-12)


def test_unit_weights_alpha_two_give_softplus_of_minus_two():
    loss, degenerate = l2softmax(_t([1.0, 0.0]), torch.eye(2, dtype=torch.float64), _t([0.0, 0.0]), 0, alpha=2.0)
    assert not bool(degenerate)
    assert float(loss) == pytest.approx(0.126928011, abs=1e-9)


def _patch_loss_by_loop(logits, labels, weights):
    out = []
    for b in range(logits.shape[0]):
        total = 0.0
        for j in range(logits.shape[1]):
            row = [float(v) for v in logits[b, j]]
            log_norm = max(row) + math.log(sum(math.exp(v - max(row)) for v in row))
            total += float(weights[b, j]) * (log_norm - row[int(labels[b, j])])
        out.append(total)
    return out


def test_apl_random_weights_match_a_per_patch_loop():
    rng = make_rng(11)
    for _ in range(20):
        logits = rng.normal(scale=3.0, size=(3, 6, 2))
        labels = rng.integers(0, 2, size=(3, 6))
        weights = rng.random((3, 6))
        weights /= weights.sum(axis=1, keepdims=True)
        got = apl(_t(logits), labels, _t(weights))
        expected = _patch_loss_by_loop(logits, labels, weights)
        assert np.allclose(got.numpy(), expected, atol=1e-12, rtol=0)


def test_apl_uniform_weights_give_the_mean_patch_loss():
    gen = torch.Generator().manual_seed(4)
    logits = 2.0 * torch.randn(2, 8, 2, dtype=torch.float64, generator=gen)
    labels = np.array([[0, 1, 1, 0, 1, 0, 0, 1], [1, 1, 1, 1, 0, 0, 0, 0]])
    weights = torch.full((2, 8), 1 / 8, dtype=torch.float64)
    ce = F.cross_entropy(logits.reshape(16, 2), torch.from_numpy(labels.reshape(-1)), reduction="none")
    assert torch.allclose(apl(logits, labels, weights), ce.reshape(2, 8).mean(dim=1), atol=1e-12, rtol=0)


def test_apl_validates_weights_and_shapes():
    logits = torch.zeros(2, 4, 2, dtype=torch.float64)
    labels = np.zeros((2, 4), dtype=np.int64)
    with pytest.raises(InvalidArgumentError):
        apl(logits, labels, torch.full((2, 4), 0.3, dtype=torch.float64))
    with pytest.raises(InvalidArgumentError):
        apl(logits, np.zeros((2, 3), dtype=np.int64), torch.full((2, 4), 0.25, dtype=torch.float64))
    with pytest.raises(InvalidArgumentError):
        apl(logits, labels, torch.full((2, 3), 1 / 3, dtype=torch.float64))


def _random_batch(config, seed):
    rng = make_rng(seed)
    images = [ImageTensor(rng.random((config.image_size, config.image_size, 3))) for _ in range(3)]
    labels = rng.integers(0, 2, size=3)
    patch_labels = rng.integers(0, 2, size=(3, config.n_patches))
    return normalize_images(images, EvalConfig()), labels, patch_labels


def test_overall_loss_is_the_sum_of_its_terms(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    with torch.no_grad():
        for seed in range(100):
            inputs, labels, patch_labels = _random_batch(tiny_model_config, seed)
            out = overall_loss(forward(model, inputs), labels, patch_labels, tiny_model_config)
            assert abs(out.l_overall - (out.l_class + out.l_tap + out.l_apl)) <= 1e-9
            assert out.l_apl > 0


def test_disabled_terms_are_exactly_zero(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    inputs, labels, patch_labels = _random_batch(tiny_model_config, 0)
    acts = forward(model, inputs)
    config = dataclasses.replace(tiny_model_config, use_tap=False, use_apl=False)
    out = overall_loss(acts, labels, patch_labels, config)
    assert out.l_tap == 0.0 and out.l_apl == 0.0
    assert out.l_overall == out.l_class


def test_missing_patch_labels_inherit_the_image_label(tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    inputs, labels, _ = _random_batch(tiny_model_config, 1)
    acts = forward(model, inputs)
    implicit = overall_loss(acts, labels, None, tiny_model_config)
    explicit = overall_loss(acts, labels, np.repeat(labels[:, None], tiny_model_config.n_patches, axis=1),
                            tiny_model_config)
    assert implicit.l_apl == pytest.approx(explicit.l_apl, abs=1e-12)
