import numpy as np
import pytest

from core.augment import (SIMULATORS, AugOp, apply_fas_aug, apply_pda, blue_noise_mask, color_distortion,
                          color_diversity, halftone_sfc, hand_tremble, hilbert_order, low_resolution, moire,
                          random_brightness, random_flip, rewrite_labels, simulator, specular_reflection)
from core.config import AugmentConfig
from core.errors import ContractError, InvalidArgumentError
from core.imagecore import constant_image, image_digest, make_rng
from core.samples import AttackType, Label, Sample

PRINT_OPS = ("d", "e", "f")
DISPLAY_OPS = ("g", "h")


def test_simulator_lookup():
    assert simulator("a").op == AugOp.A_TREMBLE
    assert simulator("H_MOIRE").op == AugOp.H_MOIRE
    with pytest.raises(InvalidArgumentError):
        simulator("z")


def test_label_rules_for_every_simulator():
    for sim in SIMULATORS:
        letter = sim.op.letter
        for label, attack in ((Label.LIVE, AttackType.NONE), (Label.SPOOF, AttackType.PRINT),
                              (Label.SPOOF, AttackType.DISPLAY)):
            new_label, new_attack = rewrite_labels(sim, label, attack)
            if letter in PRINT_OPS:
                assert (new_label, new_attack) == (Label.SPOOF, AttackType.SYNTH_PRINT)
            elif letter in DISPLAY_OPS:
                assert (new_label, new_attack) == (Label.SPOOF, AttackType.SYNTH_DISPLAY)
            else:
                assert (new_label, new_attack) == (label, attack)


def test_every_simulator_renders_a_unit_image(random_image):
    img = random_image(16, seed=2)
    for sim in SIMULATORS:
        out, params = sim.apply(img, make_rng(1))
        assert out.shape == img.shape
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert isinstance(params, dict)


def test_zero_strength_ops_are_identities(random_image):
    img = random_image(16, seed=4)
    rng = make_rng(0)
    assert hand_tremble(img, rng, 0) == img
    assert low_resolution(img, rng, 1) == img
    assert color_diversity(img, rng, 0.0) == img
    assert color_distortion(img, rng, (1.0, 1.0)) == img
    assert specular_reflection(img, rng, 0.0) == img
    assert moire(img, rng, 0.0, (3, 10)) == img


def test_parameter_ranges_are_checked(random_image):
    img = random_image()
    with pytest.raises(InvalidArgumentError):
        color_diversity(img, make_rng(0), 0.3)
    with pytest.raises(InvalidArgumentError):
        moire(img, make_rng(0), 0.5, (3, 10))
    with pytest.raises(InvalidArgumentError):
        specular_reflection(img, make_rng(0), 1.5)
    with pytest.raises(InvalidArgumentError):
        halftone_sfc(img, 2)


def test_same_seed_same_pixels(random_image):
    img = random_image(16, seed=9)
    for sim in SIMULATORS:
        first, _ = sim.apply(img, make_rng(7))
        second, _ = sim.apply(img, make_rng(7))
        assert image_digest(first) == image_digest(second)


def test_params_reproduce_the_image(random_image):
    img = random_image(16, seed=10)
    for sim in SIMULATORS:
        out, params = sim.apply(img, make_rng(3))
        assert sim.render(img, **params) == out


def test_halftone_sfc_extremes_and_mean():
    assert np.array_equal(halftone_sfc(constant_image(8, 8, 0.0), 1).data, np.zeros((8, 8, 3)))
    assert np.array_equal(halftone_sfc(constant_image(8, 8, 1.0), 1).data, np.ones((8, 8, 3)))
    half = halftone_sfc(constant_image(16, 16, 0.5), 1)
    assert set(np.unique(half.data)) <= {0.0, 1.0}
    assert half.data.mean() == pytest.approx(0.5, abs=1e-2)


def test_hilbert_order_visits_every_pixel_once():
    ys, xs = hilbert_order(5, 7)
    assert len(ys) == 35
    assert len(set(zip(ys.tolist(), xs.tolist()))) == 35


def test_blue_noise_mask_is_a_rank_permutation():
    mask = blue_noise_mask(16)
    assert mask.shape == (16, 16)
    assert np.array_equal(np.sort(mask.ravel()), np.arange(256))


def test_fas_aug_probability_edges(random_image):
    sample = Sample(random_image(), Label.LIVE)
    skipped = apply_fas_aug(sample, make_rng(0), 0.0)
    assert skipped.op_applied == AugOp.NONE
    assert skipped.image == sample.image
    assert skipped.label_after == Label.LIVE
    applied = apply_fas_aug(sample, make_rng(0), 1.0)
    assert applied.op_applied != AugOp.NONE
    with pytest.raises(InvalidArgumentError):
        apply_fas_aug(sample, make_rng(0), 1.5)


def test_fas_aug_outcome_labels_follow_the_op(random_image):
    sample = Sample(random_image(), Label.LIVE)
    for seed in range(40):
        outcome = apply_fas_aug(sample, make_rng(seed), 1.0)
        letter = outcome.op_applied.letter
        if letter in PRINT_OPS + DISPLAY_OPS:
            assert outcome.label_after == Label.SPOOF
        else:
            assert outcome.label_after == Label.LIVE
        record = outcome.to_record()
        assert record["op_applied"] == outcome.op_applied.value


def test_pda_statistics_and_patch_consistency():
    spoof = Sample(constant_image(32, 32, 0.0), Label.SPOOF, AttackType.PRINT)
    live = Sample(constant_image(32, 32, 1.0), Label.LIVE)
    rng = make_rng(11)
    replaced = total = 0
    for _ in range(700):
        out = apply_pda(spoof, live, rng, 0.5, 8)
        assert out.label == Label.SPOOF
        assert out.attack_type == AttackType.PRINT
        for gy in range(4):
            for gx in range(4):
                patch = out.image.data[gy * 8:(gy + 1) * 8, gx * 8:(gx + 1) * 8]
                from_live = bool(np.all(patch == 1.0))
                assert from_live or np.all(patch == 0.0)
                assert out.patch_labels[gy, gx] == (Label.LIVE if from_live else Label.SPOOF)
                replaced += from_live
                total += 1
    sigma = np.sqrt(0.25 / total)
    assert total >= 10_000
    assert abs(replaced / total - 0.5) <= 3 * sigma


def test_pda_probability_edges():
    spoof = Sample(constant_image(16, 16, 0.0), Label.SPOOF, AttackType.DISPLAY)
    live = Sample(constant_image(16, 16, 1.0), Label.LIVE)
    none = apply_pda(spoof, live, make_rng(0), 0.0, 8)
    assert none.image == spoof.image
    assert np.all(none.patch_labels == Label.SPOOF)
    every = apply_pda(spoof, live, make_rng(0), 1.0, 8)
    assert every.image == live.image
    assert every.label == Label.SPOOF
    assert np.all(every.patch_labels == Label.LIVE)


def test_pda_contracts():
    spoof = Sample(constant_image(16, 16, 0.0), Label.SPOOF, AttackType.PRINT)
    live = Sample(constant_image(16, 16, 1.0), Label.LIVE)
    with pytest.raises(ContractError):
        apply_pda(live, live, make_rng(0), 0.5, 8)
    with pytest.raises(ContractError):
        apply_pda(spoof, spoof, make_rng(0), 0.5, 8)
    with pytest.raises(InvalidArgumentError):
        apply_pda(spoof, Sample(constant_image(8, 8, 1.0), Label.LIVE), make_rng(0), 0.5, 8)
    with pytest.raises(InvalidArgumentError):
        apply_pda(spoof, live, make_rng(0), 0.5, 5)


def test_flip_mirrors_image_and_patch_labels(random_image):
    grid = np.array([[0, 1], [1, 1]])
    sample = Sample(random_image(16), Label.SPOOF, AttackType.PRINT, patch_labels=grid)
    flipped = random_flip(sample, make_rng(0), 1.0)
    assert np.array_equal(flipped.image.data, sample.image.data[:, ::-1])
    assert np.array_equal(flipped.patch_labels, grid[:, ::-1])
    assert random_flip(sample, make_rng(0), 0.0) is sample


def test_brightness_bounds(random_image):
    sample = Sample(random_image(16), Label.LIVE)
    assert random_brightness(sample, make_rng(0), 0.0) is sample
    out = random_brightness(sample, make_rng(0), 0.2)
    assert out.image.data.max() <= 1.0
    with pytest.raises(InvalidArgumentError):
        random_brightness(sample, make_rng(0), -0.1)


def test_augment_config_validates_color_shift():
    with pytest.raises(InvalidArgumentError):
        AugmentConfig(color_shift=0.5)
