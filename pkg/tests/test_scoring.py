import numpy as np
import pytest

from core.config import EvalConfig
from core.errors import CheckpointError, ContractError, DataError, InvalidArgumentError, NumericError
from core.imagecore import ImageTensor, make_rng
from core.metrics import error_counts
from core.samples import AttackType, Label, Sample
from core.scoring import (NORM_TOLERANCE, ReferenceBank, ScoreReport, build_bank, calibrate, load_bank, read_scores,
                          save_bank, score, score_batch, score_vectors, select_threshold, threshold_record,
                          write_scores)
from core.vit import build_model


def _samples(n, label, seed, size=16):
    rng = make_rng(seed)
    attack = AttackType.NONE if label == Label.LIVE else AttackType.PRINT
    return [Sample(ImageTensor(rng.random((size, size, 3))), label, attack, sample_id=f"{label.name}{seed}_{i}")
            for i in range(n)]


def test_bank_rows_are_unit_norm(tiny_model_config):
    model = build_model(tiny_model_config)
    bank = build_bank(model, _samples(5, Label.LIVE, 0))
    assert bank.size == 5
    assert np.all(np.abs(np.linalg.norm(bank.vectors, axis=1) - 1.0) <= NORM_TOLERANCE)
    assert bank.tap == str(tiny_model_config.score_tap_point)


def test_self_query_scores_one(tiny_model_config):
    model = build_model(tiny_model_config)
    live = _samples(4, Label.LIVE, 1)
    bank = build_bank(model, live)
    for sample in live:
        report = score(model, bank, sample)
        assert report.score >= 1 - 1e-6
        assert report.nearest_reference == sample.sample_id


def test_bank_rejects_spoof_and_empty_input(tiny_model_config):
    model = build_model(tiny_model_config)
    with pytest.raises(ContractError):
        build_bank(model, _samples(2, Label.LIVE, 0) + _samples(1, Label.SPOOF, 1))
    with pytest.raises(InvalidArgumentError):
        build_bank(model, [])


def test_bank_tap_out_of_range(tiny_model_config):
    with pytest.raises(InvalidArgumentError):
        build_bank(build_model(tiny_model_config), _samples(2, Label.LIVE, 0), tap=9)


def test_score_vectors_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n, dim = int(rng.integers(1, 12)), int(rng.integers(2, 9))
        bank = ReferenceBank.from_vectors(rng.normal(size=(n, dim)))
        queries = rng.normal(size=(3, dim))
        for report, q in zip(score_vectors(bank, queries), queries):
            sims = [float(np.dot(row, q) / np.linalg.norm(q)) for row in bank.vectors]
            best = int(np.argmax(sims))
            assert report.score == pytest.approx(sims[best], abs=1e-12)
            assert report.nearest_reference == bank.source_ids[best]


def test_extending_the_bank_never_lowers_a_score():
    rng = np.random.default_rng(6)
    for _ in range(200):
        dim = int(rng.integers(2, 9))
        bank = ReferenceBank.from_vectors(rng.normal(size=(int(rng.integers(1, 8)), dim)))
        queries = rng.normal(size=(4, dim))
        extra = rng.normal(size=(int(rng.integers(1, 4)), dim))
        bigger = bank.extended(extra, [f"x{i}" for i in range(len(extra))])
        before = [r.score for r in score_vectors(bank, queries)]
        after = [r.score for r in score_vectors(bigger, queries)]
        assert all(b >= a - 1e-12 for a, b in zip(before, after))


def test_zero_query_is_degenerate():
    bank = ReferenceBank.from_vectors(np.eye(3))
    (report,) = score_vectors(bank, np.zeros((1, 3)))
    assert report.score == -1.0
    assert report.degenerate


def test_bank_validation():
    with pytest.raises(NumericError):
        ReferenceBank.from_vectors(np.zeros((2, 3)))
    with pytest.raises(InvalidArgumentError):
        ReferenceBank(np.ones((1, 3)), ["a"], "4")
    bank = ReferenceBank.from_vectors(np.eye(2), ["a", "b"], "4")
    bigger = bank.extended(np.array([[3.0, 4.0]]), ["c"])
    assert bigger.size == 3
    assert bigger.source_ids == ["a", "b", "c"]
    assert np.allclose(bigger.vectors[2], [0.6, 0.8])


def test_bank_file_round_trip(tmp_path):
    bank = ReferenceBank.from_vectors(np.random.default_rng(0).normal(size=(4, 5)), list("abcd"), "5.attn", "abc123")
    loaded = load_bank(save_bank(bank, tmp_path / "b.fasb"))
    assert np.array_equal(loaded.vectors, bank.vectors)
    assert loaded.source_ids == bank.source_ids
    assert (loaded.tap, loaded.model_fingerprint) == ("5.attn", "abc123")


def test_bank_file_truncated(tmp_path):
    path = save_bank(ReferenceBank.from_vectors(np.eye(3)), tmp_path / "b.fasb")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError) as info:
        load_bank(path)
    assert info.value.tensor == "vectors"


def test_threshold_separable_case():
    live, spoof = [0.9, 0.95, 0.8], [0.1, 0.3, 0.2]
    theta = select_threshold(live, spoof)
    fa, fr = error_counts(live, spoof, [theta])
    assert (int(fa[0]), int(fr[0])) == (0, 0)


def test_threshold_separable_case_sits_mid_gap():
    assert select_threshold([0.8, 0.9, 0.95], [0.1, 0.2, 0.3]) == (0.3 + 0.8) / 2


def test_threshold_identical_score_multisets():
    scores = [0.1, 0.2, 0.3, 0.4]
    theta = select_threshold(scores, list(scores))
    assert theta == 0.25
    fa, fr = error_counts(scores, scores, [theta])
    assert (int(fa[0]), int(fr[0])) == (2, 2)


def test_threshold_balances_error_rates():
    rng = np.random.default_rng(9)
    for _ in range(500):
        live = rng.normal(0.6, 0.2, size=int(rng.integers(1, 40)))
        spoof = rng.normal(0.4, 0.2, size=int(rng.integers(1, 40)))
        theta = select_threshold(live, spoof)
        fa, fr = error_counts(live, spoof, [theta])
        far, frr = fa[0] / spoof.size, fr[0] / live.size
        assert abs(far - frr) <= 1 / min(live.size, spoof.size) + 1e-12


def test_threshold_needs_both_classes():
    with pytest.raises(InvalidArgumentError):
        select_threshold([], [0.1])


def test_threshold_record():
    record = threshold_record([0.9, 0.4], [0.1, 0.5], 0.45, "test")
    assert record == {"threshold": 0.45, "far": 0.5, "frr": 0.5, "calib_split": "test", "n_live": 2, "n_spoof": 2}


def test_with_threshold_predicts_live_at_or_above():
    report = ScoreReport("x", 0.5, "r")
    assert report.with_threshold(0.5).predicted == Label.LIVE
    assert report.with_threshold(0.6).predicted == Label.SPOOF


def test_score_batch_copies_ground_truth(tiny_model_config):
    model = build_model(tiny_model_config)
    bank = build_bank(model, _samples(3, Label.LIVE, 0))
    reports = score_batch(model, bank, _samples(2, Label.SPOOF, 3), threshold=2.0)
    assert [r.label for r in reports] == [Label.SPOOF, Label.SPOOF]
    assert [r.attack_type for r in reports] == [AttackType.PRINT, AttackType.PRINT]
    assert all(r.predicted == Label.SPOOF for r in reports)


def test_calibrate_on_calib_split(tiny_model_config):
    model = build_model(tiny_model_config)
    bank = build_bank(model, _samples(3, Label.LIVE, 0))
    test = _samples(2, Label.LIVE, 1) + _samples(2, Label.SPOOF, 2)
    calib = _samples(2, Label.LIVE, 3) + _samples(2, Label.SPOOF, 4)
    reports, live, spoof, theta = calibrate(model, bank, calib, test, EvalConfig(calib_split="calib"))
    assert [r.sample_id for r in reports] == [s.sample_id for s in test]
    assert (len(live), len(spoof)) == (2, 2)
    assert theta == select_threshold(live, spoof)
    with pytest.raises(InvalidArgumentError):
        calibrate(model, bank, [], test, EvalConfig(calib_split="calib"))


def test_scores_csv_round_trip(tmp_path):
    reports = [ScoreReport("a.png", 0.1 + 0.2, "r1", Label.LIVE), ScoreReport("b.png", -1.0, "", Label.SPOOF)]
    loaded = read_scores(write_scores(reports, tmp_path / "s.csv"))
    assert [(r.sample_id, r.score, r.nearest_reference, r.predicted) for r in loaded] == \
        [("a.png", 0.1 + 0.2, "r1", Label.LIVE), ("b.png", -1.0, "", Label.SPOOF)]


def test_malformed_scores_csv(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("sample_id,score,nearest_reference,predicted\na.png,notanumber,r,LIVE\n")
    with pytest.raises(DataError):
        read_scores(path)
