import pytest

from core.errors import DataError, InvalidArgumentError
from core.protocols import load_protocol, parse_protocol, shipped_protocols


def _row(**cells):
    base = {"subject_id": "1", "device": "1", "attack_type": "NONE", "instrument": ""}
    base.update(cells)
    return base


def test_scalar_list_and_operator_conditions():
    spec = parse_protocol({
        "name": "p",
        "train": {"subject_id": {"between": [1, 3]}, "attack_type": ["NONE", "PRINT"]},
        "test": {"subject_id": {"gt": 3}, "device": 2},
    })
    fold = spec.fold(0)
    assert fold.train.matches(_row(subject_id="2", attack_type="print"))
    assert not fold.train.matches(_row(subject_id="2", attack_type="DISPLAY"))
    assert not fold.train.matches(_row(subject_id="4"))
    assert fold.test.matches(_row(subject_id="4", device="2"))
    assert not fold.test.matches(_row(subject_id="4", device="1"))
    assert fold.calib is None


def test_numeric_and_text_equality():
    spec = parse_protocol({"name": "p", "train": {"subject_id": 7}, "test": {"instrument": {"not_in": "display1"}}})
    assert spec.fold(0).train.matches(_row(subject_id="7.0"))
    assert not spec.fold(0).test.matches(_row(instrument="DISPLAY1"))
    assert spec.fold(0).test.matches(_row(instrument=""))


def test_ordering_operator_needs_numbers():
    spec = parse_protocol({"name": "p", "train": {"device": {"lt": 3}}, "test": {}})
    with pytest.raises(InvalidArgumentError):
        spec.fold(0).train.matches(_row(device="phone"))


def test_leave_one_out_folds():
    spec = parse_protocol({"name": "loo", "train": {"subject_id": {"le": 5}},
                           "leave_one_out": {"column": "device", "values": [1, 2, 3]}})
    assert spec.n_folds == 3
    fold = spec.fold(1)
    assert fold.name == "device=2"
    assert fold.test.matches(_row(device="2"))
    assert not fold.train.matches(_row(device="2"))
    assert fold.train.matches(_row(device="3", subject_id="5"))
    assert not fold.train.matches(_row(device="3", subject_id="6"))


def test_explicit_folds_merge_with_base():
    spec = parse_protocol({
        "name": "f", "calib": {"subject_id": 9},
        "train": {"subject_id": 1}, "test": {"subject_id": 2},
        "folds": [{"name": "a", "test": {"device": 1}}, {"name": "b", "test": {"device": 2}}],
    })
    assert [f.name for f in spec.folds] == ["a", "b"]
    assert spec.fold(1).test.describe() == "subject_id eq 2 and device eq 2"
    assert spec.fold(0).calib.matches(_row(subject_id="9"))


@pytest.mark.parametrize("data", [
    {"train": {}},
    {"name": "x", "bogus": 1},
    {"name": "x", "train": {"subject_id": {"near": 3}}},
    {"name": "x", "train": {"subject_id": {"between": [1]}}},
    {"name": "x", "train": ["subject_id"]},
    {"name": "x", "leave_one_out": {"column": "device"}},
    {"name": "x", "folds": [{}], "leave_one_out": {"column": "device", "values": [1]}},
])
def test_malformed_protocols(data):
    with pytest.raises(InvalidArgumentError):
        parse_protocol(data)


def test_fold_out_of_range():
    spec = parse_protocol({"name": "p"})
    assert spec.n_folds == 1
    with pytest.raises(InvalidArgumentError):
        spec.fold(1)


def test_unknown_column_in_filter():
    spec = parse_protocol({"name": "p", "train": {"camera": 1}})
    with pytest.raises(InvalidArgumentError):
        spec.fold(0).train.matches(_row())


def test_shipped_protocols_load():
    names = shipped_protocols()
    assert {"synthetic", "oulu_p1", "oulu_p2", "oulu_p3", "oulu_p4", "siw_p1", "siw_p2", "siw_p3"} <= set(names)
    counts = {name: load_protocol(name).n_folds for name in names}
    assert counts["oulu_p3"] == 6
    assert counts["siw_p2"] == 4
    assert counts["synthetic"] == 1


def test_missing_protocol_file(tmp_path):
    with pytest.raises(DataError):
        load_protocol(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    with pytest.raises(DataError):
        load_protocol(bad)
