import json

import pytest

from app import main, parse_params
from core import save_config
from core.errors import InvalidArgumentError
from core.imagecore import write_image


@pytest.fixture
def config_file(tmp_path, tiny_run_config):
    path = tmp_path / "tiny_run.yaml"
    save_config(tiny_run_config, path)
    return path


def test_parse_params():
    assert parse_params("gammas=[1.0, 1.5, 2],cell=3") == {"gammas": [1.0, 1.5, 2], "cell": 3}
    assert parse_params(None) == {}
    with pytest.raises(InvalidArgumentError):
        parse_params("cell")


def test_augment_prints_the_outcome(tmp_path, capsys, random_image):
    write_image(tmp_path / "in.png", random_image())
    code = main(["augment", "--op", "d", "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "out.png"),
                 "--params", "gammas=[1.5,1.5,1.5]", "--seed", "3"])
    assert code == 0
    record = json.loads(capsys.readouterr().out)
    assert record["op_applied"] == "D_COLORDIST"
    assert (record["label_after"], record["attack_after"]) == ("SPOOF", "SYNTH_PRINT")
    assert record["params_used"] == {"gammas": [1.5, 1.5, 1.5]}
    assert (tmp_path / "out.png").exists()


def test_augment_keeps_live_label_for_generic_ops(tmp_path, capsys, random_image):
    write_image(tmp_path / "in.png", random_image())
    assert main(["augment", "--op", "B_LOWRES", "--in", str(tmp_path / "in.png"),
                 "--out", str(tmp_path / "out.png")]) == 0
    record = json.loads(capsys.readouterr().out)
    assert (record["label_after"], record["attack_after"]) == ("LIVE", "NONE")


@pytest.mark.parametrize("op, params, check", [
    ("d", "gamma_range=[1.5,1.5]", lambda p: p["gammas"] == [1.5, 1.5, 1.5]),
    ("c", "max_shift=0", lambda p: p["gains"] == [1.0] * 3 and p["offsets"] == [0.0] * 3),
    ("h", "freq_range=[4,4],amplitude=0.1", lambda p: p["freq_y"] == 4 and abs(p["freq_x"]) == 4
     and p["amplitude"] == 0.1),
])
def test_augment_accepts_strength_ranges(tmp_path, capsys, random_image, op, params, check):
    write_image(tmp_path / "in.png", random_image())
    code = main(["augment", "--op", op, "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "out.png"),
                 "--params", params])
    assert code == 0
    assert check(json.loads(capsys.readouterr().out)["params_used"])



def test_augment_pda(tmp_path, capsys, random_image):
    write_image(tmp_path / "spoof.png", random_image(seed=1))
    write_image(tmp_path / "live.png", random_image(seed=2))
    code = main(["augment", "--op", "pda", "--in", str(tmp_path / "spoof.png"), "--out", str(tmp_path / "o.png"),
                 "--live", str(tmp_path / "live.png"), "--label", "SPOOF", "--attack", "PRINT",
                 "--params", "p_patch=1.0"])
    assert code == 0
    record = json.loads(capsys.readouterr().out)
    assert record["op_applied"] == "PDA"
    assert record["params_used"]["patch_labels"] == [[0, 0], [0, 0]]


@pytest.mark.parametrize("extra", [
    ["--op", "d", "--params", "bogus=1"],
    ["--op", "c", "--params", "max_shift=0.5"],
    ["--op", "z"],
    ["--op", "pda"],
    ["--op", "d", "--attack", "PRINT"],
])
def test_augment_usage_errors(tmp_path, capsys, random_image, extra):
    write_image(tmp_path / "in.png", random_image())
    code = main(["augment", "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "out.png"), *extra])
    assert code in (2, 3)
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "bogus.key=1"]) == 2
    assert "bogus.key" in capsys.readouterr().err


def test_missing_manifest_is_a_data_error(tmp_path, config_file):
    code = main(["train", "--config", str(config_file), "--data", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "m.fasv")])
    assert code == 3


def test_commands_chain(tmp_path, capsys, config_file):
    data, run = tmp_path / "data", tmp_path / "run"
    run.mkdir()
    common = ["--config", str(config_file)]
    split = ["--data", str(data / "manifest.csv")]
    assert main(["synth", *common, "--out", str(data)]) == 0
    assert main(["train", *common, *split, "--out", str(run / "m.fasv"), "--log", str(run / "log.csv")]) == 0
    assert main(["bank", *common, *split, "--checkpoint", str(run / "m.fasv"), "--out", str(run / "b.fasb")]) == 0
    assert main(["score", *common, *split, "--checkpoint", str(run / "m.fasv"), "--bank", str(run / "b.fasb"),
                 "--calib", "calib", "--out", str(run / "s.csv"), "--threshold-out", str(run / "t.json")]) == 0
    threshold = json.loads((run / "t.json").read_text())
    assert threshold["calib_split"] == "calib"
    capsys.readouterr()
    assert main(["eval", *common, *split, "--scores", str(run / "s.csv"), "--threshold", str(run / "t.json"),
                 "--out", str(run / "metrics.json")]) == 0
    assert "ACER" in capsys.readouterr().out
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["threshold"] == threshold["threshold"]


def test_pipeline_failure_names_the_stage(tmp_path, capsys, config_file):
    code = main(["pipeline", "--config", str(config_file), "--out", str(tmp_path / "run"), "--stages", "synth,bank"])
    assert code == 3
    assert "stage 'bank'" in capsys.readouterr().err


def test_grad_check_command(capsys):
    assert main(["grad-check", "--samples", "2", "--max-per-tensor", "2"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["max_rel_error"] < 1e-4
    assert record["floor"] == 1e-3
    assert main(["grad-check", "--samples", "2", "--max-per-tensor", "2", "--floor", "1e-6"]) in (0, 4)
    assert json.loads(capsys.readouterr().out)["floor"] == 1e-6
    assert main(["grad-check", "--samples", "2", "--max-per-tensor", "2", "--tolerance", "0"]) == 4
