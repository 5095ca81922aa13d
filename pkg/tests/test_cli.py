import json
import shutil

import pytest
import yaml

from orchidkit import __version__
from orchidkit.cli import COMMANDS, main
from orchidkit.synthdata import read_sample

TINY = {
    "vae": {"widths": [4, 8, 8], "blocks": 1},
    "dataset": {"count": 4, "height": 16, "width": 16},
    "optimizer": {"vae_steps": 3, "ldm_steps": 3, "finetune_steps": 3, "batch_size": 2},
    "sampler": {"text_steps": 3, "color_steps": 3},
    "inpaint": {"steps": 4, "jump_length": 1, "resample_count": 2, "dilation": 0},
    "ldm": {"widths": [8, 16], "emb_dim": 16},
    "paths": {"data": "data", "vae": "vae/vae.ckpt", "ldm": "ldm/ldm.ckpt", "predictor": "ft/predictor.ckpt", "predictions": "pred"},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    mp = pytest.MonkeyPatch()
    mp.chdir(root)
    cfg = ("--config", "tiny.yaml")
    for command, out in [
        ("synth-gen", "data"),
        ("vae-train", "vae"),
        ("ldm-train", "ldm"),
        ("finetune-color", "ft"),
        ("predict", "pred"),
    ]:
        assert run(command, *cfg, "--out", out) == 0, command
    yield root
    mp.undo()


def manifest(path):
    return [json.loads(line) for line in (path / "manifest.jsonl").read_text().splitlines()]


def test_command_list():
    assert len(COMMANDS) == 13


def test_run_directory_contents(workspace):
    assert (workspace / "vae" / "config.yaml").exists()
    info = json.loads((workspace / "vae" / "run.json").read_text())
    assert info["version"] == __version__ and info["command"] == "vae-train"
    assert yaml.safe_load((workspace / "vae" / "config.yaml").read_text())["vae"]["widths"] == [4, 8, 8]


def test_predict_emits_reports(workspace):
    pred = workspace / "pred"
    assert {"depth_report.json", "normal_report.json", "manifest.jsonl"} <= {p.name for p in pred.iterdir()}
    assert len(manifest(pred)) == 4
    assert read_sample(pred / "sample_00000.osmp").shape == (16, 16)


@pytest.mark.parametrize("command", ["sample", "predict", "inpaint"])
def test_seeded_commands_reproducible(workspace, command):
    extra = ["--tags", "sphere"] if command == "sample" else []
    hashes = []
    for out in ("rep_a", "rep_b"):
        assert run(command, "--config", "tiny.yaml", "--seed", 4, "--out", f"{command}_{out}", *extra) == 0
        hashes.append([(e["file"], e["sha256"]) for e in manifest(workspace / f"{command}_{out}")])
    assert hashes[0] == hashes[1]


def test_evaluations(workspace):
    for command, report in [
        ("eval-depth", "depth_report.json"),
        ("eval-normal", "normal_report.json"),
        ("eval-consistency", "consistency_report.json"),
        ("pca-latents", "pca_report.json"),
    ]:
        assert run(command, "--config", "tiny.yaml", "--out", "eval") == 0, command
        assert json.loads((workspace / "eval" / report).read_text())


def test_parallel_eval_matches_serial(workspace):
    run("eval-depth", "--config", "tiny.yaml", "--out", "serial")
    run("eval-depth", "--config", "tiny.yaml", "--out", "parallel", "--jobs", 2)
    assert (workspace / "serial" / "depth_report.json").read_text() == (workspace / "parallel" / "depth_report.json").read_text()


def test_data_directory_untouched(workspace):
    before = {p.name: p.read_bytes() for p in (workspace / "data").iterdir()}
    run("vae-eval", "--config", "tiny.yaml", "--out", "eval")
    assert before == {p.name: p.read_bytes() for p in (workspace / "data").iterdir()}


def test_unknown_key_exit_code(workspace, capsys):
    assert run("sample", "--config", "tiny.yaml", "--set", "ldm.bogus=1", "--out", "bad") == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "ldm.bogus" in record["message"]
    assert not (workspace / "bad").exists()


def test_runtime_error_record(workspace, capsys):
    assert run("sample", "--config", "tiny.yaml", "--tags", "unicorn", "--out", "err") == 1
    record = json.loads((workspace / "err" / "error.json").read_text())
    assert record["error"] == "ConditionError" and "unicorn" in record["message"]
    shutil.rmtree(workspace / "err")


def test_selftest(workspace, capsys):
    assert run("selftest", "--out", "st") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 6
