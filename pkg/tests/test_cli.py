import json
import subprocess
import sys

import pytest

from mtslu.cli import main

ASR_SPEC = {"seed": 0, "task": "asr", "grammar": {"words": ["go", "stop", "left", "right", "now"], "length": [1, 3]},
            "n_speakers": 2, "n_mels": 16, "noise_sigma": 0.2}
SLU_SPEC = {"seed": 1, "task": "intent", "n_speakers": 1, "n_mels": 16, "noise_sigma": 0.2,
            "grammar": {"schema": {"actions": ["go", "stop"],
                                   "arguments": [{"name": "side", "values": ["left", "right"]}]}}}
RUN = {"seed": 0, "task": {"name": "intent"},
       "model": {"n_mels": 16, "d_model": 32, "n_heads": 2, "d_ff": 64, "n_enc_layers": 2, "n_dec_layers": 2,
                 "conv_channels": [4, 4], "slu_heads": 2, "tap": "ASR.1"},
       "train": {"lr": 0.003, "batch_size": 4, "max_epochs": 12, "patience": 5,
                 "pretrain": {"batch_size": 8, "max_epochs": 25}}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write(d / "asr.json", ASR_SPEC)
    write(d / "slu.json", SLU_SPEC)
    write(d / "run.json", RUN)
    steps = [["synth", "--spec", d / "asr.json", "--out", d / "asr", "--n-per-class", 40],
             ["pretrain", "--config", d / "run.json", "--data", d / "asr", "--out", d / "pre.ckpt"],
             ["synth", "--spec", d / "slu.json", "--out", d / "slu", "--n-per-class", 3],
             ["train", "--config", d / "run.json", "--init", d / "pre.ckpt", "--data", d / "slu",
              "--out", d / "ft.ckpt"]]
    for s in steps:
        assert main([str(a) for a in s]) == 0, s
    return d


def test_end_to_end(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "eval", "--checkpoint", d / "ft.ckpt", "--data", d / "slu", "--report", d / "r.json")
    assert code == 0
    report = json.loads(out)
    assert report == json.loads((d / "r.json").read_text())
    assert {"wer_ctc", "wer_attn", "accuracy", "n_items", "per_class", "config_hash", "seed"} <= set(report)
    assert report["n_items"] == 12 and report["seed"] == 0
    assert report["accuracy"] == 1.0 and report["wer_attn"] == 0.0
    assert (d / "ft.ckpt.log.csv").exists() and (d / "pre.ckpt.log.csv").exists()

    rec = json.loads((d / "slu" / "manifest.jsonl").read_text().splitlines()[0])
    code, out, _ = run(capsys, "decode", "--checkpoint", d / "ft.ckpt", "--features", d / "slu" / rec["feats"])
    assert code == 0
    res = json.loads(out)
    assert res["transcript"] == rec["transcript"]
    assert res["intent"] == rec["intent"]


def test_error_exit_codes(workdir, capsys, tmp_path):
    d = workdir

    def expect(code, *argv):
        got, out, err = run(capsys, *argv)
        assert got == code, err
        payload = json.loads(err)
        assert payload["exit_code"] == code and payload["message"] and out == ""
        return payload

    bad_key = write(tmp_path / "bad.json", {**RUN, "optimizer": "sgd"})
    assert expect(2, "pretrain", "--config", bad_key, "--data", d / "asr", "--out", tmp_path / "x")["error"] == \
        "config_error"
    derived = write(tmp_path / "derived.json", {**RUN, "model": {**RUN["model"], "vocab_size": 50}})
    expect(2, "train", "--config", derived, "--init", d / "pre.ckpt", "--data", d / "slu", "--out", tmp_path / "x")
    (tmp_path / "broken.json").write_text("{not json")
    expect(2, "pretrain", "--config", tmp_path / "broken.json", "--data", d / "asr", "--out", tmp_path / "x")

    expect(3, "train", "--config", d / "run.json", "--init", d / "pre.ckpt", "--data", d / "asr",
           "--out", tmp_path / "x")  # asr corpus under an intent config
    expect(3, "eval", "--checkpoint", d / "ft.ckpt", "--data", tmp_path / "missing")

    wide = write(tmp_path / "wide.json", {**RUN, "model": {**RUN["model"], "d_model": 64}})
    assert expect(4, "train", "--config", wide, "--init", d / "pre.ckpt", "--data", d / "slu",
                  "--out", tmp_path / "x")["error"] == "checkpoint_error"
    raw = (d / "ft.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) - 100])
    expect(4, "eval", "--checkpoint", tmp_path / "trunc.ckpt", "--data", d / "slu")
    assert not (tmp_path / "x").exists()


def test_seed_override_changes_provenance(workdir, capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--spec", workdir / "slu.json", "--out", tmp_path / "s", "--n-per-class", 1,
                       "--seed", 9)
    assert code == 0 and json.loads(out)["n_utterances"] == 4


def test_help_and_entry_point():
    for argv in (["--help"], ["curve", "--help"]):
        res = subprocess.run([sys.executable, "-m", "mtslu.cli", *argv], capture_output=True, text=True)
        assert res.returncode == 0 and "usage" in res.stdout
    res = subprocess.run([sys.executable, "-m", "mtslu.cli"], capture_output=True, text=True)
    assert res.returncode == 2
