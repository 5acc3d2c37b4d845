import csv
import json

import pytest

from actiontx import cli
from actiontx.config import ConfigError, load_config, parse_overrides, write_config

TINY = ["model.trunk_channels=4,4,8,8", "model.emb_hidden=4", "model.emb_out=4", "model.rpn_hidden=8",
        "model.proposals=8", "model.d_model=16", "model.ffn_hidden=16", "model.layers=1",
        "model.qpr_channels=4", "model.i3d_channels=8", "train.steps=3", "train.warmup_steps=1",
        "train.batch_size=1", "data.train_clips=4", "data.test_clips=3", "eval.batch_size=2"]


# ---------------------------------------------------------------- config

def test_defaults_and_typed_overrides():
    run = load_config(overrides=["model.heads=3", "model.trunk_channels=8,8,16,16", "train.augment=false",
                                 "eval.strict_threshold=none"])
    assert run.model.heads == 3
    assert run.model.trunk_channels == (8, 8, 16, 16)
    assert run.train.augment is False
    assert run.eval.strict_threshold is None


@pytest.mark.parametrize("bad,field", [
    ("model.nope=1", "model.nope"),
    ("bogus.steps=1", "bogus"),
    ("train.steps=abc", "train.steps"),
    ("train.steps=none", "train.steps"),
    ("model.head=lstm", "model"),
])
def test_invalid_config_names_field(bad, field):
    with pytest.raises(ConfigError) as ei:
        load_config(overrides=[bad])
    assert field in str(ei.value)


def test_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["steps=3"])
    assert parse_overrides(["train.steps=3"]) == {"train": {"steps": "3"}}


def test_ini_roundtrip(tmp_path):
    run = load_config(overrides=TINY)
    write_config(run, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == run


# ---------------------------------------------------------------- cli

def test_unknown_key_exits_2(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "train.nonsense=1"]) == 2
    assert "train.nonsense" in capsys.readouterr().err


def test_missing_checkpoint_exits_3(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == 3
    assert "checkpoint not found" in capsys.readouterr().err


def test_ablate_list_covers_heads_by_layers(capsys):
    assert cli.main(["ablate", "--list"]) == 0
    names = capsys.readouterr().out.split()
    for h in (2, 3, 6):
        for l in (2, 3, 6):
            assert f"h{h}_l{l}" in names
    for n in ("head_i3d", "head_tx+i3d", "qpr_lowres", "gt_boxes", "action_agnostic", "no_augment",
              "class_specific_reg", "r_small_16", "r_large_300"):
        assert n in names


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    assert cli.main(["gen-data", "--n", "2"] + TINY) == 0
    assert (tmp_path / "gen-data" / "manifest.json").exists()
    assert (tmp_path / "gen-data" / "record.json").exists()


def test_end_to_end_tiny_run(tmp_path):
    out = tmp_path / "train"
    assert cli.main(["train", "--out", str(out), "--mode", "gt-boxes"] + TINY) == 0
    ck = out / "checkpoint.bin"
    assert ck.exists() and (out / "train_log.ndjson").exists() and (out / "config.ini").exists()
    rec = json.loads((out / "record.json").read_text())
    assert rec["command"] == "train" and "code_version" in rec

    ev_out = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(ck), "--out", str(ev_out)]) == 0
    for name in ("detections.csv", "metrics.csv", "bins.csv", "report.json",
                 "ap_per_class.png", "ap_by_area.png", "ap_by_count.png"):
        assert (ev_out / name).exists(), name
    with open(ev_out / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) >= 6

    # the longer-context eval mode
    assert cli.main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "ev2"),
                     "--eval-frames", "2T", "--no-strict"]) == 0

    at = tmp_path / "att"
    assert cli.main(["dump-attention", "--checkpoint", str(ck), "--out", str(at), "--clips", "1",
                     "--proposals", "1"]) == 0
    assert (at / "attention.csv").exists()
    assert list((at / "maps").glob("*.pgm"))

    # a checkpoint cannot be evaluated under a different model config
    assert cli.main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "ev3"),
                     "model.layers=2"]) == 3


def test_ablate_single_entry(tmp_path):
    assert cli.main(["ablate", "--only", "baseline", "--out", str(tmp_path)] + TINY) == 0
    with open(tmp_path / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["name"] for r in rows] == ["baseline"]
