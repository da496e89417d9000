import json
import os

import pytest

from scenekt.cli import main

GEN_CFG = {
    "n_object_classes": 8,
    "n_relations": 7,
    "scenes": 30,
    "d_v": 8,
    "d_s": 4,
    "objects_min": 3,
    "objects_max": 5,
    "seed": 7,
}

TRAIN_CFG = {"epochs": 1, "lr": 0.01}


@pytest.fixture()
def workspace(tmp_path):
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps(GEN_CFG))
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps(TRAIN_CFG))
    data_dir = str(tmp_path / "data")
    assert main(["gen-data", "--config", str(gen_cfg), "--out", data_dir]) == 0
    return {"tmp": tmp_path, "gen_cfg": gen_cfg, "train_cfg": train_cfg, "data": data_dir}


def test_gen_data_outputs_and_determinism(workspace, tmp_path):
    data = workspace["data"]
    for name in ("train.jsonl", "test.jsonl", "meta.json", "config.json"):
        assert os.path.exists(os.path.join(data, name))
    echoed = json.loads(open(os.path.join(data, "config.json")).read())
    assert echoed["seed"] == GEN_CFG["seed"]
    other = str(tmp_path / "data2")
    assert main(["gen-data", "--config", str(workspace["gen_cfg"]), "--out", other]) == 0
    assert open(os.path.join(data, "train.jsonl")).read() == open(
        os.path.join(other, "train.jsonl")
    ).read()


def test_gen_data_seed_flag_overrides_config(workspace, tmp_path):
    out = str(tmp_path / "data-s9")
    assert main(["gen-data", "--config", str(workspace["gen_cfg"]), "--out", out, "--seed", "9"]) == 0
    assert json.loads(open(os.path.join(out, "config.json")).read())["seed"] == 9


def test_gen_data_unknown_key_fails(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_objcts": 10}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "unknown generator config keys" in capsys.readouterr().err


def test_train_writes_artifacts_and_is_deterministic(workspace):
    runs = []
    for name in ("run-a", "run-b"):
        out = str(workspace["tmp"] / name)
        code = main([
            "train", "--data", workspace["data"], "--out", out,
            "--config", str(workspace["train_cfg"]), "--no-bias",
        ])
        assert code == 0
        for artifact in ("checkpoint.json", "train_log.jsonl", "metrics.json", "metrics.txt", "config.json"):
            assert os.path.exists(os.path.join(out, artifact))
        runs.append(open(os.path.join(out, "checkpoint.json")).read())
    assert runs[0] == runs[1]


def test_train_config_echo_reflects_flags(workspace):
    out = str(workspace["tmp"] / "run-echo")
    assert main([
        "train", "--data", workspace["data"], "--out", out,
        "--config", str(workspace["train_cfg"]), "--no-kt", "--no-fc", "--no-bias",
        "--lr", "0.005", "--seed", "3",
    ]) == 0
    cfg = json.loads(open(os.path.join(out, "config.json")).read())
    assert cfg["lr"] == 0.005 and cfg["seed"] == 3
    assert cfg["toggles"] == {"so": True, "kt": False, "fc": False, "bias": False}


def test_train_fc_without_kt_fails(workspace, capsys):
    out = str(workspace["tmp"] / "run-bad")
    code = main([
        "train", "--data", workspace["data"], "--out", out,
        "--config", str(workspace["train_cfg"]), "--no-kt",
    ])
    assert code == 1
    assert "FC" in capsys.readouterr().err


def test_eval_checkpoint(workspace, capsys):
    out = str(workspace["tmp"] / "run-eval")
    assert main([
        "train", "--data", workspace["data"], "--out", out,
        "--config", str(workspace["train_cfg"]), "--no-bias",
    ]) == 0
    capsys.readouterr()
    ckpt = os.path.join(out, "checkpoint.json")
    metrics_dir = str(workspace["tmp"] / "eval-out")
    assert main([
        "eval", "--data", workspace["data"], "--checkpoint", ckpt,
        "--task", "predcls", "--mode", "both", "--out", metrics_dir, "--no-bias",
    ]) == 0
    printed = capsys.readouterr().out
    assert "predcls" in printed and "mean recall" in printed
    doc = json.loads(open(os.path.join(metrics_dir, "metrics.json")).read())
    assert set(doc["results"]) == {"predcls"}

    # tail report appends per-relation rows
    assert main([
        "eval", "--data", workspace["data"], "--checkpoint", ckpt,
        "--report", "tail", "--bottom", "3", "--no-bias",
    ]) == 0
    printed = capsys.readouterr().out
    assert "train_count" in printed


def test_eval_sgdet_without_detections_fails(workspace, capsys):
    out = str(workspace["tmp"] / "run-sgdet")
    assert main([
        "train", "--data", workspace["data"], "--out", out,
        "--config", str(workspace["train_cfg"]), "--no-bias",
    ]) == 0
    code = main([
        "eval", "--data", workspace["data"],
        "--checkpoint", os.path.join(out, "checkpoint.json"), "--task", "sgdet",
    ])
    assert code == 1
    assert "detections" in capsys.readouterr().err


def test_eval_missing_checkpoint_fails(workspace, capsys):
    code = main([
        "eval", "--data", workspace["data"], "--checkpoint",
        str(workspace["tmp"] / "nope.json"),
    ])
    assert code == 1


def test_ablate_writes_summary(workspace):
    out = str(workspace["tmp"] / "ablation")
    assert main([
        "ablate", "--data", workspace["data"], "--out", out,
        "--config", str(workspace["train_cfg"]), "--seeds", "1",
    ]) == 0
    doc = json.loads(open(os.path.join(out, "ablation.json")).read())
    assert [row["variant"] for row in doc["summary"]] == [
        "BL", "BL+SO", "BL+SO+KT", "BL+SO+KT+FC"
    ]
    for row in doc["summary"]:
        assert len(row["per_seed"]) == 1
        assert 0.0 <= row["mean"] <= 1.0
    assert doc["runs"][0]["seed"] == 0


def test_ablate_invalid_seeds(workspace, capsys):
    code = main([
        "ablate", "--data", workspace["data"], "--out",
        str(workspace["tmp"] / "abl-bad"), "--seeds", "0",
    ])
    assert code == 1
