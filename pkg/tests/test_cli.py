import json

import numpy as np
import pytest

from iwd.cli import build_parser, main
from iwd.data import checkerboard_image, generate_synthetic, save_idx
from iwd.defense import TrainConfig, natural_train
from iwd.diffcore import NetworkSpec, params_to_bytes
from iwd.patches import PatchGrid, permute_patches, write_pnm


@pytest.fixture
def images(tmp_path):
    x = checkerboard_image(12, 12, 3)
    write_pnm(tmp_path / "a.pgm", x)
    write_pnm(tmp_path / "b.pgm", permute_patches(x, PatchGrid(), np.roll(np.arange(16), 3)))
    write_pnm(tmp_path / "c.pgm", np.clip(0.8 * x + 0.1, 0, 1))
    return tmp_path


@pytest.fixture
def idx_data(tmp_path):
    ds = generate_synthetic(0, per_class=20, contrast=0.3, split="test")
    save_idx(ds, tmp_path / "imgs.idx", tmp_path / "labels.idx")
    model = natural_train(generate_synthetic(0, per_class=60, contrast=0.3), TrainConfig(epochs=15))
    model.save(tmp_path / "model.bin")
    return tmp_path


def test_global_flags_either_side_of_verb():
    p = build_parser()
    a = p.parse_args(["--seed", "5", "--out-dir", "o", "distance", "x", "y"])
    assert (a.seed, a.out_dir) == (5, "o")
    b = p.parse_args(["distance", "x", "y", "--seed", "7", "--threads", "2"])
    assert (b.seed, b.threads) == (7, 2)


def test_distance_report(images, capsys):
    assert main(["distance", str(images / "a.pgm"), str(images / "b.pgm")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"solver", "value", "n", "m", "marginal_error", "iterations"}
    assert rep["value"] == 0.0 and rep["n"] == 16


def test_distance_sinkhorn_and_out_file(images, capsys):
    code = main(["--out-dir", str(images / "out"), "distance", str(images / "a.pgm"), str(images / "c.pgm"),
                 "--solver", "sinkhorn", "--out", "d.json"])
    assert code == 0
    rep = json.loads((images / "out" / "d.json").read_text())
    assert rep["solver"] == "sinkhorn" and rep["value"] > 0


def test_data_dir_env(images, monkeypatch, capsys):
    monkeypatch.setenv("IWD_DATA_DIR", str(images))
    monkeypatch.chdir(images / "..")
    assert main(["distance", "a.pgm", "c.pgm"]) == 0


def test_exit_codes(images, tmp_path, capsys):
    assert main(["distance", str(images / "a.pgm"), str(tmp_path / "missing.pgm")]) == 4
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P9 garbage")
    assert main(["distance", str(images / "a.pgm"), str(bad)]) == 4
    small = tmp_path / "s.pgm"
    write_pnm(small, np.zeros((6, 6)))
    assert main(["distance", str(images / "a.pgm"), str(small)]) == 2
    spec = NetworkSpec((144, 4))
    (tmp_path / "nan.bin").write_bytes(params_to_bytes(spec, np.full(spec.n_params, np.nan)))
    assert main(["attack", "--model", str(tmp_path / "nan.bin"), "--eps-w", "0.1"]) == 3
    assert "error" in capsys.readouterr().err


def test_attack_and_eval(idx_data, capsys):
    d = idx_data
    code = main(["--out-dir", str(d), "attack", "--model", str(d / "model.bin"), "--data", str(d / "imgs.idx"),
                 "--labels", str(d / "labels.idx"), "--limit", "4", "--max-iter", "30", "--eps-w", "0.5",
                 "--out", "report.json"])
    assert code == 0
    rep = json.loads((d / "report.json").read_text())
    assert {"asr", "records", "n_eligible"} <= set(rep)
    assert len(rep["records"]) == rep["n_eligible"]
    code = main(["--out-dir", str(d), "eval", "--model", str(d / "model.bin"), "--data", str(d / "imgs.idx"),
                 "--labels", str(d / "labels.idx"), "--limit", "4", "--max-iter", "10", "--eps-w", "0.3",
                 "--attacks", "clean,fgsm,pgd10,iwda", "--out", "t.csv"])
    assert code == 0
    lines = (d / "t.csv").read_text().splitlines()
    assert lines[0] == "method,clean,fgsm,pgd10,iwda"
    assert main(["eval", "--model", str(d / "model.bin"), "--data", str(d / "imgs.idx"),
                 "--labels", str(d / "labels.idx"), "--attacks", "fgsm"]) == 2
    assert main(["attack", "--model", str(d / "model.bin"), "--data", str(d / "imgs.idx")]) == 2


def test_defend_writes_model(tmp_path, capsys):
    out = tmp_path / "m.bin"
    code = main(["--seed", "1", "defend", "--data", "synthetic", "--epochs", "1", "--inner-iter", "2",
                 "--hidden", "16", "--out", str(out)])
    assert code == 0 and out.exists() and (tmp_path / "m.bin.json").exists()
    meta = json.loads((tmp_path / "m.bin.json").read_text())
    assert meta["provenance"]["method"] == "iwdd" and meta["provenance"]["seed"] == 1
    assert main(["defend", "--arch", "cnn", "--out", str(out)]) == 2


def test_experiment_and_ablate(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path / "t1"), "experiment", "--kind", "theorem1_demo"]) == 0
    assert (tmp_path / "t1" / "theorem1_demo.csv").exists()
    cfg = {"kind": "attack_table", "seeds": [0], "n_test": 4, "attackers": ["fgsm"], "budget": 0.3,
           "suite": {"per_class_train": 20, "per_class_test": 2, "epochs": 5}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["experiment", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path / "t2")]) == 0
    assert (tmp_path / "t2" / "attack_table.csv").exists()
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["experiment", "--config", str(tmp_path / "bad.json")]) == 2
    cfg.update(attack={"max_iter": 3, "n_critic": 1, "critic_hidden": [4, 4]})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["ablate", "tau", "--values", "0,1", "--config", str(tmp_path / "c.json"),
                 "--out-dir", str(tmp_path / "t3")]) == 0
    assert (tmp_path / "t3" / "ablation_tau.csv").exists()
