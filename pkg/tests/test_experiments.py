import json
import os

import numpy as np
import pytest

from iwd.data import checkerboard_image
from iwd.errors import PathError, ValidationError
from iwd.experiments import (ExperimentConfig, SuiteConfig, csv_text, estimate_ball_diameter, fmt, render_row,
                             run_experiment)

TINY_SUITE = dict(per_class_train=30, per_class_test=5, epochs=10)
TINY_ATTACK = dict(max_iter=10, n_critic=2, critic_hidden=(8, 8))


def _cfg(tmp_path, kind, **kw):
    base = dict(kind=kind, seeds=(0,), out_dir=str(tmp_path / kind), suite=SuiteConfig(**TINY_SUITE), n_test=8,
                attack=TINY_ATTACK, budget=0.3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_fmt_six_significant_digits():
    assert fmt(1 / 3) == "0.333333"
    assert fmt(1234567.0) == "1.23457e+06"
    assert fmt(3) == "3" and fmt(True) == "true" and fmt("x") == "x"
    assert csv_text(["a", "b"], [[0.5, 2]]) == "a,b\n0.5,2\n"


def test_render_fixture_rows():
    assert render_row("FGSM", [69.78]) == "FGSM | 69.78"
    assert render_row("IWDA", [100.0]) == "IWDA | 100.00"
    assert render_row("IWDD", [83.0, 46.0]) == "IWDD | 83.00 | 46.00"


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        ExperimentConfig(kind="nope")
    with pytest.raises(ValidationError):
        ExperimentConfig(kind="ablation_tau", sweep=())
    with pytest.raises(ValidationError):
        ExperimentConfig(kind="attack_table", attackers=("cw",))
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({"kind": "attack_table", "bogus": 1})
    with pytest.raises(PathError):
        ExperimentConfig.from_json(str(tmp_path / "missing.json"))


def test_config_json_round_trip(tmp_path):
    cfg = _cfg(tmp_path, "attack_table")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.from_json(str(path))
    assert back.hash() == cfg.hash()


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(PathError):
        run_experiment(ExperimentConfig(kind="theorem1_demo", seeds=(0,), out_dir=str(blocker / "sub")))


def test_ball_diameter_examples():
    x = checkerboard_image(12, 12, 3)
    bound = 2 * (8 / 255) * np.sqrt(144)
    assert estimate_ball_diameter(x, 0.0, "linf", 16, 0) == 0.0
    for seed in range(3):
        assert estimate_ball_diameter(np.full((12, 12), 0.5), 8 / 255, "linf", 8, seed) <= bound + 1e-12
        assert estimate_ball_diameter(x, 0.0, "iwd", 64, seed) > bound
    with pytest.raises(ValidationError):
        estimate_ball_diameter(x, 0.0, "iwd", 1)
    with pytest.raises(ValidationError):
        estimate_ball_diameter(x, 0.0, "l2", 4)


def test_theorem1_demo(tmp_path):
    rep = run_experiment(ExperimentConfig(kind="theorem1_demo", seeds=(0, 1), out_dir=str(tmp_path)))
    assert rep["iwd_exceeds_bound"]
    lines = (tmp_path / "theorem1_demo.csv").read_text().splitlines()
    assert lines[0] == "metric,eps,seed,diameter,linf_bound"
    assert float(lines[1].split(",")[3]) >= 4.0


def test_identity_histogram_is_zero(tmp_path):
    cfg = _cfg(tmp_path, "perturbation_histogram", attackers=("identity",))
    rep = run_experiment(cfg)
    assert rep["summary"]["identity"] == {"mean_l2": 0.0, "mean_linf": 0.0, "mean_iwd": 0.0, "asr": 0.0}
    rows = (tmp_path / "perturbation_histogram" / "perturbation_histogram.csv").read_text().splitlines()
    assert rows[0] == "attacker,seed,index,l2,linf,iwd,success"
    assert all(r.split(",")[3:6] == ["0", "0", "0"] for r in rows[1:])


def test_attack_table_deterministic_and_resumable(tmp_path):
    cfg = _cfg(tmp_path, "attack_table", attackers=("identity", "fgsm", "iwda"))
    rep = run_experiment(cfg)
    out = tmp_path / "attack_table"
    first = {f: (out / f).read_bytes() for f in ("attack_table.csv", "attack_table.json")}
    manifest = json.loads((out / "attack_table.manifest.json").read_text())
    assert manifest["config_hash"] == rep["config_hash"]
    assert set(manifest["reports"]) == {"attack_table.csv", "attack_table.json"}
    # resume: cached cells are reused
    cell_files = sorted(os.listdir(out / "cells"))
    mtimes = [os.path.getmtime(out / "cells" / f) for f in cell_files]
    run_experiment(cfg)
    assert [os.path.getmtime(out / "cells" / f) for f in cell_files] == mtimes
    assert {f: (out / f).read_bytes() for f in first} == first
    # fresh directory, same bytes
    fresh = _cfg(tmp_path, "attack_table", attackers=("identity", "fgsm", "iwda"), out_dir=str(tmp_path / "b"))
    run_experiment(fresh)
    assert {f: (tmp_path / "b" / f).read_bytes() for f in first} == first
    header = first["attack_table.csv"].decode().splitlines()[0]
    assert header == "attacker,model,seed,n_eligible,asr,mean_l2,mean_linf,mean_iwd"
    agg = {a["attacker"]: a for a in rep["aggregate"]}
    assert agg["identity"]["mean_asr"] == 0.0


def test_corrupt_cell_is_recomputed(tmp_path):
    cfg = _cfg(tmp_path, "attack_table", attackers=("fgsm",))
    run_experiment(cfg)
    out = tmp_path / "attack_table"
    before = (out / "attack_table.csv").read_bytes()
    cell = [f for f in os.listdir(out / "cells") if "attack" in f][0]
    (out / "cells" / cell).write_text("{}")
    run_experiment(cfg)
    assert (out / "attack_table.csv").read_bytes() == before


def test_ablation_tau_small(tmp_path):
    cfg = _cfg(tmp_path, "ablation_tau", sweep=(0.0, 1.0))
    rep = run_experiment(cfg)
    assert [t for t, _ in rep["mean_asr"]] == [0.0, 1.0]
    assert (tmp_path / "ablation_tau" / "ablation_tau.csv").read_text().startswith("tau,seed,asr,")


def test_shared_out_dir_reuses_matching_cells(tmp_path):
    shared = str(tmp_path / "shared")
    table = _cfg(tmp_path, "attack_table", attackers=("iwda",), out_dir=shared)
    run_experiment(table)
    cells = tmp_path / "shared" / "cells"
    before = {f: os.path.getmtime(cells / f) for f in os.listdir(cells)}
    # the sweep point matching the default tau hits the attack-table cell
    sweep = _cfg(tmp_path, "ablation_tau", sweep=(0.1, 1.0), out_dir=shared)
    run_experiment(sweep)
    after = os.listdir(cells)
    assert len(after) == len(before) + 1
    assert all(os.path.getmtime(cells / f) == t for f, t in before.items())
    assert {"attack_table.manifest.json", "ablation_tau.manifest.json"} <= set(os.listdir(shared))


def test_defense_table_small(tmp_path):
    cfg = _cfg(tmp_path, "defense_table", defense_epochs=2)
    rep = run_experiment(cfg)
    assert set(rep["mean"]) == {"natural", "iwdd(beta=0.1)"}
    text = (tmp_path / "defense_table" / "defense_table.csv").read_text()
    assert text.splitlines()[0] == "method,beta,seed,clean,fgsm,pgd10,iwda"
