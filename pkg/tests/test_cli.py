"""End-to-end command-line pipeline on a small mesh, plus failure modes."""

import csv
import json
import os

import numpy as np
import pytest

from funcflow.cli import main, benchmark_obs_points, benchmark_truth


def write_cfg(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("FUNCFLOW_OUT_ROOT", str(tmp_path))
    return tmp_path


def test_benchmark_setups():
    t1 = benchmark_truth(1)
    assert t1(np.array([0.3]))[0] == pytest.approx(1 - np.exp(-50 * 0.16))
    t2 = benchmark_truth(2)
    assert t2(np.array([0.3]), np.array([0.3]))[0] == pytest.approx(
        1 + np.exp(-2 * 20 * 0.16)
    )
    assert len(benchmark_obs_points(1)) == 10
    assert len(benchmark_obs_points(2)) == 400
    assert benchmark_obs_points(1)[-1] == [1.0]


def run_pipeline(workdir):
    """generate-data -> train-nf -> sample-pcn -> diagnose on a 16-cell mesh."""
    gen_cfg = write_cfg(
        workdir,
        "gen.json",
        {
            "problem": "elliptic",
            "fine_n_cells": 64,
            "noise_pct": 0.05,
            "seed": 0,
            "out_dir": "data",
        },
    )
    assert main(["generate-data", gen_cfg]) == 0
    obs_path = str(workdir / "data" / "observation.json")
    assert os.path.exists(obs_path)

    train_cfg = write_cfg(
        workdir,
        "train.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "obs_path": obs_path,
            "flow": {"kind": "projected", "n_layers": 2, "M": 8},
            "train": {
                "n_samples": 5,
                "n_iters": 40,
                "lr0": 0.02,
                "decay_factor": 0.9,
                "decay_every": 20,
                "seed": 0,
            },
            "out_dir": "nf",
        },
    )
    assert main(["train-nf", train_cfg]) == 0

    pcn_cfg = write_cfg(
        workdir,
        "pcn.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "obs_path": obs_path,
            "pcn": {"beta": 0.1, "n_samples": 5000, "burn_in": 500, "thin": 1, "seed": 0},
            "out_dir": "pcn",
        },
    )
    assert main(["sample-pcn", pcn_cfg]) == 0

    diag_cfg = write_cfg(
        workdir,
        "diag.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "source_a": {
                "kind": "flow",
                "checkpoint": str(workdir / "nf" / "flow"),
                "n_post": 200,
            },
            "source_b": {"kind": "pcn", "prefix": str(workdir / "pcn" / "chain")},
            "offsets": [0, 3],
            "out_dir": "diag",
        },
    )
    assert main(["diagnose", diag_cfg]) == 0
    return obs_path


def test_pipeline_end_to_end(workdir):
    run_pipeline(workdir)
    with open(workdir / "diag" / "errors.json") as fh:
        errors = json.load(fh)
    assert set(errors) == {"relative_mean_error", "total", "offset_0", "offset_3"}
    assert all(np.isfinite(v) for v in errors.values())
    # manifests recorded for every step
    for d in ("data", "nf", "pcn", "diag"):
        with open(workdir / d / "manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["version"]
        assert manifest["wall_time_s"] >= 0
        assert manifest["artifacts"]
    with open(workdir / "nf" / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 41


def test_invariance_command(workdir):
    obs_path = run_pipeline(workdir)
    inv_cfg = write_cfg(
        workdir,
        "inv.json",
        {
            "problem": "elliptic",
            "checkpoint": str(workdir / "nf" / "flow"),
            "alpha": 0.1,
            "mesh_sizes": [16, 24],
            "n_post": 100,
            "out_dir": "inv",
        },
    )
    assert main(["invariance", inv_cfg]) == 0
    with open(workdir / "inv" / "invariance.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["n_cells", "mean_l2_error"]
    assert [r[0] for r in rows[1:]] == ["16", "24"]


def test_cnf_and_retrain_commands(workdir):
    obs_path = run_pipeline(workdir)
    cnf_cfg = write_cfg(
        workdir,
        "cnf.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "flow": {"kind": "projected", "n_layers": 1, "M": 8},
            "cnf": {
                "m_batch": 2,
                "n_u": 2,
                "n_iters": 10,
                "lr0": 0.002,
                "decay_factor": 0.9,
                "decay_every": 5,
                "seed": 0,
            },
            "trainset": {"n_train": 4, "noise_pct": 0.05, "seed": 0},
            "out_dir": "cnf",
        },
    )
    assert main(["train-cnf", cnf_cfg]) == 0
    assert os.path.exists(workdir / "cnf" / "condnet.json")

    retrain_cfg = write_cfg(
        workdir,
        "retrain.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "condnet_path": str(workdir / "cnf" / "condnet"),
            "obs_path": obs_path,
            "retrain": {
                "n_samples": 4,
                "n_iters": 10,
                "lr0": 0.002,
                "decay_factor": 0.9,
                "decay_every": 5,
                "seed": 0,
            },
            "out_dir": "retrained",
        },
    )
    assert main(["retrain", retrain_cfg]) == 0
    assert os.path.exists(workdir / "retrained" / "flow.json")
    assert os.path.exists(workdir / "retrained" / "flow.bin")


def test_rerun_is_bitwise_reproducible(workdir):
    gen_cfg = write_cfg(
        workdir,
        "gen.json",
        {
            "problem": "elliptic",
            "fine_n_cells": 64,
            "noise_pct": 0.05,
            "seed": 0,
            "out_dir": "data",
        },
    )
    assert main(["generate-data", gen_cfg]) == 0
    first = (workdir / "data" / "observation.json").read_bytes()
    assert main(["generate-data", gen_cfg]) == 0
    assert (workdir / "data" / "observation.json").read_bytes() == first


def test_exit_code_2_on_bad_config(workdir, capsys):
    bad = write_cfg(workdir, "bad.json", {"problem": "elliptic", "bogus": 1})
    assert main(["generate-data", bad]) == 2
    assert "error" in capsys.readouterr().err
    notjson = workdir / "notjson.json"
    notjson.write_text("{broken")
    assert main(["generate-data", str(notjson)]) == 2


def test_exit_code_3_on_missing_artifacts(workdir, capsys):
    assert main(["generate-data", str(workdir / "absent.json")]) == 3
    train_cfg = write_cfg(
        workdir,
        "train.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "obs_path": str(workdir / "no_obs.json"),
            "flow": {"kind": "projected", "n_layers": 1, "M": 8},
            "train": {
                "n_samples": 2,
                "n_iters": 2,
                "lr0": 0.01,
                "decay_factor": 0.9,
                "decay_every": 1,
                "seed": 0,
            },
            "out_dir": "nf",
        },
    )
    assert main(["train-nf", train_cfg]) == 3
    assert "missing artifact" in capsys.readouterr().err


def test_unknown_subcommand_rejected(workdir):
    with pytest.raises(SystemExit):
        main(["no-such-command", "x.json"])


def test_nested_schema_validation(workdir, capsys):
    cfg = write_cfg(
        workdir,
        "train.json",
        {
            "problem": "elliptic",
            "n_cells": 16,
            "alpha": 0.1,
            "obs_path": "obs.json",
            "flow": {"kind": "projected", "n_layers": 1, "M": 8, "oops": 1},
            "train": {
                "n_samples": 2,
                "n_iters": 2,
                "lr0": 0.01,
                "decay_factor": 0.9,
                "decay_every": 1,
                "seed": 0,
            },
            "out_dir": "nf",
        },
    )
    assert main(["train-nf", cfg]) == 2
    assert "flow" in capsys.readouterr().err


def test_preset_configs_are_schema_valid():
    import funcflow

    preset_dir = os.path.join(os.path.dirname(funcflow.__file__), "presets")
    names = sorted(os.listdir(preset_dir))
    assert names
    for name in names:
        with open(os.path.join(preset_dir, name)) as fh:
            cfg = json.load(fh)
        assert "out_dir" in cfg or "checkpoint" in cfg
