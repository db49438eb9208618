import glob
import json
import os

import numpy as np
import pytest

from odekkl.cli import _COMMANDS, _validate, main
from odekkl.observer import (
    load_observer,
    make_kkl_observer,
    make_luenberger_observer,
    save_observer,
)


def write_cfg(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def simulate_cfg(out_dir, **overrides):
    cfg = {
        "schema_version": 1,
        "out_dir": str(out_dir),
        "system": {"name": "duffing"},
        "grid": {"t0": 0.0, "tf": 5.0, "h": 0.01},
        "x0": [-0.5, 0.5],
    }
    cfg.update(overrides)
    return cfg


def train_cfg(out_dir, **overrides):
    cfg = {
        "schema_version": 1,
        "out_dir": str(out_dir),
        "system": {"name": "linear", "A": [[-1.0]], "C": [[1.0]], "domain": [[-1.0, 1.0]]},
        "grid": {"t0": 0.0, "tf": 0.2, "h": 0.02},
        "n_traj": 2,
        "observer": {"type": "kkl", "hidden": [4]},
        "train": {"epochs": 2},
    }
    cfg.update(overrides)
    return cfg


def read_csv(path):
    lines = open(path).read().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, rows


# ---------------------------------------------------------------------------
# simulate


def test_simulate_duffing_writes_trajectory(tmp_path):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path / "out"))
    assert main(["simulate", "--config", cfg]) == 0
    header, rows = read_csv(tmp_path / "out" / "trajectory.csv")
    assert header == ["t", "x1", "x2", "y1"]
    assert rows.shape == (501, 4)
    np.testing.assert_array_equal(rows[:, 3], rows[:, 1])
    # trajectories stay on level sets of 2 x1^2 + x2^4
    level = 2.0 * rows[:, 1] ** 2 + rows[:, 2] ** 4
    assert np.max(np.abs(level - level[0])) < 1e-6


def test_simulate_deterministic(tmp_path):
    noise = {"kind": "gaussian", "std": 0.1}
    a = write_cfg(tmp_path, simulate_cfg(tmp_path / "a", noise=noise), "a.json")
    b = write_cfg(tmp_path, simulate_cfg(tmp_path / "b", noise=noise), "b.json")
    assert main(["simulate", "--config", a]) == 0
    assert main(["simulate", "--config", b]) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (
        tmp_path / "b" / "trajectory.csv"
    ).read_bytes()


def test_simulate_seed_override_changes_noise(tmp_path):
    noise = {"kind": "gaussian", "std": 0.1}
    a = write_cfg(tmp_path, simulate_cfg(tmp_path / "a", noise=noise), "a.json")
    b = write_cfg(tmp_path, simulate_cfg(tmp_path / "b", noise=noise), "b.json")
    assert main(["simulate", "--config", a, "--seed", "1"]) == 0
    assert main(["simulate", "--config", b, "--seed", "2"]) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (
        tmp_path / "b" / "trajectory.csv"
    ).read_bytes()


def test_simulate_excitation_changes_trajectory(tmp_path):
    plain = write_cfg(tmp_path, simulate_cfg(tmp_path / "a"), "a.json")
    excited = write_cfg(
        tmp_path,
        simulate_cfg(tmp_path / "b", excitation={"kind": "cosine", "amplitude": 1.0, "frequency": 12.0}),
        "b.json",
    )
    assert main(["simulate", "--config", plain]) == 0
    assert main(["simulate", "--config", excited]) == 0
    _, ra = read_csv(tmp_path / "a" / "trajectory.csv")
    _, rb = read_csv(tmp_path / "b" / "trajectory.csv")
    assert np.max(np.abs(ra - rb)) > 0.01


def test_simulate_with_observer_writes_estimate(tmp_path):
    obs = make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(6,))
    obs_path = tmp_path / "observer.json"
    save_observer(obs, obs_path)
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path / "out", observer=str(obs_path)))
    assert main(["simulate", "--config", cfg]) == 0
    header, rows = read_csv(tmp_path / "out" / "estimate.csv")
    assert header == ["t", "x1", "x2"]
    assert rows.shape == (501, 3)
    assert (tmp_path / "out" / "trajectory.csv").exists()


def test_simulate_out_override(tmp_path):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path / "ignored"))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "used")]) == 0
    assert (tmp_path / "used" / "trajectory.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_simulate_rejects_degenerate_grid(tmp_path, capsys):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path, grid={"t0": 0.0, "tf": 0.0, "h": 0.02}))
    assert main(["simulate", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert err.startswith("config error: grid:")
    assert err.count("\n") == 1


def test_simulate_rejects_wrong_x0_length(tmp_path, capsys):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path, x0=[1.0]))
    assert main(["simulate", "--config", cfg]) == 2
    assert "config error: x0:" in capsys.readouterr().err


def test_simulate_divergence_exits_3(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "system": {"name": "linear", "A": [[200.0]], "C": [[1.0]]},
            "grid": {"t0": 0.0, "tf": 5.0, "h": 0.02},
            "x0": [1.0],
        },
    )
    with np.errstate(over="ignore", invalid="ignore"):
        assert main(["simulate", "--config", cfg]) == 3
    assert capsys.readouterr().err.startswith("divergence:")


# ---------------------------------------------------------------------------
# config plumbing shared by all commands


def test_unknown_top_level_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path, bogus=1))
    assert main(["simulate", "--config", cfg]) == 2
    assert "config error: bogus: unknown key" in capsys.readouterr().err


def test_unknown_nested_key_reports_dotted_path(tmp_path, capsys):
    base = train_cfg(tmp_path)
    base["train"]["bogus"] = 1
    cfg = write_cfg(tmp_path, base)
    assert main(["train", "--config", cfg]) == 2
    assert "config error: train.bogus: unknown key" in capsys.readouterr().err


def test_schema_version_guard(tmp_path, capsys):
    cfg = write_cfg(tmp_path, simulate_cfg(tmp_path, schema_version=2))
    assert main(["simulate", "--config", cfg]) == 2
    assert "config error: schema_version: must be 1" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
    assert "file not found" in capsys.readouterr().err


def test_invalid_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["simulate", "--config", str(path)]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_missing_required_key(tmp_path, capsys):
    cfg = simulate_cfg(tmp_path)
    del cfg["x0"]
    path = write_cfg(tmp_path, cfg)
    assert main(["simulate", "--config", path]) == 2
    assert "config error: x0: missing required key" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_writes_observer_and_losses(tmp_path):
    cfg = write_cfg(tmp_path, train_cfg(tmp_path / "run"))
    assert main(["train", "--config", cfg]) == 0
    obs = load_observer(tmp_path / "run" / "observer.json")
    assert obs.n_x == 1 and obs.d_z == 2
    lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,data,reg,pde,fwd,total"
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "1"


def test_train_rejects_negative_penalty_weight(tmp_path, capsys):
    base = train_cfg(tmp_path)
    base["train"]["gamma"] = -1.0
    cfg = write_cfg(tmp_path, base)
    assert main(["train", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert err.startswith("config error: train:")
    assert err.count("\n") == 1


def test_train_resume_continues_run(tmp_path):
    run = tmp_path / "run"
    first = train_cfg(run)
    first["train"]["checkpoint_every"] = 1
    assert main(["train", "--config", write_cfg(tmp_path, first, "first.json")]) == 0

    resumed = train_cfg(run)
    resumed["train"]["checkpoint_every"] = 1
    resumed["train"]["epochs"] = 4
    resumed["resume_from"] = str(run)
    assert main(["train", "--config", write_cfg(tmp_path, resumed, "second.json")]) == 0
    lines = (run / "loss.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines] == ["epoch", "1", "2", "3", "4"]

    oneshot = train_cfg(tmp_path / "oneshot")
    oneshot["train"]["epochs"] = 4
    assert main(["train", "--config", write_cfg(tmp_path, oneshot, "oneshot.json")]) == 0
    a = json.loads((run / "observer.json").read_text())
    b = json.loads((tmp_path / "oneshot" / "observer.json").read_text())
    assert a["tstar"]["params"] == b["tstar"]["params"]
    assert a["rho"] == b["rho"]


def test_train_resume_needs_checkpoints(tmp_path, capsys):
    cfg = train_cfg(tmp_path / "fresh")
    cfg["resume_from"] = str(tmp_path / "fresh")
    assert main(["train", "--config", write_cfg(tmp_path, cfg)]) == 2
    assert "resume_from" in capsys.readouterr().err


def test_train_luenberger_via_config(tmp_path):
    cfg = {
        "schema_version": 1,
        "out_dir": str(tmp_path / "run"),
        "system": {"name": "example1"},
        "grid": {"t0": 0.0, "tf": 0.5, "h": 0.02},
        "n_traj": 2,
        "observer": {
            "type": "luenberger",
            "A": [[0.0, 1.0], [-1.0, 0.0]],
            "C": [[1.0, 0.0]],
            "G": [[4.0], [3.0]],
        },
        "train": {"epochs": 2, "optimizer": "gd"},
    }
    assert main(["train", "--config", write_cfg(tmp_path, cfg)]) == 0
    obs = load_observer(tmp_path / "run" / "observer.json")
    assert obs.ghat.spec.layer_sizes == (2, 16, 2)


# ---------------------------------------------------------------------------
# eval


def test_eval_single_cell(tmp_path):
    obs_path = tmp_path / "observer.json"
    save_observer(make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(6,)), obs_path)
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "system": {"name": "duffing"},
            "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
            "observers": [{"id": "fresh", "path": str(obs_path)}],
            "scenarios": [{"label": "clean", "kind": "none"}],
            "initial_conditions": {"explicit": [[0.4, -0.2]]},
        },
    )
    assert main(["eval", "--config", cfg]) == 0
    lines = (tmp_path / "out" / "scenarios.csv").read_text().splitlines()
    assert lines[0] == "observer,scenario,rmse,convergence_time"
    assert len(lines) == 2
    obs_id, label, r, ct = lines[1].split(",")
    assert (obs_id, label) == ("fresh", "clean")
    assert np.isfinite(float(r))
    assert (tmp_path / "out" / "trajectories" / "fresh__clean.csv").exists()


def test_eval_rejects_unknown_scenario_key(tmp_path, capsys):
    obs_path = tmp_path / "observer.json"
    save_observer(make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(4,)), obs_path)
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "system": {"name": "duffing"},
            "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
            "observers": [{"id": "fresh", "path": str(obs_path)}],
            "scenarios": [{"label": "clean", "kind": "none", "level": 3}],
            "initial_conditions": {"explicit": [[0.4, -0.2]]},
        },
    )
    assert main(["eval", "--config", cfg]) == 2
    assert "scenarios[0].level" in capsys.readouterr().err


def test_eval_random_initial_conditions_respect_seed(tmp_path):
    obs_path = tmp_path / "observer.json"
    save_observer(make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(4,)), obs_path)
    base = {
        "schema_version": 1,
        "system": {"name": "duffing"},
        "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
        "observers": [{"id": "fresh", "path": str(obs_path)}],
        "scenarios": [{"label": "clean", "kind": "none"}],
        "initial_conditions": {"n_random": 3},
        "emit_trajectories": False,
    }
    a = write_cfg(tmp_path, dict(base, out_dir=str(tmp_path / "a")), "a.json")
    b = write_cfg(tmp_path, dict(base, out_dir=str(tmp_path / "b")), "b.json")
    c = write_cfg(tmp_path, dict(base, out_dir=str(tmp_path / "c")), "c.json")
    assert main(["eval", "--config", a, "--seed", "5"]) == 0
    assert main(["eval", "--config", b, "--seed", "5"]) == 0
    assert main(["eval", "--config", c, "--seed", "6"]) == 0
    ra = (tmp_path / "a" / "scenarios.csv").read_text()
    assert ra == (tmp_path / "b" / "scenarios.csv").read_text()
    assert ra != (tmp_path / "c" / "scenarios.csv").read_text()


# ---------------------------------------------------------------------------
# sweep


def test_sweep_single_k(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "A": [[0.0, 1.0], [-1.0, 0.0]],
            "C": [[1.0, 0.0]],
            "eigenvalues": [-1.0, -2.0, -3.0],
            "k_values": [1],
            "noise": {"kind": "none"},
            "grid": {"t0": 0.0, "tf": 2.0, "h": 0.02},
        },
    )
    assert main(["sweep", "--config", cfg]) == 0
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,convergence_time,steady_state_error"
    assert len(lines) == 2


def test_sweep_rejects_unstable_eigenvalues(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "A": [[0.0, 1.0], [-1.0, 0.0]],
            "C": [[1.0, 0.0]],
            "eigenvalues": [1.0, -2.0, -3.0],
            "k_values": [1],
            "noise": {"kind": "none"},
            "grid": {"t0": 0.0, "tf": 2.0, "h": 0.02},
        },
    )
    assert main(["sweep", "--config", cfg]) == 2
    assert "config error: eigenvalues:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# genmap


def test_genmap_grid(tmp_path):
    obs_path = tmp_path / "observer.json"
    save_observer(make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(6,)), obs_path)
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "observer": str(obs_path),
            "system": {"name": "duffing"},
            "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
            "ic_grid": {"x1": [-1.0, 1.0, 2], "x2": [-1.0, 1.0, 2]},
        },
    )
    assert main(["genmap", "--config", cfg]) == 0
    header, rows = read_csv(tmp_path / "out" / "genmap.csv")
    assert header == ["x1_0", "x2_0", "rmse"]
    assert rows.shape == (4, 3)
    corners = {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
    assert {(r[0], r[1]) for r in rows} == corners


def test_genmap_requires_latent_observer(tmp_path, capsys):
    obs_path = tmp_path / "luen.json"
    save_observer(
        make_luenberger_observer(
            np.array([[0.0, 1.0], [-1.0, 0.0]]),
            np.array([[1.0, 0.0]]),
            np.array([[4.0], [3.0]]),
            np.random.default_rng(0),
        ),
        obs_path,
    )
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "observer": str(obs_path),
            "system": {"name": "duffing"},
            "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
            "ic_grid": {"x1": [-1.0, 1.0, 2], "x2": [-1.0, 1.0, 2]},
        },
    )
    assert main(["genmap", "--config", cfg]) == 2
    assert "config error: observer:" in capsys.readouterr().err


def _command_for(cfg):
    if "k_values" in cfg:
        return "sweep"
    if "x0" in cfg:
        return "simulate"
    if "n_traj" in cfg:
        return "train"
    if "observers" in cfg:
        return "eval"
    return "genmap"


def test_bundled_configs_pass_validation():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    paths = sorted(glob.glob(os.path.join(root, "*.json")))
    assert len(paths) >= 10
    for path in paths:
        cfg = json.loads(open(path).read())
        assert cfg["schema_version"] == 1, path
        schema = _COMMANDS[_command_for(cfg)][1]
        _validate(cfg, schema)


def test_genmap_rejects_bad_axis(tmp_path, capsys):
    obs_path = tmp_path / "observer.json"
    save_observer(make_kkl_observer(2, 1, np.random.default_rng(0), hidden=(4,)), obs_path)
    cfg = write_cfg(
        tmp_path,
        {
            "schema_version": 1,
            "out_dir": str(tmp_path / "out"),
            "observer": str(obs_path),
            "system": {"name": "duffing"},
            "grid": {"t0": 0.0, "tf": 1.0, "h": 0.02},
            "ic_grid": {"x1": [-1.0, 1.0], "x2": [-1.0, 1.0, 2]},
        },
    )
    assert main(["genmap", "--config", cfg]) == 2
    assert "ic_grid.x1" in capsys.readouterr().err
