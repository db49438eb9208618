"""Command-line front end: simulate, train, eval, sweep, genmap.

Every command takes a JSON config (``--config``), an optional ``--seed``
override, and an optional ``--out`` directory override.  Configs carry a
``schema_version`` and are validated strictly: unknown keys are rejected,
and any problem is reported as a single ``config error: <key>: <reason>``
line with exit code 2.  Numerical blowups exit with code 3.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .evaluation import (
    generalization_map,
    plant_with_noise,
    robustness_sweep,
    scenario_matrix,
    write_genmap_csv,
    write_scenario_csv,
    write_sweep_csv,
)
from .integrate import (
    DivergenceError,
    TimeGrid,
    Trajectory,
    solve_coupled,
    solve_ivp,
    write_trajectory_csv,
)
from .observer import (
    KklObserver,
    estimate,
    latent_drift,
    latent_drift_nonauto,
    load_observer,
    luenberger_drift,
    make_kkl_observer,
    make_luenberger_observer,
    save_observer,
)
from .systems import ExcitationSpec, NoiseSpec, SystemSpec, make_system, sample_initial_states
from .train import (
    TrainConfig,
    TrainingDivergence,
    generate_dataset,
    load_train_state,
    train,
    write_loss_csv,
)


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def _dotted(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _check_type(value, typ: str, key: str):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }[typ]
    if not ok(value):
        raise ConfigError(key, f"expected {typ}")
    return float(value) if typ == "float" else value


def _validate(cfg, schema: dict, where: str = "") -> dict:
    """Check one object level against {key: (type, required, default)}."""
    if not isinstance(cfg, dict):
        raise ConfigError(where or "config", "expected an object")
    for k in cfg:
        if k not in schema:
            raise ConfigError(_dotted(where, k), "unknown key")
    out = {}
    for k, (typ, required, default) in schema.items():
        if k not in cfg:
            if required:
                raise ConfigError(_dotted(where, k), "missing required key")
            out[k] = default
        else:
            out[k] = _check_type(cfg[k], typ, _dotted(where, k))
    return out


_GRID_SCHEMA = {"t0": ("float", True, None), "tf": ("float", True, None), "h": ("float", True, None)}
_NOISE_SCHEMA = {
    "kind": ("str", True, None),
    "target": ("str", False, "measurement"),
    "std": ("float", False, 0.0),
    "mean": ("float", False, 0.0),
    "lo": ("float", False, 0.0),
    "hi": ("float", False, 0.0),
}
_EXCITATION_SCHEMA = {
    "kind": ("str", True, None),
    "amplitude": ("float", False, 1.0),
    "frequency": ("float", False, 1.0),
}
_SYSTEM_SCHEMA = {
    "name": ("str", True, None),
    "domain": ("list", False, None),
    "A": ("list", False, None),
    "C": ("list", False, None),
    "mu": ("float", False, None),
}


def _build_grid(d: dict, where: str) -> TimeGrid:
    v = _validate(d, _GRID_SCHEMA, where)
    try:
        return TimeGrid(v["t0"], v["tf"], v["h"])
    except ValueError as e:
        raise ConfigError(where, str(e))


def _build_noise(d: dict | None, where: str) -> NoiseSpec:
    if d is None:
        return NoiseSpec()
    v = _validate(d, _NOISE_SCHEMA, where)
    try:
        return NoiseSpec(**v)
    except ValueError as e:
        raise ConfigError(where, str(e))


def _build_excitation(d: dict | None, where: str) -> ExcitationSpec:
    if d is None:
        return ExcitationSpec()
    v = _validate(d, _EXCITATION_SCHEMA, where)
    try:
        return ExcitationSpec(**v)
    except ValueError as e:
        raise ConfigError(where, str(e))


def _build_system(d: dict, where: str) -> SystemSpec:
    v = _validate(d, _SYSTEM_SCHEMA, where)
    name = v["name"]
    kwargs = {}
    if name == "linear":
        if v["A"] is None or v["C"] is None:
            raise ConfigError(where, "linear system needs A and C")
        kwargs["A"] = np.asarray(v["A"], dtype=float)
        kwargs["C"] = np.asarray(v["C"], dtype=float)
        if v["domain"] is not None:
            kwargs["domain"] = np.asarray(v["domain"], dtype=float)
    elif name in ("vanderpol", "duffing"):
        if v["domain"] is not None:
            kwargs["domain"] = np.asarray(v["domain"], dtype=float)
        if name == "vanderpol" and v["mu"] is not None:
            kwargs["mu"] = v["mu"]
    elif name == "example1":
        if v["domain"] is not None:
            raise ConfigError(_dotted(where, "domain"), "example1 has a fixed domain")
    else:
        raise ConfigError(_dotted(where, "name"), f"unknown system {name!r}")
    try:
        return make_system(name, **kwargs)
    except ValueError as e:
        raise ConfigError(where, str(e))


def _require_file(path: str, key: str) -> str:
    if not os.path.isfile(path):
        raise ConfigError(key, f"file not found: {path}")
    return path


def _load_observer_checked(path: str, key: str):
    _require_file(path, key)
    try:
        return load_observer(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(key, f"bad observer checkpoint: {e}")


def _load_config(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError("config", f"file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    if cfg.get("schema_version") != 1:
        raise ConfigError("schema_version", "must be 1")
    return cfg


# ---------------------------------------------------------------------------
# simulate


_SIMULATE_SCHEMA = {
    "schema_version": ("int", True, None),
    "seed": ("int", False, 0),
    "out_dir": ("str", False, "."),
    "system": ("dict", True, None),
    "grid": ("dict", True, None),
    "x0": ("list", True, None),
    "noise": ("dict", False, None),
    "excitation": ("dict", False, None),
    "observer": ("str", False, None),
}


def cmd_simulate(cfg: dict, seed: int | None, out_override: str | None) -> int:
    v = _validate(cfg, _SIMULATE_SCHEMA)
    sys_ = _build_system(v["system"], "system")
    grid = _build_grid(v["grid"], "grid")
    noise = _build_noise(v["noise"], "noise")
    excitation = _build_excitation(v["excitation"], "excitation")
    x0 = np.asarray(v["x0"], dtype=float)
    if x0.shape != (sys_.n_x,):
        raise ConfigError("x0", f"expected {sys_.n_x} components")
    rng = np.random.default_rng(seed if seed is not None else v["seed"])
    out_dir = out_override or v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    obs = None
    if v["observer"] is not None:
        obs = _load_observer_checked(v["observer"], "observer")

    if obs is None:
        use_u = excitation.is_active and sys_.input_map is not None

        def drift(t, x):
            dx = sys_.drift(t, x)
            if use_u:
                dx = dx + np.squeeze(sys_.input_map(x) @ excitation(t)[..., None], axis=-1)
            return dx

        if noise.is_active:
            plant = SystemSpec(
                name=sys_.name + "_driven",
                n_x=sys_.n_x,
                n_y=sys_.n_y,
                drift=drift,
                output=sys_.output,
                domain=sys_.domain,
            )
            X, Y = plant_with_noise(plant, x0[None], grid, noise, rng)
            traj = Trajectory(grid=grid, states=X[0], outputs=Y[0])
        else:
            traj = solve_ivp(drift, x0, grid)
            traj = Trajectory(grid=grid, states=traj.states, outputs=sys_.output(traj.states))
        write_trajectory_csv(traj, os.path.join(out_dir, "trajectory.csv"))
        return 0

    if isinstance(obs, KklObserver):
        z0 = np.zeros(obs.d_z)
        nonauto = excitation.is_active and sys_.input_map is not None
        if nonauto and obs.t_fwd is None:
            raise ConfigError("excitation", "observer has no forward map for input-driven runs")

        def obs_drift(t, z, y, u):
            if nonauto:
                return latent_drift_nonauto(obs, sys_, z, y, u)
            return latent_drift(obs, z, y)

    else:
        z0 = np.zeros(obs.n_x)

        def obs_drift(t, z, y, u):
            return luenberger_drift(obs, z, y)

    traj_x, traj_z = solve_coupled(
        sys_, obs_drift, x0, z0, grid, noise=noise, excitation=excitation, rng=rng
    )
    write_trajectory_csv(traj_x, os.path.join(out_dir, "trajectory.csv"))
    est = Trajectory(grid=grid, states=estimate(obs, traj_z.states))
    write_trajectory_csv(est, os.path.join(out_dir, "estimate.csv"))
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_SCHEMA = {
    "schema_version": ("int", True, None),
    "seed": ("int", False, 0),
    "out_dir": ("str", False, "."),
    "system": ("dict", True, None),
    "grid": ("dict", True, None),
    "n_traj": ("int", True, None),
    "observer": ("dict", True, None),
    "train": ("dict", True, None),
    "resume_from": ("str", False, None),
}

_OBSERVER_INIT_SCHEMA = {
    "init_from": ("str", False, None),
    "type": ("str", False, "kkl"),
    "d_z": ("int", False, None),
    "hidden": ("list", False, None),
    "activation": ("str", False, "tanh"),
    "eigenvalues": ("list", False, None),
    "with_forward_map": ("bool", False, False),
    "A": ("list", False, None),
    "C": ("list", False, None),
    "G": ("list", False, None),
}

_TRAIN_SECTION_SCHEMA = {
    "epochs": ("int", False, 1000),
    "batch_size": ("int", False, 0),
    "learning_rate": ("float", False, 1e-3),
    "lr_decay": ("float", False, 1.0),
    "optimizer": ("str", False, "adam"),
    "beta1": ("float", False, 0.9),
    "beta2": ("float", False, 0.999),
    "eps": ("float", False, 1e-8),
    "gamma": ("float", False, 0.0),
    "pde_weight": ("float", False, 0.0),
    "weight_decay": ("float", False, 0.0),
    "gradient_mode": ("str", False, "backprop"),
    "loss_mode": ("str", False, "lagrange"),
    "learn_d": ("bool", False, True),
    "train_noise": ("dict", False, None),
    "checkpoint_every": ("int", False, 0),
}


def _build_observer_init(d: dict, sys_: SystemSpec, rng: np.random.Generator, where: str):
    v = _validate(d, _OBSERVER_INIT_SCHEMA, where)
    if v["init_from"] is not None:
        return _load_observer_checked(v["init_from"], _dotted(where, "init_from"))
    hidden = tuple(v["hidden"]) if v["hidden"] is not None else (50, 50, 50, 50)
    try:
        if v["type"] == "kkl":
            eig = None if v["eigenvalues"] is None else np.asarray(v["eigenvalues"], dtype=float)
            return make_kkl_observer(
                sys_.n_x,
                sys_.n_y,
                rng,
                d_z=v["d_z"],
                hidden=hidden,
                activation=v["activation"],
                eigenvalues=eig,
                with_forward_map=v["with_forward_map"],
            )
        if v["type"] == "luenberger":
            if v["A"] is None or v["C"] is None or v["G"] is None:
                raise ConfigError(where, "luenberger observer needs A, C, and G")
            if v["hidden"] is None:
                hidden = (16,)
            return make_luenberger_observer(
                np.asarray(v["A"], dtype=float),
                np.asarray(v["C"], dtype=float),
                np.asarray(v["G"], dtype=float),
                rng,
                hidden=hidden,
                activation=v["activation"],
            )
    except ValueError as e:
        raise ConfigError(where, str(e))
    raise ConfigError(_dotted(where, "type"), f"unknown observer type {v['type']!r}")


def cmd_train(cfg: dict, seed: int | None, out_override: str | None) -> int:
    v = _validate(cfg, _TRAIN_SCHEMA)
    sys_ = _build_system(v["system"], "system")
    grid = _build_grid(v["grid"], "grid")
    tv = _validate(v["train"], _TRAIN_SECTION_SCHEMA, "train")
    train_noise = _build_noise(tv.pop("train_noise"), "train.train_noise")
    the_seed = seed if seed is not None else v["seed"]
    out_dir = out_override or v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    try:
        config = TrainConfig(
            **tv,
            train_noise=train_noise,
            seed=the_seed,
            checkpoint_dir=out_dir,
        )
    except ValueError as e:
        raise ConfigError("train", str(e))
    if v["n_traj"] < 1:
        raise ConfigError("n_traj", "must be positive")

    # independent streams: dataset draws, then net initialization
    root = np.random.default_rng(the_seed)
    ds_rng, init_rng = root.spawn(2)
    ds = generate_dataset(sys_, v["n_traj"], grid, ds_rng, train_noise)

    state = None
    if v["resume_from"] is not None:
        ck = _require_file(os.path.join(v["resume_from"], "checkpoint.json"), "resume_from")
        st = _require_file(os.path.join(v["resume_from"], "train_state.json"), "resume_from")
        obs = load_observer(ck)
        state = load_train_state(st)
    else:
        obs = _build_observer_init(v["observer"], sys_, init_rng, "observer")

    try:
        trained, history = train(obs, ds, config, sys=sys_, state=state)
    except (ValueError, TypeError) as e:
        raise ConfigError("train", str(e))

    save_observer(trained, os.path.join(out_dir, "observer.json"))
    start = (state.epoch - len(history) + 1) if state is not None else 1
    write_loss_csv(
        history,
        os.path.join(out_dir, "loss.csv"),
        start_epoch=start,
        append=v["resume_from"] is not None and os.path.exists(os.path.join(out_dir, "loss.csv")),
    )
    return 0


# ---------------------------------------------------------------------------
# eval


_EVAL_SCHEMA = {
    "schema_version": ("int", True, None),
    "seed": ("int", False, 0),
    "out_dir": ("str", False, "."),
    "system": ("dict", True, None),
    "grid": ("dict", True, None),
    "observers": ("list", True, None),
    "scenarios": ("list", True, None),
    "initial_conditions": ("dict", True, None),
    "warmup": ("float", False, 0.0),
    "threshold": ("float", False, 0.05),
    "emit_trajectories": ("bool", False, True),
}

_IC_SCHEMA = {"explicit": ("list", False, None), "n_random": ("int", False, 0)}


def cmd_eval(cfg: dict, seed: int | None, out_override: str | None) -> int:
    v = _validate(cfg, _EVAL_SCHEMA)
    sys_ = _build_system(v["system"], "system")
    grid = _build_grid(v["grid"], "grid")
    out_dir = out_override or v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed if seed is not None else v["seed"])

    observers = []
    for i, entry in enumerate(v["observers"]):
        ev = _validate(entry, {"id": ("str", True, None), "path": ("str", True, None)}, f"observers[{i}]")
        observers.append((ev["id"], _load_observer_checked(ev["path"], f"observers[{i}].path")))
    if not observers:
        raise ConfigError("observers", "need at least one observer")

    scenarios = []
    for i, entry in enumerate(v["scenarios"]):
        if not isinstance(entry, dict):
            raise ConfigError(f"scenarios[{i}]", "expected an object")
        entry = dict(entry)
        label = entry.pop("label", None)
        if not isinstance(label, str):
            raise ConfigError(f"scenarios[{i}].label", "missing or not a string")
        scenarios.append((label, _build_noise(entry, f"scenarios[{i}]")))
    if not scenarios:
        raise ConfigError("scenarios", "need at least one scenario")

    icv = _validate(v["initial_conditions"], _IC_SCHEMA, "initial_conditions")
    ics = []
    if icv["explicit"] is not None:
        arr = np.asarray(icv["explicit"], dtype=float)
        if arr.ndim != 2 or arr.shape[1] != sys_.n_x:
            raise ConfigError("initial_conditions.explicit", f"expected rows of {sys_.n_x} numbers")
        ics.append(arr)
    if icv["n_random"] > 0:
        ics.append(sample_initial_states(sys_, icv["n_random"], rng))
    if not ics:
        raise ConfigError("initial_conditions", "no initial conditions specified")
    x0s = np.vstack(ics)

    results = scenario_matrix(
        observers,
        sys_,
        x0s,
        scenarios,
        grid,
        rng,
        warmup=v["warmup"],
        threshold=v["threshold"],
        out_dir=os.path.join(out_dir, "trajectories") if v["emit_trajectories"] else None,
    )
    write_scenario_csv(results, os.path.join(out_dir, "scenarios.csv"))
    return 0


# ---------------------------------------------------------------------------
# sweep


_SWEEP_SCHEMA = {
    "schema_version": ("int", True, None),
    "seed": ("int", False, 0),
    "out_dir": ("str", False, "."),
    "A": ("list", True, None),
    "C": ("list", True, None),
    "eigenvalues": ("list", True, None),
    "k_values": ("list", True, None),
    "noise": ("dict", True, None),
    "grid": ("dict", True, None),
    "x0": ("list", False, None),
}


def cmd_sweep(cfg: dict, seed: int | None, out_override: str | None) -> int:
    v = _validate(cfg, _SWEEP_SCHEMA)
    grid = _build_grid(v["grid"], "grid")
    noise = _build_noise(v["noise"], "noise")
    rng = np.random.default_rng(seed if seed is not None else v["seed"])
    out_dir = out_override or v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        points = robustness_sweep(
            np.asarray(v["A"], dtype=float),
            np.asarray(v["C"], dtype=float),
            np.asarray(v["eigenvalues"], dtype=float),
            [float(k) for k in v["k_values"]],
            noise,
            grid,
            rng,
            x0=None if v["x0"] is None else np.asarray(v["x0"], dtype=float),
        )
    except (ValueError, np.linalg.LinAlgError) as e:
        raise ConfigError("eigenvalues", str(e))
    write_sweep_csv(points, os.path.join(out_dir, "sweep.csv"))
    return 0


# ---------------------------------------------------------------------------
# genmap


_GENMAP_SCHEMA = {
    "schema_version": ("int", True, None),
    "seed": ("int", False, 0),
    "out_dir": ("str", False, "."),
    "observer": ("str", True, None),
    "system": ("dict", True, None),
    "grid": ("dict", True, None),
    "ic_grid": ("dict", True, None),
    "warmup": ("float", False, 0.0),
}

_ICGRID_SCHEMA = {"x1": ("list", True, None), "x2": ("list", True, None)}


def cmd_genmap(cfg: dict, seed: int | None, out_override: str | None) -> int:
    v = _validate(cfg, _GENMAP_SCHEMA)
    sys_ = _build_system(v["system"], "system")
    grid = _build_grid(v["grid"], "grid")
    obs = _load_observer_checked(v["observer"], "observer")
    if not isinstance(obs, KklObserver):
        raise ConfigError("observer", "generalization maps are defined for the latent observer")
    gv = _validate(v["ic_grid"], _ICGRID_SCHEMA, "ic_grid")

    def axis(spec_list, key):
        if len(spec_list) != 3:
            raise ConfigError(key, "expected [lo, hi, n]")
        lo, hi, n = float(spec_list[0]), float(spec_list[1]), int(spec_list[2])
        if n < 1 or hi < lo:
            raise ConfigError(key, "bad axis range")
        return np.linspace(lo, hi, n)

    a1 = axis(gv["x1"], "ic_grid.x1")
    a2 = axis(gv["x2"], "ic_grid.x2")
    G1, G2 = np.meshgrid(a1, a2, indexing="ij")
    ics = np.column_stack([G1.ravel(), G2.ravel()])

    out_dir = out_override or v["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    records = generalization_map(obs, sys_, ics, grid, warmup=v["warmup"])
    write_genmap_csv(records, os.path.join(out_dir, "genmap.csv"))
    return 0


# ---------------------------------------------------------------------------


_COMMANDS = {
    "simulate": (cmd_simulate, _SIMULATE_SCHEMA),
    "train": (cmd_train, _TRAIN_SCHEMA),
    "eval": (cmd_eval, _EVAL_SCHEMA),
    "sweep": (cmd_sweep, _SWEEP_SCHEMA),
    "genmap": (cmd_genmap, _GENMAP_SCHEMA),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="odekkl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output directory")
    args = parser.parse_args(argv)

    fn = _COMMANDS[args.command][0]
    try:
        cfg = _load_config(args.config)
        return fn(cfg, args.seed, args.out)
    except ConfigError as e:
        print(f"config error: {e.key}: {e.message}", file=sys.stderr)
        return 2
    except (DivergenceError, TrainingDivergence, FloatingPointError) as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
