"""Command-line operator surface.

Each subcommand reads one JSON config file, validates it fail-closed
(unknown keys are errors), runs the corresponding library routine, and
writes its artifacts plus a run manifest into the output directory.

Exit codes: 2 malformed config, 3 missing input artifact, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .conditional import (
    CnfConfig,
    CondNet,
    generate_training_set,
    load_condnet,
    retrain,
    save_condnet,
)
from .diagnostics import (
    MomentSummary,
    covariance_relative_errors,
    invariance_study,
    moments,
    relative_mean_error,
    save_errors_json,
)
from .errors import (
    FuncflowError,
    InvalidConfigurationError,
    NumericalFailureError,
)
from .flows import load_stack, make_stack, save_stack
from .forward_models import (
    DarcyProblem,
    EllipticProblem,
    generate_data,
    load_observation,
    save_observation,
)
from .mesh_prior import MeshField, PriorMeasure, build_mesh, load_field, save_field
from .pcn import PcnConfig, pcn_chain
from .vi_trainer import TrainConfig, sample_posterior, train_nf


def benchmark_truth(dim: int):
    """Ground-truth parameter fields of the two benchmark problems."""
    if dim == 1:
        return lambda x: np.exp(-50 * (x - 0.3) ** 2) - np.exp(-50 * (x - 0.7) ** 2)
    return lambda x1, x2: (
        np.exp(-20 * (x1 - 0.3) ** 2 - 20 * (x2 - 0.3) ** 2)
        + np.exp(-20 * (x1 - 0.7) ** 2 - 20 * (x2 - 0.7) ** 2)
    )


def benchmark_obs_points(dim: int):
    """Benchmark measurement grids: i/10 in 1D, {i/21, j/21} in 2D."""
    if dim == 1:
        return [[i / 10] for i in range(1, 11)]
    return [[i / 21, j / 21] for i in range(1, 21) for j in range(1, 21)]


def _require(cfg: dict, schema: dict, where: str = "config") -> None:
    """Fail-closed key validation: unknown keys and missing required keys
    are configuration errors. Schema values: True (required) or False."""
    unknown = set(cfg) - set(schema)
    if unknown:
        raise InvalidConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = [k for k, req in schema.items() if req and k not in cfg]
    if missing:
        raise InvalidConfigurationError(f"missing keys in {where}: {missing}")


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise InvalidConfigurationError(f"config is not valid JSON: {exc}") from exc


def _out_dir(cfg: dict) -> str:
    root = os.environ.get("FUNCFLOW_OUT_ROOT", ".")
    out = os.path.join(root, cfg["out_dir"])
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out: str, command: str, cfg: dict, wall: float, artifacts: dict):
    manifest = {
        "command": command,
        "config": cfg,
        "version": __version__,
        "wall_time_s": wall,
        "artifacts": artifacts,
        "threads": int(os.environ.get("FUNCFLOW_THREADS", "1")),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def _build_problem(kind: str, mesh, alpha_pde: float = 1.0):
    if kind == "elliptic":
        return EllipticProblem(mesh, alpha_pde)
    if kind == "darcy":
        return DarcyProblem(mesh)
    raise InvalidConfigurationError(f"unknown problem kind '{kind}'")


def _build_prior(alpha: float, mesh) -> PriorMeasure:
    # full truncation: the flow band must be covered by sampled modes
    cap = mesh.n_cells if mesh.dim == 1 else min(mesh.n_cells**2, 400)
    return PriorMeasure.build(alpha, mesh, n_kl=cap)


def cmd_generate_data(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "fine_n_cells": True,
            "noise_pct": True,
            "seed": True,
            "out_dir": True,
            "alpha_pde": False,
            "obs_points": False,
        },
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["fine_n_cells"])
    problem = _build_problem(cfg["problem"], mesh, cfg.get("alpha_pde", 1.0))
    truth = benchmark_truth(dim)
    points = cfg.get("obs_points", benchmark_obs_points(dim))
    rng = np.random.default_rng(cfg["seed"])
    obs = generate_data(problem, truth, points, cfg["noise_pct"], rng)
    out = _out_dir(cfg)
    nodes = mesh.nodes
    tvals = truth(nodes) if dim == 1 else truth(nodes[:, 0], nodes[:, 1])
    save_field(MeshField(mesh, tvals), os.path.join(out, "truth"))
    save_observation(obs, os.path.join(out, "observation.json"))
    return {"observation": os.path.join(out, "observation.json")}


def cmd_train_nf(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "n_cells": True,
            "alpha": True,
            "obs_path": True,
            "flow": True,
            "train": True,
            "out_dir": True,
            "alpha_pde": False,
        },
    )
    _require(cfg["flow"], {"kind": True, "n_layers": True, "M": True, "seed": False}, "flow")
    _require(
        cfg["train"],
        {
            "n_samples": True,
            "n_iters": True,
            "lr0": True,
            "decay_factor": True,
            "decay_every": True,
            "seed": True,
        },
        "train",
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["n_cells"])
    prior = _build_prior(cfg["alpha"], mesh)
    problem = _build_problem(cfg["problem"], mesh, cfg.get("alpha_pde", 1.0))
    obs = load_observation(cfg["obs_path"])
    stack = make_stack(
        cfg["flow"]["kind"],
        cfg["flow"]["n_layers"],
        cfg["flow"]["M"],
        prior,
        cfg["flow"].get("seed", 0),
    )
    report = train_nf(stack, prior, problem, obs, TrainConfig(**cfg["train"]))
    out = _out_dir(cfg)
    save_stack(stack, os.path.join(out, "flow"))
    report.save_csv(os.path.join(out, "loss.csv"))
    return {"checkpoint": os.path.join(out, "flow"), "loss": os.path.join(out, "loss.csv")}


def cmd_sample_pcn(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "n_cells": True,
            "alpha": True,
            "obs_path": True,
            "pcn": True,
            "out_dir": True,
            "alpha_pde": False,
        },
    )
    _require(
        cfg["pcn"],
        {"beta": True, "n_samples": True, "burn_in": True, "thin": True, "seed": True},
        "pcn",
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["n_cells"])
    prior = _build_prior(cfg["alpha"], mesh)
    problem = _build_problem(cfg["problem"], mesh, cfg.get("alpha_pde", 1.0))
    obs = load_observation(cfg["obs_path"])
    summary = pcn_chain(prior, problem, obs, PcnConfig(**cfg["pcn"]))
    out = _out_dir(cfg)
    summary.save(os.path.join(out, "chain"))
    np.save(os.path.join(out, "chain_cov.npy"), summary.cov)
    return {"summary": os.path.join(out, "chain_summary.json")}


def cmd_train_cnf(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "n_cells": True,
            "alpha": True,
            "flow": True,
            "cnf": True,
            "trainset": True,
            "out_dir": True,
            "alpha_pde": False,
        },
    )
    _require(cfg["flow"], {"kind": True, "n_layers": True, "M": True}, "flow")
    _require(
        cfg["cnf"],
        {
            "m_batch": True,
            "n_u": True,
            "n_iters": True,
            "lr0": True,
            "decay_factor": True,
            "decay_every": True,
            "seed": True,
        },
        "cnf",
    )
    _require(cfg["trainset"], {"n_train": True, "noise_pct": True, "seed": True}, "trainset")
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["n_cells"])
    prior = _build_prior(cfg["alpha"], mesh)
    problem = _build_problem(cfg["problem"], mesh, cfg.get("alpha_pde", 1.0))
    trainset = generate_training_set(
        prior,
        problem,
        benchmark_obs_points(dim),
        cfg["trainset"]["n_train"],
        cfg["trainset"]["noise_pct"],
        np.random.default_rng(cfg["trainset"]["seed"]),
    )
    from .conditional import train_cnf

    # embedding length cannot exceed the alias-free mode count of the mesh
    m_embed = min(20, prior.n_eigen)
    net = CondNet(
        [cfg["flow"]["kind"]] * cfg["flow"]["n_layers"], cfg["flow"]["M"], M_embed=m_embed
    )
    report = train_cnf(net, prior, problem, trainset, CnfConfig(**cfg["cnf"]))
    out = _out_dir(cfg)
    save_condnet(net, os.path.join(out, "condnet"))
    report.save_csv(os.path.join(out, "loss.csv"))
    return {"condnet": os.path.join(out, "condnet")}


def cmd_retrain(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "n_cells": True,
            "alpha": True,
            "condnet_path": True,
            "obs_path": True,
            "retrain": True,
            "out_dir": True,
            "alpha_pde": False,
        },
    )
    _require(
        cfg["retrain"],
        {
            "n_samples": True,
            "n_iters": True,
            "lr0": True,
            "decay_factor": True,
            "decay_every": True,
            "seed": True,
        },
        "retrain",
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["n_cells"])
    prior = _build_prior(cfg["alpha"], mesh)
    problem = _build_problem(cfg["problem"], mesh, cfg.get("alpha_pde", 1.0))
    net = load_condnet(cfg["condnet_path"])
    obs = load_observation(cfg["obs_path"])
    stack, report = retrain(net, obs, prior, problem, TrainConfig(**cfg["retrain"]))
    out = _out_dir(cfg)
    save_stack(stack, os.path.join(out, "flow"))
    report.save_csv(os.path.join(out, "loss.csv"))
    return {"checkpoint": os.path.join(out, "flow")}


def _load_source(src: dict, prior: PriorMeasure) -> MomentSummary:
    _require(
        src,
        {"kind": True, "checkpoint": False, "prefix": False, "n_post": False, "seed": False},
        "source",
    )
    if src["kind"] == "flow":
        stack = load_stack(src["checkpoint"], prior)
        samples = sample_posterior(stack, prior, src.get("n_post", 2000), src.get("seed", 0))
        return moments(samples)
    if src["kind"] == "pcn":
        mean = load_field(src["prefix"] + "_mean")
        var = load_field(src["prefix"] + "_var")
        cov = np.load(src["prefix"] + "_cov.npy")
        return MomentSummary(mean, var, cov)
    raise InvalidConfigurationError(f"unknown source kind '{src['kind']}'")


def cmd_diagnose(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "n_cells": True,
            "alpha": True,
            "source_a": True,
            "source_b": True,
            "offsets": False,
            "out_dir": True,
        },
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    mesh = build_mesh(dim, cfg["n_cells"])
    prior = _build_prior(cfg["alpha"], mesh)
    a = _load_source(cfg["source_a"], prior)
    b = _load_source(cfg["source_b"], prior)
    offsets = cfg.get("offsets", [0, 10, 20] if dim == 1 else [0, 40, 80])
    errors = {"relative_mean_error": relative_mean_error(a.mean, b.mean)}
    errors.update(covariance_relative_errors(a, b, offsets))
    out = _out_dir(cfg)
    save_errors_json(errors, os.path.join(out, "errors.json"))
    return {"errors": os.path.join(out, "errors.json")}


def cmd_invariance(cfg: dict) -> dict:
    _require(
        cfg,
        {
            "problem": True,
            "checkpoint": True,
            "alpha": True,
            "mesh_sizes": True,
            "n_post": False,
            "seed": False,
            "out_dir": True,
        },
    )
    dim = 1 if cfg["problem"] == "elliptic" else 2
    # read the checkpoint header for the architecture, parameters transfer
    with open(cfg["checkpoint"] + ".json") as fh:
        header = json.load(fh)
    params = np.fromfile(cfg["checkpoint"] + ".bin", dtype="<f8")
    report = invariance_study(
        header["kinds"],
        header["M"],
        params,
        cfg["alpha"],
        dim,
        cfg["mesh_sizes"],
        benchmark_truth(dim),
        n_post=cfg.get("n_post", 2000),
        seed=cfg.get("seed", 0),
    )
    out = _out_dir(cfg)
    report.save_csv(os.path.join(out, "invariance.csv"))
    return {"table": os.path.join(out, "invariance.csv")}


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-nf": cmd_train_nf,
    "sample-pcn": cmd_sample_pcn,
    "train-cnf": cmd_train_cnf,
    "retrain": cmd_retrain,
    "diagnose": cmd_diagnose,
    "invariance": cmd_invariance,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="funcflow",
        description="Function-space normalizing-flow inference for PDE inverse problems",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("config", help="path to a JSON run configuration")
    parser.add_argument("--threads", type=int, default=1, help="parallel sample cap")
    args = parser.parse_args(argv)
    os.environ["FUNCFLOW_THREADS"] = str(args.threads)
    try:
        cfg = _load_config(args.config)
        t0 = time.perf_counter()
        artifacts = _COMMANDS[args.command](cfg)
        _write_manifest(_out_dir(cfg), args.command, cfg, time.perf_counter() - t0, artifacts)
    except InvalidConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericalFailureError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return 4
    except FuncflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
