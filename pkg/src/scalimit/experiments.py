"""Experiment registry and the deterministic runner behind ``scalimit run``.

Each experiment writes its artifacts into an output directory and returns
their file names.  Independent sub-tasks (one per K, or one per
verification mode) fan out over a process pool; every random draw comes
from per-path streams keyed by the config seed, so results do not depend
on the schedule or on the worker count.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .table import ExperimentTable

DEFAULT_A_HI = 2.0


@dataclass(frozen=True)
class Experiment:
    name: str
    summary: str
    runner: Callable


def pmap(fn, items, workers: int) -> list:
    """Order-preserving map, in-process when ``workers == 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*args) for args in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, *zip(*items)))


def _toy(cfg: ExperimentConfig):
    from .toy import ToyParams

    block = dict(cfg.get("toy"))
    block.pop("a_hi", None)
    return ToyParams(**block)


def _a_hi(cfg: ExperimentConfig) -> float:
    return float(cfg.get("toy").get("a_hi", DEFAULT_A_HI))


def write_table(table: ExperimentTable, cfg: ExperimentConfig, out_dir: str) -> list:
    table.config_digest = cfg.digest
    table.to_csv(os.path.join(out_dir, f"{table.name}.csv"))
    with open(os.path.join(out_dir, f"{table.name}.json"), "w", encoding="utf-8") as fh:
        fh.write(table.to_json() + "\n")
    return [f"{table.name}.csv", f"{table.name}.json"]


def write_json(doc: dict, name: str, cfg: ExperimentConfig, out_dir: str) -> list:
    doc = dict(doc, config_digest=cfg.digest)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return [name]


def _concat(tables: list) -> dict:
    cols = {k: [] for k in tables[0].columns}
    for t in tables:
        for k in cols:
            cols[k].extend(t.columns[k])
    return cols


# --- figure1 ---------------------------------------------------------------------------

def _figure1_task(cfg: ExperimentConfig, K: float) -> ExperimentTable:
    from .toy import figure1_experiment

    return figure1_experiment(
        _toy(cfg), [K], bsde_K_max=cfg.get("bsde_K_max", 0), mc_K_max=cfg.get("mc_K_max", 0),
        n_paths=cfg.get("n_paths", 10_000), seed=cfg.seed, a_hi=_a_hi(cfg), lattice_dt=cfg.dt("lattice"),
    )


def run_figure1(cfg: ExperimentConfig, out_dir: str) -> list:
    parts = pmap(_figure1_task, [(cfg, K) for K in cfg.get("K_list")], cfg.workers)
    params = _toy(cfg)
    table = ExperimentTable("figure1", _concat(parts), stochastic=("J0K_mc",),
                            meta={"params": params.__dict__.copy(), "warnings": params.assumption_warnings()})
    return write_table(table, cfg, out_dir)


# --- figure2 ---------------------------------------------------------------------------

def run_figure2(cfg: ExperimentConfig, out_dir: str) -> list:
    from .toy import figure2_experiment

    res = figure2_experiment(_toy(cfg), cfg.get("K_list"), cfg.get("t_eval"), cfg.get("n_paths"),
                             seed=cfg.seed, dt=cfg.dt("euler", 1e-4), a_hi=_a_hi(cfg))
    return write_table(res.table, cfg, out_dir) + res.write(out_dir)


# --- bsde_convergence ------------------------------------------------------------------

def _x_max(cfg: ExperimentConfig):
    return cfg.get("grid", {}).get("x_max")


def _discrete_solve_task(cfg: ExperimentConfig, K: float):
    from .bsde import solve_discrete_bsde
    from .control import build_generator, toy_problem_K

    prob = toy_problem_K(_toy(cfg), K, _a_hi(cfg))
    return solve_discrete_bsde(prob.model, prob.ctx, build_generator(prob), prob.terminal,
                               _x_max(cfg), cfg.dt("lattice"))


def _limit_solve_task(cfg: ExperimentConfig):
    from .bsde import default_x_max, solve_limit_bsde
    from .control import build_generator, toy_problem

    p = _toy(cfg)
    prob = toy_problem(p, _a_hi(cfg))
    x_max = _x_max(cfg) or default_x_max(p.model, p.x0, p.T)
    return solve_limit_bsde(p.model, build_generator(prob), p.terminal, x_max,
                            cfg.get("grid", {}).get("nx", 2000), cfg.dt("pde", 1e-4), p.T, p.x0)


def _solve_dispatch(cfg: ExperimentConfig, K):
    return _limit_solve_task(cfg) if K is None else _discrete_solve_task(cfg, K)


def run_bsde_convergence(cfg: ExperimentConfig, out_dir: str) -> list:
    from .bsde import convergence_report

    Ks = list(cfg.get("K_list"))
    sols = pmap(_solve_dispatch, [(cfg, None)] + [(cfg, K) for K in Ks], cfg.workers)
    p = _toy(cfg)
    table = convergence_report(dict(zip(Ks, sols[1:])), sols[0], p.model, p.x0, p.T, cfg.get("n_paths"),
                               seed=cfg.seed, dt_euler=cfg.dt("euler", 1e-4), window=cfg.get("window"))
    return write_table(table, cfg, out_dir)


# --- control_convergence ---------------------------------------------------------------

def run_control_convergence(cfg: ExperimentConfig, out_dir: str) -> list:
    from .control import toy_control_convergence

    table = toy_control_convergence(_toy(cfg), cfg.get("K_list"), cfg.get("n_paths"), seed=cfg.seed,
                                    dt=cfg.dt("euler", 1e-4), a_hi=_a_hi(cfg))
    return write_table(table, cfg, out_dir)


# --- moments ---------------------------------------------------------------------------

def _moment_model(cfg: ExperimentConfig):
    from .model import PopulationModel

    return PopulationModel.from_dict(cfg.get("model"))


def _moment_task(cfg: ExperimentConfig, K: float):
    from .model import ScalingContext
    from .moments import mc_moment

    ctx = ScalingContext(K, cfg.get("x0", 1.0), cfg.get("T"))
    return mc_moment(_moment_model(cfg), ctx, cfg.get("beta"), cfg.seed, cfg.get("n_paths"))


def run_moments(cfg: ExperimentConfig, out_dir: str) -> list:
    from .moments import uniform_moment_check

    Ks = list(cfg.get("K_list"))
    est = pmap(_moment_task, [(cfg, K) for K in Ks], cfg.workers)
    table = uniform_moment_check(_moment_model(cfg), Ks, cfg.get("beta"), cfg.get("T"), cfg.get("n_paths"),
                                 x0=cfg.get("x0", 1.0), seed=cfg.seed, estimates=est)
    return write_table(table, cfg, out_dir)


# --- verify ----------------------------------------------------------------------------

def _verify_task(cfg: ExperimentConfig, mode: str):
    from .control import solve_and_verify_continuous, solve_and_verify_K, toy_problem, toy_problem_K

    p = _toy(cfg)
    if mode == "discrete":
        return solve_and_verify_K(toy_problem_K(p, cfg.get("K"), _a_hi(cfg)), cfg.dt("lattice"),
                                  cfg.get("n_paths"), cfg.seed, _x_max(cfg))
    grid = {k: v for k, v in (("x_max", _x_max(cfg)), ("nx", cfg.get("grid", {}).get("nx")),
                              ("dt", cfg.dt("pde"))) if v is not None}
    return solve_and_verify_continuous(toy_problem(p, _a_hi(cfg)), grid, cfg.get("n_paths"), cfg.seed,
                                       cfg.dt("euler", 1e-4))


def run_verify(cfg: ExperimentConfig, out_dir: str) -> list:
    mode = cfg.get("mode", "both")
    modes = ["discrete", "continuous"] if mode == "both" else [mode]
    reports = pmap(_verify_task, [(cfg, m) for m in modes], cfg.workers)
    files = []
    cols = {k: [] for k in ("mode", "Y0", "mc_optimal", "mc_optimal_se", "best_perturbation", "pass")}
    for m, rep in zip(modes, reports):
        files += write_json(rep.to_dict(), f"verify_{m}.json", cfg, out_dir)
        best = max(rep.perturbations, key=lambda d: d["mean"])
        for k, v in zip(cols, (m, rep.Y0, rep.mc_optimal["mean"], rep.mc_optimal["se"], best["name"],
                               rep.passed)):
            cols[k].append(v)
    table = ExperimentTable("verify", cols, stochastic=("mc_optimal",), meta={"K": cfg.get("K")})
    return files + write_table(table, cfg, out_dir)


EXPERIMENTS = {
    e.name: e
    for e in (
        Experiment("figure1", "V0^K from the Riccati system against V0, with optional lattice and MC columns",
                   run_figure1),
        Experiment("figure2", "KS distances between discrete and limit laws of the optimal control and state",
                   run_figure2),
        Experiment("bsde_convergence", "discrete lattice BSDE against the limit PDE, per K", run_bsde_convergence),
        Experiment("control_convergence", "integrated-control errors and terminal-law KS, per K",
                   run_control_convergence),
        Experiment("moments", "exponential moments: MC against the closed form and its limit", run_moments),
        Experiment("verify", "verification battery for the toy control problem", run_verify),
    )
}


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"scalimit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run ``cfg`` into ``out_dir``; returns the manifest.

    ``manifest.json`` is deterministic; wall time goes to ``timing.json``.
    """
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    files = EXPERIMENTS[cfg.experiment].runner(cfg, out_dir)
    wall = time.perf_counter() - t0
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": cfg.effective(),
        "config_digest": cfg.digest,
        "versions": versions(),
        "artifacts": [{"file": f, "sha256": _sha256(os.path.join(out_dir, f)), "config_digest": cfg.digest}
                      for f in sorted(files)],
    }
    manifest["config"].pop("output_dir", None)
    manifest["config"].pop("workers", None)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    with open(os.path.join(out_dir, "timing.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config_digest": cfg.digest, "wall_time_s": wall, "workers": cfg.workers},
                            sort_keys=True, indent=2) + "\n")
    return manifest


__all__ = ["EXPERIMENTS", "Experiment", "pmap", "run", "versions"]
