"""Command-line interface.

Subcommands cover the full workflow: gen-demos, pretrain-dynamics, train,
rollout, evaluate, report. Every run takes --config/--seed/--out and writes
a manifest.json (config snapshot, seed, version, timestamps) into the output
directory. The MOVESD_LOG environment variable (error|info|debug) controls
verbosity. Outputs are deterministic for a fixed (config, seed), manifest
timestamps aside.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np
import yaml

from . import __version__
from .core import ConfigError, read_trajectories, write_trajectories
from .dynamics import DynamicsModel, build_dynamics_dataset, pretrain_dynamics
from .envsim import FacilitySpec, GridParkConfig, RoadNetConfig, \
    generate_demonstrations, ring_road_config
from .evalbench import (MarkovModel, build_report, evaluate_generation,
                        evaluate_next_loc, write_report)
from .gailtrain import (TrainConfig, TrainingDiverged, generate, load_dynamics,
                        train)
from .agentnets import PolicyNet
from .trpo import TrpoConfig

log = logging.getLogger("movesd")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level_name = os.environ.get("MOVESD_LOG", "info").lower()
    if level_name not in _LOG_LEVELS:
        raise ConfigError(f"MOVESD_LOG must be one of {sorted(_LOG_LEVELS)}, "
                          f"got {level_name!r}")
    logging.basicConfig(level=_LOG_LEVELS[level_name],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    if not isinstance(cfg, dict) or "env" not in cfg:
        raise ConfigError(f"config file {path} must be a mapping with an 'env' section")
    return cfg


def build_env_config(env: dict, seed: int | None = None):
    kind = env.get("kind")
    eff_seed = env.get("seed", 0) if seed is None else seed
    if kind == "gridpark":
        facilities = tuple(
            FacilitySpec(loc=int(f["loc"]), service_rate=float(f["service_rate"]),
                         checkinable=bool(f.get("checkinable", True)))
            for f in env.get("facilities", []))
        return GridParkConfig(
            width=int(env["width"]), height=int(env["height"]),
            facilities=facilities, n_agents=int(env["n_agents"]),
            max_steps=int(env["max_steps"]), seed=int(eff_seed),
            cell_transit_steps=int(env.get("cell_transit_steps", 1)),
            cell_size=float(env.get("cell_size", 5.0)))
    if kind == "roadnet":
        if "ring" in env:
            ring = env["ring"]
            return ring_road_config(
                n_roads=int(ring["n_roads"]), n_agents=int(env["n_agents"]),
                max_steps=int(env["max_steps"]), seed=int(eff_seed),
                base_travel_time=int(ring.get("base_travel_time", 3)),
                congestion_factor=float(ring.get("congestion_factor", 0.5)))
        adjacency = tuple(tuple((int(a), int(s)) for a, s in road)
                          for road in env["adjacency"])
        return RoadNetConfig(
            adjacency=adjacency,
            base_travel_time=tuple(int(t) for t in env["base_travel_time"]),
            congestion_factor=float(env["congestion_factor"]),
            n_agents=int(env["n_agents"]), max_steps=int(env["max_steps"]),
            seed=int(eff_seed),
            geometry=tuple(tuple(float(v) for v in g) for g in env.get("geometry", ())))
    raise ConfigError(f"env.kind must be 'gridpark' or 'roadnet', got {kind!r}")


def build_train_config(cfg: dict, seed: int, option: int | None = None) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    trpo_section = dict(cfg.get("trpo", {}))
    dyn = dict(cfg.get("dynamics", {}))
    if option is not None:
        t["option"] = option
    trpo_cfg = TrpoConfig(**trpo_section)
    return TrainConfig(
        option=int(t.get("option", 1)),
        iterations=int(t.get("iterations", 100)),
        d_updates=int(t.get("d_updates", 5)),
        pi_updates=int(t.get("pi_updates", 100)),
        batch_size=int(t.get("batch_size", 128)),
        lr=float(t.get("lr", 3e-4)),
        n_envs=int(t.get("n_envs", 1)),
        seed=seed,
        checkpoint_every=int(t.get("checkpoint_every", 25)),
        eta=float(t.get("eta", 0.8)),
        judger_mode=str(t.get("judger_mode", "as_written")),
        dynamics_epochs=int(dyn.get("epochs", 100)),
        dynamics_lr=float(dyn.get("lr", 3e-4)),
        dynamics_batch=int(dyn.get("batch", 128)),
        trpo=trpo_cfg,
    )


def write_manifest(out_dir: str, command: str, config_snapshot: dict, seed: int,
                   started: str, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_checkpoint_bundle(checkpoint_dir: str):
    state_path = os.path.join(checkpoint_dir, "train_state.json")
    if not os.path.exists(state_path):
        raise ConfigError(f"no train_state.json in checkpoint directory {checkpoint_dir}")
    with open(state_path) as f:
        state = json.load(f)
    option = int(state.get("option", 1))
    policy = PolicyNet.load(os.path.join(checkpoint_dir, "policy.json"))
    dynamics = None
    dyn_path = os.path.join(checkpoint_dir, "dynamics.json")
    if option in (1, 2):
        if not os.path.exists(dyn_path):
            raise ConfigError(f"checkpoint {checkpoint_dir} lacks dynamics.json")
        dynamics = load_dynamics(dyn_path)
    return policy, dynamics, option


common_options = [
    click.option("--config", "config_path", required=True,
                 type=click.Path(), help="YAML config file."),
    click.option("--seed", type=int, default=None,
                 help="Overrides the config seed."),
    click.option("--out", "out_dir", required=True, type=click.Path(),
                 help="Output directory."),
]


def add_options(opts):
    def deco(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return deco


@click.group()
def main():
    """Mobility model lab: demos, dynamics pretraining, adversarial training,
    rollouts, and benchmarks."""
    try:
        _setup_logging()
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


def _prepare(config_path: str, seed: int | None):
    cfg = load_config(config_path)
    eff_seed = seed if seed is not None else int(cfg.get("env", {}).get("seed", 0))
    env_config = build_env_config(cfg["env"], seed=eff_seed)
    return cfg, env_config, eff_seed


def _run(fn):
    """Uniform error-to-exit-code mapping for subcommand bodies."""
    try:
        fn()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except TrainingDiverged as e:
        click.echo(f"training aborted: {e}", err=True)
        sys.exit(1)
    except (FileNotFoundError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


@main.command("gen-demos")
@add_options(common_options)
@click.option("--episodes", type=int, default=None, help="Override demos.episodes.")
def gen_demos(config_path, seed, out_dir, episodes):
    """Write scripted-expert demonstrations as JSONL."""
    def body():
        started = _now()
        cfg, env_config, eff_seed = _prepare(config_path, seed)
        n_episodes = episodes or int(cfg.get("demos", {}).get("episodes", 4))
        trajs = generate_demonstrations(env_config, n_episodes, seed=eff_seed)
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "demos.jsonl")
        write_trajectories(path, trajs)
        log.info("wrote %d trajectories to %s", len(trajs), path)
        write_manifest(out_dir, "gen-demos", cfg, eff_seed, started,
                       {"episodes": n_episodes, "trajectories": len(trajs)})
    _run(body)


@main.command("pretrain-dynamics")
@add_options(common_options)
@click.option("--demos", "demos_path", required=True, type=click.Path(),
              help="Demonstrations JSONL to fit on.")
def pretrain_dynamics_cmd(config_path, seed, out_dir, demos_path):
    """Fit the dwell-constraint model on demonstration stays."""
    def body():
        started = _now()
        cfg, env_config, eff_seed = _prepare(config_path, seed)
        demos = read_trajectories(demos_path)
        og, labels = build_dynamics_dataset(demos, env_config)
        if len(labels) == 0:
            raise ConfigError("no stay examples found in the demonstrations")
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "dynamics_dataset.jsonl"), "w") as f:
            for row, g in zip(og, labels):
                f.write(json.dumps({"o_g": row.tolist(), "g": float(g)}) + "\n")
        dyn_cfg = cfg.get("dynamics", {})
        model = DynamicsModel(np.random.default_rng(np.random.SeedSequence(eff_seed)))
        result = pretrain_dynamics(
            model, og, labels,
            epochs=int(dyn_cfg.get("epochs", 100)),
            lr=float(dyn_cfg.get("lr", 3e-4)),
            batch_size=int(dyn_cfg.get("batch", 128)),
            rng=np.random.default_rng(np.random.SeedSequence([eff_seed, 1])))
        from . import autodiff as ad
        ad.save_checkpoint(os.path.join(out_dir, "dynamics.json"), model.params,
                           kind="dynamics", meta={"mode": model.mode})
        with open(os.path.join(out_dir, "pretrain_ll.json"), "w") as f:
            json.dump({"epoch_ll": result.epoch_ll, "final_ll": result.final_ll}, f)
        log.info("pretrained on %d stays, final mean LL %.4f", len(labels),
                 result.final_ll)
        write_manifest(out_dir, "pretrain-dynamics", cfg, eff_seed, started,
                       {"stays": int(len(labels)), "final_ll": result.final_ll})
    _run(body)


@main.command("train")
@add_options(common_options)
@click.option("--demos", "demos_path", required=True, type=click.Path())
@click.option("--option", "option", type=click.IntRange(1, 3), default=None,
              help="Dynamics coupling: 1 pretrain+freeze, 2 iterative, 3 shared trunk.")
@click.option("--dynamics", "dynamics_path", type=click.Path(), default=None,
              help="Reuse a pretrained dynamics checkpoint (option 1).")
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint.")
@click.option("--workers", type=int, default=os.cpu_count(),
              help="Parallel rollout workers.")
def train_cmd(config_path, seed, out_dir, demos_path, option, dynamics_path,
              resume, workers):
    """Adversarial training; writes checkpoints and training_log.jsonl."""
    def body():
        started = _now()
        cfg, env_config, eff_seed = _prepare(config_path, seed)
        demos = read_trajectories(demos_path)
        train_cfg = build_train_config(cfg, eff_seed, option)
        pretrained = load_dynamics(dynamics_path) if dynamics_path else None

        def progress(row):
            log.info("iter %d reward %.4f d_loss %.4f kl %.5f accepted %s",
                     row["iteration"], row["mean_reward"], row["d_loss"],
                     row["kl"], row["accepted"])

        train(env_config, demos, train_cfg, out_dir=out_dir, workers=workers,
              resume=resume, pretrained_dynamics=pretrained, progress=progress)
        write_manifest(out_dir, "train", cfg, eff_seed, started,
                       {"option": train_cfg.option, "iterations": train_cfg.iterations,
                        "resumed": bool(resume)})
    _run(body)


@main.command("rollout")
@add_options(common_options)
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path())
@click.option("--horizon", type=int, default=None,
              help="Steps to roll; defaults to the env episode cap.")
@click.option("--episodes", type=int, default=1)
def rollout_cmd(config_path, seed, out_dir, checkpoint_dir, horizon, episodes):
    """Generate trajectories from a trained checkpoint."""
    def body():
        started = _now()
        cfg, env_config, eff_seed = _prepare(config_path, seed)
        policy, dynamics, option = _load_checkpoint_bundle(checkpoint_dir)
        steps = horizon or env_config.max_steps
        trajs = []
        for ep in range(episodes):
            for t in generate(env_config, policy, dynamics, steps,
                              seed=eff_seed + ep, option=option):
                trajs.append(dataclasses.replace(
                    t, agent_id=ep * env_config.n_agents + t.agent_id))
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "rollouts.jsonl")
        write_trajectories(path, trajs)
        log.info("wrote %d generated trajectories to %s", len(trajs), path)
        write_manifest(out_dir, "rollout", cfg, eff_seed, started,
                       {"horizon": steps, "episodes": episodes})
    _run(body)


@main.command("evaluate")
@add_options(common_options)
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path())
@click.option("--task", type=click.Choice(["next-loc", "gen-1000"]), required=True)
@click.option("--demos", "test_demos_path", required=True, type=click.Path(),
              help="Held-out demonstrations (ground truth).")
@click.option("--train-demos", "train_demos_path", type=click.Path(), default=None,
              help="Demonstrations to fit the Markov baseline on; defaults to --demos.")
@click.option("--horizon", type=int, default=None,
              help="Generation horizon (gen task; default 1000 capped by the env).")
@click.option("--episodes", type=int, default=None, help="Generation episodes.")
@click.option("--max-points", type=int, default=None,
              help="Cap on next-loc evaluation points.")
def evaluate_cmd(config_path, seed, out_dir, checkpoint_dir, task, test_demos_path,
                 train_demos_path, horizon, episodes, max_points):
    """Benchmark a checkpoint against the random-walk and Markov baselines."""
    def body():
        started = _now()
        cfg, env_config, eff_seed = _prepare(config_path, seed)
        eval_cfg = cfg.get("eval", {})
        policy, dynamics, option = _load_checkpoint_bundle(checkpoint_dir)
        test_trajs = read_trajectories(test_demos_path)
        fit_trajs = read_trajectories(train_demos_path) if train_demos_path else test_trajs
        markov = MarkovModel().fit(fit_trajs)

        if task == "next-loc":
            points_cap = max_points or eval_cfg.get("max_points")
            results = evaluate_next_loc(policy, dynamics, markov, test_trajs,
                                        env_config, option=option,
                                        max_points=points_cap, seed=eff_seed)
        else:
            h = horizon or int(eval_cfg.get("horizon", 1000))
            h = min(h, env_config.max_steps)
            n_eps = episodes or int(eval_cfg.get("episodes", 3))
            results = evaluate_generation(policy, dynamics, markov, env_config,
                                          horizon=h, n_episodes=n_eps,
                                          seed=eff_seed, option=option)
        report = build_report(task, results, meta={"checkpoint": checkpoint_dir,
                                                   "seed": eff_seed})
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "results.json"), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        log.info("evaluation written to %s", os.path.join(out_dir, "results.json"))
        write_manifest(out_dir, "evaluate", cfg, eff_seed, started, {"task": task})
    _run(body)


@main.command("report")
@click.option("--results", "results_path", required=True, type=click.Path(),
              help="results.json from evaluate.")
@click.option("--training-log", "training_log_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(results_path, training_log_path, out_dir):
    """Render the report: JSON, text table, CSV curves, and PNG figures."""
    def body():
        started = _now()
        with open(results_path) as f:
            report = json.load(f)
        rows = None
        if training_log_path:
            with open(training_log_path) as f:
                rows = [json.loads(line) for line in f if line.strip()]
        paths = write_report(report, out_dir, training_log=rows)
        click.echo(format_report_paths(paths))
        write_manifest(out_dir, "report", {"results": results_path}, 0, started)
    _run(body)


def format_report_paths(paths: dict[str, str]) -> str:
    return "\n".join(f"{kind}: {path}" for kind, path in sorted(paths.items()))


if __name__ == "__main__":
    main()
