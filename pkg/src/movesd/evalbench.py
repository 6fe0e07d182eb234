"""Benchmarks: next-location accuracy and long-horizon generation error.

Next-location prediction ranks the candidate set (current location plus
one-step successors) by each method's probability mass; Acc@k counts the
truth appearing in the top k, breaking probability ties toward the lower
location id. A truth outside the candidate set counts as a miss and is
tallied separately. Generation quality compares policy-generated (or
baseline-chain) location sequences against held-out true continuations from
identical initial states, via average and final displacement error over the
shared geometry.

Baselines: a uniform random walk over candidates, and a first-order Markov
chain fitted on training transitions with a uniform-over-candidates fallback
for unseen source locations.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agentnets import WINDOW, PolicyNet
from .core import Trajectory
from .dynamics import DynamicsModel
from .envsim import (action_target_loc, candidates_for_loc, dynamics_features,
                     encode_features, loc_coordinates)
from .gailtrain import generate

METHODS = ("movesd", "random_walk", "markov")


def rank_candidates(candidates: list[int], probs: dict[int, float], k: int) -> list[int]:
    """Top-k candidate locations by probability, ties to the lower id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ordered = sorted(candidates, key=lambda loc: (-probs.get(loc, 0.0), loc))
    return ordered[:k]


def acc_at_k(points: list[tuple[list[int], dict[int, float], int]], k: int
             ) -> tuple[float, float]:
    """(accuracy, truth-missing rate) over (candidates, probs, truth) points."""
    if not points:
        raise ValueError("no evaluation points")
    hits = 0
    missing = 0
    for candidates, probs, truth in points:
        if truth not in candidates:
            missing += 1
            continue  # counted as a miss
        if truth in rank_candidates(candidates, probs, k):
            hits += 1
    return hits / len(points), missing / len(points)


def ade(generated: list[int], truth: list[int], config) -> float:
    """Mean per-step Euclidean displacement between two location sequences."""
    if len(generated) != len(truth):
        raise ValueError(f"sequence lengths differ: {len(generated)} vs {len(truth)}")
    if not generated:
        raise ValueError("empty sequences")
    dists = [_euclid(loc_coordinates(config, a), loc_coordinates(config, b))
             for a, b in zip(generated, truth)]
    return float(np.mean(dists))


def fde(generated: list[int], truth: list[int], config) -> float:
    if not generated or not truth:
        raise ValueError("empty sequences")
    return _euclid(loc_coordinates(config, generated[-1]),
                   loc_coordinates(config, truth[-1]))


def _euclid(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


class MarkovModel:
    """First-order location transition counts, normalized per source."""

    def __init__(self):
        self.counts: dict[int, dict[int, int]] = {}

    def fit(self, trajectories: list[Trajectory]) -> "MarkovModel":
        for traj in trajectories:
            locs = traj.locations()
            for src, dst in zip(locs, locs[1:]):
                self.counts.setdefault(src, {}).setdefault(dst, 0)
                self.counts[src][dst] += 1
        return self

    def predict(self, loc: int, candidates: list[int]) -> dict[int, float]:
        """Probabilities over the candidate set; uniform when loc is unseen."""
        row = self.counts.get(loc)
        if not row:
            return {c: 1.0 / len(candidates) for c in candidates}
        total = sum(row.values())
        return {c: row.get(c, 0) / total for c in candidates}

    def sample_next(self, loc: int, candidates: list[int],
                    rng: np.random.Generator) -> int:
        probs = self.predict(loc, candidates)
        mass = sum(probs.values())
        if mass <= 0.0:
            return candidates[int(rng.integers(0, len(candidates)))]
        keys = sorted(probs)
        p = np.array([probs[k] for k in keys]) / mass
        return int(rng.choice(keys, p=p))


def random_walk_probs(candidates: list[int]) -> dict[int, float]:
    return {c: 1.0 / len(candidates) for c in candidates}


def chain_rollout(start_loc: int, steps: int, config, rng: np.random.Generator,
                  markov: MarkovModel | None = None) -> list[int]:
    """Location chain of length ``steps``: Markov if given, else random walk."""
    locs = []
    cur = start_loc
    for _ in range(steps):
        candidates = candidates_for_loc(config, cur)
        if markov is None:
            cur = candidates[int(rng.integers(0, len(candidates)))]
        else:
            cur = markov.sample_next(cur, candidates, rng)
        locs.append(cur)
    return locs


def policy_next_loc_probs(policy: PolicyNet, dynamics: DynamicsModel | None,
                          locs: np.ndarray, feats: np.ndarray, og: np.ndarray,
                          config, option: int = 1) -> list[dict[int, float]]:
    """Location distributions induced by the action distribution, batched.

    Eval is deterministic: g is the Beta mean. Action mass lands on the
    action's target location (stay-type and wall-blocked actions point home).
    """
    with ad.no_grad():
        h = policy.encode(locs, feats)
        if option == 3:
            alpha, beta = policy.beta_params_from_encoding(h)
            g = np.clip(alpha.data / (alpha.data + beta.data), 1e-6, 1 - 1e-6)
        else:
            g = dynamics.constraint_value(og, mode="mean")
        probs = policy.action_dist_from_encoding(h, g).data
    out = []
    for row in range(probs.shape[0]):
        cur = int(locs[row, -1])
        loc_probs: dict[int, float] = {}
        for action in range(policy.n_actions):
            target = action_target_loc(config, cur, action)
            loc_probs[target] = loc_probs.get(target, 0.0) + float(probs[row, action])
        out.append(loc_probs)
    return out


@dataclass
class NextLocPoint:
    locs: np.ndarray    # (WINDOW,)
    feats: np.ndarray   # (WINDOW, k)
    og: np.ndarray      # (3,)
    current: int
    truth: int


def next_loc_points(trajectories: list[Trajectory], config,
                    max_points: int | None = None,
                    rng: np.random.Generator | None = None) -> list[NextLocPoint]:
    """One prediction point per step of the held-out trajectories."""
    points = []
    for traj in trajectories:
        if not traj.records:
            continue
        t_locs = np.array([r.state.loc_id for r in traj.records], dtype=np.int64)
        t_feats = np.stack([encode_features(r.state, config) for r in traj.records])
        for t in range(len(traj.records)):
            idx = np.clip(np.arange(t - WINDOW + 1, t + 1), 0, t)
            st = traj.records[t].state
            points.append(NextLocPoint(
                locs=t_locs[idx], feats=t_feats[idx],
                og=dynamics_features(config, st.loc_id, t, st.population),
                current=st.loc_id, truth=traj.records[t].next_state.loc_id))
    if max_points is not None and len(points) > max_points:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = rng.choice(len(points), size=max_points, replace=False)
        points = [points[i] for i in sorted(keep)]
    return points


def evaluate_next_loc(policy: PolicyNet, dynamics: DynamicsModel | None,
                      markov: MarkovModel, test_trajectories: list[Trajectory],
                      config, option: int = 1, max_points: int | None = None,
                      seed: int = 0) -> dict:
    points = next_loc_points(test_trajectories, config, max_points,
                             np.random.default_rng(seed))
    if not points:
        raise ValueError("no evaluation points in the test trajectories")
    locs = np.stack([p.locs for p in points])
    feats = np.stack([p.feats for p in points])
    og = np.stack([p.og for p in points])
    model_probs = policy_next_loc_probs(policy, dynamics, locs, feats, og,
                                        config, option)

    per_method_points = {m: [] for m in METHODS}
    for i, p in enumerate(points):
        candidates = candidates_for_loc(config, p.current)
        per_method_points["movesd"].append((candidates, model_probs[i], p.truth))
        per_method_points["random_walk"].append(
            (candidates, random_walk_probs(candidates), p.truth))
        per_method_points["markov"].append(
            (candidates, markov.predict(p.current, candidates), p.truth))

    results = {}
    for method, pts in per_method_points.items():
        entry = {}
        for k in (1, 3, 5):
            acc, missing = acc_at_k(pts, k)
            entry[f"acc@{k}"] = acc
            entry["missing_candidate_rate"] = missing
        results[method] = entry
    results["n_points"] = len(points)
    return results


def evaluate_generation(policy: PolicyNet, dynamics: DynamicsModel | None,
                        markov: MarkovModel, env_config, horizon: int,
                        n_episodes: int, seed: int, option: int = 1) -> dict:
    """ADE/FDE of generated sequences against expert truth, same initial states."""
    from .envsim import episode_seed, generate_demonstrations

    per_method = {m: {"ade": [], "fde": []} for m in METHODS}
    for ep in range(n_episodes):
        truth_trajs = generate_demonstrations(env_config, 1, seed=seed + 7000 + ep)
        gen_trajs = generate(env_config, policy, dynamics, horizon,
                             seed=seed + 7000 + ep, option=option,
                             env_seed=episode_seed(seed + 7000 + ep, 0))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 500 + ep]))
        for truth, gen in zip(truth_trajs, gen_trajs):
            true_locs = truth.locations()[1:horizon + 1]
            gen_locs = gen.locations()[1:horizon + 1]
            start = truth.locations()[0]
            rw_locs = chain_rollout(start, horizon, env_config, rng)
            mk_locs = chain_rollout(start, horizon, env_config, rng, markov)
            for method, locs in (("movesd", gen_locs), ("random_walk", rw_locs),
                                 ("markov", mk_locs)):
                per_method[method]["ade"].append(ade(locs, true_locs, env_config))
                per_method[method]["fde"].append(fde(locs, true_locs, env_config))
    out = {}
    for method, vals in per_method.items():
        out[method] = {"ade": float(np.mean(vals["ade"])),
                       "fde": float(np.mean(vals["fde"]))}
    out["horizon"] = horizon
    out["n_sequences"] = n_episodes * env_config.n_agents
    return out


# --- report ----------------------------------------------------------------

def _schema_path() -> str:
    return os.path.join(os.path.dirname(__file__), "report_schema.json")


def build_report(task: str, results: dict, meta: dict | None = None) -> dict:
    report = {"task": task, "methods": {}, "meta": meta or {}}
    for m in METHODS:
        if m in results:
            report["methods"][m] = results[m]
    for key in ("n_points", "horizon", "n_sequences"):
        if key in results:
            report[key] = results[key]
    return report


def write_report(report: dict, out_dir: str, training_log: list[dict] | None = None,
                 render_figures: bool = True) -> dict[str, str]:
    """Emit report.json, a plain-text table, CSV curves, and PNG figures."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    paths["json"] = json_path

    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w") as f:
        f.write(format_table(report) + "\n")
    paths["table"] = txt_path

    if training_log:
        csv_path = os.path.join(out_dir, "curves.csv")
        fields = ["iteration", "d_loss", "mean_reward", "surrogate_after",
                  "kl", "entropy"]
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for row in training_log:
                writer.writerow(row)
        paths["curves"] = csv_path

    if render_figures:
        from .figures import render_metric_bars, render_training_curves
        fig_dir = os.path.join(out_dir, "figures")
        os.makedirs(fig_dir, exist_ok=True)
        bar_path = os.path.join(fig_dir, "metrics.png")
        if render_metric_bars(report, bar_path):
            paths["metrics_figure"] = bar_path
        if training_log:
            curve_path = os.path.join(fig_dir, "training_curves.png")
            render_training_curves(training_log, curve_path)
            paths["curves_figure"] = curve_path
    return paths


def format_table(report: dict) -> str:
    metrics = []
    for key in ("acc@1", "acc@3", "acc@5", "ade", "fde", "missing_candidate_rate"):
        if any(key in report["methods"].get(m, {}) for m in METHODS):
            metrics.append(key)
    header = ["method"] + metrics
    rows = [header]
    for m in METHODS:
        if m not in report["methods"]:
            continue
        row = [m]
        for key in metrics:
            val = report["methods"][m].get(key)
            row.append("-" if val is None else f"{val:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return f"task: {report['task']}\n" + "\n".join(lines)
