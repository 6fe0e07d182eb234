"""Adversarial imitation training loop with an explicit dwell-constraint model.

Per iteration: roll the current policy in the environment (constraint
samples g coming from the dynamics model, true physics applying them), score
every step with the blended judger/discriminator reward, take trust-region
policy steps, then ascend the discriminator. Three couplings between the
dynamics model and the policy are supported:

* option 1: pretrain the dynamics model on demonstrations, then freeze it;
* option 2: start it cold and give it one likelihood step per iteration on
  the stays the generator produced;
* option 3: share the policy trunk -- a Beta head on the recurrent summary
  plays the dynamics role and trains jointly (surrogate + likelihood).

Expert tuples for the discriminator take their g from the current dynamics
model evaluated on the demonstration's context, since demonstrations carry
no constraint samples of their own.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .agentnets import (RECURRENT_UNITS, WINDOW, DiscriminatorNet, PolicyNet,
                        WindowBatch, discriminator_update)
from .core import StepRecord, Trajectory, rescale_duration
from .dynamics import (DynamicsModel, build_dynamics_dataset, dynamics_update_step,
                       pretrain_dynamics, sample_beta)
from .envsim import (dynamics_features, encode_features, env_reset, env_step,
                     observe)
from .rewards import RewardConfig, combined_reward, judger_reward, surrogate_reward
from .trpo import (RolloutBuffer, TrpoConfig, ValueNet, compute_gae,
                   normalize_advantages, trpo_step, value_inputs)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; a checkpoint was written before raising."""


@dataclass
class TrainConfig:
    option: int = 1
    iterations: int = 100
    d_updates: int = 5
    pi_updates: int = 100
    batch_size: int = 128
    lr: float = 3e-4
    n_envs: int = 1
    seed: int = 0
    checkpoint_every: int = 25
    eta: float = 0.8
    judger_mode: str = "as_written"
    dynamics_epochs: int = 100
    dynamics_lr: float = 3e-4
    dynamics_batch: int = 128
    trpo: TrpoConfig = field(default_factory=TrpoConfig)

    def __post_init__(self):
        if self.option not in (1, 2, 3):
            raise ValueError(f"option must be 1, 2 or 3, got {self.option}")
        if self.iterations < 1 or self.d_updates < 0 or self.pi_updates < 1:
            raise ValueError("iterations and pi_updates must be >= 1, d_updates >= 0")


@dataclass
class TrainResult:
    policy: PolicyNet
    discriminator: DiscriminatorNet
    dynamics: DynamicsModel
    value: ValueNet
    log: list[dict]


class _WindowRoller:
    """Rolling per-agent window arrays, grown one observation per step."""

    def __init__(self, config, n_agents: int):
        self.config = config
        cap = config.max_steps + 1
        self.locs = np.zeros((n_agents, cap), dtype=np.int64)
        self.feats = np.zeros((n_agents, cap, config.n_features))
        self.filled = 0

    def push(self, states):
        for i, s in enumerate(states):
            self.locs[i, self.filled] = s.loc_id
            self.feats[i, self.filled] = encode_features(s, self.config)
        self.filled += 1

    def windows(self) -> tuple[np.ndarray, np.ndarray]:
        """Left-padded (B, WINDOW) / (B, WINDOW, k) arrays of the latest states."""
        t = self.filled
        idx = np.arange(t - WINDOW, t)
        idx = np.clip(idx, 0, t - 1)
        return self.locs[:, idx], self.feats[:, idx, :]


def expert_window_arrays(trajectories, config):
    """Precomputed window/action/context arrays over every demo step."""
    all_locs, all_feats, all_actions, all_og = [], [], [], []
    for traj in trajectories:
        if not traj.records:
            continue
        t_len = len(traj.records)
        locs = np.array([r.state.loc_id for r in traj.records], dtype=np.int64)
        feats = np.stack([encode_features(r.state, config) for r in traj.records])
        for t in range(t_len):
            idx = np.clip(np.arange(t - WINDOW + 1, t + 1), 0, t)
            all_locs.append(locs[idx])
            all_feats.append(feats[idx])
            all_actions.append(traj.records[t].action)
            st = traj.records[t].state
            all_og.append(dynamics_features(config, st.loc_id, t, st.population))
    return (np.stack(all_locs), np.stack(all_feats),
            np.array(all_actions, dtype=np.int64), np.stack(all_og))


def stay_examples(trajectories, config, want_windows: bool = False):
    """Stay-entry examples from trajectories.

    Returns (o_g, labels) or, with windows, (locs, feats, labels) where the
    window is the history up to and including the entry state.
    """
    og_rows, labels = [], []
    win_locs, win_feats = [], []
    for traj in trajectories:
        if not traj.records:
            continue
        locs = [r.state.loc_id for r in traj.records]
        if want_windows:
            t_locs = np.array(locs, dtype=np.int64)
            t_feats = np.stack([encode_features(r.state, config) for r in traj.records])
        run_start = 0
        for t in range(1, len(locs) + 1):
            if t == len(locs) or locs[t] != locs[run_start]:
                entry = traj.records[run_start].state
                og_rows.append(dynamics_features(config, entry.loc_id, run_start,
                                                 entry.population))
                labels.append(rescale_duration(t - run_start, config.max_steps))
                if want_windows:
                    idx = np.clip(np.arange(run_start - WINDOW + 1, run_start + 1),
                                  0, run_start)
                    win_locs.append(t_locs[idx])
                    win_feats.append(t_feats[idx])
                run_start = t
    labels_arr = np.array(labels)
    if want_windows:
        if not labels:
            return (np.zeros((0, WINDOW), dtype=np.int64),
                    np.zeros((0, WINDOW, config.n_features)), labels_arr)
        return np.stack(win_locs), np.stack(win_feats), labels_arr
    return np.stack(og_rows) if og_rows else np.zeros((0, 3)), labels_arr


def _policy_beta_g(policy: PolicyNet, locs, feats, rng) -> np.ndarray:
    with ad.no_grad():
        h = policy.encode(locs, feats)
        alpha, beta = policy.beta_params_from_encoding(h)
    return np.array([sample_beta(a, b, rng) for a, b in zip(alpha.data, beta.data)])


def _roll_one_episode(env_config, policy: PolicyNet, dynamics: DynamicsModel | None,
                      option: int, seed_seq, horizon: int | None = None,
                      env_seed: int | None = None):
    """Roll one seeded episode; returns per-step arrays plus step records."""
    env_ss, sample_ss = seed_seq.spawn(2)
    rng = np.random.default_rng(sample_ss)
    if env_seed is None:
        env_seed = int(np.random.default_rng(env_ss).integers(0, 2 ** 31))
    state = env_reset(replace(env_config, seed=env_seed))
    n = env_config.n_agents
    steps = env_config.max_steps if horizon is None else horizon
    if steps > env_config.max_steps:
        raise ValueError(f"horizon {steps} exceeds env max_steps {env_config.max_steps}")

    roller = _WindowRoller(env_config, n)
    obs = [observe(state, i) for i in range(n)]
    roller.push(obs)

    locs_steps, feats_steps, g_steps = [], [], []
    action_steps, logp_steps, probs_steps, h_steps = [], [], [], []
    records: list[list[StepRecord]] = [[] for _ in range(n)]

    for _ in range(steps):
        w_locs, w_feats = roller.windows()
        if option == 3:
            g = _policy_beta_g(policy, w_locs, w_feats, rng)
        else:
            og = np.stack([dynamics_features(env_config, obs[i].loc_id, state.clock,
                                             obs[i].population) for i in range(n)])
            g = dynamics.constraint_value(og, rng=rng, mode="sample")
        actions, logp, probs, h_r = policy.act(w_locs, w_feats, g, rng)
        state = env_step(state, actions.tolist())
        new_obs = [observe(state, i) for i in range(n)]
        for i in range(n):
            records[i].append(StepRecord(state=obs[i], action=int(actions[i]),
                                         constraint=float(g[i]), next_state=new_obs[i]))
        locs_steps.append(w_locs)
        feats_steps.append(w_feats)
        g_steps.append(g)
        action_steps.append(actions)
        logp_steps.append(logp)
        probs_steps.append(probs)
        h_steps.append(h_r)
        obs = new_obs
        roller.push(obs)

    def agent_major(arr_list):
        stacked = np.stack(arr_list)            # (T, B, ...)
        return np.concatenate([stacked[:, i] for i in range(n)], axis=0)

    return {
        "locs": agent_major(locs_steps),
        "feats": agent_major(feats_steps),
        "g": agent_major(g_steps),
        "actions": agent_major(action_steps),
        "logp": agent_major(logp_steps),
        "probs": agent_major(probs_steps),
        "h_r": agent_major(h_steps),
        "records": records,
        "steps": steps,
    }


def collect_rollouts(env_config, policy: PolicyNet, dynamics: DynamicsModel | None,
                     discriminator: DiscriminatorNet, reward_cfg: RewardConfig,
                     value_net: ValueNet, rng_seed, option: int = 1,
                     n_envs: int = 1, workers: int = 1
                     ) -> tuple[RolloutBuffer, list[Trajectory]]:
    """Roll ``n_envs`` episodes and score every step with both reward terms."""
    seeds = np.random.SeedSequence(rng_seed).spawn(n_envs)

    def run(k):
        return _roll_one_episode(env_config, policy, dynamics, option, seeds[k])

    if workers > 1 and n_envs > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(run, range(n_envs)))
    else:
        episodes = [run(k) for k in range(n_envs)]

    locs = np.concatenate([e["locs"] for e in episodes])
    feats = np.concatenate([e["feats"] for e in episodes])
    g = np.concatenate([e["g"] for e in episodes])
    actions = np.concatenate([e["actions"] for e in episodes])
    logp = np.concatenate([e["logp"] for e in episodes])
    probs = np.concatenate([e["probs"] for e in episodes])
    h_r = np.concatenate([e["h_r"] for e in episodes])

    n_agents = env_config.n_agents
    ends = np.zeros(len(actions), dtype=bool)
    trajectories = []
    offset = 0
    for k, ep in enumerate(episodes):
        steps = ep["steps"]
        for i in range(n_agents):
            offset += steps
            ends[offset - 1] = True
            trajectories.append(Trajectory(agent_id=k * n_agents + i,
                                           records=ep["records"][i]))

    d_scores = discriminator.score(WindowBatch(locs=locs, feats=feats, g=g,
                                               actions=actions))
    r_d = np.array([surrogate_reward(d) for d in d_scores])
    r_j = np.zeros(len(actions))
    row = 0
    for traj in trajectories:
        for rec in traj.records:
            r_j[row] = judger_reward(rec.state, rec.action, rec.constraint,
                                     rec.next_state, reward_cfg)
            row += 1
    rewards = np.array([combined_reward(j, d, reward_cfg.eta)
                        for j, d in zip(r_j, r_d)])

    values = value_net.predict(np.concatenate([h_r, g.reshape(-1, 1)], axis=1))
    buffer = RolloutBuffer(locs=locs, feats=feats, g=g, actions=actions,
                           logp_old=logp, probs_old=probs, rewards=rewards,
                           values=values, ends=ends, h_r=h_r,
                           judger_rewards=r_j, surrogate_rewards=r_d)
    return buffer, trajectories


def generate(env_config, policy: PolicyNet, dynamics: DynamicsModel | None,
             horizon: int, seed: int, option: int = 1,
             env_seed: int | None = None) -> list[Trajectory]:
    """Policy-driven trajectories from the seeded initial state, no scoring.

    ``env_seed`` pins the environment reset independently of the sampling
    stream, so generated sequences can share an initial state with a
    reference episode.
    """
    episode = _roll_one_episode(env_config, policy, dynamics, option,
                                np.random.SeedSequence(seed), horizon=horizon,
                                env_seed=env_seed)
    return [Trajectory(agent_id=i, records=episode["records"][i])
            for i in range(env_config.n_agents)]


def _save_all(out_dir, policy, discriminator, dynamics, value, iteration, cfg):
    os.makedirs(out_dir, exist_ok=True)
    policy.save(os.path.join(out_dir, "policy.json"))
    discriminator.save(os.path.join(out_dir, "discriminator.json"))
    value.save(os.path.join(out_dir, "value.json"))
    if dynamics is not None:
        ad.save_checkpoint(os.path.join(out_dir, "dynamics.json"), dynamics.params,
                           kind="dynamics", meta={"mode": dynamics.mode})
    with open(os.path.join(out_dir, "train_state.json"), "w") as f:
        json.dump({"iteration": iteration, "option": cfg.option, "seed": cfg.seed}, f)


def load_dynamics(path) -> DynamicsModel:
    state, meta, kind = ad.load_checkpoint(path)
    if kind != "dynamics":
        raise ValueError(f"checkpoint {path} holds a {kind!r} net, expected dynamics")
    model = DynamicsModel(np.random.default_rng(0), mode=meta.get("mode", "beta"))
    model.params.load_state_dict(state)
    return model


def train(env_config, demos: list[Trajectory], cfg: TrainConfig,
          out_dir: str | None = None, workers: int = 1, resume: bool = False,
          pretrained_dynamics: DynamicsModel | None = None,
          progress=None) -> TrainResult:
    root = np.random.SeedSequence(cfg.seed)
    (policy_ss, disc_ss, dyn_ss, value_ss, pretrain_ss, batch_ss,
     rollout_entropy) = root.spawn(7)

    policy = PolicyNet(env_config.n_locs, env_config.n_features, env_config.n_actions,
                       np.random.default_rng(policy_ss),
                       with_beta_head=(cfg.option == 3))
    discriminator = DiscriminatorNet(env_config.n_locs, env_config.n_features,
                                     env_config.n_actions, np.random.default_rng(disc_ss))
    value_net = ValueNet(RECURRENT_UNITS + 1, np.random.default_rng(value_ss))
    dynamics = None
    if cfg.option in (1, 2):
        dynamics = pretrained_dynamics or DynamicsModel(np.random.default_rng(dyn_ss))

    reward_cfg = RewardConfig(eta=cfg.eta, max_steps=env_config.max_steps,
                              stay_actions=env_config.stay_actions,
                              judger_mode=cfg.judger_mode)

    start_iter = 0
    log: list[dict] = []
    log_path = os.path.join(out_dir, "training_log.jsonl") if out_dir else None
    if resume:
        if not out_dir:
            raise ValueError("resume requires an output directory")
        state_path = os.path.join(out_dir, "train_state.json")
        if not os.path.exists(state_path):
            raise FileNotFoundError(f"nothing to resume from in {out_dir}")
        with open(state_path) as f:
            start_iter = json.load(f)["iteration"] + 1
        policy = PolicyNet.load(os.path.join(out_dir, "policy.json"))
        discriminator = DiscriminatorNet.load(os.path.join(out_dir, "discriminator.json"))
        value_net = ValueNet.load(os.path.join(out_dir, "value.json"))
        dyn_path = os.path.join(out_dir, "dynamics.json")
        if os.path.exists(dyn_path) and cfg.option in (1, 2):
            dynamics = load_dynamics(dyn_path)
        if log_path and os.path.exists(log_path):
            with open(log_path) as f:
                log = [json.loads(line) for line in f if line.strip()]
    elif cfg.option == 1 and pretrained_dynamics is None:
        og, labels = build_dynamics_dataset(demos, env_config)
        pretrain_dynamics(dynamics, og, labels, epochs=cfg.dynamics_epochs,
                          lr=cfg.dynamics_lr, batch_size=cfg.dynamics_batch,
                          rng=np.random.default_rng(pretrain_ss))

    e_locs, e_feats, e_actions, e_og = expert_window_arrays(demos, env_config)
    batch_rng = np.random.default_rng(batch_ss)
    d_opt = ad.Adam(discriminator.params, lr=cfg.lr, maximize=True)
    dyn_opt = ad.Adam(dynamics.params, lr=cfg.dynamics_lr, maximize=True) \
        if cfg.option == 2 else None
    beta_opt = ad.Adam(policy.params, lr=cfg.dynamics_lr, maximize=True) \
        if cfg.option == 3 else None

    def expert_g(idx: np.ndarray, rng) -> np.ndarray:
        if cfg.option == 3:
            return _policy_beta_g(policy, e_locs[idx], e_feats[idx], rng)
        return dynamics.constraint_value(e_og[idx], rng=rng, mode="sample")

    for iteration in range(start_iter, cfg.iterations):
        it_ss = np.random.SeedSequence([cfg.seed, 1000 + iteration])
        it_rng = np.random.default_rng(it_ss)

        buffer = None
        trajectories = []
        report = {"surrogate_before": float("nan"), "surrogate_after": float("nan"),
                  "kl": 0.0, "entropy": float("nan"), "accepted": False,
                  "value_loss": float("nan")}
        pi_steps = []
        for update in range(cfg.pi_updates):
            buffer, trajectories = collect_rollouts(
                env_config, policy, dynamics, discriminator, reward_cfg, value_net,
                rng_seed=[cfg.seed, iteration, update], option=cfg.option,
                n_envs=cfg.n_envs, workers=workers)
            adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.ends,
                                   cfg.trpo.gamma, cfg.trpo.lam)
            buffer.advantages = normalize_advantages(adv)
            buffer.returns = ret
            report = trpo_step(policy, value_net, buffer, cfg.trpo)
            pi_steps.append({"kl": report["kl"],
                             "surrogate_before": report["surrogate_before"],
                             "surrogate_after": report["surrogate_after"],
                             "accepted": bool(report["accepted"])})
            if not math.isfinite(report["surrogate_before"]):
                if out_dir:
                    _save_all(out_dir, policy, discriminator, dynamics, value_net,
                              iteration, cfg)
                raise TrainingDiverged(f"surrogate non-finite at iteration {iteration}")

        d_losses = []
        for _ in range(cfg.d_updates):
            e_idx = batch_rng.integers(0, len(e_actions), size=cfg.batch_size)
            g_idx = batch_rng.integers(0, buffer.size, size=cfg.batch_size)
            expert_batch = WindowBatch(locs=e_locs[e_idx], feats=e_feats[e_idx],
                                       g=expert_g(e_idx, it_rng),
                                       actions=e_actions[e_idx])
            gen_batch = WindowBatch(locs=buffer.locs[g_idx], feats=buffer.feats[g_idx],
                                    g=buffer.g[g_idx], actions=buffer.actions[g_idx])
            d_losses.append(discriminator_update(discriminator, expert_batch,
                                                 gen_batch, cfg.lr, opt=d_opt))
        d_loss = float(np.mean(d_losses)) if d_losses else float("nan")
        if d_losses and not math.isfinite(d_loss):
            if out_dir:
                _save_all(out_dir, policy, discriminator, dynamics, value_net,
                          iteration, cfg)
            raise TrainingDiverged(f"discriminator loss non-finite at iteration {iteration}")

        dynamics_ll = None
        if cfg.option == 2:
            og, labels = stay_examples(trajectories, env_config)
            if len(labels):
                idx = batch_rng.integers(0, len(labels),
                                         size=min(cfg.dynamics_batch, len(labels)))
                dynamics_ll = dynamics_update_step(dynamics, og[idx], labels[idx], dyn_opt)
        elif cfg.option == 3:
            s_locs, s_feats, labels = stay_examples(trajectories, env_config,
                                                    want_windows=True)
            if len(labels):
                idx = batch_rng.integers(0, len(labels),
                                         size=min(cfg.dynamics_batch, len(labels)))
                policy.params.zero_grad()
                h = policy.encode(s_locs[idx], s_feats[idx])
                alpha, beta = policy.beta_params_from_encoding(h)
                lab = labels[idx]
                ll = ad.mean(ad.add(
                    ad.add(ad.mul(ad.sub(alpha, ad.Tensor(np.ones_like(lab))),
                                  ad.Tensor(np.log(lab))),
                           ad.mul(ad.sub(beta, ad.Tensor(np.ones_like(lab))),
                                  ad.Tensor(np.log1p(-lab)))),
                    ad.sub(ad.lgamma(ad.add(alpha, beta)),
                           ad.add(ad.lgamma(alpha), ad.lgamma(beta)))))
                dynamics_ll = ll.item()
                if not math.isfinite(dynamics_ll):
                    raise TrainingDiverged("joint Beta likelihood non-finite")
                ll.backward()
                beta_opt.step()

        row = {
            "iteration": iteration,
            "d_loss": d_loss,
            "mean_reward": float(buffer.rewards.mean()),
            "mean_judger_reward": float(buffer.judger_rewards.mean()),
            "mean_surrogate_reward": float(buffer.surrogate_rewards.mean()),
            "surrogate_before": report["surrogate_before"],
            "surrogate_after": report["surrogate_after"],
            "kl": report["kl"],
            "entropy": report["entropy"],
            "accepted": bool(report["accepted"]),
            "value_loss": report.get("value_loss", float("nan")),
            "dynamics_ll": dynamics_ll,
            "pi_steps": pi_steps,
        }
        log.append(row)
        if log_path:
            os.makedirs(out_dir, exist_ok=True)
            mode = "a" if (iteration > 0 or resume) else "w"
            with open(log_path, mode) as f:
                f.write(json.dumps(row) + "\n")
        if progress is not None:
            progress(row)
        if out_dir and (iteration + 1) % cfg.checkpoint_every == 0:
            _save_all(out_dir, policy, discriminator, dynamics, value_net, iteration, cfg)

    if out_dir:
        _save_all(out_dir, policy, discriminator, dynamics, value_net,
                  cfg.iterations - 1, cfg)
    return TrainResult(policy=policy, discriminator=discriminator, dynamics=dynamics,
                       value=value_net, log=log)
