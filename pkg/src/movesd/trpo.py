"""Trust-region policy steps with generalized advantage estimation.

The step maximizes the importance-ratio surrogate (plus a small entropy
bonus) subject to a mean-KL trust region over the batch's action
distributions. The natural-gradient direction comes from conjugate gradient
on damped Fisher-vector products; those are computed as central finite
differences of the KL gradient, which needs only first-order backward
passes. A backtracking line search accepts the first candidate that both
respects the KL cap and does not decrease the surrogate. A clipped-ratio
ascent is available as a fallback optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agentnets import WindowBatch

FVP_EPS = 1e-5


@dataclass
class TrpoConfig:
    gamma: float = 0.8
    lam: float = 0.98
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtracks: int = 10
    entropy_coef: float = 1e-3
    value_lr: float = 1e-3
    value_epochs: int = 25
    optimizer: str = "trpo"  # or "clipped"
    clip_ratio: float = 0.2
    clipped_lr: float = 3e-4
    clipped_epochs: int = 10


@dataclass
class RolloutBuffer:
    """Flat per-step arrays; ``ends[i]`` marks the last step of an episode
    segment so advantage scans never cross trajectory boundaries."""
    locs: np.ndarray
    feats: np.ndarray
    g: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    probs_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    ends: np.ndarray
    h_r: np.ndarray
    judger_rewards: np.ndarray = field(default=None)
    surrogate_rewards: np.ndarray = field(default=None)
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return len(self.actions)

    def window_batch(self) -> WindowBatch:
        return WindowBatch(locs=self.locs, feats=self.feats, g=self.g,
                           actions=self.actions)


def compute_gae(rewards: np.ndarray, values: np.ndarray, ends: np.ndarray,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-step advantages and returns; terminal states bootstrap zero."""
    n = len(rewards)
    if not (len(values) == len(ends) == n):
        raise ValueError("rewards, values and ends must have equal length")
    adv = np.zeros(n)
    next_value = 0.0
    next_adv = 0.0
    for i in range(n - 1, -1, -1):
        if ends[i]:
            next_value = 0.0
            next_adv = 0.0
        delta = rewards[i] + gamma * next_value - values[i]
        adv[i] = delta + gamma * lam * next_adv
        next_value = values[i]
        next_adv = adv[i]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def _action_onehot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    onehot = np.zeros((len(actions), n_actions))
    onehot[np.arange(len(actions)), actions] = 1.0
    return onehot


def _kl_value(p_old: np.ndarray, probs_new: ad.Tensor) -> ad.Tensor:
    """Mean KL(old || new) with the old distribution held constant."""
    safe_old = np.clip(p_old, 1e-12, 1.0)
    log_new = ad.log(ad.clip(probs_new, 1e-12, 1.0))
    cross = ad.select_columns(log_new, safe_old)  # sum_a p_old * log p_new
    const = float((safe_old * np.log(safe_old)).sum(axis=1).mean())
    return ad.add(ad.scale(ad.mean(cross), -1.0), ad.Tensor(const))


def mean_kl(policy_old, policy_new, buffer: RolloutBuffer) -> float:
    """Mean KL between two policies' action distributions over the buffer."""
    batch = buffer.window_batch()
    with ad.no_grad():
        p_old = policy_old.dist(batch).data
        p_new = policy_new.dist(batch)
    return _kl_value(p_old, p_new).item()


def conjugate_gradient(avp, b: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = r @ r
    for _ in range(iters):
        if rs < tol:
            break
        ap = avp(p)
        if not np.all(np.isfinite(ap)):
            raise FloatingPointError("non-finite curvature in conjugate gradient")
        curv = p @ ap
        if curv <= 0.0:
            break  # damped FD curvature lost positive definiteness; stop early
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


class ValueNet:
    """Baseline MLP on (recurrent summary, g): in_dim -> 50 -> 50 -> 1."""

    HIDDEN = 50

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        p = ad.ParamStore()
        p.init_uniform("W1", (in_dim, self.HIDDEN), in_dim, rng)
        p.init_uniform("b1", (self.HIDDEN,), in_dim, rng)
        p.init_uniform("W2", (self.HIDDEN, self.HIDDEN), self.HIDDEN, rng)
        p.init_uniform("b2", (self.HIDDEN,), self.HIDDEN, rng)
        p.init_uniform("W3", (self.HIDDEN, 1), self.HIDDEN, rng)
        p.init_uniform("b3", (1,), self.HIDDEN, rng)
        self.params = p
        self._opt = ad.Adam(p, lr=1e-3)

    def forward(self, x: np.ndarray) -> ad.Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(ad.Tensor(np.atleast_2d(x)), p["W1"]), p["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, p["W2"]), p["b2"]))
        out = ad.add(ad.matmul(h, p["W3"]), p["b3"])
        return ad.select_columns(out, np.ones((out.shape[0], 1)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x).data

    def fit(self, x: np.ndarray, targets: np.ndarray, epochs: int, lr: float) -> float:
        self._opt.lr = lr
        loss_val = 0.0
        t = ad.Tensor(np.asarray(targets, dtype=np.float64))
        for _ in range(epochs):
            self.params.zero_grad()
            diff = ad.sub(self.forward(x), t)
            loss = ad.mean(ad.mul(diff, diff))
            loss_val = loss.item()
            loss.backward()
            self._opt.step()
        return loss_val

    def save(self, path):
        ad.save_checkpoint(path, self.params, kind="value", meta={"in_dim": self.in_dim})

    @classmethod
    def load(cls, path) -> "ValueNet":
        state, meta, kind = ad.load_checkpoint(path)
        if kind != "value":
            raise ValueError(f"checkpoint {path} holds a {kind!r} net, expected value")
        net = cls(meta["in_dim"], np.random.default_rng(0))
        net.params.load_state_dict(state)
        return net


def value_inputs(buffer: RolloutBuffer) -> np.ndarray:
    return np.concatenate([buffer.h_r, buffer.g.reshape(-1, 1)], axis=1)


def _surrogate(policy, batch: WindowBatch, logp_old: np.ndarray,
               advantages: np.ndarray, entropy_coef: float) -> tuple[ad.Tensor, ad.Tensor]:
    """Importance-ratio objective with entropy bonus; returns (obj, entropy)."""
    probs = policy.dist(batch)
    onehot = _action_onehot(batch.actions, probs.shape[1])
    logp = ad.log(ad.clip(ad.select_columns(probs, onehot), 1e-300, 1.0))
    ratio = ad.exp(ad.sub(logp, ad.Tensor(logp_old)))
    gain = ad.mean(ad.mul(ratio, ad.Tensor(advantages)))
    logp_all = ad.log(ad.clip(probs, 1e-12, 1.0))
    entropy = ad.scale(ad.mean(ad.reduce_sum(ad.mul(probs, logp_all), axis=1)), -1.0)
    return ad.add(gain, ad.scale(entropy, entropy_coef)), entropy


def _flat_kl_grad(policy, batch: WindowBatch, p_old: np.ndarray) -> np.ndarray:
    policy.params.zero_grad()
    kl = _kl_value(p_old, policy.dist(batch))
    kl.backward()
    return policy.params.grad_flat()


def trpo_step(policy, value_net: ValueNet | None, buffer: RolloutBuffer,
              config: TrpoConfig) -> dict:
    """One trust-region (or clipped-ratio) policy update plus a value fit.

    Expects ``buffer.advantages`` already normalized by the caller.
    """
    if buffer.advantages is None:
        raise ValueError("buffer advantages missing; run compute_gae first")
    if config.optimizer == "clipped":
        report = _clipped_step(policy, buffer, config)
    else:
        report = _natural_step(policy, buffer, config)
    if value_net is not None:
        report["value_loss"] = value_net.fit(value_inputs(buffer), buffer.returns,
                                             config.value_epochs, config.value_lr)
    return report


def _natural_step(policy, buffer: RolloutBuffer, config: TrpoConfig) -> dict:
    batch = buffer.window_batch()
    params = policy.params
    theta_old = params.get_flat()
    p_old = buffer.probs_old

    params.zero_grad()
    obj, entropy = _surrogate(policy, batch, buffer.logp_old, buffer.advantages,
                              config.entropy_coef)
    surrogate_before = obj.item()
    entropy_before = entropy.item()
    if not math.isfinite(surrogate_before):
        raise FloatingPointError("non-finite surrogate objective")
    obj.backward()
    grad = params.grad_flat()
    report = {"surrogate_before": surrogate_before, "surrogate_after": surrogate_before,
              "kl": 0.0, "entropy": entropy_before, "accepted": False,
              "grad_norm": float(np.linalg.norm(grad))}
    if report["grad_norm"] < 1e-12:
        return report

    def fvp(v: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return config.cg_damping * v
        u = v / norm
        params.set_flat(theta_old + FVP_EPS * u)
        g_plus = _flat_kl_grad(policy, batch, p_old)
        params.set_flat(theta_old - FVP_EPS * u)
        g_minus = _flat_kl_grad(policy, batch, p_old)
        params.set_flat(theta_old)
        return norm * (g_plus - g_minus) / (2.0 * FVP_EPS) + config.cg_damping * v

    direction = conjugate_gradient(fvp, grad, iters=config.cg_iters)
    shs = float(direction @ fvp(direction))
    if shs <= 0.0 or not math.isfinite(shs):
        params.set_flat(theta_old)
        return report
    full_step = math.sqrt(2.0 * config.max_kl / shs) * direction

    for j in range(config.backtracks):
        params.set_flat(theta_old + (0.5 ** j) * full_step)
        with ad.no_grad():
            obj_new, _ = _surrogate(policy, batch, buffer.logp_old, buffer.advantages,
                                    config.entropy_coef)
            kl_new = _kl_value(p_old, policy.dist(batch)).item()
        surrogate_after = obj_new.item()
        if (math.isfinite(surrogate_after) and kl_new <= config.max_kl
                and surrogate_after >= surrogate_before):
            report.update(surrogate_after=surrogate_after, kl=kl_new, accepted=True)
            return report
    params.set_flat(theta_old)
    return report


def _clipped_step(policy, buffer: RolloutBuffer, config: TrpoConfig) -> dict:
    batch = buffer.window_batch()
    p_old = buffer.probs_old
    adv = buffer.advantages
    lo, hi = 1.0 - config.clip_ratio, 1.0 + config.clip_ratio
    opt = ad.Adam(policy.params, lr=config.clipped_lr, maximize=True)

    def objective() -> tuple[ad.Tensor, ad.Tensor]:
        probs = policy.dist(batch)
        onehot = _action_onehot(batch.actions, probs.shape[1])
        logp = ad.log(ad.clip(ad.select_columns(probs, onehot), 1e-300, 1.0))
        ratio = ad.exp(ad.sub(logp, ad.Tensor(buffer.logp_old)))
        clipped = ad.clip(ratio, lo, hi)
        # elementwise min(a, b) written as a - relu(a - b)
        per_step = ad.mul(ratio, ad.Tensor(adv))
        per_step_clipped = ad.mul(clipped, ad.Tensor(adv))
        stacked_min = ad.scale(ad.relu(ad.sub(per_step, per_step_clipped)), -1.0)
        gain = ad.mean(ad.add(per_step, stacked_min))
        logp_all = ad.log(ad.clip(probs, 1e-12, 1.0))
        entropy = ad.scale(ad.mean(ad.reduce_sum(ad.mul(probs, logp_all), axis=1)), -1.0)
        return ad.add(gain, ad.scale(entropy, config.entropy_coef)), entropy

    first, entropy0 = objective()
    surrogate_before = first.item()
    for _ in range(config.clipped_epochs):
        policy.params.zero_grad()
        obj, _ = objective()
        if not math.isfinite(obj.item()):
            raise FloatingPointError("non-finite clipped objective")
        obj.backward()
        opt.step()
    with ad.no_grad():
        obj_after, _ = objective()
        kl_after = _kl_value(p_old, policy.dist(batch)).item()
    return {"surrogate_before": surrogate_before, "surrogate_after": obj_after.item(),
            "kl": kl_after, "entropy": entropy0.item(), "accepted": True,
            "grad_norm": float("nan")}
