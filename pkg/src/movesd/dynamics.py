"""Stochastic dwell-constraint model: a small MLP emitting Beta parameters.

The model reads 3 scaled context features (location, episode time, crowd
size at the location) and outputs (alpha, beta) of a Beta distribution over
the rescaled dwell duration. Training maximizes the mean Beta log-likelihood
of observed stays by gradient ascent. Positivity of the outputs comes from
softplus plus a small floor rather than a hard rectifier, so gradients never
die at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import rescale_duration
from .envsim import dynamics_features

AB_FLOOR = 1e-4
DYNAMICS_INPUT_DIM = 3
SAMPLE_CLIP = 1e-6


class DomainError(ValueError):
    """Argument outside the mathematical domain of the density."""


def beta_log_pdf(g, alpha, beta):
    """Log-density of Beta(alpha, beta) at g, elementwise on arrays."""
    g = np.asarray(g, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise DomainError("g must lie strictly inside (0, 1)")
    if np.any(alpha <= 0.0) or np.any(beta <= 0.0):
        raise DomainError("alpha and beta must be positive")
    out = ((alpha - 1.0) * np.log(g) + (beta - 1.0) * np.log1p(-g)
           + ad.lgamma_values(alpha + beta) - ad.lgamma_values(alpha)
           - ad.lgamma_values(beta))
    return float(out) if out.shape == () else out


def beta_ll_grad(g, alpha, beta):
    """Closed-form (d/dalpha, d/dbeta) of the Beta log-likelihood at g."""
    g = np.asarray(g, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise DomainError("g must lie strictly inside (0, 1)")
    if np.any(alpha <= 0.0) or np.any(beta <= 0.0):
        raise DomainError("alpha and beta must be positive")
    common = ad.digamma_values(alpha + beta)
    da = np.log(g) + common - ad.digamma_values(alpha)
    db = np.log1p(-g) + common - ad.digamma_values(beta)
    if da.shape == ():
        return float(da), float(db)
    return da, db


def sample_beta(alpha: float, beta: float, rng: np.random.Generator) -> float:
    """Beta variate from two Gamma draws, normalized; clipped inside (0,1)."""
    if alpha <= 0.0 or beta <= 0.0:
        raise DomainError("alpha and beta must be positive")
    for _ in range(100):
        x = rng.gamma(alpha)
        y = rng.gamma(beta)
        if x + y > 0.0:
            return float(np.clip(x / (x + y), SAMPLE_CLIP, 1.0 - SAMPLE_CLIP))
    # both draws underflowed to zero repeatedly; fall back to the mean
    return float(np.clip(alpha / (alpha + beta), SAMPLE_CLIP, 1.0 - SAMPLE_CLIP))


class DynamicsModel:
    """MLP 3 -> 50 -> 50 -> 2 with softplus(+floor) outputs (alpha, beta).

    ``mode='deterministic'`` is the scalar ablation: same trunk, one output
    unit, squared-error objective, and the prediction itself serves as g.
    """

    HIDDEN = 50

    def __init__(self, rng: np.random.Generator, mode: str = "beta"):
        if mode not in ("beta", "deterministic"):
            raise ValueError(f"unknown dynamics mode {mode!r}")
        self.mode = mode
        out_dim = 2 if mode == "beta" else 1
        p = ad.ParamStore()
        h = self.HIDDEN
        p.init_uniform("W1", (DYNAMICS_INPUT_DIM, h), DYNAMICS_INPUT_DIM, rng)
        p.init_uniform("b1", (h,), DYNAMICS_INPUT_DIM, rng)
        p.init_uniform("W2", (h, h), h, rng)
        p.init_uniform("b2", (h,), h, rng)
        p.init_uniform("W3", (h, out_dim), h, rng)
        p.init_uniform("b3", (out_dim,), h, rng)
        self.params = p
        self._sel_a = np.array([1.0, 0.0])
        self._sel_b = np.array([0.0, 1.0])

    def _trunk(self, obs: np.ndarray) -> ad.Tensor:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != DYNAMICS_INPUT_DIM:
            raise ad.ShapeError(f"dynamics input must have {DYNAMICS_INPUT_DIM} features, "
                                f"got {obs.shape[1]}")
        p = self.params
        x = ad.Tensor(obs)
        h = ad.relu(ad.add(ad.matmul(x, p["W1"]), p["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, p["W2"]), p["b2"]))
        raw = ad.add(ad.matmul(h, p["W3"]), p["b3"])
        return ad.softplus(raw)

    def forward(self, obs: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        """obs (B,3) -> (alpha, beta) tensors of shape (B,)."""
        if self.mode != "beta":
            raise ValueError("deterministic model has no (alpha, beta) head")
        out = self._trunk(obs)
        b = out.data.shape[0]
        alpha = ad.add(ad.select_columns(out, np.tile(self._sel_a, (b, 1))),
                       ad.Tensor(np.full(b, AB_FLOOR)))
        beta = ad.add(ad.select_columns(out, np.tile(self._sel_b, (b, 1))),
                      ad.Tensor(np.full(b, AB_FLOOR)))
        return alpha, beta

    def predict_scalar(self, obs: np.ndarray) -> ad.Tensor:
        """Deterministic-mode dwell prediction, shape (B,)."""
        if self.mode != "deterministic":
            raise ValueError("scalar prediction only exists in deterministic mode")
        out = self._trunk(obs)
        return ad.add(ad.reduce_sum(out, axis=1),
                      ad.Tensor(np.full(out.data.shape[0], AB_FLOOR)))

    def alpha_beta(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            alpha, beta = self.forward(obs)
        return alpha.data, beta.data

    def log_likelihood(self, obs: np.ndarray, g: np.ndarray) -> ad.Tensor:
        """Mean Beta log-likelihood of labels g (B,), as a graph node."""
        g = np.asarray(g, dtype=np.float64)
        if np.any(g <= 0.0) or np.any(g >= 1.0):
            raise DomainError("labels must lie strictly inside (0, 1)")
        alpha, beta = self.forward(obs)
        log_g = ad.Tensor(np.log(g))
        log_1mg = ad.Tensor(np.log1p(-g))
        one = ad.Tensor(np.ones_like(g))
        ll = ad.add(
            ad.add(ad.mul(ad.sub(alpha, one), log_g),
                   ad.mul(ad.sub(beta, one), log_1mg)),
            ad.sub(ad.lgamma(ad.add(alpha, beta)),
                   ad.add(ad.lgamma(alpha), ad.lgamma(beta))))
        return ad.mean(ll)

    def training_objective(self, obs: np.ndarray, g: np.ndarray) -> ad.Tensor:
        """Graph node to maximize: mean LL, or negated MSE in scalar mode."""
        if self.mode == "beta":
            return self.log_likelihood(obs, g)
        g = np.asarray(g, dtype=np.float64)
        err = ad.sub(self.predict_scalar(obs), ad.Tensor(g))
        return ad.neg(ad.mean(ad.mul(err, err)))

    def constraint_value(self, obs: np.ndarray, rng: np.random.Generator | None = None,
                         mode: str = "sample") -> np.ndarray:
        """Constraint g per row: Beta sample, or the mean for ablations.

        A deterministic-mode model returns its clamped point prediction
        regardless of ``mode``.
        """
        if self.mode == "deterministic":
            with ad.no_grad():
                pred = self.predict_scalar(obs).data
            return np.clip(pred, SAMPLE_CLIP, 1.0 - SAMPLE_CLIP)
        alpha, beta = self.alpha_beta(obs)
        if mode == "mean":
            return np.clip(alpha / (alpha + beta), SAMPLE_CLIP, 1.0 - SAMPLE_CLIP)
        if mode != "sample":
            raise ValueError(f"unknown constraint mode {mode!r}")
        if rng is None:
            raise ValueError("sample mode requires an rng")
        return np.array([sample_beta(a, b, rng) for a, b in zip(alpha, beta)])


def build_dynamics_dataset(trajectories, config) -> tuple[np.ndarray, np.ndarray]:
    """Stay examples from trajectories: one row per maximal same-location run.

    Features are taken at the entry record of the run; the label is the run
    length in records, rescaled by the episode cap. The final run of each
    trajectory (truncated by the episode end) still contributes an example.
    """
    obs_rows = []
    labels = []
    for traj in trajectories:
        if not traj.records:
            continue
        run_start = 0
        locs = [r.state.loc_id for r in traj.records]
        for t in range(1, len(locs) + 1):
            if t == len(locs) or locs[t] != locs[run_start]:
                entry = traj.records[run_start].state
                obs_rows.append(dynamics_features(config, entry.loc_id, run_start,
                                                  entry.population))
                labels.append(rescale_duration(t - run_start, config.max_steps))
                run_start = t
    if not obs_rows:
        return np.zeros((0, DYNAMICS_INPUT_DIM)), np.zeros(0)
    return np.stack(obs_rows), np.array(labels)


@dataclass
class PretrainResult:
    epoch_ll: list[float]

    @property
    def final_ll(self) -> float:
        return self.epoch_ll[-1]


def pretrain_dynamics(model: DynamicsModel, obs: np.ndarray, labels: np.ndarray,
                      epochs: int, lr: float = 3e-4, batch_size: int | None = 128,
                      rng: np.random.Generator | None = None,
                      method: str = "adam") -> PretrainResult:
    """Gradient ascent on the mean stay log-likelihood.

    ``batch_size=None`` runs full-batch ascent (plain steps when
    ``method='sgd'``), which makes the likelihood curve monotone.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("empty dynamics dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    opt = ad.Adam(model.params, lr=lr, maximize=True) if method == "adam" else None
    if method not in ("adam", "sgd"):
        raise ValueError(f"unknown method {method!r}")

    epoch_ll = []
    for _ in range(epochs):
        if batch_size is None or batch_size >= n:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        for idx in batches:
            model.params.zero_grad()
            ll = model.training_objective(obs[idx], labels[idx])
            if not math.isfinite(ll.item()):
                raise FloatingPointError("dynamics objective became non-finite")
            ll.backward()
            if opt is not None:
                opt.step()
            else:
                flat = model.params.get_flat()
                model.params.set_flat(flat + lr * model.params.grad_flat())
        with ad.no_grad():
            epoch_ll.append(model.training_objective(obs, labels).item())
    return PretrainResult(epoch_ll=epoch_ll)


def dynamics_update_step(model: DynamicsModel, obs: np.ndarray, labels: np.ndarray,
                         opt: ad.Adam) -> float:
    """One ascent step on a batch of stays; returns the pre-step objective."""
    model.params.zero_grad()
    ll = model.training_objective(obs, labels)
    value = ll.item()
    if not math.isfinite(value):
        raise FloatingPointError("dynamics objective became non-finite")
    ll.backward()
    opt.step()
    return value
