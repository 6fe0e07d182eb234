"""Policy and discriminator networks over state windows.

Both nets share one trunk design: the location id passes through an
embedding table, the scaled features through a rectified affine block, the
two halves concatenate per timestep, and an LSTM over the last ``WINDOW``
states produces a compact recurrent summary. The policy head concatenates
that summary with the constraint sample g and emits action probabilities;
the discriminator head additionally sees the action one-hot and emits a
probability that the tuple came from the demonstrations.

Batches of windows are plain numpy arrays: ``locs`` (B, L) int64 and
``feats`` (B, L, k) float64; windows shorter than L are left-padded by
repeating their first state upstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import AgentState
from .dynamics import AB_FLOOR
from .envsim import encode_features

WINDOW = 10
EMBED_DIM = 50
FEAT_DIM = 50
RECURRENT_UNITS = 10
HEAD_WIDTH = 50


@dataclass
class WindowBatch:
    locs: np.ndarray    # (B, L) int64
    feats: np.ndarray   # (B, L, k) float64
    g: np.ndarray       # (B,)
    actions: np.ndarray | None = None  # (B,) int64

    def __post_init__(self):
        if self.locs.ndim != 2 or self.feats.ndim != 3:
            raise ad.ShapeError(f"window batch shapes {self.locs.shape}, {self.feats.shape}")
        if self.locs.shape != self.feats.shape[:2]:
            raise ad.ShapeError("locs and feats disagree on (batch, window)")

    @property
    def size(self) -> int:
        return self.locs.shape[0]


def build_window(states: list[AgentState], config) -> tuple[np.ndarray, np.ndarray]:
    """Window arrays for one agent from its recent states (oldest first).

    Shorter histories are left-padded by repeating the first state.
    """
    if not states:
        raise ValueError("window needs at least one state")
    recent = states[-WINDOW:]
    pad = WINDOW - len(recent)
    padded = [recent[0]] * pad + recent
    locs = np.array([s.loc_id for s in padded], dtype=np.int64)
    feats = np.stack([encode_features(s, config) for s in padded])
    return locs, feats


def _init_trunk(p: ad.ParamStore, vocab: int, k: int, rng: np.random.Generator):
    p.init_uniform("W_e", (vocab, EMBED_DIM), vocab, rng)
    p.init_uniform("W_o", (k, FEAT_DIM), k, rng)
    p.init_uniform("b_o", (FEAT_DIM,), k, rng)
    m = EMBED_DIM + FEAT_DIM
    for name, shape in ad.lstm_param_shapes(m, RECURRENT_UNITS).items():
        fan = shape[0] if len(shape) == 2 else m + RECURRENT_UNITS
        p.init_uniform(f"lstm_{name}", shape, fan, rng)


def _init_head(p: ad.ParamStore, prefix: str, in_dim: int, out_dim: int,
               rng: np.random.Generator):
    p.init_uniform(f"{prefix}_W1", (in_dim, HEAD_WIDTH), in_dim, rng)
    p.init_uniform(f"{prefix}_b1", (HEAD_WIDTH,), in_dim, rng)
    p.init_uniform(f"{prefix}_W2", (HEAD_WIDTH, HEAD_WIDTH), HEAD_WIDTH, rng)
    p.init_uniform(f"{prefix}_b2", (HEAD_WIDTH,), HEAD_WIDTH, rng)
    p.init_uniform(f"{prefix}_W3", (HEAD_WIDTH, out_dim), HEAD_WIDTH, rng)
    p.init_uniform(f"{prefix}_b3", (out_dim,), HEAD_WIDTH, rng)


def _head_forward(p: ad.ParamStore, prefix: str, x: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}_W1"]), p[f"{prefix}_b1"]))
    h = ad.relu(ad.add(ad.matmul(h, p[f"{prefix}_W2"]), p[f"{prefix}_b2"]))
    return ad.add(ad.matmul(h, p[f"{prefix}_W3"]), p[f"{prefix}_b3"])


def _encode_trunk(p: ad.ParamStore, locs: np.ndarray, feats: np.ndarray) -> ad.Tensor:
    """Run the shared trunk over a window batch; returns h_R (B, units)."""
    b, width = locs.shape
    h = ad.Tensor(np.zeros((b, RECURRENT_UNITS)))
    c = ad.Tensor(np.zeros((b, RECURRENT_UNITS)))
    lstm = {name: p[f"lstm_{name}"] for name in ad.lstm_param_shapes(1, 1)}
    for t in range(width):
        emb = ad.embedding_lookup(p["W_e"], locs[:, t])
        obs = ad.relu(ad.add(ad.matmul(ad.Tensor(feats[:, t]), p["W_o"]), p["b_o"]))
        x = ad.concat([emb, obs], axis=1)
        h, c = ad.recurrent_cell(x, h, c, lstm)
    return h


class PolicyNet:
    """Window encoder plus action head; optional Beta head for joint mode."""

    def __init__(self, vocab: int, k: int, n_actions: int,
                 rng: np.random.Generator, with_beta_head: bool = False):
        self.vocab = vocab
        self.k = k
        self.n_actions = n_actions
        self.with_beta_head = with_beta_head
        p = ad.ParamStore()
        _init_trunk(p, vocab, k, rng)
        _init_head(p, "act", RECURRENT_UNITS + 1, n_actions, rng)
        if with_beta_head:
            _init_head(p, "beta", RECURRENT_UNITS, 2, rng)
        self.params = p

    def encode(self, locs: np.ndarray, feats: np.ndarray) -> ad.Tensor:
        return _encode_trunk(self.params, locs, feats)

    def action_dist_from_encoding(self, h: ad.Tensor, g: np.ndarray) -> ad.Tensor:
        g_col = ad.Tensor(np.asarray(g, dtype=np.float64).reshape(-1, 1))
        logits = _head_forward(self.params, "act", ad.concat([h, g_col], axis=1))
        return ad.softmax(logits)

    def action_dist(self, batch: WindowBatch) -> ad.Tensor:
        return self.action_dist_from_encoding(self.encode(batch.locs, batch.feats), batch.g)

    def dist(self, batch: WindowBatch) -> ad.Tensor:
        # trust-region interface: probabilities (B, n_actions)
        return self.action_dist(batch)

    def log_prob(self, batch: WindowBatch) -> ad.Tensor:
        if batch.actions is None:
            raise ValueError("batch has no actions")
        probs = self.action_dist(batch)
        onehot = np.zeros((batch.size, self.n_actions))
        onehot[np.arange(batch.size), batch.actions] = 1.0
        return ad.log(ad.select_columns(probs, onehot))

    def beta_params_from_encoding(self, h: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        if not self.with_beta_head:
            raise ValueError("policy was built without a Beta head")
        out = ad.softplus(_head_forward(self.params, "beta", h))
        b = out.shape[0]
        floor = ad.Tensor(np.full(b, AB_FLOOR))
        alpha = ad.add(ad.select_columns(out, np.tile([1.0, 0.0], (b, 1))), floor)
        beta = ad.add(ad.select_columns(out, np.tile([0.0, 1.0], (b, 1))), floor)
        return alpha, beta

    def act(self, locs: np.ndarray, feats: np.ndarray, g: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Sample actions for a batch; returns (actions, logp, probs, h_R)."""
        with ad.no_grad():
            h = self.encode(locs, feats)
            probs = self.action_dist_from_encoding(h, g).data
        b = probs.shape[0]
        u = rng.random((b, 1))
        actions = (probs.cumsum(axis=1) < u).sum(axis=1)
        actions = np.minimum(actions, self.n_actions - 1).astype(np.int64)
        logp = np.log(probs[np.arange(b), actions])
        return actions, logp, probs, h.data

    def save(self, path):
        ad.save_checkpoint(path, self.params, kind="policy", meta={
            "vocab": self.vocab, "k": self.k, "n_actions": self.n_actions,
            "with_beta_head": self.with_beta_head})

    @classmethod
    def load(cls, path) -> "PolicyNet":
        state, meta, kind = ad.load_checkpoint(path)
        if kind != "policy":
            raise ValueError(f"checkpoint {path} holds a {kind!r} net, expected policy")
        net = cls(meta["vocab"], meta["k"], meta["n_actions"],
                  np.random.default_rng(0), with_beta_head=meta["with_beta_head"])
        net.params.load_state_dict(state)
        return net


class DiscriminatorNet:
    """Same trunk; head scores (window, action, g) tuples through a sigmoid."""

    def __init__(self, vocab: int, k: int, n_actions: int, rng: np.random.Generator):
        self.vocab = vocab
        self.k = k
        self.n_actions = n_actions
        p = ad.ParamStore()
        _init_trunk(p, vocab, k, rng)
        _init_head(p, "disc", RECURRENT_UNITS + n_actions + 1, 1, rng)
        self.params = p

    def score_graph(self, batch: WindowBatch) -> ad.Tensor:
        if batch.actions is None:
            raise ValueError("discriminator batch has no actions")
        h = _encode_trunk(self.params, batch.locs, batch.feats)
        onehot = np.zeros((batch.size, self.n_actions))
        onehot[np.arange(batch.size), batch.actions] = 1.0
        g_col = np.asarray(batch.g, dtype=np.float64).reshape(-1, 1)
        x = ad.concat([h, ad.Tensor(onehot), ad.Tensor(g_col)], axis=1)
        logit = _head_forward(self.params, "disc", x)
        return ad.select_columns(ad.sigmoid(logit), np.ones((batch.size, 1)))

    def score(self, batch: WindowBatch) -> np.ndarray:
        with ad.no_grad():
            return self.score_graph(batch).data

    def save(self, path):
        ad.save_checkpoint(path, self.params, kind="discriminator", meta={
            "vocab": self.vocab, "k": self.k, "n_actions": self.n_actions})

    @classmethod
    def load(cls, path) -> "DiscriminatorNet":
        state, meta, kind = ad.load_checkpoint(path)
        if kind != "discriminator":
            raise ValueError(f"checkpoint {path} holds a {kind!r} net, expected discriminator")
        net = cls(meta["vocab"], meta["k"], meta["n_actions"], np.random.default_rng(0))
        net.params.load_state_dict(state)
        return net


CLAMP = 1e-6


def discriminator_objective(disc: DiscriminatorNet, expert: WindowBatch,
                            generated: WindowBatch) -> ad.Tensor:
    """Mean log D on expert tuples plus mean log(1-D) on generated ones."""
    d_e = ad.clip(disc.score_graph(expert), CLAMP, 1.0 - CLAMP)
    d_g = ad.clip(disc.score_graph(generated), CLAMP, 1.0 - CLAMP)
    term_e = ad.mean(ad.log(d_e))
    one_minus = ad.sub(ad.Tensor(np.ones(generated.size)), d_g)
    term_g = ad.mean(ad.log(one_minus))
    return ad.add(term_e, term_g)


def discriminator_update(disc: DiscriminatorNet, expert: WindowBatch,
                         generated: WindowBatch, lr: float,
                         opt: ad.Adam | None = None) -> float:
    """One ascent step on the discrimination objective; returns its pre-step value."""
    disc.params.zero_grad()
    obj = discriminator_objective(disc, expert, generated)
    value = obj.item()
    obj.backward()
    if opt is not None:
        opt.step()
    else:
        disc.params.set_flat(disc.params.get_flat() + lr * disc.params.grad_flat())
    return value
