"""Per-step rewards: constraint judger, discriminator surrogate, and blend.

The judger pays only for stay-type actions, comparing the sampled constraint
g against the dwell the agent actually reached in the following state. Two
published forms of the rule disagree on the comparison's direction; both are
implemented and selectable, ``as_written`` being the default:

* ``as_written``: zero when g exceeds the realized dwell, else |g - dwell|/g
* ``prose``: zero when the realized dwell exceeds g, else (g - dwell)/g

The discriminator surrogate is -log(1 - D), with D clamped away from {0, 1}.
The blended reward is (1 - eta) * judger + eta * surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import AgentState, rescale_duration

JUDGER_MODES = ("as_written", "prose")
D_CLAMP = 1e-6


@dataclass(frozen=True)
class RewardConfig:
    eta: float
    max_steps: int
    stay_actions: tuple[int, ...]
    judger_mode: str = "as_written"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta {self.eta} outside [0, 1]")
        if self.judger_mode not in JUDGER_MODES:
            raise ValueError(f"judger_mode must be one of {JUDGER_MODES}, "
                             f"got {self.judger_mode!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def gamma_extract(state: AgentState, max_steps: int) -> float:
    """Realized dwell of a state on the same [eps, 1-eps] scale as g."""
    return rescale_duration(state.time_in_loc, max_steps)


def judger_reward(state: AgentState, action: int, g: float,
                  next_state: AgentState, config: RewardConfig) -> float:
    if not 0.0 < g < 1.0:
        raise ValueError(f"constraint g={g} outside (0, 1)")
    if action not in config.stay_actions:
        return 0.0
    realized = gamma_extract(next_state, config.max_steps)
    if config.judger_mode == "as_written":
        if g > realized:
            return 0.0
        return abs(g - realized) / g
    if realized > g:
        return 0.0
    return (g - realized) / g


def surrogate_reward(d_score: float) -> float:
    if not 0.0 < d_score < 1.0:
        raise ValueError(f"discriminator score {d_score} outside (0, 1)")
    d = min(max(d_score, D_CLAMP), 1.0 - D_CLAMP)
    return -math.log(1.0 - d)


def combined_reward(r_judger: float, r_surrogate: float, eta: float) -> float:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta {eta} outside [0, 1]")
    return (1.0 - eta) * r_judger + eta * r_surrogate
