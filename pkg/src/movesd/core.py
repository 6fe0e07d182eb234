"""Shared domain types, duration rescaling, and trajectory serialization.

A trajectory is a sequence of step records, each pairing the state an agent
observed with the action it took, the constraint sample in effect, and the
state that followed. Consecutive records chain: ``records[i].next_state ==
records[i+1].state``. On disk a trajectory is JSON Lines, one object per
step plus one trailing terminal-state line (action and g are null there).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

RESCALE_EPS = 1e-4


class ParseError(ValueError):
    """Malformed trajectory line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def rescale_duration(steps: float, max_steps: int) -> float:
    """Map a dwell measured in steps onto the open unit interval.

    Clamped to [eps, 1-eps] so Beta log-densities stay finite at the ends.
    """
    if max_steps <= 0:
        raise ConfigError(f"max_steps must be positive, got {max_steps}")
    if steps < 0:
        raise ValueError(f"negative duration {steps}")
    g = steps / max_steps
    return min(max(g, RESCALE_EPS), 1.0 - RESCALE_EPS)


def unscale_duration(g: float, max_steps: int) -> float:
    """Inverse of the interior (unclamped) part of ``rescale_duration``."""
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"g={g} outside [0, 1]")
    return g * max_steps


@dataclass(frozen=True)
class AgentState:
    """One agent's observation of itself and its surroundings.

    ``checkinable`` is meaningful in the park environment; ``dest_loc``,
    ``prev_loc`` and ``last_action`` in the road environment. Fields that do
    not apply are 0 and excluded from feature vectors by the per-environment
    schema.
    """
    loc_id: int
    time_in_loc: int
    start_time: int
    population: int
    checkinable: int = 0
    dest_loc: int = 0
    prev_loc: int = 0
    last_action: int = 0

    def __post_init__(self):
        if self.loc_id < 0:
            raise ValueError(f"loc_id must be non-negative, got {self.loc_id}")
        if self.time_in_loc < 0:
            raise ValueError(f"time_in_loc must be non-negative, got {self.time_in_loc}")
        if self.population < 0:
            raise ValueError(f"population must be non-negative, got {self.population}")


@dataclass(frozen=True)
class StepRecord:
    state: AgentState
    action: int
    constraint: float | None  # g in [0,1] once rescaled; None for expert data
    next_state: AgentState

    def __post_init__(self):
        if self.constraint is not None and not 0.0 <= self.constraint <= 1.0:
            raise ValueError(f"constraint {self.constraint} outside [0, 1]")


@dataclass
class Trajectory:
    agent_id: int
    records: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for i in range(len(self.records) - 1):
            if self.records[i].next_state != self.records[i + 1].state:
                raise ValueError(
                    f"trajectory {self.agent_id}: record {i} next_state does not "
                    f"chain into record {i + 1} state")

    def __len__(self):
        return len(self.records)

    def locations(self) -> list[int]:
        locs = [r.state.loc_id for r in self.records]
        if self.records:
            locs.append(self.records[-1].next_state.loc_id)
        return locs


_STATE_FIELDS = ("time_in_loc", "start_time", "population", "checkinable",
                 "dest_loc", "prev_loc", "last_action")


def _state_to_fields(s: AgentState) -> list:
    return [getattr(s, f) for f in _STATE_FIELDS]


def _state_from_fields(loc_id: int, fields: Sequence) -> AgentState:
    if len(fields) != len(_STATE_FIELDS):
        raise ValueError(f"expected {len(_STATE_FIELDS)} state fields, got {len(fields)}")
    return AgentState(loc_id=int(loc_id), **{k: int(v) for k, v in zip(_STATE_FIELDS, fields)})


def write_trajectories(path, trajectories: Iterable[Trajectory]):
    """One line per step: {agent_id, t, loc_id, action, g, features}.

    ``features`` holds the remaining raw state fields so a read round-trips
    field-for-field. The terminal state is a trailing line with null action.
    """
    with open(path, "w") as f:
        for traj in trajectories:
            for t, rec in enumerate(traj.records):
                line = {
                    "agent_id": traj.agent_id,
                    "t": t,
                    "loc_id": rec.state.loc_id,
                    "action": rec.action,
                    "g": rec.constraint,
                    "features": _state_to_fields(rec.state),
                }
                f.write(json.dumps(line) + "\n")
            if traj.records:
                last = traj.records[-1].next_state
                f.write(json.dumps({
                    "agent_id": traj.agent_id,
                    "t": len(traj.records),
                    "loc_id": last.loc_id,
                    "action": None,
                    "g": None,
                    "features": _state_to_fields(last),
                }) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    rows: dict[int, list[tuple[int, AgentState, int | None, float | None]]] = {}
    order: list[int] = []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON: {e.msg}") from e
            try:
                agent_id = int(obj["agent_id"])
                t = int(obj["t"])
                state = _state_from_fields(obj["loc_id"], obj["features"])
                action = obj["action"]
                g = obj["g"]
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(line_no, f"bad record: {e}") from e
            if agent_id not in rows:
                rows[agent_id] = []
                order.append(agent_id)
            rows[agent_id].append((t, state, action, g))

    out = []
    for agent_id in order:
        entries = sorted(rows[agent_id], key=lambda r: r[0])
        records = []
        for (t, state, action, g), (_, nxt, _, _) in zip(entries, entries[1:]):
            if action is None:
                raise ParseError(0, f"agent {agent_id}: non-terminal record t={t} "
                                    "has null action")
            records.append(StepRecord(state=state, action=int(action),
                                      constraint=g, next_state=nxt))
        out.append(Trajectory(agent_id=agent_id, records=records))
    return out
