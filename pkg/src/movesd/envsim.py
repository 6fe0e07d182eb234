"""Synthetic mobility environments with dwell constraints, plus scripted experts.

Two environments share one stepping contract:

* grid park: a ``width x height`` grid of square cells. Agents move to the
  8 neighbours, stay, or check in at facility cells. A facility assigns a
  queue wait at check-in (``ceil(queue_len_incl_self / service_rate)`` extra
  dwell); plain cells require ``cell_transit_steps`` dwell before a move can
  succeed. Moves that would leave the grid keep the agent in place.
* road network: directed road segments. Actions 0..3 select the successor
  road from the per-road adjacency, action 4 stays. Entering a road assigns
  a travel-time dwell of ``base_travel_time + ceil(congestion_factor *
  other_occupants)``.

Stepping is functional: ``env_step(state, actions)`` returns a fresh state.
A move action relocates the agent only once its dwell has reached the true
constraint assigned at entry; otherwise the agent remains and its dwell
counter increments. Everything downstream of the config seed is
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .core import AgentState, ConfigError, StepRecord, Trajectory

GRID_N_ACTIONS = 11
ROAD_N_ACTIONS = 5
GRID_STAY = 8
GRID_CHECKIN = 9
GRID_RESERVED = 10  # unused slot; behaves as stay
ROAD_STAY = 4

# action index -> (dx, dy), clockwise from north
GRID_MOVES = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))

GRID_STAY_ACTIONS = (GRID_STAY, GRID_CHECKIN)
ROAD_STAY_ACTIONS = (ROAD_STAY,)


@dataclass(frozen=True)
class FacilitySpec:
    loc: int
    service_rate: float
    checkinable: bool = True


@dataclass(frozen=True)
class GridParkConfig:
    width: int
    height: int
    facilities: tuple[FacilitySpec, ...]
    n_agents: int
    max_steps: int
    seed: int
    cell_transit_steps: int = 1
    cell_size: float = 5.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"grid {self.width}x{self.height} is empty")
        if self.n_agents < 0 or self.max_steps < 1:
            raise ConfigError("n_agents must be >= 0 and max_steps >= 1")
        if self.cell_transit_steps < 1:
            raise ConfigError("cell_transit_steps must be >= 1")
        for fac in self.facilities:
            if not 0 <= fac.loc < self.n_locs:
                raise ConfigError(f"facility loc {fac.loc} outside grid of {self.n_locs}")
            if fac.service_rate <= 0:
                raise ConfigError(f"facility {fac.loc} service_rate must be positive")

    @property
    def n_locs(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return GRID_N_ACTIONS

    @property
    def kind(self) -> str:
        return "gridpark"

    @property
    def n_features(self) -> int:
        return 6

    @property
    def stay_actions(self) -> tuple[int, ...]:
        return GRID_STAY_ACTIONS

    def facility_at(self, loc: int) -> FacilitySpec | None:
        for fac in self.facilities:
            if fac.loc == loc:
                return fac
        return None


@dataclass(frozen=True)
class RoadNetConfig:
    # adjacency[r] maps action index (0..3) to the successor road id
    adjacency: tuple[tuple[tuple[int, int], ...], ...]
    base_travel_time: tuple[int, ...]
    congestion_factor: float
    n_agents: int
    max_steps: int
    seed: int
    # per-road segment endpoints in meters: (x1, y1, x2, y2)
    geometry: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        n = len(self.adjacency)
        if n < 1:
            raise ConfigError("road network has no roads")
        if len(self.base_travel_time) != n:
            raise ConfigError("base_travel_time length != number of roads")
        if self.geometry and len(self.geometry) != n:
            raise ConfigError("geometry length != number of roads")
        if self.n_agents < 0 or self.max_steps < 1:
            raise ConfigError("n_agents must be >= 0 and max_steps >= 1")
        for r, succs in enumerate(self.adjacency):
            if not succs:
                raise ConfigError(f"road {r} has no successors")
            if len(succs) > ROAD_N_ACTIONS - 1:
                raise ConfigError(f"road {r} exceeds {ROAD_N_ACTIONS - 1} move actions")
            for action, succ in succs:
                if not 0 <= action < ROAD_N_ACTIONS - 1:
                    raise ConfigError(f"road {r}: move action {action} out of range")
                if not 0 <= succ < n:
                    raise ConfigError(f"road {r}: successor {succ} out of range")
            if len({a for a, _ in succs}) != len(succs):
                raise ConfigError(f"road {r}: duplicate action indices")

    @property
    def n_locs(self) -> int:
        return len(self.adjacency)

    @property
    def n_actions(self) -> int:
        return ROAD_N_ACTIONS

    @property
    def kind(self) -> str:
        return "roadnet"

    @property
    def n_features(self) -> int:
        return 12

    @property
    def stay_actions(self) -> tuple[int, ...]:
        return ROAD_STAY_ACTIONS

    def successors(self, road: int) -> dict[int, int]:
        return dict(self.adjacency[road])


@dataclass(frozen=True)
class GridAgent:
    loc: int
    time_in_loc: int
    constraint_steps: int
    queued_at: int = -1  # facility loc while in its queue, else -1


@dataclass(frozen=True)
class RoadAgent:
    loc: int
    time_in_loc: int
    constraint_steps: int
    dest: int
    prev_loc: int
    last_action: int


@dataclass(frozen=True)
class EnvState:
    config: GridParkConfig | RoadNetConfig
    clock: int
    agents: tuple
    # grid park only: facility loc -> tuple of queued agent ids, join order
    queues: tuple[tuple[int, tuple[int, ...]], ...] = ()
    # expert plan, assigned at reset: grid (rest_cell, phase_offset) per
    # agent; road networks plan through RoadAgent.dest instead
    expert_plan: tuple = ()

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def populations(self) -> tuple[int, ...]:
        counts = [0] * self.config.n_locs
        for a in self.agents:
            counts[a.loc] += 1
        return tuple(counts)

    def queue_of(self, loc: int) -> tuple[int, ...]:
        for fac_loc, q in self.queues:
            if fac_loc == loc:
                return q
        return ()


def _grid_xy(config: GridParkConfig, loc: int) -> tuple[int, int]:
    return loc % config.width, loc // config.width


def _grid_loc(config: GridParkConfig, x: int, y: int) -> int:
    return y * config.width + x


def loc_coordinates(config, loc: int) -> tuple[float, float]:
    """Centroid of a grid cell, or midpoint of a road segment, in meters."""
    if not 0 <= loc < config.n_locs:
        raise ValueError(f"location {loc} out of range for {config.n_locs} locations")
    if config.kind == "gridpark":
        x, y = _grid_xy(config, loc)
        half = config.cell_size / 2.0
        return (x * config.cell_size + half, y * config.cell_size + half)
    if not config.geometry:
        raise ConfigError("road network config has no geometry for coordinates")
    x1, y1, x2, y2 = config.geometry[loc]
    return ((x1 + x2) / 2.0, (y1 + y2) / 2.0)


def expert_period(config: GridParkConfig) -> int:
    return 2 * (config.width + config.height) + 16


def env_reset(config) -> EnvState:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if config.kind == "gridpark":
        transit = config.cell_transit_steps
        agents = tuple(GridAgent(loc=0, time_in_loc=0, constraint_steps=transit)
                       for _ in range(config.n_agents))
        queues = tuple((fac.loc, ()) for fac in config.facilities)
        period = expert_period(config)
        plan = tuple((int(rng.integers(0, config.n_locs)),
                      int(rng.integers(0, max(1, period // 4))))
                     for _ in range(config.n_agents))
        return EnvState(config=config, clock=0, agents=agents, queues=queues,
                        expert_plan=plan)

    n = config.n_locs
    starts = rng.integers(0, n, size=config.n_agents)
    agents = []
    for i in range(config.n_agents):
        start = int(starts[i])
        dest = int(rng.integers(0, n))
        if n > 1:
            while dest == start:
                dest = int(rng.integers(0, n))
        occupancy_others = sum(1 for s in starts[:i] if int(s) == start)
        constraint = _road_constraint(config, start, occupancy_others)
        agents.append(RoadAgent(loc=start, time_in_loc=0, constraint_steps=constraint,
                                dest=dest, prev_loc=start, last_action=ROAD_STAY))
    return EnvState(config=config, clock=0, agents=tuple(agents))


def _road_constraint(config: RoadNetConfig, road: int, other_occupants: int) -> int:
    return int(config.base_travel_time[road]
               + math.ceil(config.congestion_factor * other_occupants))


def _grid_move_target(config: GridParkConfig, loc: int, action: int) -> int:
    """Where a move action would land; off-grid moves land in place."""
    x, y = _grid_xy(config, loc)
    dx, dy = GRID_MOVES[action]
    nx, ny = x + dx, y + dy
    if 0 <= nx < config.width and 0 <= ny < config.height:
        return _grid_loc(config, nx, ny)
    return loc


def env_step(state: EnvState, actions) -> EnvState:
    config = state.config
    if state.clock >= config.max_steps:
        raise ValueError(f"episode over: clock {state.clock} >= max_steps {config.max_steps}")
    if len(actions) != state.n_agents:
        raise ValueError(f"expected {state.n_agents} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        if not 0 <= int(a) < config.n_actions:
            raise ValueError(f"agent {i}: invalid action index {a}")

    if config.kind == "gridpark":
        return _grid_step(state, [int(a) for a in actions])
    return _road_step(state, [int(a) for a in actions])


def _grid_step(state: EnvState, actions: list[int]) -> EnvState:
    config = state.config
    transit = config.cell_transit_steps
    queues = {loc: list(q) for loc, q in state.queues}

    # resolve intended relocations simultaneously from the pre-step state
    new_locs = []
    for i, agent in enumerate(state.agents):
        a = actions[i]
        if a < len(GRID_MOVES) and agent.time_in_loc >= agent.constraint_steps:
            new_locs.append(_grid_move_target(config, agent.loc, a))
        else:
            new_locs.append(agent.loc)

    agents = list(state.agents)
    for i, agent in enumerate(state.agents):
        if new_locs[i] != agent.loc:
            if agent.queued_at >= 0 and i in queues.get(agent.queued_at, []):
                queues[agent.queued_at].remove(i)
            agents[i] = GridAgent(loc=new_locs[i], time_in_loc=0,
                                  constraint_steps=transit, queued_at=-1)
        else:
            agents[i] = replace(agent, time_in_loc=agent.time_in_loc + 1)

    # check-ins join queues in agent-id order after moves resolve
    for i, agent in enumerate(agents):
        if actions[i] != GRID_CHECKIN or agent.queued_at >= 0:
            continue
        fac = config.facility_at(agent.loc)
        if fac is None or not fac.checkinable:
            continue  # plain stay
        queues[fac.loc].append(i)
        wait = math.ceil(len(queues[fac.loc]) / fac.service_rate)
        # dwell already spent counts; the wait extends from the join point
        pre_dwell = state.agents[i].time_in_loc
        agents[i] = replace(agent, queued_at=fac.loc,
                            constraint_steps=max(agent.constraint_steps, pre_dwell + wait))

    return replace(state, clock=state.clock + 1, agents=tuple(agents),
                   queues=tuple((loc, tuple(q)) for loc, q in queues.items()))


def _road_step(state: EnvState, actions: list[int]) -> EnvState:
    config = state.config
    moves = {}
    for i, agent in enumerate(state.agents):
        a = actions[i]
        if a == ROAD_STAY:
            continue
        succs = config.successors(agent.loc)
        if a in succs and agent.time_in_loc >= agent.constraint_steps:
            moves[i] = succs[a]

    # occupancy after all moves settle, used for congestion on entry
    post_locs = [moves.get(i, agent.loc) for i, agent in enumerate(state.agents)]
    post_counts = [0] * config.n_locs
    for loc in post_locs:
        post_counts[loc] += 1

    agents = []
    for i, agent in enumerate(state.agents):
        if i in moves:
            target = moves[i]
            constraint = _road_constraint(config, target, post_counts[target] - 1)
            agents.append(RoadAgent(loc=target, time_in_loc=0, constraint_steps=constraint,
                                    dest=agent.dest, prev_loc=agent.loc,
                                    last_action=actions[i]))
        else:
            agents.append(replace(agent, time_in_loc=agent.time_in_loc + 1,
                                  last_action=actions[i]))
    return replace(state, clock=state.clock + 1, agents=tuple(agents))


def observe(state: EnvState, agent_id: int) -> AgentState:
    if not 0 <= agent_id < state.n_agents:
        raise ValueError(f"unknown agent {agent_id}")
    config = state.config
    agent = state.agents[agent_id]
    pop = state.populations[agent.loc]
    if config.kind == "gridpark":
        fac = config.facility_at(agent.loc)
        return AgentState(loc_id=agent.loc, time_in_loc=agent.time_in_loc,
                          start_time=0, population=pop,
                          checkinable=int(fac is not None and fac.checkinable))
    return AgentState(loc_id=agent.loc, time_in_loc=agent.time_in_loc,
                      start_time=0, population=pop,
                      dest_loc=agent.dest, prev_loc=agent.prev_loc,
                      last_action=agent.last_action)


def candidate_next_locations(state: EnvState, agent_id: int) -> list[int]:
    return candidates_for_loc(state.config, state.agents[agent_id].loc)


def candidates_for_loc(config, loc: int) -> list[int]:
    """Locations reachable in one step: current location plus move successors."""
    out = [loc]
    if config.kind == "gridpark":
        for a in range(len(GRID_MOVES)):
            target = _grid_move_target(config, loc, a)
            if target not in out:
                out.append(target)
    else:
        for _, succ in config.adjacency[loc]:
            if succ not in out:
                out.append(succ)
    return out


def action_target_loc(config, loc: int, action: int) -> int:
    """Where an action points if it relocates; stay-type actions point home."""
    if config.kind == "gridpark":
        if action < len(GRID_MOVES):
            return _grid_move_target(config, loc, action)
        return loc
    if action == ROAD_STAY:
        return loc
    return config.successors(loc).get(action, loc)


# --- feature schemas ------------------------------------------------------

def encode_features(s: AgentState, config) -> np.ndarray:
    """Scaled feature vector per the environment schema (length k)."""
    max_steps = config.max_steps
    n = config.n_agents
    if config.kind == "gridpark":
        x, y = _grid_xy(config, s.loc_id)
        return np.array([
            s.time_in_loc / max_steps,
            s.start_time / max_steps,
            s.population / n,
            float(s.checkinable),
            x / config.width,
            y / config.height,
        ])
    onehot = np.zeros(ROAD_N_ACTIONS)
    onehot[s.last_action] = 1.0
    ex, ey = _geometry_extent(config)
    dx, dy = loc_coordinates(config, s.dest_loc)
    px, py = loc_coordinates(config, s.prev_loc)
    head = np.array([s.time_in_loc / max_steps, s.start_time / max_steps, s.population / n])
    tail = np.array([dx / ex, dy / ey, px / ex, py / ey])
    return np.concatenate([head, onehot, tail])


@lru_cache(maxsize=None)
def _geometry_extent(config: RoadNetConfig) -> tuple[float, float]:
    xs = [v for g in config.geometry for v in (g[0], g[2])]
    ys = [v for g in config.geometry for v in (g[1], g[3])]
    return max(max(xs, default=1.0), 1.0), max(max(ys, default=1.0), 1.0)


def dynamics_features(config, loc: int, clock: int, population: int) -> np.ndarray:
    """The 3 scaled inputs of the dynamics model: location, time, crowding."""
    return np.array([loc / config.n_locs, clock / config.max_steps,
                     population / config.n_agents])


# --- scripted experts -----------------------------------------------------

def scripted_expert_action(state: EnvState, agent_id: int,
                           rng: np.random.Generator | None = None) -> int:
    """Constraint-compliant scripted behaviour.

    Grid park: agents alternate on a clock-driven cycle between the facility
    circuit and a personal rest cell, checking in and sitting out assigned
    queue waits. Road network: shortest path to the agent's destination,
    honouring travel-time dwells. ``rng`` breaks ties when an agent has no
    facilities to visit.
    """
    config = state.config
    agent = state.agents[agent_id]
    if config.kind == "gridpark":
        return _grid_expert(state, agent_id, rng)
    return _road_expert(config, agent)


def _grid_expert(state: EnvState, agent_id: int, rng) -> int:
    config = state.config
    agent = state.agents[agent_id]
    rest_cell, offset = state.expert_plan[agent_id]

    # committed to a queue: sit out the assigned wait
    if agent.queued_at >= 0 and agent.time_in_loc < agent.constraint_steps:
        return GRID_STAY

    checkinables = [f for f in config.facilities if f.checkinable]
    if not checkinables:
        return GRID_STAY
    period = expert_period(config)
    half = period // 2
    phase_facility = ((state.clock + offset) // half) % 2 == 0
    if phase_facility:
        k = ((state.clock + offset) // period) % len(checkinables)
        target = checkinables[k].loc
    else:
        target = rest_cell

    if agent.loc == target:
        if phase_facility and agent.queued_at < 0:
            return GRID_CHECKIN
        return GRID_STAY
    if agent.time_in_loc < agent.constraint_steps:
        return GRID_STAY
    cx, cy = _grid_xy(config, agent.loc)
    tx, ty = _grid_xy(config, target)
    step = (int(np.sign(tx - cx)), int(np.sign(ty - cy)))
    return GRID_MOVES.index(step)


@lru_cache(maxsize=None)
def _next_hop_table(config: RoadNetConfig, dest: int) -> dict[int, int]:
    """road -> action leading one hop closer to dest (reverse BFS)."""
    preds: dict[int, list[tuple[int, int]]] = {r: [] for r in range(config.n_locs)}
    for r in range(config.n_locs):
        for action, succ in config.adjacency[r]:
            preds[succ].append((r, action))
    table: dict[int, int] = {}
    frontier = [dest]
    visited = {dest}
    while frontier:
        nxt = []
        for node in frontier:
            for r, action in preds[node]:
                if r not in visited:
                    visited.add(r)
                    table[r] = action
                    nxt.append(r)
        frontier = nxt
    return table


def _road_expert(config: RoadNetConfig, agent: RoadAgent) -> int:
    if agent.loc == agent.dest:
        return ROAD_STAY
    if agent.time_in_loc < agent.constraint_steps:
        return ROAD_STAY
    table = _next_hop_table(config, agent.dest)
    return table.get(agent.loc, ROAD_STAY)


def expert_actions(state: EnvState, rng: np.random.Generator | None = None) -> list[int]:
    return [scripted_expert_action(state, i, rng) for i in range(state.n_agents)]


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def generate_demonstrations(config, n_episodes: int, seed: int) -> list[Trajectory]:
    """Roll the scripted expert; returns one trajectory per (episode, agent).

    Expert records carry ``constraint=None``: demonstrators have no learned
    constraint sample.
    """
    trajectories = []
    for ep in range(n_episodes):
        ep_config = replace(config, seed=episode_seed(seed, ep))
        rng = np.random.default_rng(np.random.SeedSequence([seed, ep, 1]))
        state = env_reset(ep_config)
        per_agent: list[list[StepRecord]] = [[] for _ in range(config.n_agents)]
        for _ in range(config.max_steps):
            before = [observe(state, i) for i in range(state.n_agents)]
            acts = expert_actions(state, rng)
            state = env_step(state, acts)
            for i in range(state.n_agents):
                per_agent[i].append(StepRecord(state=before[i], action=acts[i],
                                               constraint=None,
                                               next_state=observe(state, i)))
        for i in range(config.n_agents):
            trajectories.append(Trajectory(agent_id=ep * config.n_agents + i,
                                           records=per_agent[i]))
    return trajectories


# --- config builders ------------------------------------------------------

def ring_road_config(n_roads: int, n_agents: int, max_steps: int, seed: int,
                     base_travel_time: int = 3, congestion_factor: float = 0.5,
                     radius: float = 100.0) -> RoadNetConfig:
    """Directed ring with a skip chord every other road, circle geometry."""
    if n_roads < 3:
        raise ConfigError("ring needs at least 3 roads")
    adjacency = []
    for r in range(n_roads):
        succs = [(3, (r + 1) % n_roads)]  # straight: next segment
        if r % 2 == 0:
            succs.append((1, (r + 2) % n_roads))  # right: skip chord
        adjacency.append(tuple(succs))
    pts = [(radius * math.cos(2 * math.pi * k / n_roads) + radius,
            radius * math.sin(2 * math.pi * k / n_roads) + radius)
           for k in range(n_roads)]
    geometry = tuple((pts[k][0], pts[k][1],
                      pts[(k + 1) % n_roads][0], pts[(k + 1) % n_roads][1])
                     for k in range(n_roads))
    return RoadNetConfig(adjacency=tuple(adjacency),
                         base_travel_time=tuple([base_travel_time] * n_roads),
                         congestion_factor=congestion_factor,
                         n_agents=n_agents, max_steps=max_steps, seed=seed,
                         geometry=geometry)
