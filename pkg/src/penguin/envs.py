"""Particle-world scenarios (cooperative spread, predator-prey tag) with injected asymmetries.

Physics is a damped double integrator without contact forces; collisions
only matter for rewards. Positions are observed in world coordinates.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np

from .graph import ADVERSARY, DECOY, LANDMARK, SELF, TEAMMATE, GraphBatch, GraphState

SCENARIOS = ("spread", "tag")
ASYMMETRIES = ("none", "bias", "safety", "decoy")

DT = 0.1
DAMPING = 0.25
AGENT_MAX_SPEED = 1.0
EVADER_MAX_SPEED = 1.3
SPREAD_RADIUS = 0.15
PURSUER_RADIUS = 0.075
EVADER_RADIUS = 0.05
TAG_REWARD = 10.0
SAFETY_PENALTY = {"tag": -15.0, "spread": -5.0}
SENSOR_BIAS = np.array([0.3, 0.0])
SPREAD_DECOY_LANDMARKS = np.array([[1.5, 0.9], [-0.9, 0.0], [-0.5, -0.5]])
TAG_DECOY_EVADER = np.array([0.75, 0.75])

# world roles
AGENT, EVADER, OBSTACLE, DECOY_ENTITY = range(4)
ROLE_LABELS = ("agent", "evader", "landmark", "decoy")

# node features: one-hot(self, teammate, adversary, landmark) + speed
NUM_FEATURES = 5


@dataclass
class ScenarioConfig:
    scenario: str = "spread"
    asymmetry: str = "none"
    num_agents: int = 3
    num_landmarks: int | None = None
    episode_length: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.asymmetry not in ASYMMETRIES:
            raise ValueError(f"unknown asymmetry {self.asymmetry!r}")
        if self.num_landmarks is None:
            self.num_landmarks = 3 if self.scenario == "spread" else 2
        if self.scenario == "spread" and self.asymmetry == "decoy" and self.num_landmarks != 3:
            raise ValueError("the spread decoy layout has exactly three landmarks")

    @property
    def num_decoys(self) -> int:
        if self.asymmetry != "decoy":
            return 0
        return self.num_landmarks if self.scenario == "spread" else 1


@dataclass
class WorldState:
    pos: np.ndarray  # (K, 2)
    vel: np.ndarray  # (K, 2)
    role: np.ndarray  # (K,) world roles
    cfg: ScenarioConfig
    rng: np.random.Generator
    t: int = 0
    clipped_actions: int = 0

    @property
    def agents(self) -> np.ndarray:
        return np.flatnonzero(self.role == AGENT)

    @property
    def num_agents(self) -> int:
        return int(np.sum(self.role == AGENT))

    def index(self, role: int) -> np.ndarray:
        return np.flatnonzero(self.role == role)

    def copy(self) -> "WorldState":
        return WorldState(
            self.pos.copy(), self.vel.copy(), self.role.copy(), self.cfg, copy.deepcopy(self.rng), self.t, self.clipped_actions
        )


@dataclass
class StepResult:
    state: WorldState
    observations: list[GraphState]
    rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


def _max_speed(role: np.ndarray) -> np.ndarray:
    return np.where(role == EVADER, EVADER_MAX_SPEED, AGENT_MAX_SPEED)


def reset(cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> WorldState:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    a = cfg.num_agents
    if cfg.scenario == "spread" and cfg.asymmetry == "safety":
        agents = np.empty((a, 2))
        for k in range(a):
            p = rng.uniform(-1, 1, 2)
            while p[0] > 0 and p[1] > 0:
                p = rng.uniform(-1, 1, 2)
            agents[k] = p
    else:
        agents = rng.uniform(-1, 1, (a, 2))
    parts, roles = [agents], [AGENT] * a
    if cfg.scenario == "tag":
        evader = TAG_DECOY_EVADER.copy() if cfg.asymmetry == "decoy" else rng.uniform(-1, 1, 2)
        parts.append(evader[None])
        roles.append(EVADER)
    if cfg.scenario == "spread" and cfg.asymmetry == "decoy":
        landmarks = SPREAD_DECOY_LANDMARKS.copy()
    else:
        landmarks = rng.uniform(-1, 1, (cfg.num_landmarks, 2))
    parts.append(landmarks)
    roles += [OBSTACLE] * len(landmarks)
    if cfg.num_decoys:
        parts.append(rng.uniform(-1, 1, (cfg.num_decoys, 2)))
        roles += [DECOY_ENTITY] * cfg.num_decoys
    pos = np.concatenate(parts)
    return WorldState(pos, np.zeros_like(pos), np.array(roles), cfg, rng)


def evader_force(evader: np.ndarray, pursuers: np.ndarray, repulsion: float = 0.3, cap: float = 2.0) -> np.ndarray:
    """Scripted evader: pull to the centre, push away from pursuers.

    ``-x_e + (repulsion / N) * sum_j (x_e - x_j) / |x_e - x_j|^2`` with the
    pursuer sum capped at norm ``cap``; the total is normalised and divided
    by 3. A pursuer exactly on the evader has no defined direction and adds
    nothing.
    """
    evader = np.asarray(evader, dtype=np.float64)
    pursuers = np.asarray(pursuers, dtype=np.float64).reshape(-1, 2)
    push = np.zeros(2)
    if len(pursuers):
        d = evader - pursuers
        r2 = np.sum(d * d, axis=1)
        ok = r2 > 0
        push = (repulsion / len(pursuers)) * np.sum(d[ok] / r2[ok, None], axis=0)
        mag = np.linalg.norm(push)
        if mag > cap:
            push = push * (cap / mag)
    force = -evader + push
    norm = np.linalg.norm(force)
    if norm == 0:
        return np.zeros(2)
    return force / norm / 3.0


def evader_policy(state: WorldState) -> np.ndarray:
    ev = state.index(EVADER)
    if len(ev) == 0:
        raise ValueError("scenario has no evader")
    return evader_force(state.pos[ev[0]], state.pos[state.agents])


def safety_penalty(position, scenario: str) -> float:
    p = np.asarray(position)
    return SAFETY_PENALTY[scenario] if (p[0] > 0 and p[1] > 0) else 0.0


def _safety_terms(state: WorldState) -> np.ndarray:
    if state.cfg.asymmetry != "safety":
        return np.zeros(state.num_agents)
    p = state.pos[state.agents]
    inside = (p[:, 0] > 0) & (p[:, 1] > 0)
    return np.where(inside, SAFETY_PENALTY[state.cfg.scenario], 0.0)


def reward_spread(state: WorldState) -> np.ndarray:
    """Shared coverage term, per-agent collision count and optional safety penalty."""
    agents = state.pos[state.agents]
    landmarks = state.pos[state.index(OBSTACLE)]
    if len(landmarks):
        dists = np.linalg.norm(agents[:, None] - landmarks[None], axis=-1)
        shared = -float(np.sum(dists.min(axis=0)))
    else:
        shared = 0.0
    pair = np.linalg.norm(agents[:, None] - agents[None], axis=-1)
    np.fill_diagonal(pair, np.inf)
    collisions = np.sum(pair < 2 * SPREAD_RADIUS, axis=1)
    return shared - collisions + _safety_terms(state)


def reward_tag(state: WorldState) -> np.ndarray:
    """+10 to every pursuer on steps where any pursuer touches the true evader."""
    agents = state.pos[state.agents]
    ev = state.index(EVADER)
    caught = False
    if len(ev):
        d = np.linalg.norm(agents - state.pos[ev[0]], axis=1)
        caught = bool(np.any(d < PURSUER_RADIUS + EVADER_RADIUS))
    return np.full(len(agents), TAG_REWARD if caught else 0.0) + _safety_terms(state)


def rewards(state: WorldState) -> np.ndarray:
    return reward_spread(state) if state.cfg.scenario == "spread" else reward_tag(state)


def step(state: WorldState, actions) -> StepResult:
    """Advance one tick; ``state`` is left untouched."""
    new = state.copy()
    actions = np.asarray(actions, dtype=np.float64).reshape(new.num_agents, 2)
    out_of_range = np.abs(actions) > 1.0
    if out_of_range.any():
        new.clipped_actions += int(out_of_range.any(axis=1).sum())
        actions = np.clip(actions, -1.0, 1.0)
    force = np.zeros_like(new.pos)
    force[new.agents] = actions
    ev = new.index(EVADER)
    evader_static = new.cfg.asymmetry == "decoy"
    if len(ev) and not evader_static:
        force[ev[0]] = evader_policy(state)
    decoys = new.index(DECOY_ENTITY)
    if len(decoys):
        force[decoys] = new.rng.uniform(-1, 1, (len(decoys), 2))
    movable = (new.role == AGENT) | (new.role == DECOY_ENTITY)
    if not evader_static:
        movable |= new.role == EVADER
    vel = (1.0 - DAMPING) * new.vel + force * DT
    speed = np.linalg.norm(vel, axis=1)
    cap = _max_speed(new.role)
    over = speed > cap
    vel[over] *= (cap[over] / speed[over])[:, None]
    vel[~movable] = 0.0
    new.vel = vel
    new.pos = new.pos + vel * DT
    new.t += 1
    r = rewards(new)
    done = new.t >= new.cfg.episode_length
    return StepResult(new, [observe(new, k) for k in range(new.num_agents)], r, done)


# observations -------------------------------------------------------------------
def _node_layout(state: WorldState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base one-hot rows, node types and the biased-entity mask (self flag not yet set)."""
    role = state.role
    scen = state.cfg.scenario
    onehot = np.zeros((len(role), 4))
    node_type = np.empty(len(role), dtype=int)
    onehot[role == AGENT, 1] = 1.0
    node_type[role == AGENT] = TEAMMATE
    onehot[role == EVADER, 2] = 1.0
    node_type[role == EVADER] = ADVERSARY
    onehot[role == OBSTACLE, 3] = 1.0
    node_type[role == OBSTACLE] = LANDMARK
    # decoys look exactly like the objective they imitate
    onehot[role == DECOY_ENTITY, 3 if scen == "spread" else 2] = 1.0
    node_type[role == DECOY_ENTITY] = DECOY
    biased = np.zeros(len(role), dtype=bool)
    if state.cfg.asymmetry == "bias":
        biased = role == OBSTACLE
        if scen == "tag":
            biased = biased | (role == EVADER)
    return onehot, node_type, biased


def observe_all(state: WorldState) -> GraphBatch:
    """One observation graph per agent, stacked in agent order."""
    onehot, node_type, biased = _node_layout(state)
    speed = np.linalg.norm(state.vel, axis=1, keepdims=True)
    base = np.concatenate([onehot, speed], axis=1)
    u = state.pos + np.where(biased[:, None], SENSOR_BIAS, 0.0)
    agents = state.agents
    a = len(agents)
    h = np.repeat(base[None], a, axis=0)
    types = np.repeat(node_type[None], a, axis=0)
    h[np.arange(a), agents, 0] = 1.0
    h[np.arange(a), agents, 1] = 0.0
    types[np.arange(a), agents] = SELF
    return GraphBatch(h, np.repeat(u[None], a, axis=0), np.repeat(state.vel[None], a, axis=0), types)


def observe(state: WorldState, agent_id: int, cfg: ScenarioConfig | None = None) -> GraphState:
    """Complete graph over all entities as seen by agent ``agent_id``."""
    if not 0 <= agent_id < state.num_agents:
        raise IndexError(f"no agent {agent_id}")
    return observe_all(state).graph(agent_id)


def rotate_world(state: WorldState, Q: np.ndarray) -> WorldState:
    """Rotate/reflect every position and velocity about the origin."""
    new = state.copy()
    new.pos = state.pos @ Q.T
    new.vel = state.vel @ Q.T
    return new


class ParticleEnv:
    """Stateful wrapper that keeps its own RNG across episodes."""

    def __init__(self, cfg: ScenarioConfig, seed: int | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.state: WorldState | None = None

    def reset(self) -> GraphBatch:
        self.state = reset(self.cfg, self.rng)
        return observe_all(self.state)

    def step(self, actions) -> tuple[GraphBatch, np.ndarray, bool]:
        res = step(self.state, actions)
        self.state = res.state
        return observe_all(self.state), res.rewards, res.done


# file formats ---------------------------------------------------------------------
def write_trajectory_csv(path, states: list[WorldState], step_rewards: list[np.ndarray]) -> None:
    """One row per entity per step; ``step_rewards[k]`` belongs to ``states[k]``.

    Non-agent entities get an empty reward field.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "entity", "x", "y", "vx", "vy", "reward"])
        for s, r in zip(states, step_rewards):
            agents = list(s.agents)
            for e in range(len(s.role)):
                rew = repr(float(r[agents.index(e)])) if e in agents and r is not None else ""
                nums = [repr(float(x)) for x in (*s.pos[e], *s.vel[e])]
                w.writerow([s.t, f"{ROLE_LABELS[s.role[e]]}{e}", *nums, rew])


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def load_scenario_config(path) -> ScenarioConfig:
    kv = parse_key_values(open(path).read())
    aliases = {"horizon": "episode_length", "asym": "asymmetry", "agents": "num_agents", "landmarks": "num_landmarks"}
    kv = {aliases.get(k, k): v for k, v in kv.items()}
    fields = {"scenario": str, "asymmetry": str, "num_agents": int, "num_landmarks": int, "episode_length": int, "seed": int}
    return ScenarioConfig(**{k: fields[k](v) for k, v in kv.items() if k in fields})


def write_scenario_config(path, cfg: ScenarioConfig) -> None:
    with open(path, "w") as fh:
        for k in ("scenario", "asymmetry", "num_agents", "num_landmarks", "episode_length", "seed"):
            fh.write(f"{k} = {getattr(cfg, k)}\n")
