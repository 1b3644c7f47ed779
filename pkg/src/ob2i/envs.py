"""Episodic environments: the stochastic grid maze and small linear MDPs.

Maze coordinates are ``(row, col)`` with the start in the top-left corner and
the goal in the bottom-right.  Actions are indexed ``0..3`` as left, right,
up, down.  With probability ``slip_prob`` each, the agent instead moves in
one of the two directions perpendicular to the one it asked for.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ContractViolation, GenerationFailure, UnreachableError

LEFT, RIGHT, UP, DOWN = range(4)
N_ACTIONS = 4
MOVES = {LEFT: (0, -1), RIGHT: (0, 1), UP: (-1, 0), DOWN: (1, 0)}
PERPENDICULAR = {LEFT: (UP, DOWN), RIGHT: (UP, DOWN), UP: (LEFT, RIGHT), DOWN: (LEFT, RIGHT)}

MAX_GENERATION_ATTEMPTS = 20000
NOISE_BOUND = 0.5


@dataclass(frozen=True)
class MazeSpec:
    width: int = 10
    height: int = 10
    walls: frozenset = frozenset()
    start: tuple = (0, 0)
    goal: tuple | None = None
    slip_prob: float = 0.10
    wall_bump_reward: float = -1.0
    goal_reward: float = 1000.0
    max_steps: int = 1000
    wall_density: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.goal is None:
            object.__setattr__(self, "goal", (self.height - 1, self.width - 1))
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        object.__setattr__(self, "start", tuple(self.start))
        object.__setattr__(self, "goal", tuple(self.goal))
        if self.start in self.walls or self.goal in self.walls:
            raise ValueError("start and goal must not be walls")
        if not 0.0 <= self.slip_prob <= 0.5:
            raise ValueError(f"slip_prob must be in [0, 0.5], got {self.slip_prob}")

    def in_grid(self, pos) -> bool:
        r, c = pos
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, pos) -> bool:
        return self.in_grid(pos) and tuple(pos) not in self.walls

    @property
    def encoding_dim(self) -> int:
        return self.height + self.width

    def to_json(self) -> str:
        doc = {
            "width": self.width,
            "height": self.height,
            "walls": sorted(list(w) for w in self.walls),
            "start": list(self.start),
            "goal": list(self.goal),
            "slip_prob": self.slip_prob,
            "wall_bump_reward": self.wall_bump_reward,
            "goal_reward": self.goal_reward,
            "max_steps": self.max_steps,
            "wall_density": self.wall_density,
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MazeSpec":
        doc = json.loads(text)
        doc["walls"] = frozenset(tuple(w) for w in doc["walls"])
        doc["start"] = tuple(doc["start"])
        doc["goal"] = tuple(doc["goal"])
        return cls(**doc)


@dataclass
class EnvState:
    position: tuple
    steps_taken: int = 0
    done: bool = False
    encoded: np.ndarray | None = None


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class EpisodeRecord:
    """One trajectory, stored as stacked arrays for the backward update."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        T = len(self.actions)
        if T < 1:
            raise ContractViolation("an episode needs at least one transition")
        if not (len(self.states) == len(self.rewards) == len(self.next_states) == len(self.terminals) == T):
            raise ValueError("episode arrays have inconsistent lengths")
        if np.any(self.terminals[:-1]):
            raise ValueError("only the final transition may be terminal")

    @property
    def T(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions) -> "EpisodeRecord":
        transitions = list(transitions)
        if not transitions:
            raise ContractViolation("an episode needs at least one transition")
        return cls(
            states=np.array([tr.state for tr in transitions], dtype=np.float64),
            actions=np.array([tr.action for tr in transitions], dtype=np.int64),
            rewards=np.array([tr.reward for tr in transitions], dtype=np.float64),
            next_states=np.array([tr.next_state for tr in transitions], dtype=np.float64),
            terminals=np.array([tr.terminal for tr in transitions], dtype=bool),
        )

    def transitions(self):
        for t in range(self.T):
            yield Transition(self.states[t], int(self.actions[t]), float(self.rewards[t]),
                             self.next_states[t], bool(self.terminals[t]))


def _bfs_distances(spec: MazeSpec, source) -> dict:
    dist = {tuple(source): 0}
    queue = deque([tuple(source)])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES.values():
            nxt = (r + dr, c + dc)
            if nxt not in dist and spec.is_free(nxt):
                dist[nxt] = dist[(r, c)] + 1
                queue.append(nxt)
    return dist


def shortest_path_length(spec: MazeSpec) -> int:
    """Fewest actions from start to goal if moves were deterministic."""
    dist = _bfs_distances(spec, spec.start)
    if spec.goal not in dist:
        raise UnreachableError(f"goal {spec.goal} unreachable from {spec.start}")
    return dist[spec.goal]


def is_solvable(spec: MazeSpec) -> bool:
    return spec.goal in _bfs_distances(spec, spec.start)


def generate_maze(seed: int, density: float, width: int = 10, height: int = 10, **kwargs) -> MazeSpec:
    """Random maze with ``round(density * width * height)`` walls.

    Walls are drawn uniformly without replacement from cells other than the
    start and goal.  Unsolvable layouts are discarded and the whole layout is
    redrawn, so the accepted wall distribution is the uniform one conditioned
    on solvability.
    """
    if not 0.0 <= density <= 0.6:
        raise ValueError(f"density must be in [0, 0.6], got {density}")
    start = tuple(kwargs.pop("start", (0, 0)))
    goal = tuple(kwargs.pop("goal", (height - 1, width - 1)))
    n_walls = int(round(density * width * height))
    candidates = [(r, c) for r in range(height) for c in range(width) if (r, c) not in (start, goal)]
    rng = np.random.default_rng(seed)
    for _ in range(MAX_GENERATION_ATTEMPTS):
        idx = rng.choice(len(candidates), size=n_walls, replace=False)
        walls = frozenset(candidates[i] for i in idx)
        spec = MazeSpec(width=width, height=height, walls=walls, start=start, goal=goal,
                        wall_density=density, seed=seed, **kwargs)
        if is_solvable(spec):
            return spec
    raise GenerationFailure(
        f"no solvable maze after {MAX_GENERATION_ATTEMPTS} attempts (seed={seed}, density={density})")


def encode_state(spec: MazeSpec, position, rng, noise_scale: float = 0.1) -> np.ndarray:
    """Noisy one-hot encoding: a row block of length ``height`` then a column block.

    Noise is Gaussian with standard deviation ``noise_scale``, redrawn
    wherever it reaches magnitude 0.5 so that each block's argmax always
    recovers the coordinate.
    """
    r, c = position
    vec = np.zeros(spec.height + spec.width)
    vec[r] = 1.0
    vec[spec.height + c] = 1.0
    if noise_scale > 0:
        noise = rng.normal(0.0, noise_scale, size=vec.shape)
        bad = np.abs(noise) >= NOISE_BOUND
        while bad.any():
            noise[bad] = rng.normal(0.0, noise_scale, size=int(bad.sum()))
            bad = np.abs(noise) >= NOISE_BOUND
        vec += noise
    return vec


def decode_state(spec: MazeSpec, vec) -> tuple:
    vec = np.asarray(vec)
    return int(np.argmax(vec[: spec.height])), int(np.argmax(vec[spec.height:]))


def realized_direction(action: int, slip_prob: float, rng) -> int:
    u = rng.random()
    if u < 1.0 - 2.0 * slip_prob:
        return action
    first, second = PERPENDICULAR[action]
    return first if u < 1.0 - slip_prob else second


def reset(spec: MazeSpec, rng, noise_scale: float = 0.1) -> EnvState:
    return EnvState(position=spec.start, encoded=encode_state(spec, spec.start, rng, noise_scale))


def step(spec: MazeSpec, state: EnvState, action: int, rng, noise_scale: float = 0.1):
    """Advance one step; returns ``(next_state, reward, done)``."""
    if state.done:
        raise ContractViolation("cannot step a finished episode")
    if action not in MOVES:
        raise ValueError(f"invalid action {action}")
    direction = realized_direction(action, spec.slip_prob, rng)
    dr, dc = MOVES[direction]
    target = (state.position[0] + dr, state.position[1] + dc)
    if spec.is_free(target):
        position = target
        reward = 0.0
    else:
        position = state.position
        reward = spec.wall_bump_reward
    steps = state.steps_taken + 1
    done = False
    if position == spec.goal:
        reward = spec.goal_reward
        done = True
    elif steps >= spec.max_steps:
        done = True
    nxt = EnvState(position=position, steps_taken=steps, done=done,
                   encoded=encode_state(spec, position, rng, noise_scale))
    return nxt, reward, done


class MazeEnv:
    """Stateful wrapper owning a spec, its current state and a generator."""

    def __init__(self, spec: MazeSpec, rng=None, noise_scale: float = 0.1):
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng()
        self.noise_scale = noise_scale
        self.state: EnvState | None = None

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_dim(self) -> int:
        return self.spec.encoding_dim

    def reset(self) -> np.ndarray:
        self.state = reset(self.spec, self.rng, self.noise_scale)
        return self.state.encoded

    def step(self, action: int):
        self.state, reward, done = step(self.spec, self.state, action, self.rng, self.noise_scale)
        # timeouts end the episode but are not terminal for bootstrapping purposes
        terminal = done and self.state.position == self.spec.goal
        return self.state.encoded, reward, done, terminal


# ---------------------------------------------------------------------------
# Linear MDPs
# ---------------------------------------------------------------------------


@dataclass
class LinearMdpSpec:
    """Finite linear MDP: ``P(s'|s,a) = phi(s,a) . mu[:, s']`` and ``r = phi(s,a) . theta``.

    ``features`` has shape ``(n_states, n_actions, d)``.
    """

    features: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    horizon: int
    initial_state: int = 0
    reward_noise: float = 0.0
    kernel: np.ndarray = field(init=False, repr=False)
    reward_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        S, A, d = self.features.shape
        if self.mu.shape != (d, S):
            raise ValueError(f"mu must have shape {(d, S)}, got {self.mu.shape}")
        if self.theta.shape != (d,):
            raise ValueError(f"theta must have shape {(d,)}, got {self.theta.shape}")
        if np.any(np.linalg.norm(self.features, axis=-1) > 1 + 1e-12):
            raise ValueError("feature norms must be at most 1")
        self.kernel = self.features @ self.mu
        if np.any(self.kernel < -1e-12) or not np.allclose(self.kernel.sum(-1), 1.0):
            raise ValueError("features @ mu must be a stochastic kernel")
        self.kernel = np.clip(self.kernel, 0.0, None)
        self.kernel /= self.kernel.sum(-1, keepdims=True)
        self.reward_table = self.features @ self.theta
        if np.any(self.reward_table < -1e-12) or np.any(self.reward_table > 1 + 1e-12):
            raise ValueError("rewards must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    @property
    def n_actions(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def phi(self, state: int, action: int) -> np.ndarray:
        return self.features[state, action]

    @classmethod
    def tabular(cls, next_state, rewards, horizon: int, initial_state: int = 0) -> "LinearMdpSpec":
        """Deterministic MDP with one-hot features, from ``next_state[s][a]`` and ``rewards[s][a]``."""
        next_state = np.asarray(next_state, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        S, A = next_state.shape
        d = S * A
        features = np.zeros((S, A, d))
        mu = np.zeros((d, S))
        theta = np.zeros(d)
        for s in range(S):
            for a in range(A):
                j = s * A + a
                features[s, a, j] = 1.0
                mu[j, next_state[s, a]] = 1.0
                theta[j] = rewards[s, a]
        return cls(features=features, mu=mu, theta=theta, horizon=horizon, initial_state=initial_state)


def linear_mdp_step(spec: LinearMdpSpec, state: int, action: int, rng):
    """Sample ``(next_state, reward)``; reward noise is uniform and clipped to [0, 1]."""
    probs = spec.kernel[state, action]
    next_state = int(rng.choice(spec.n_states, p=probs))
    reward = float(spec.reward_table[state, action])
    if spec.reward_noise > 0:
        reward = float(np.clip(reward + rng.uniform(-spec.reward_noise, spec.reward_noise), 0.0, 1.0))
    return next_state, reward


def optimal_values(spec: LinearMdpSpec):
    """Exact finite-horizon dynamic programming; returns ``(Q, V)`` indexed by step."""
    T, S, A = spec.horizon, spec.n_states, spec.n_actions
    Q = np.zeros((T, S, A))
    V = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        Q[t] = spec.reward_table + spec.kernel @ V[t + 1]
        V[t] = Q[t].max(axis=1)
    return Q, V
