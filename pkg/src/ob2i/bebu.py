"""Episodic replay and backward-induction training for the BEBU family and OB2I.

All four variants share one training core.  They differ in how actions are
chosen while interacting (sampled head, mean plus spread, or the
regret-information ratio) and in whether ensemble-disagreement bonuses are
folded into the backward targets (OB2I only).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

from . import ConfigError, ContractViolation
from .ensemble import (
    AdamState, BootstrappedNet, adam_step, backprop_mse, forward_all, forward_batch, head_std,
    init_net, sync_target,
)
from .envs import EpisodeRecord, MazeSpec, Transition, shortest_path_length

log = logging.getLogger(__name__)

VARIANTS = ("BEBU", "BEBU_UCB", "BEBU_IDS", "OB2I")
MASK_MODES = ("post_diffusion", "precomputed")


@dataclass
class TrainerConfig:
    variant: str = "OB2I"
    alpha1: float = 0.01
    alpha2: float = 0.01
    beta: float = 1.0
    gamma: float = 0.9
    n_heads: int = 10
    lambda_ucb: float = 0.1
    lambda_ids: float = 0.1
    rho: float = 1.0
    eps_ids: float = 1e-5
    total_frames: int = 50_000
    learning_starts: int = 10_000
    train_frequency: int = 50
    target_sync_period: int = 2000
    replay_capacity: int = 170
    lr: float = 1e-3
    grad_clip: float = 10.0
    trunk_widths: tuple = (64, 64)
    mask_mode: str = "post_diffusion"
    bonus_norm_decay: float = 0.99
    epsilon_schedule: str = "quadratic"

    def __post_init__(self):
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError("mask_mode", f"must be one of {MASK_MODES}")
        if self.epsilon_schedule not in ("quadratic", "zero"):
            raise ConfigError("epsilon_schedule", "must be 'quadratic' or 'zero'")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta", f"must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", f"must be in [0, 1), got {self.gamma}")
        for key in ("alpha1", "alpha2", "lambda_ucb", "lambda_ids", "eps_ids", "learning_starts", "total_frames"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        for key in ("rho", "lr", "grad_clip", "train_frequency", "target_sync_period", "replay_capacity"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be positive")
        if self.n_heads < 1:
            raise ConfigError("n_heads", "must be at least 1")
        if not 0.0 < self.bonus_norm_decay < 1.0:
            raise ConfigError("bonus_norm_decay", "must be in (0, 1)")

    @property
    def uses_target_bonus(self) -> bool:
        return self.variant == "OB2I"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class EpisodicReplay:
    """Fixed-capacity store of whole episodes, evicting the oldest first."""

    def __init__(self, capacity: int = 170):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.episodes)

    def add(self, episode: EpisodeRecord):
        self.episodes.append(episode)

    def sample(self, rng) -> EpisodeRecord:
        if not self.episodes:
            raise ContractViolation("cannot sample from an empty replay")
        return self.episodes[int(rng.integers(len(self.episodes)))]


class RunningStd:
    """Exponentially weighted root-mean-square of next-Q bonuses, starting at 1."""

    def __init__(self, decay: float = 0.99, initial: float = 1.0):
        self.decay = decay
        self.second_moment = initial**2

    @property
    def std(self) -> float:
        return float(np.sqrt(self.second_moment))

    def update(self, values) -> float:
        values = np.asarray(values, dtype=np.float64)
        if values.size:
            self.second_moment = self.decay * self.second_moment + (1 - self.decay) * float(np.mean(values**2))
        return self.std


@dataclass
class BackwardTables:
    """Per-episode tables; ``Qtilde`` is ``(K, A, T)``, the rest ``(K, T)`` or ``(T,)``."""

    Qtilde: np.ndarray
    B: np.ndarray
    Btilde: np.ndarray
    Atilde: np.ndarray
    M: np.ndarray


def compute_bonus_tables(episode: EpisodeRecord, net: BootstrappedNet, target_net: BootstrappedNet,
                         cfg: TrainerConfig, normalizer: RunningStd | None = None,
                         online_q: np.ndarray | None = None) -> BackwardTables:
    """Next-Q table from the target net plus the bonus, argmax and mask tables.

    ``B[t]`` is the head disagreement of the online net at ``(s_t, a_t)``.
    ``Btilde[k, t]`` is the target net's disagreement at ``(s_{t+1}, a')``
    with ``a'`` head k's target-net argmax, divided by the running std when a
    normalizer is given.  The last column of ``M`` is unused and left 0.
    """
    T = episode.T
    actions = episode.actions
    idx = np.arange(T)
    if online_q is None:
        online_q = forward_batch(net, episode.states)
    B = head_std(online_q[:, idx, actions], axis=0)
    target_q = forward_batch(target_net, episode.next_states)          # (K, T, A)
    Qtilde = np.ascontiguousarray(np.transpose(target_q, (0, 2, 1)))   # (K, A, T)
    Atilde = np.argmax(Qtilde, axis=1)                                  # (K, T)
    spread = head_std(target_q, axis=0)                                 # (T, A)
    Btilde = spread[idx[None, :], Atilde]
    if normalizer is not None:
        Btilde = Btilde / normalizer.update(Btilde)
    M = np.zeros_like(Atilde, dtype=np.float64)
    if T > 1:
        M[:, :-1] = (Atilde[:, :-1] != actions[None, 1:]).astype(np.float64)
    return BackwardTables(Qtilde, B, Btilde, Atilde, M)


@njit(cache=True)
def _backward_kernel(Q, y, immediate, actions, Btilde, Atilde, M, a2, beta, gamma, post):
    K, A, T = Q.shape
    for t in range(T - 2, -1, -1):
        a_next = actions[t + 1]
        for k in range(K):
            Q[k, a_next, t] = beta * y[k, t + 1] + (1.0 - beta) * Q[k, a_next, t]
            if post:
                best = 0
                for a in range(1, A):
                    if Q[k, a, t] > Q[k, best, t]:
                        best = a
                mask = 1.0 if best != a_next else 0.0
            else:
                best = Atilde[k, t]
                mask = M[k, t]
            y[k, t] = immediate[t] + gamma * (Q[k, best, t] + a2 * mask * Btilde[k, t])


def backward_targets(episode: EpisodeRecord, tables: BackwardTables, cfg: TrainerConfig) -> np.ndarray:
    """Targets ``y`` of shape ``(K, T)``, built from the last step backwards.

    Each step first mixes the freshly computed target of the following step
    into the next-Q table (weight ``beta``), then takes the per-head argmax
    of the updated column.  ``tables.Qtilde`` is not modified.  Variants
    other than OB2I ignore the bonus tables.
    """
    T = episode.T
    if T < 1:
        raise ContractViolation("episode must have at least one step")
    if cfg.uses_target_bonus:
        a1, a2 = cfg.alpha1, cfg.alpha2
    else:
        a1 = a2 = 0.0
    Q = np.array(tables.Qtilde, dtype=np.float64, order="C")
    K = Q.shape[0]
    immediate = np.asarray(episode.rewards, dtype=np.float64) + a1 * np.asarray(tables.B, dtype=np.float64)
    y = np.zeros((K, T))
    y[:, T - 1] = immediate[T - 1]
    _backward_kernel(Q, y, immediate, np.asarray(episode.actions, dtype=np.int64),
                     np.asarray(tables.Btilde, dtype=np.float64), np.asarray(tables.Atilde, dtype=np.int64),
                     np.asarray(tables.M, dtype=np.float64), float(a2), float(cfg.beta), float(cfg.gamma),
                     cfg.mask_mode == "post_diffusion")
    return y


# ---------------------------------------------------------------------------
# Action selection
# ---------------------------------------------------------------------------


def ucb_action(mean, std, lambda_ucb: float) -> int:
    return int(np.argmax(np.asarray(mean) + lambda_ucb * np.asarray(std)))


def ids_action(mean, std, lambda_ids: float, rho: float, eps_ids: float) -> int:
    """Argmin of squared conservative regret over information gain."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    upper = mean + lambda_ids * std
    lower = mean - lambda_ids * std
    regret = upper.max() - lower
    info = np.log1p(std**2 / rho**2) + eps_ids
    return int(np.argmin(regret**2 / info))


def select_action(variant: str, net: BootstrappedNet, state, epsilon: float, active_head: int, rng,
                  cfg: TrainerConfig | None = None) -> int:
    """Epsilon-greedy wrapper around the variant's action rule.

    One uniform draw decides exploration on every call, so generator
    consumption does not depend on the variant.
    """
    cfg = cfg or TrainerConfig(variant=variant)
    n_actions = net.n_actions
    if rng.random() < epsilon:
        return int(rng.integers(n_actions))
    q = forward_all(net, state)
    if variant in ("BEBU", "OB2I"):
        return int(np.argmax(q[active_head]))
    mean, std = q.mean(axis=0), head_std(q, axis=0)
    if variant == "BEBU_UCB":
        return ucb_action(mean, std, cfg.lambda_ucb)
    if variant == "BEBU_IDS":
        return ids_action(mean, std, cfg.lambda_ids, cfg.rho, cfg.eps_ids)
    raise ConfigError("variant", f"unknown variant {variant!r}")


def head_for_episode(rng, n_heads: int) -> int:
    return int(rng.integers(n_heads))


def epsilon_at(h: int, total: int, schedule: str = "quadratic") -> float:
    """Quadratic annealing from 1 at ``h = 0`` to 0 at ``h = total``."""
    if schedule == "zero" or total <= 0 or h >= total:
        return 0.0
    return ((h - total) / total) ** 2


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainStats:
    loss: float
    mean_batch_bonus: float


@dataclass
class Learner:
    """Online net, target net, optimizer state and bonus normalizer of one run."""

    net: BootstrappedNet
    target: BootstrappedNet
    adam: AdamState
    normalizer: RunningStd
    cfg: TrainerConfig

    @classmethod
    def create(cls, input_dim: int, n_actions: int, cfg: TrainerConfig, seed) -> "Learner":
        net = init_net(input_dim, cfg.trunk_widths, n_actions, cfg.n_heads, seed=seed)
        return cls(net, sync_target(net), AdamState.for_params(net.params, lr=cfg.lr),
                   RunningStd(cfg.bonus_norm_decay), cfg)


def train_step(learner: Learner, replay: EpisodicReplay, rng) -> TrainStats:
    """One gradient step on one uniformly sampled episode."""
    cfg = learner.cfg
    episode = replay.sample(rng)
    online_q = forward_batch(learner.net, episode.states)
    normalizer = learner.normalizer if cfg.uses_target_bonus else None
    tables = compute_bonus_tables(episode, learner.net, learner.target, cfg, normalizer, online_q=online_q)
    y = backward_targets(episode, tables, cfg)
    loss, grads = backprop_mse(learner.net, episode.states, episode.actions, y, clip_norm=cfg.grad_clip)
    adam_step(learner.net.params, grads, learner.adam)
    return TrainStats(loss, float(np.mean(tables.B)))


@dataclass
class TraceRow:
    frame: int
    episode_return: float | None = None
    mean_batch_bonus: float | None = None
    loss: float | None = None
    epsilon: float | None = None


TRACE_COLUMNS = ("frame", "episode_return", "mean_batch_bonus", "loss", "epsilon")


@dataclass
class TrainedAgent:
    net: BootstrappedNet
    cfg: TrainerConfig
    eval_mode: str = "variant"

    def episode_policy(self, rng):
        """Greedy policy for one episode; BEBU/OB2I follow a freshly sampled head."""
        variant = self.cfg.variant
        if self.eval_mode == "vote":
            def act(obs):
                votes = np.argmax(forward_all(self.net, obs), axis=1)
                return int(np.argmax(np.bincount(votes, minlength=self.net.n_actions)))
            return act
        head = head_for_episode(rng, self.net.n_heads)

        def act(obs):
            return select_action(variant, self.net, obs, 0.0, head, rng, self.cfg)
        return act


@dataclass
class TrainingResult:
    agent: TrainedAgent
    learner: Learner
    trace: list = field(default_factory=list)
    gradient_steps: int = 0
    episode_heads: list = field(default_factory=list)

    @property
    def bonus_trace(self):
        return [(r.frame, r.mean_batch_bonus) for r in self.trace if r.mean_batch_bonus is not None]

    @property
    def episode_returns(self):
        return [(r.frame, r.episode_return) for r in self.trace if r.episode_return is not None]


def run_training(env_factory, cfg: TrainerConfig, seed: int, record_heads: bool = False,
                 on_checkpoint=None, checkpoint_every: int = 0) -> TrainingResult:
    """Interact for ``cfg.total_frames`` frames, training every ``train_frequency`` frames.

    ``env_factory(rng)`` must return an environment with ``reset()``,
    ``step(action) -> (obs, reward, done, terminal)``, ``obs_dim`` and
    ``n_actions``.  A partial episode cut off at the frame budget is still
    stored, but no further training happens after it.

    ``on_checkpoint(frame, result)`` is called after every
    ``checkpoint_every`` frames (excluding the final frame); it must not
    touch the training random streams.
    """
    seeds = np.random.SeedSequence(seed).spawn(4)
    env = env_factory(np.random.default_rng(seeds[0]))
    learner = Learner.create(env.obs_dim, env.n_actions, cfg, int(seeds[1].generate_state(1)[0]))
    act_rng = np.random.default_rng(seeds[2])
    train_rng = np.random.default_rng(seeds[3])
    replay = EpisodicReplay(cfg.replay_capacity)
    result = TrainingResult(TrainedAgent(learner.net, cfg), learner)
    H = cfg.total_frames
    h = 0
    while h < H:
        head = head_for_episode(act_rng, cfg.n_heads)
        obs = env.reset()
        transitions = []
        ep_return = 0.0
        done = False
        while not done and h < H:
            eps = epsilon_at(h, H, cfg.epsilon_schedule)
            action = select_action(cfg.variant, learner.net, obs, eps, head, act_rng, cfg)
            next_obs, reward, done, terminal = env.step(action)
            transitions.append(Transition(obs, action, reward, next_obs, terminal))
            if record_heads:
                result.episode_heads.append((len(result.episode_returns), head))
            ep_return += reward
            obs = next_obs
            if h % cfg.train_frequency == 0 and h >= cfg.learning_starts and len(replay):
                stats = train_step(learner, replay, train_rng)
                result.gradient_steps += 1
                result.trace.append(TraceRow(h, mean_batch_bonus=stats.mean_batch_bonus,
                                             loss=stats.loss, epsilon=eps))
            if h % cfg.target_sync_period == 0:
                learner.target = sync_target(learner.net)
            h += 1
            if on_checkpoint is not None and checkpoint_every > 0 and h % checkpoint_every == 0 and h < H:
                on_checkpoint(h, result)
        replay.add(EpisodeRecord.from_transitions(transitions))
        result.trace.append(TraceRow(h, episode_return=ep_return, epsilon=epsilon_at(h, H, cfg.epsilon_schedule)))
    return result


def evaluate_relative_length(agent, spec: MazeSpec, episodes: int, rng, env_factory=None) -> float:
    """Mean of ``steps_to_goal / shortest_path_length`` over greedy episodes.

    ``agent.episode_policy(rng)`` supplies a fresh ``obs -> action`` policy
    each episode.  Episodes that time out count as ``spec.max_steps`` steps.
    """
    from .envs import MazeEnv

    best = shortest_path_length(spec)
    if best == 0:
        return 1.0
    env = env_factory(rng) if env_factory else MazeEnv(spec, rng)
    ratios = []
    for _ in range(episodes):
        policy = agent.episode_policy(rng)
        obs = env.reset()
        steps = 0
        done = terminal = False
        while not done:
            obs, _, done, terminal = env.step(policy(obs))
            steps += 1
        ratios.append((steps if terminal else spec.max_steps) / best)
    return float(np.mean(ratios))
