"""Exact LSVI-UCB on finite-horizon linear MDPs.

The Gram matrix of every step is rebuilt from all stored episodes after each
episode, so the value functions are exactly the batch ridge solutions rather
than an incremental approximation.  ``posterior_variance_oracle`` samples
the Bayesian linear-regression posterior to check numerically that the
spread of ``phi . w`` equals the linear UCB bonus.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import DimensionError, InvalidInputError
from .envs import LinearMdpSpec, linear_mdp_step, optimal_values
from .linalg import quad_form, rank1_inverse_update, ridge_solve, spd_inverse


@dataclass(frozen=True)
class GramState:
    step: int
    Lambda: np.ndarray
    Lambda_inv: np.ndarray
    w: np.ndarray
    lambda_reg: float
    alpha: float
    horizon: int

    @classmethod
    def fresh(cls, d: int, lambda_reg: float = 1.0, alpha: float = 1.0, horizon: int = 1, step: int = 0):
        return cls(step, lambda_reg * np.eye(d), np.eye(d) / lambda_reg, np.zeros(d),
                   lambda_reg, alpha, horizon)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def observe(self, phi) -> "GramState":
        """Add one feature to the Gram matrix, keeping ``w`` fixed."""
        phi = np.asarray(phi, dtype=np.float64)
        return replace(self, Lambda=self.Lambda + np.outer(phi, phi),
                       Lambda_inv=rank1_inverse_update(self.Lambda_inv, phi))


@dataclass
class EpisodeHistory:
    """Arrays of shape ``(m, T, d)``, ``(m, T)`` and ``(m, T, A, d)``."""

    phis: np.ndarray
    rewards: np.ndarray
    next_phis: np.ndarray

    def __post_init__(self):
        self.phis = np.asarray(self.phis, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_phis = np.asarray(self.next_phis, dtype=np.float64)
        m, T, d = self.phis.shape
        if self.rewards.shape != (m, T) or self.next_phis.shape[:2] != (m, T) or self.next_phis.shape[3] != d:
            raise DimensionError("episode history arrays have inconsistent shapes")
        if not (np.all(np.isfinite(self.phis)) and np.all(np.isfinite(self.next_phis))):
            raise InvalidInputError("features must be finite")

    @classmethod
    def empty(cls, T: int, n_actions: int, d: int) -> "EpisodeHistory":
        return cls(np.zeros((0, T, d)), np.zeros((0, T)), np.zeros((0, T, n_actions, d)))

    @property
    def n_episodes(self) -> int:
        return self.phis.shape[0]

    def append(self, phis, rewards, next_phis) -> "EpisodeHistory":
        return EpisodeHistory(np.concatenate([self.phis, np.asarray(phis)[None]]),
                              np.concatenate([self.rewards, np.asarray(rewards)[None]]),
                              np.concatenate([self.next_phis, np.asarray(next_phis)[None]]))


def ucb_bonus_linear(state: GramState, phi) -> float:
    return float(np.sqrt(quad_form(state.Lambda_inv, phi)))


def q_value(state: GramState, phi) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (state.dim,):
        raise DimensionError(f"phi has shape {phi.shape}, expected ({state.dim},)")
    return min(float(state.w @ phi) + state.alpha * ucb_bonus_linear(state, phi), float(state.horizon))


def _q_values_batch(state: GramState, phis: np.ndarray) -> np.ndarray:
    """Vectorized ``q_value`` over the leading axes of ``phis``."""
    quad = np.einsum("...i,ij,...j->...", phis, state.Lambda_inv, phis)
    bonus = np.sqrt(np.clip(quad, 0.0, None))
    return np.minimum(phis @ state.w + state.alpha * bonus, float(state.horizon))


def lsvi_backward_pass(history: EpisodeHistory, lambda_reg: float, alpha: float, horizon: int) -> list:
    """Recompute every step's ridge fit from scratch, last step first.

    Returns the states indexed by step, ``states[t]`` for ``t = 0..T-1``.
    """
    if not lambda_reg > 0:
        raise InvalidInputError("lambda_reg must be positive")
    m, T, d = history.phis.shape
    if T != horizon:
        raise DimensionError(f"history has {T} steps, horizon is {horizon}")
    states: list = [None] * T
    next_values = np.zeros(m)  # Q_T == 0
    for t in range(T - 1, -1, -1):
        Phi = history.phis[:, t, :]
        Lambda = Phi.T @ Phi + lambda_reg * np.eye(d)
        targets = history.rewards[:, t] + next_values
        w = ridge_solve(Phi, targets, lambda_reg)
        states[t] = GramState(t, Lambda, spd_inverse(Lambda), w, lambda_reg, alpha, horizon)
        if t > 0:
            next_values = _q_values_batch(states[t], history.next_phis[:, t - 1]).max(axis=-1)
    return states


def greedy_action(states, t: int, action_features) -> int:
    """Argmax of ``q_value`` over the rows of ``action_features``; lowest index wins ties."""
    values = [q_value(states[t], phi) for phi in np.asarray(action_features)]
    return int(np.argmax(values))


@dataclass
class LsviRun:
    states: list
    history: EpisodeHistory
    returns: np.ndarray
    regrets: np.ndarray


def run_lsvi_ucb(spec: LinearMdpSpec, n_episodes: int, lambda_reg: float = 1.0, alpha: float = 1.0,
                 rng=None) -> LsviRun:
    """Interact with ``spec`` for ``n_episodes`` episodes, refitting after each one."""
    rng = rng if rng is not None else np.random.default_rng()
    T, A, d = spec.horizon, spec.n_actions, spec.feature_dim
    history = EpisodeHistory.empty(T, A, d)
    states = lsvi_backward_pass(history, lambda_reg, alpha, T)
    v_star = optimal_values(spec)[1][0, spec.initial_state]
    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        s = spec.initial_state
        phis, rewards, next_phis = np.zeros((T, d)), np.zeros(T), np.zeros((T, A, d))
        for t in range(T):
            a = greedy_action(states, t, spec.features[s])
            s_next, r = linear_mdp_step(spec, s, a, rng)
            phis[t], rewards[t], next_phis[t] = spec.phi(s, a), r, spec.features[s_next]
            s = s_next
        history = history.append(phis, rewards, next_phis)
        states = lsvi_backward_pass(history, lambda_reg, alpha, T)
        returns[ep] = rewards.sum()
    return LsviRun(states, history, returns, v_star - returns)


def greedy_policy(states, spec: LinearMdpSpec) -> np.ndarray:
    """Greedy action table of shape ``(T, n_states)``."""
    return np.array([[greedy_action(states, t, spec.features[s]) for s in range(spec.n_states)]
                     for t in range(spec.horizon)])


# ---------------------------------------------------------------------------
# Posterior-variance oracle
# ---------------------------------------------------------------------------


def _batched_ridge(Phi, targets, lambda_reg, weights=None, prior_means=None):
    """Solve many ridge problems sharing ``Phi``.

    ``targets`` is ``(n, m)``; ``weights`` (row multiplicities, ``(n, m)``)
    and ``prior_means`` (``(n, d)``) are optional.
    """
    m, d = Phi.shape
    n = targets.shape[0]
    eye = lambda_reg * np.eye(d)
    if weights is None:
        gram = np.broadcast_to(Phi.T @ Phi + eye, (n, d, d))
        rhs = targets @ Phi
    else:
        outer = np.einsum("mi,mj->mij", Phi, Phi).reshape(m, d * d)
        gram = (weights @ outer).reshape(n, d, d) + eye
        rhs = (weights * targets) @ Phi
    if prior_means is not None:
        rhs = rhs + lambda_reg * prior_means
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def posterior_variance_oracle(Phi, targets, lambda_reg: float, phi, n_samples: int, rng,
                              mode: str = "gaussian", chunk: int = 20_000):
    """Return ``(closed_form, monte_carlo)`` variances of ``phi . w``.

    ``closed_form`` is ``phi^T Lambda^-1 phi`` with ``Lambda = lambda I + Phi^T Phi``.
    ``monte_carlo`` is the sample variance of ``phi . w`` over ``n_samples``
    draws, where the draws come from

    * ``"gaussian"``: ``w ~ N(mu, Lambda^-1)`` sampled directly;
    * ``"perturbed"``: ridge refits on targets with added ``N(0, 1)`` noise
      and a prior mean drawn from ``N(0, I / lambda)``; these are exact
      posterior samples that never form ``Lambda^-1``;
    * ``"bootstrap"``: ridge refits on the fitted values plus residuals
      resampled with replacement;
    * ``"pairs"``: ridge refits on ``(phi_i, y_i)`` rows resampled with
      replacement.

    The two bootstrap modes only approximate the posterior, and only when the
    data noise has unit variance and ``m`` is large.
    """
    Phi = np.asarray(Phi, dtype=np.float64).reshape(-1, np.asarray(phi).shape[0])
    targets = np.asarray(targets, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    m, d = Phi.shape
    if targets.shape != (m,):
        raise DimensionError(f"targets has shape {targets.shape}, expected ({m},)")
    if not lambda_reg > 0:
        raise InvalidInputError("lambda_reg must be positive")
    if n_samples < 2:
        raise InvalidInputError("n_samples must be at least 2")
    Lambda = Phi.T @ Phi + lambda_reg * np.eye(d)
    Lambda_inv = spd_inverse(Lambda)
    closed_form = quad_form(Lambda_inv, phi)
    if not np.any(phi):
        return closed_form, 0.0

    values = []
    remaining = n_samples
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        if mode == "gaussian":
            mu = Lambda_inv @ Phi.T @ targets
            w = rng.multivariate_normal(mu, Lambda_inv, size=n, method="eigh")
        elif mode == "perturbed":
            noisy = targets[None, :] + rng.standard_normal((n, m))
            prior = rng.standard_normal((n, d)) / np.sqrt(lambda_reg)
            w = _batched_ridge(Phi, noisy, lambda_reg, prior_means=prior)
        elif mode == "bootstrap":
            if m == 0:
                raise InvalidInputError("bootstrap mode needs data")
            fitted = Phi @ (Lambda_inv @ Phi.T @ targets)
            resid = targets - fitted
            resampled = resid[rng.integers(0, m, size=(n, m))]
            w = _batched_ridge(Phi, fitted[None, :] + resampled, lambda_reg)
        elif mode == "pairs":
            if m == 0:
                raise InvalidInputError("pairs mode needs data")
            counts = rng.multinomial(m, np.full(m, 1.0 / m), size=n).astype(np.float64)
            w = _batched_ridge(Phi, np.broadcast_to(targets, (n, m)), lambda_reg, weights=counts)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        values.append(w @ phi)
    values = np.concatenate(values)
    return closed_form, float(np.var(values, ddof=1))
