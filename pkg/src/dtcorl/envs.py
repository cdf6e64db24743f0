"""Toy environments with exact oracles: a 1D point mass, a 2D rotating linear system, tabular MDPs."""
from __future__ import annotations

import numpy as np

from .mdp import TabularMdp, cyclic_chain, exact_policy_iteration, two_state_chain


class ContinuousEnv:
    """Base class: states and actions are float vectors, actions bounded in [-1, 1]."""

    name = "continuous"
    state_dim = 1
    action_dim = 1
    discrete = False

    def __init__(self, horizon: int = 50, sigma: float = 0.0):
        if sigma < 0:
            raise ValueError("process noise scale must be >= 0")
        self.horizon = horizon
        self.sigma = sigma

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def mean_step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, s_next: np.ndarray) -> float:
        return -float(np.linalg.norm(s_next))

    def step(self, s, a, rng: np.random.Generator | None = None):
        a = np.clip(np.asarray(a, dtype=float).reshape(self.action_dim), -1.0, 1.0)
        s_next = self.mean_step(np.asarray(s, dtype=float), a)
        if self.sigma > 0:
            if rng is None:
                raise ValueError("a noisy environment needs an rng")
            s_next = s_next + self.sigma * rng.standard_normal(self.state_dim)
        return s_next, self.reward(s_next)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.action_dim)

    def expert_action(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"env": self.name, "horizon": self.horizon, "sigma": self.sigma}


class PointMass1D(ContinuousEnv):
    """s' = s + 0.1 a + noise; reward -|s'|; the target is the origin."""

    name = "pointmass1d"

    def reset(self, rng):
        return rng.uniform(-1.0, 1.0, size=1)

    def mean_step(self, s, a):
        return s + 0.1 * a

    def expert_action(self, s):
        return np.clip(-10.0 * np.asarray(s, dtype=float), -1.0, 1.0)


class LinearRotation2D(ContinuousEnv):
    """s' = rho R(theta) s + 0.1 a + noise; reward -||s'||."""

    name = "rotation2d"
    state_dim = 2
    action_dim = 2

    def __init__(self, horizon: int = 50, sigma: float = 0.0, theta: float = 0.3, rho: float = 1.0):
        super().__init__(horizon, sigma)
        c, s = np.cos(theta), np.sin(theta)
        self.A = rho * np.array([[c, -s], [s, c]])
        self.theta, self.rho = theta, rho

    def reset(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def mean_step(self, s, a):
        return self.A @ s + 0.1 * a

    def expert_action(self, s):
        return np.clip(-10.0 * (self.A @ np.asarray(s, dtype=float)), -1.0, 1.0)

    def describe(self):
        return {**super().describe(), "theta": self.theta, "rho": self.rho}


class TabularEnv:
    """Sampling wrapper around a TabularMdp; states and actions are integer ids."""

    discrete = True
    state_dim = 1
    action_dim = 1

    def __init__(self, mdp: TabularMdp, name: str = "tabular", horizon: int | None = None):
        self.mdp = mdp
        self.name = name
        self.horizon = horizon or mdp.horizon
        self._expert = None

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self, rng):
        return int(rng.choice(self.mdp.n_states, p=self.mdp.rho0))

    def step(self, s, a, rng=None):
        s, a = int(s), int(a)
        row = self.mdp.transition[s, a]
        if rng is None:
            if not np.isclose(row.max(), 1.0):
                raise ValueError("a stochastic MDP needs an rng")
            s_next = int(np.argmax(row))
        else:
            s_next = int(rng.choice(self.mdp.n_states, p=row))
        return s_next, float(self.mdp.reward[s, a])

    def mean_step(self, s, a):
        return self.step(s, a, None)[0]

    def random_action(self, rng):
        return int(rng.integers(self.mdp.n_actions))

    def expert_action(self, s):
        if self._expert is None:
            pol, _ = exact_policy_iteration(self.mdp)
            self._expert = np.argmax(pol.probs, axis=1)
        return int(self._expert[int(s)])

    def describe(self):
        return {"env": self.name, "horizon": self.horizon}


def make_env(env_id: str, sigma: float = 0.05, horizon: int = 50):
    if env_id == "pointmass1d":
        return PointMass1D(horizon=horizon, sigma=sigma)
    if env_id == "rotation2d":
        return LinearRotation2D(horizon=horizon, sigma=sigma)
    if env_id == "chain2":
        return TabularEnv(two_state_chain(p_flip=0.8), "chain2", horizon)
    if env_id.startswith("cyclic"):
        n = int(env_id[len("cyclic"):] or 8)
        return TabularEnv(cyclic_chain(n), env_id, horizon)
    raise ValueError(f"unknown env id {env_id!r}")
