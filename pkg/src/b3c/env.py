"""Cooperative navigation: N agents must cover N landmarks without colliding.

Positions live in the box ``[-w, w]^2``. Dynamics are first order
(``p <- clip(p + step_size * clip(a, -1, 1))``) and all agents share one team
reward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ENV_ID = "coop-nav-v0"
ACT_DIM = 2


def episode_seeds(seed: int, n: int) -> list[int]:
    """Per-episode reset seeds derived from one run seed."""
    return [int(s) for s in np.random.SeedSequence(seed).spawn(2)[0].generate_state(n, dtype=np.uint32)]


class EpisodeDoneError(RuntimeError):
    """``step`` was called on a finished episode."""


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 3
    arena_half_width: float = 1.0
    episode_len: int = 25
    step_size: float = 0.1
    collision_radius: float = 0.2
    collision_penalty: float = 1.0
    obs_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if self.obs_k is not None and not 0 <= self.obs_k < self.n_agents:
            raise ValueError(f"obs_k must be in [0, n_agents), got {self.obs_k}")
        if self.arena_half_width <= 0 or self.step_size <= 0:
            raise ValueError("arena_half_width and step_size must be positive")

    @property
    def visible(self) -> int:
        return self.n_agents - 1 if self.obs_k is None else self.obs_k

    @property
    def obs_dim(self) -> int:
        return 2 + 2 * self.visible + 2 * self.n_agents

    @property
    def state_dim(self) -> int:
        return 4 * self.n_agents

    @property
    def act_dim(self) -> int:
        return ACT_DIM

    def reward_lower_bound(self) -> float:
        n = self.n_agents
        return -(n * 2.0 * np.sqrt(2.0) * self.arena_half_width) - self.collision_penalty * n * (n - 1) / 2


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    landmark_pos: np.ndarray
    t: int = 0


class CooperativeNavigation:
    env_id = ENV_ID

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def act_dim(self) -> int:
        return ACT_DIM

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    def reset(self, episode_seed) -> tuple[EnvState, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(episode_seed)
        w = cfg.arena_half_width
        agents = rng.uniform(-w, w, size=(cfg.n_agents, 2))
        landmarks = rng.uniform(-w, w, size=(cfg.n_agents, 2))
        state = EnvState(agents, landmarks, 0)
        return state, self.observe(state)

    def step(self, state: EnvState, actions) -> tuple[EnvState, np.ndarray, float, bool]:
        cfg = self.config
        if state.t >= cfg.episode_len:
            raise EpisodeDoneError(f"step called at t={state.t} after episode end ({cfg.episode_len})")
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(cfg.n_agents, ACT_DIM), -1.0, 1.0)
        w = cfg.arena_half_width
        pos = np.clip(state.agent_pos + cfg.step_size * a, -w, w)
        nxt = EnvState(pos, state.landmark_pos, state.t + 1)
        return nxt, self.observe(nxt), self.reward(nxt), nxt.t == cfg.episode_len

    def reward(self, state: EnvState) -> float:
        """Team reward of the configuration reached after a step."""
        cfg = self.config
        diff = state.agent_pos[:, None, :] - state.landmark_pos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))  # [agent, landmark]
        coverage = dist.min(axis=0).sum()
        collisions = 0
        for i in range(cfg.n_agents):
            for j in range(i + 1, cfg.n_agents):
                if np.linalg.norm(state.agent_pos[i] - state.agent_pos[j]) < cfg.collision_radius:
                    collisions += 1
        return float(-coverage - cfg.collision_penalty * collisions)

    def observe(self, state: EnvState) -> np.ndarray:
        """Per-agent observations, shape (n_agents, obs_dim)."""
        cfg = self.config
        n, k = cfg.n_agents, cfg.visible
        out = np.empty((n, cfg.obs_dim))
        pos = state.agent_pos
        for i in range(n):
            rel = pos - pos[i]
            d = (rel**2).sum(-1)
            others = [j for j in range(n) if j != i]
            # stable sort keeps index order among equal distances
            order = sorted(others, key=lambda j: d[j])[:k]
            out[i, :2] = pos[i]
            out[i, 2 : 2 + 2 * k] = rel[order].reshape(-1)
            out[i, 2 + 2 * k :] = (state.landmark_pos - pos[i]).reshape(-1)
        return out

    def global_state_vector(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.agent_pos.reshape(-1), state.landmark_pos.reshape(-1)])

    def state_from_vector(self, vec, t: int = 0) -> EnvState:
        n = self.config.n_agents
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (4 * n,):
            raise ValueError(f"state vector must have length {4 * n}")
        return EnvState(vec[: 2 * n].reshape(n, 2).copy(), vec[2 * n :].reshape(n, 2).copy(), t)

    def with_config(self, **changes) -> "CooperativeNavigation":
        return CooperativeNavigation(replace(self.config, **changes))
