"""Offline (B3C / BC) and online (FACMAC) training loops, plus evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..dataset import (
    Batch,
    DatasetMeta,
    Episode,
    IncompatibleDatasetError,
    OfflineDataset,
    fingerprint,
    max_episode_return,
    sample_batch,
)
from ..env import CooperativeNavigation, EnvConfig, episode_seeds
from ..metrics import MetricsLog, MetricsRecord
from .core import (
    DivergenceError,
    TrainState,
    build_critics,
    check_clip_bound,
    compute_r_star,
    critic_update,
    facmac_policy_update_online,
    policy_update_b3c,
    td_target,
)
from .networks import MIXERS, PolicySet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    algorithm: str = "b3c"  # b3c | bc (bc never clips)
    alpha: float = 1.0
    beta: float = 1.0
    clip_scale: float = 1.0  # M; inf disables clipping
    clip_operator: str = "min"
    normalize_q: bool = True
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    critic_kind: str = "factored"
    mixer: str = "nonmono"
    twin_critics: bool = False
    policy_delay: int = 1
    target_noise_std: float = 0.0
    target_noise_clip: float = 0.5
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden_width: int = 64
    hidden_layers: int = 2
    mixer_embed: int = 32
    total_steps: int = 50_000
    eval_every: int = 1_000
    eval_episodes: int = 10
    final_eval_episodes: int = 100
    divergence_factor: float = 100.0
    # online (dataset-generation) trainer; it uses its own mixer and critic lr
    online_mixer: str = "vdn"
    online_critic_lr: float = 1e-3
    online_steps: int = 100_000
    buffer_capacity: int = 100_000
    exploration_std: float = 0.1
    start_steps: int = 1_000
    checkpoint_every: int = 5_000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.algorithm in ("b3c", "bc"), "algorithm must be b3c or bc"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.clip_scale > 0, "clip_scale (M) must be > 0"),
            (self.clip_operator in ("min", "max"), "clip_operator must be min or max"),
            (0 <= self.gamma < 1, "gamma must lie in [0, 1)"),
            (0 < self.tau <= 1, "tau must lie in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.critic_kind in ("factored", "joint"), "critic_kind must be factored or joint"),
            (self.mixer in MIXERS, f"mixer must be one of {MIXERS}"),
            (self.online_mixer in MIXERS, f"online_mixer must be one of {MIXERS}"),
            (self.policy_delay >= 1, "policy_delay must be >= 1"),
            (self.target_noise_std >= 0 and self.target_noise_clip >= 0, "target noise must be >= 0"),
            (min(self.actor_lr, self.critic_lr, self.online_critic_lr) > 0, "learning rates must be > 0"),
            (self.hidden_width >= 1 and self.hidden_layers >= 1, "network size must be >= 1"),
            (self.total_steps >= 0 and self.online_steps >= 0, "step counts must be >= 0"),
            (self.eval_every >= 1 and self.checkpoint_every >= 1, "eval/checkpoint intervals must be >= 1"),
            (self.eval_episodes >= 1 and self.final_eval_episodes >= 1, "evaluation episodes must be >= 1"),
            (self.buffer_capacity >= 1, "buffer_capacity must be >= 1"),
            (self.exploration_std >= 0, "exploration_std must be >= 0"),
            (self.divergence_factor > 0, "divergence_factor must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def hidden(self) -> tuple:
        return (self.hidden_width,) * self.hidden_layers

    @classmethod
    def ma_td3(cls, **overrides) -> "TrainConfig":
        """Non-factored twin-critic preset with TD3 smoothing and delayed actor."""
        base = dict(critic_kind="joint", twin_critics=True, policy_delay=2,
                    target_noise_std=0.2, target_noise_clip=0.5)
        base.update(overrides)
        return cls(**base)

    def field_names(self) -> list[str]:
        return [f.name for f in fields(self)]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batch", "noise", "explore")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _eval_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1)[0])


def init_state(n_agents: int, obs_dim: int, act_dim: int, state_dim: int, config: TrainConfig,
               rng: np.random.Generator) -> TrainState:
    policies = PolicySet(n_agents, obs_dim, act_dim, config.hidden, rng=rng)
    critics = build_critics(config.critic_kind, n_agents, obs_dim, act_dim, state_dim, config.mixer,
                            config.twin_critics, config.hidden, config.mixer_embed, rng)
    return TrainState.create(policies, critics, config.actor_lr, config.critic_lr)


def evaluate_policy(policies: PolicySet, env_config: EnvConfig, n_episodes: int, seed: int):
    """Noise-free rollouts; returns (mean undiscounted return, per-episode returns)."""
    env = CooperativeNavigation(env_config)
    if policies.n_agents != env.n_agents or policies.obs_dim != env.obs_dim:
        raise IncompatibleDatasetError("policy dims do not match the evaluation env")
    states, obs = zip(*(env.reset(s) for s in episode_seeds(seed, n_episodes)))
    states, obs = list(states), np.stack(obs)
    returns = np.zeros(n_episodes)
    for _ in range(env_config.episode_len):
        act = policies.act(obs)
        for e in range(n_episodes):
            states[e], obs[e], r, _ = env.step(states[e], act[e])
            returns[e] += r
    return float(returns.mean()), returns


@dataclass
class _Window:
    critic_loss: list = field(default_factory=list)
    target_sum: float = 0.0
    target_n: int = 0
    target_max: float = -math.inf
    clipped: int = 0
    live: int = 0
    terms: object = None

    def add(self, info, live: int) -> None:
        self.target_sum += float(info.y.sum())
        self.target_n += len(info.y)
        self.target_max = max(self.target_max, float(info.y.max()))
        self.clipped += int(info.clipped.sum())
        self.live += live


def _record(step, ret, win: _Window, diverged_at=None) -> MetricsRecord:
    t = win.terms
    return MetricsRecord(
        step=step,
        eval_return=ret,
        critic_loss=float(np.mean(win.critic_loss)) if win.critic_loss else math.nan,
        policy_loss_rl=t.rl_term if t is not None else math.nan,
        policy_loss_bc=t.bc_term if t is not None else math.nan,
        w=t.w if t is not None else math.nan,
        target_q_mean=win.target_sum / win.target_n if win.target_n else math.nan,
        target_q_max=win.target_max if win.target_n else math.nan,
        clip_active_fraction=win.clipped / win.live if win.live else 0.0,
        diverged_at=diverged_at,
    )


def _check_dims(meta: DatasetMeta, env_config: EnvConfig) -> None:
    env = CooperativeNavigation(env_config)
    want = (env.env_id, env.n_agents, env.obs_dim, env.act_dim, env.state_dim)
    if meta.dims() != want:
        raise IncompatibleDatasetError(f"dataset dims {meta.dims()} do not match env config {want}")


@dataclass
class OfflineResult:
    policies: PolicySet
    metrics: MetricsLog
    state: TrainState
    r_star: float | None
    divergence_threshold: float


def train_offline(dataset: OfflineDataset, config: TrainConfig, env_config: EnvConfig = EnvConfig(),
                  batch_hook=None) -> OfflineResult:
    """Offline actor-critic training with BC regularization and (for b3c) critic clipping.

    ``batch_hook(batch, target_info, state)`` is called after every target
    computation; tests use it to audit targets.
    """
    _check_dims(dataset.meta, env_config)
    rngs = _streams(config.seed)
    m = dataset.meta
    state = init_state(m.n_agents, m.obs_dim, m.act_dim, m.state_dim, config, rngs["init"])
    r_star = compute_r_star(dataset, config.clip_scale) if config.algorithm == "b3c" else None
    state.r_star = math.inf if r_star is None else r_star
    threshold = config.divergence_factor * max(1.0, abs(max_episode_return(dataset)))
    eval_seed = _eval_seed(config.seed)
    metrics = MetricsLog(meta={"algorithm": config.algorithm, "r_star": state.r_star,
                               "divergence_threshold": threshold, "dataset": m.tag,
                               "dataset_crc": fingerprint(dataset), "env": repr(env_config),
                               "seed": config.seed})
    win = _Window()
    for step in range(1, config.total_steps + 1):
        state.step = step
        batch = sample_batch(dataset, config.batch_size, rngs["batch"])
        try:
            info = td_target(batch, state.target_policies, state.target_critics, config.gamma, r_star,
                             config.clip_operator, config.target_noise_std, config.target_noise_clip, rngs["noise"])
        except DivergenceError:
            _halt(metrics, state, win, step, env_config, config, eval_seed)
            break
        if r_star is not None and config.clip_operator == "min" and math.isfinite(r_star):
            check_clip_bound(batch, info.y, config.gamma, r_star)
            state.clip_checks += 1
        if batch_hook is not None:
            batch_hook(batch, info, state)
        win.add(info, int(np.count_nonzero(batch.done < 0.5)))
        if float(np.max(np.abs(info.y))) > threshold:
            _halt(metrics, state, win, step, env_config, config, eval_seed)
            break
        try:
            cstep = critic_update(state, batch, info.y)
            win.critic_loss.append(cstep.loss)
            if step % config.policy_delay == 0:
                win.terms = policy_update_b3c(state, batch, config.alpha, config.beta, config.normalize_q,
                                              cstep.q_data)
                state.blend_targets(config.tau)
        except (DivergenceError, FloatingPointError):
            _halt(metrics, state, win, step, env_config, config, eval_seed)
            break
        if step % config.eval_every == 0 or step == config.total_steps:
            n_eval = config.final_eval_episodes if step == config.total_steps else config.eval_episodes
            ret, _ = evaluate_policy(state.policies, env_config, n_eval, eval_seed)
            metrics.append(_record(step, ret, win))
            win = _Window()
    return OfflineResult(state.policies, metrics, state, r_star, threshold)


def _halt(metrics, state, win, step, env_config, config, eval_seed) -> None:
    log.warning("run diverged at step %d; halting", step)
    with np.errstate(all="ignore"):
        try:
            ret, _ = evaluate_policy(state.policies, env_config, config.final_eval_episodes, eval_seed)
        except FloatingPointError:
            ret = math.nan
    metrics.append(_record(step, ret, win, diverged_at=step))


class ReplayBuffer:
    """FIFO transition store; the oldest entries are overwritten first."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, act_dim: int, state_dim: int):
        self.capacity = capacity
        self.size = 0
        self.ptr = 0
        self.inserted = 0
        self.state = np.zeros((capacity, state_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents, act_dim))
        self.reward = np.zeros(capacity)
        self.next_state = np.zeros((capacity, state_dim))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.done = np.zeros(capacity)
        self.order = np.zeros(capacity, dtype=np.int64)  # insertion index of each slot

    def __len__(self) -> int:
        return self.size

    def add(self, state, obs, actions, reward, next_state, next_obs, done) -> None:
        i = self.ptr
        self.state[i], self.obs[i], self.actions[i] = state, obs, actions
        self.reward[i], self.next_state[i], self.next_obs[i] = reward, next_state, next_obs
        self.done[i] = float(done)
        self.order[i] = self.inserted
        self.inserted += 1
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.state[idx], self.obs[idx], self.actions[idx], self.reward[idx],
                     self.next_state[idx], self.next_obs[idx], self.done[idx])


@dataclass
class Checkpoint:
    step: int
    policies: PolicySet
    eval_return: float


@dataclass
class OnlineResult:
    policies: PolicySet
    buffer: ReplayBuffer
    checkpoints: list[Checkpoint]
    history: OfflineDataset  # every completed episode, in collection order
    metrics: MetricsLog


def train_online(env_config: EnvConfig, config: TrainConfig) -> OnlineResult:
    """Online FACMAC: explore with Gaussian noise, learn from a FIFO replay buffer.

    The first ``start_steps`` environment steps use uniform random actions.
    One critic update (and, every ``policy_delay`` updates, one actor update)
    follows each environment step once the buffer holds a full batch.

    The critic is built with ``online_mixer`` and trained at
    ``online_critic_lr``. A nonmonotonic mixer fed by the agent's own
    replay data tends to overestimate without bound here, while vdn stays
    calibrated.
    """
    config = replace(config, mixer=config.online_mixer, critic_lr=config.online_critic_lr)
    env = CooperativeNavigation(env_config)
    n, O, A, S = env.n_agents, env.obs_dim, env.act_dim, env.state_dim
    rngs = _streams(config.seed)
    state = init_state(n, O, A, S, config, rngs["init"])
    buf = ReplayBuffer(config.buffer_capacity, n, O, A, S)
    eval_seed = _eval_seed(config.seed)
    checkpoints: list[Checkpoint] = []
    episodes: list[Episode] = []
    metrics = MetricsLog(meta={"algorithm": "facmac-online"})
    win = _Window()

    ep_counter = 0
    T = env_config.episode_len
    cur = None
    for step in range(1, config.online_steps + 1):
        if cur is None:
            env_state, obs = env.reset(int(rngs["explore"].integers(0, 2**32)))
            cur = {k: [] for k in ("states", "obs", "actions", "rewards", "next_states", "next_obs")}
        if step <= config.start_steps:
            act = rngs["explore"].uniform(-1.0, 1.0, size=(n, A))
        else:
            act = state.policies.act(obs)
            if config.exploration_std > 0:
                act = act + rngs["explore"].normal(0.0, config.exploration_std, size=act.shape)
            act = np.clip(act, -1.0, 1.0)
        s_vec = env.global_state_vector(env_state)
        env_state, obs2, r, done = env.step(env_state, act)
        s2_vec = env.global_state_vector(env_state)
        buf.add(s_vec, obs, act, r, s2_vec, obs2, done)
        for k, v in zip(cur, (s_vec, obs, act, r, s2_vec, obs2)):
            cur[k].append(v)
        obs = obs2
        if done:
            dones = np.zeros(T, dtype=bool)
            dones[-1] = True
            episodes.append(Episode(**{k: np.asarray(v) for k, v in cur.items()}, dones=dones))
            ep_counter += 1
            cur = None

        if len(buf) >= config.batch_size and step > min(config.start_steps, config.online_steps):
            state.step += 1
            batch = buf.sample(config.batch_size, rngs["batch"])
            info = td_target(batch, state.target_policies, state.target_critics, config.gamma, None,
                             noise_std=config.target_noise_std, noise_clip=config.target_noise_clip,
                             rng=rngs["noise"])
            win.add(info, int(np.count_nonzero(batch.done < 0.5)))
            win.critic_loss.append(critic_update(state, batch, info.y).loss)
            if state.step % config.policy_delay == 0:
                win.terms = facmac_policy_update_online(state, batch)
                state.blend_targets(config.tau)

        if step % config.checkpoint_every == 0 or step == config.online_steps:
            ret, _ = evaluate_policy(state.policies, env_config, config.eval_episodes, eval_seed)
            checkpoints.append(Checkpoint(step, state.policies.copy(), ret))
            metrics.append(_record(step, ret, win))
            win = _Window()
            log.info("online step %d: eval return %.3f", step, ret)

    meta = DatasetMeta(env.env_id, n, O, A, S, "online-history", config.seed)
    return OnlineResult(state.policies, buf, checkpoints, OfflineDataset(meta, episodes), metrics)
