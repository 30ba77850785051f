"""Offline datasets: episodic storage, statistics, mixtures, sampling, file format."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .env import CooperativeNavigation, EnvConfig, episode_seeds

log = logging.getLogger(__name__)

MAGIC = b"B3CD"
FORMAT_VERSION = 1
TIERS = ("expert", "medium", "medium-replay", "random", "mixture")


class DatasetError(ValueError):
    pass


class IncompatibleDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    done: bool


@dataclass
class Episode:
    """One episode stored column-wise; every array has a leading time axis.

    Values are held in float32, the on-disk precision, so that a save/load
    round trip is exact.
    """

    states: np.ndarray  # (T, S)
    obs: np.ndarray  # (T, N, O)
    actions: np.ndarray  # (T, N, A)
    rewards: np.ndarray  # (T,)
    next_states: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray  # (T,) bool

    def __post_init__(self):
        for name in ("states", "obs", "actions", "rewards", "next_states", "next_obs"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        self.dones = np.ascontiguousarray(self.dones, dtype=bool)
        if not np.all(np.isfinite(self.rewards)):
            raise DatasetError("episode contains non-finite rewards")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards, dtype=np.float64))

    def transition(self, t: int) -> Transition:
        return Transition(
            self.states[t], self.obs[t], self.actions[t], float(self.rewards[t]),
            self.next_states[t], self.next_obs[t], bool(self.dones[t]),
        )

    @property
    def transitions(self) -> list[Transition]:
        return [self.transition(t) for t in range(len(self))]


@dataclass(frozen=True)
class DatasetMeta:
    env_id: str
    n_agents: int
    obs_dim: int
    act_dim: int
    state_dim: int
    tag: str
    seed: int = 0

    def dims(self) -> tuple:
        return (self.env_id, self.n_agents, self.obs_dim, self.act_dim, self.state_dim)


@dataclass
class Batch:
    state: np.ndarray  # (B, S)
    obs: np.ndarray  # (B, N, O)
    actions: np.ndarray  # (B, N, A)
    reward: np.ndarray  # (B,)
    next_state: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray  # (B,) float, 1.0 on terminal

    def __len__(self) -> int:
        return len(self.reward)


@dataclass
class OfflineDataset:
    meta: DatasetMeta
    episodes: list[Episode]
    _flat: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        m = self.meta
        for k, ep in enumerate(self.episodes):
            if (
                ep.states.shape[1:] != (m.state_dim,)
                or ep.obs.shape[1:] != (m.n_agents, m.obs_dim)
                or ep.actions.shape[1:] != (m.n_agents, m.act_dim)
                or ep.next_states.shape[1:] != (m.state_dim,)
                or ep.next_obs.shape[1:] != (m.n_agents, m.obs_dim)
            ):
                raise IncompatibleDatasetError(f"episode {k} does not match dataset dims {m.dims()}")

    @property
    def transition_count(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def flat(self) -> dict:
        """All transitions concatenated in float64, built once and cached."""
        if self._flat is None:
            cols = ("states", "obs", "actions", "rewards", "next_states", "next_obs", "dones")
            self._flat = {
                c: np.concatenate([getattr(ep, c) for ep in self.episodes]).astype(np.float64) for c in cols
            }
        return self._flat

    def episode_returns(self) -> np.ndarray:
        return np.array([ep.episode_return for ep in self.episodes])


@dataclass(frozen=True)
class DatasetStats:
    avg_return: float
    max_return: float
    min_return: float
    episode_count: int
    transition_count: int

    def csv_row(self) -> str:
        return f"{self.avg_return!r},{self.max_return!r},{self.min_return!r},{self.episode_count},{self.transition_count}"


STATS_HEADER = "avg_return,max_return,min_return,episodes,transitions"


def compute_stats(dataset: OfflineDataset) -> DatasetStats:
    if not dataset.episodes:
        raise DatasetError("cannot compute statistics of an empty dataset")
    returns = [ep.episode_return for ep in dataset.episodes]
    return DatasetStats(
        avg_return=sum(returns) / len(returns),
        max_return=max(returns),
        min_return=min(returns),
        episode_count=len(returns),
        transition_count=dataset.transition_count,
    )


def max_episode_return(dataset: OfflineDataset) -> float:
    """Largest undiscounted episode return (the quantity critic clipping scales)."""
    return compute_stats(dataset).max_return


def generate_dataset(
    policy,
    env_config: EnvConfig,
    n_episodes: int,
    noise_std: float,
    seed: int,
    tag: str | None = None,
) -> OfflineDataset:
    """Roll out ``policy`` (or uniform random actions when ``policy is None``).

    Behaviour actions are ``clip(pi(o) + N(0, noise_std^2), -1, 1)``. All
    episodes run in lockstep so the policy sees one batched forward per step.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    env = CooperativeNavigation(env_config)
    n, T = env.n_agents, env_config.episode_len
    if policy is not None and (policy.n_agents != n or policy.obs_dim != env.obs_dim or policy.act_dim != env.act_dim):
        raise IncompatibleDatasetError(
            f"policy dims (N={policy.n_agents}, obs={policy.obs_dim}, act={policy.act_dim}) do not match env "
            f"(N={n}, obs={env.obs_dim}, act={env.act_dim})"
        )
    ep_seeds = episode_seeds(seed, n_episodes)
    noise_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])

    states = [env.reset(s)[0] for s in ep_seeds]
    E = n_episodes
    buf = {
        "states": np.empty((E, T, env.state_dim)),
        "obs": np.empty((E, T, n, env.obs_dim)),
        "actions": np.empty((E, T, n, env.act_dim)),
        "rewards": np.empty((E, T)),
        "next_states": np.empty((E, T, env.state_dim)),
        "next_obs": np.empty((E, T, n, env.obs_dim)),
    }
    obs = np.stack([env.observe(s) for s in states]) if E else np.empty((0, n, env.obs_dim))
    for t in range(T):
        if policy is None:
            act = noise_rng.uniform(-1.0, 1.0, size=(E, n, env.act_dim))
        else:
            act = policy.act(obs)
            if noise_std > 0:
                act = act + noise_rng.normal(0.0, noise_std, size=act.shape)
            act = np.clip(act, -1.0, 1.0)
        for e in range(E):
            buf["states"][e, t] = env.global_state_vector(states[e])
            buf["obs"][e, t] = obs[e]
            buf["actions"][e, t] = act[e]
            states[e], o2, r, _ = env.step(states[e], act[e])
            buf["rewards"][e, t] = r
            buf["next_states"][e, t] = env.global_state_vector(states[e])
            buf["next_obs"][e, t] = o2
            obs[e] = o2
    dones = np.zeros(T, dtype=bool)
    dones[-1] = True
    episodes = [Episode(**{k: v[e] for k, v in buf.items()}, dones=dones) for e in range(E)]
    meta = DatasetMeta(env.env_id, n, env.obs_dim, env.act_dim, env.state_dim,
                       tag or ("random" if policy is None else "expert"), int(seed))
    return OfflineDataset(meta, episodes)


def mix_datasets(a: OfflineDataset, b: OfflineDataset) -> OfflineDataset:
    if a.meta.dims() != b.meta.dims():
        raise IncompatibleDatasetError(f"cannot mix datasets with dims {a.meta.dims()} and {b.meta.dims()}")
    tag = f"mixture:{a.meta.tag}+{b.meta.tag}"
    meta = DatasetMeta(*a.meta.dims(), tag=tag, seed=a.meta.seed)
    return OfflineDataset(meta, list(a.episodes) + list(b.episodes))


def episodes_prefix(dataset: OfflineDataset, n_transitions: int, tag: str) -> OfflineDataset:
    """Whole episodes covering the first ``n_transitions`` transitions."""
    out, total = [], 0
    for ep in dataset.episodes:
        if total >= n_transitions:
            break
        out.append(ep)
        total += len(ep)
    meta = DatasetMeta(*dataset.meta.dims(), tag=tag, seed=dataset.meta.seed)
    return OfflineDataset(meta, out)


def sample_batch(dataset: OfflineDataset, batch_size: int, rng) -> Batch:
    """Uniform sample with replacement over all transitions."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    f = dataset.flat()
    n = len(f["rewards"])
    idx = np.asarray(rng.integers(0, n, size=batch_size))
    return Batch(
        f["states"][idx], f["obs"][idx], f["actions"][idx], f["rewards"][idx],
        f["next_states"][idx], f["next_obs"][idx], f["dones"][idx],
    )


# -- file format -------------------------------------------------------------

def to_bytes(dataset: OfflineDataset) -> bytes:
    m = dataset.meta
    w = binfmt.Writer(MAGIC, FORMAT_VERSION)
    w.text(m.env_id)
    for v in (m.n_agents, m.obs_dim, m.act_dim, m.state_dim, len(dataset.episodes)):
        w.u32(v)
    w.u64(m.seed % (1 << 64))
    w.text(m.tag)
    for ep in dataset.episodes:
        T = len(ep)
        w.u32(T)
        rows = np.concatenate(
            [
                ep.states.reshape(T, -1), ep.obs.reshape(T, -1), ep.actions.reshape(T, -1),
                ep.rewards.reshape(T, 1), ep.next_states.reshape(T, -1), ep.next_obs.reshape(T, -1),
            ],
            axis=1,
        ).astype("<f4")
        for t in range(T):
            w.raw(rows[t].tobytes())
            w.u8(1 if ep.dones[t] else 0)
    return w.finish()


def from_bytes(data: bytes) -> OfflineDataset:
    def parse(r: binfmt.Reader) -> OfflineDataset:
        env_id = r.text()
        n_agents, obs_dim, act_dim, state_dim, n_eps = (r.u32() for _ in range(5))
        seed = r.u64()
        tag = r.text()
        widths = [state_dim, n_agents * obs_dim, n_agents * act_dim, 1, state_dim, n_agents * obs_dim]
        row = sum(widths)
        episodes = []
        for _ in range(n_eps):
            T = r.u32()
            block = np.frombuffer(r.take(T * (4 * row + 1)), dtype=np.uint8).reshape(T, 4 * row + 1)
            vals = np.ascontiguousarray(block[:, : 4 * row]).view("<f4").reshape(T, row)
            dones = block[:, 4 * row]
            if np.any(dones > 1):
                raise binfmt.ChecksumError("done flag is neither 0 nor 1")
            cols = np.split(vals, np.cumsum(widths)[:-1], axis=1)
            episodes.append(
                Episode(
                    states=cols[0], obs=cols[1].reshape(T, n_agents, obs_dim),
                    actions=cols[2].reshape(T, n_agents, act_dim), rewards=cols[3][:, 0],
                    next_states=cols[4], next_obs=cols[5].reshape(T, n_agents, obs_dim),
                    dones=dones.astype(bool),
                )
            )
        return OfflineDataset(DatasetMeta(env_id, n_agents, obs_dim, act_dim, state_dim, tag, seed), episodes)

    return binfmt.open_container(data, MAGIC, FORMAT_VERSION, parse)


def fingerprint(dataset: OfflineDataset) -> str:
    """CRC-32 of the serialized dataset, as 8 hex digits."""
    return f"{zlib.crc32(to_bytes(dataset)):08x}"


def save(dataset: OfflineDataset, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(dataset))
    return path


def load(path) -> OfflineDataset:
    return from_bytes(Path(path).read_bytes())
