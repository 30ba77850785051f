"""Critic clipping, clipped TD targets and the BC-regularized actor/critic updates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..dataset import Batch, OfflineDataset, max_episode_return
from ..nn import AdamState, adam_step, polyak_blend
from .networks import FactoredCritic, JointCritic, PolicySet

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ClipBoundViolation(AssertionError):
    pass


def compute_r_star(dataset: OfflineDataset, M: float) -> float:
    """``M`` times the best undiscounted episode return in ``dataset``.

    ``M = inf`` means "no clipping" and maps to ``+inf`` whatever the sign of
    the best return.
    """
    if not M > 0:
        raise ValueError(f"clip scale M must be > 0, got {M}")
    if math.isinf(M):
        return math.inf
    return M * max_episode_return(dataset)


def clip_target_q(q: np.ndarray, r_star: float, operator: str = "min") -> np.ndarray:
    """Bound bootstrapped values by ``r_star``; ``min`` is the upper clip."""
    if operator == "min":
        return np.minimum(q, r_star)
    if operator == "max":
        return np.maximum(q, r_star)
    raise ValueError(f"unknown clip operator {operator!r}")


@dataclass
class TrainState:
    policies: PolicySet
    critics: list
    target_policies: PolicySet
    target_critics: list
    policy_opt: AdamState
    critic_opts: list[AdamState]
    r_star: float = math.inf
    step: int = 0
    clip_checks: int = 0

    @classmethod
    def create(cls, policies: PolicySet, critics: list, actor_lr: float, critic_lr: float, r_star: float = math.inf):
        return cls(
            policies=policies,
            critics=critics,
            target_policies=policies.copy(),
            target_critics=[c.copy() for c in critics],
            policy_opt=AdamState.for_params(policies.params, lr=actor_lr),
            critic_opts=[AdamState.for_params(c.params, lr=critic_lr) for c in critics],
            r_star=r_star,
        )

    def blend_targets(self, tau: float) -> None:
        polyak_blend(self.target_policies.params, self.policies.params, tau)
        for t, c in zip(self.target_critics, self.critics):
            polyak_blend(t.params, c.params, tau)


@dataclass
class TargetInfo:
    y: np.ndarray
    q_next: np.ndarray  # before clipping
    clipped: np.ndarray  # bool, per sample, non-terminal samples only


def td_target(
    batch: Batch,
    target_policies: PolicySet,
    target_critics: list,
    gamma: float,
    r_star: float | None,
    clip_operator: str = "min",
    noise_std: float = 0.0,
    noise_clip: float = 0.5,
    rng: np.random.Generator | None = None,
) -> TargetInfo:
    """``y = r + gamma * (1 - done) * clip(Q^-(s', o', pi^-(o')), R*)``.

    ``r_star=None`` disables clipping. With several target critics the
    minimum is taken before clipping; with ``noise_std > 0`` clipped Gaussian
    noise smooths the target actions.
    """
    a_next = target_policies.forward(batch.next_obs)[0]
    if noise_std > 0:
        noise = np.clip(rng.normal(0.0, noise_std, size=a_next.shape), -noise_clip, noise_clip)
        a_next = np.clip(a_next + noise, -1.0, 1.0)
    q_next = target_critics[0].forward(batch.next_state, batch.next_obs, a_next)[0]
    for c in target_critics[1:]:
        q_next = np.minimum(q_next, c.forward(batch.next_state, batch.next_obs, a_next)[0])
    live = batch.done < 0.5
    if r_star is None:
        boot = q_next
        clipped = np.zeros_like(live)
    else:
        boot = clip_target_q(q_next, r_star, clip_operator)
        clipped = (boot != q_next) & live
    y = batch.reward + gamma * (1.0 - batch.done) * boot
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite TD target")
    return TargetInfo(y, q_next, clipped)


def check_clip_bound(batch: Batch, y: np.ndarray, gamma: float, r_star: float) -> None:
    live = batch.done < 0.5
    bad = np.count_nonzero(y[live] > batch.reward[live] + gamma * r_star)
    if bad:
        raise ClipBoundViolation(f"{bad} non-terminal targets exceed r + gamma * R*")


def critic_loss_and_grads(critic, batch: Batch, y: np.ndarray):
    """Mean squared TD error; returns (loss, param grads, Q on dataset actions)."""
    q, cache = critic.forward(batch.state, batch.obs, batch.actions)
    err = q - y
    loss = float(np.mean(err * err))
    grads, _ = critic.backward(cache, 2.0 * err / len(y), action_grads=False)
    return loss, grads, q


@dataclass
class CriticStep:
    loss: float
    q_data: np.ndarray  # first critic, dataset actions, before this step's update


def critic_update(state: TrainState, batch: Batch, y: np.ndarray) -> CriticStep:
    """One Adam step per critic towards the fixed targets ``y``."""
    losses, q_first = [], None
    for critic, opt in zip(state.critics, state.critic_opts):
        loss, grads, q = critic_loss_and_grads(critic, batch, y)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite critic loss", state.step)
        adam_step(critic.params, grads, opt, critic.param_names())
        losses.append(loss)
        q_first = q if q_first is None else q_first
    return CriticStep(float(np.mean(losses)), q_first)


@dataclass
class PolicyTerms:
    rl_term: float
    bc_term: float
    w: float
    grads: list = field(repr=False, default_factory=list)

    @property
    def loss(self) -> float:
        return self.rl_term + self.bc_term


def policy_loss_and_grads(
    policies: PolicySet, critic, batch: Batch, alpha: float, beta: float, normalize: bool = True,
    q_data: np.ndarray | None = None,
) -> PolicyTerms:
    """``E[-w Q_jt(s, o, pi(o)) + beta * sum_i |pi^i(o^i) - a^i|^2]``.

    With ``normalize`` the weight is ``alpha / mean_batch |Q_jt(s, o, a)|`` on
    dataset actions and is held constant; otherwise ``w = alpha``. Callers
    that already evaluated the critic on the dataset actions pass ``q_data``.
    """
    B = len(batch)
    if normalize:
        if q_data is None:
            q_data = critic.forward(batch.state, batch.obs, batch.actions)[0]
        denom = float(np.mean(np.abs(q_data)))
        if denom == 0.0:
            log.warning("mean |Q| over the batch is zero; using %g in the normalizer", NORM_EPS)
            denom = NORM_EPS
        w = alpha / denom
    else:
        w = alpha
    a_pi, p_cache = policies.forward(batch.obs)
    q_pi, c_cache = critic.forward(batch.state, batch.obs, a_pi)
    diff = a_pi - batch.actions
    rl_term = -w * float(np.mean(q_pi))
    bc_term = beta * float(np.sum(diff * diff)) / B
    _, d_act = critic.backward(c_cache, np.full(B, -w / B), param_grads=False)
    d_act = d_act + (2.0 * beta / B) * diff
    return PolicyTerms(rl_term, bc_term, w, policies.backward(p_cache, d_act))


def policy_update_b3c(state: TrainState, batch: Batch, alpha: float, beta: float,
                      normalize: bool = True, q_data: np.ndarray | None = None) -> PolicyTerms:
    """One actor step; critics are read but never modified."""
    terms = policy_loss_and_grads(state.policies, state.critics[0], batch, alpha, beta, normalize, q_data)
    if not (math.isfinite(terms.rl_term) and math.isfinite(terms.bc_term)):
        raise DivergenceError("non-finite policy loss", state.step)
    adam_step(state.policies.params, terms.grads, state.policy_opt, state.policies.param_names())
    return terms


def facmac_policy_update_online(state: TrainState, batch: Batch) -> PolicyTerms:
    """Plain deterministic policy gradient: no BC term, no normalization."""
    return policy_update_b3c(state, batch, alpha=1.0, beta=0.0, normalize=False)


def build_critics(kind: str, n_agents: int, obs_dim: int, act_dim: int, state_dim: int, mixer: str,
                  twin: bool, hidden, embed_dim: int, rng: np.random.Generator) -> list:
    count = 2 if twin else 1
    if kind == "factored":
        return [FactoredCritic(n_agents, obs_dim, act_dim, state_dim, mixer, hidden, embed_dim, rng=rng)
                for _ in range(count)]
    if kind == "joint":
        return [JointCritic(n_agents, obs_dim, act_dim, state_dim, hidden, rng=rng) for _ in range(count)]
    raise ValueError(f"unknown critic kind {kind!r}")
