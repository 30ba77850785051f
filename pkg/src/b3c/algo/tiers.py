"""Quality tiers built from an online training run.

expert        final checkpoint
medium        earliest checkpoint reaching half of the random-to-expert gap
medium-replay whole episodes experienced online up to the medium checkpoint
random        uniform actions
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..dataset import OfflineDataset, episodes_prefix, generate_dataset
from ..env import EnvConfig
from .train import Checkpoint, OnlineResult, evaluate_policy

log = logging.getLogger(__name__)

TIER_NAMES = ("expert", "medium", "medium-replay", "random")


def random_policy_return(env_config: EnvConfig, n_episodes: int, seed: int) -> float:
    d = generate_dataset(None, env_config, n_episodes, 0.0, seed, tag="random")
    return float(np.mean(d.episode_returns()))


@dataclass
class TierPlan:
    expert: Checkpoint
    medium: Checkpoint
    random_return: float
    threshold: float


def plan_tiers(online: OnlineResult, env_config: EnvConfig, eval_episodes: int = 50, seed: int = 0) -> TierPlan:
    """Pick the expert and medium checkpoints.

    Returns are negative in cooperative navigation, so "half of expert" is
    measured on the random-to-expert scale rather than as a raw ratio.
    """
    if not online.checkpoints:
        raise ValueError("online run produced no checkpoints")
    expert = online.checkpoints[-1]
    rand = random_policy_return(env_config, eval_episodes, seed)
    scores = [evaluate_policy(c.policies, env_config, eval_episodes, seed)[0] for c in online.checkpoints]
    expert_ret = scores[-1]
    threshold = rand + 0.5 * (expert_ret - rand)
    if expert_ret < rand:
        # an undertrained run: the gap is negative and only the expert itself is "medium"
        log.warning("expert checkpoint (%.3f) scores below the random policy (%.3f)", expert_ret, rand)
        threshold = expert_ret
    medium = next(c for c, s in zip(online.checkpoints, scores) if s >= threshold)
    return TierPlan(expert, medium, rand, threshold)


def build_tier(tier: str, online: OnlineResult | None, env_config: EnvConfig, n_episodes: int, seed: int,
               noise_std: float = 0.1, plan: TierPlan | None = None) -> OfflineDataset:
    if tier == "random":
        return generate_dataset(None, env_config, n_episodes, 0.0, seed, tag="random")
    if online is None:
        raise ValueError(f"tier {tier!r} needs an online training run")
    plan = plan or plan_tiers(online, env_config, seed=seed)
    if tier == "expert":
        return generate_dataset(plan.expert.policies, env_config, n_episodes, noise_std, seed, tag="expert")
    if tier == "medium":
        return generate_dataset(plan.medium.policies, env_config, n_episodes, noise_std, seed, tag="medium")
    if tier == "medium-replay":
        return episodes_prefix(online.history, plan.medium.step, tag="medium-replay")
    raise ValueError(f"unknown tier {tier!r}; expected one of {TIER_NAMES}")
