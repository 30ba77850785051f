import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b3c.env import CooperativeNavigation, EnvConfig, EnvState, EpisodeDoneError, episode_seeds


def _state(agents, landmarks, t=0):
    return EnvState(np.asarray(agents, dtype=float), np.asarray(landmarks, dtype=float), t)


def test_reset_is_deterministic():
    env = CooperativeNavigation()
    s1, o1 = env.reset(123)
    s2, o2 = env.reset(123)
    assert np.array_equal(s1.agent_pos, s2.agent_pos)
    assert np.array_equal(s1.landmark_pos, s2.landmark_pos)
    assert np.array_equal(o1, o2)
    assert s1.t == 0


def test_reset_positions_in_box():
    env = CooperativeNavigation()
    for seed in range(1000):
        s, _ = env.reset(seed)
        assert np.all(np.abs(s.agent_pos) <= 1.0) and np.all(np.abs(s.landmark_pos) <= 1.0)


def test_distinct_seeds_give_distinct_layouts():
    env = CooperativeNavigation()
    layouts = {env.reset(seed)[0].landmark_pos.tobytes() for seed in range(100)}
    assert len(layouts) == 100


def test_exact_coverage_gives_zero_reward():
    env = CooperativeNavigation()
    lm = [[-0.5, 0.0], [0.5, 0.0], [0.0, 0.8]]
    assert env.reward(_state(lm, lm)) == 0.0


def test_three_coincident_agents_count_three_collisions():
    env = CooperativeNavigation(EnvConfig(collision_penalty=1.0))
    agents = [[0.2, 0.2]] * 3
    lm = [[0.2, 0.2], [0.9, -0.9], [-0.9, 0.9]]
    coverage = 2 * math.hypot(0.7, 1.1)
    assert env.reward(_state(agents, lm)) == pytest.approx(-coverage - 3.0, abs=1e-12)


def test_two_agent_hand_geometry():
    env = CooperativeNavigation(EnvConfig(n_agents=2))
    agents = [[0.0, 0.0], [0.6, 0.0]]
    landmarks = [[0.3, 0.4], [1.0, -0.3]]
    # landmark 0: agent 0 at distance 0.5, agent 1 at sqrt(0.09 + 0.16) = 0.5
    # landmark 1: agent 1 at sqrt(0.16 + 0.09) = 0.5
    assert env.reward(_state(agents, landmarks)) == pytest.approx(-1.0, abs=1e-12)


def test_step_dynamics_and_done():
    cfg = EnvConfig(n_agents=2, episode_len=2, step_size=0.1)
    env = CooperativeNavigation(cfg)
    s = _state([[0.0, 0.0], [0.95, 0.0]], [[0.5, 0.5], [-0.5, -0.5]])
    s1, _, _, done = env.step(s, [[5.0, -0.5], [1.0, 0.0]])
    assert np.allclose(s1.agent_pos, [[0.1, -0.05], [1.0, 0.0]])
    assert not done and s1.t == 1
    s2, _, _, done = env.step(s1, np.zeros((2, 2)))
    assert done and s2.t == 2
    with pytest.raises(EpisodeDoneError):
        env.step(s2, np.zeros((2, 2)))


def test_state_vector_length_and_zero_state():
    env = CooperativeNavigation()
    zero = _state(np.zeros((3, 2)), np.zeros((3, 2)))
    v = env.global_state_vector(zero)
    assert v.shape == (12,) and not np.any(v)


def test_state_vector_round_trip():
    env = CooperativeNavigation()
    s, _ = env.reset(9)
    back = env.state_from_vector(env.global_state_vector(s))
    assert np.array_equal(back.agent_pos, s.agent_pos)
    assert np.array_equal(back.landmark_pos, s.landmark_pos)


def test_observation_layout():
    env = CooperativeNavigation(EnvConfig(n_agents=3))
    s = _state([[0.0, 0.0], [0.5, 0.0], [0.0, -0.2]], [[1, 1], [-1, 1], [0, 0]])
    obs = env.observe(s)
    assert obs.shape == (3, 2 + 4 + 6)
    # agent 0 sees agent 2 (distance 0.2) before agent 1 (distance 0.5)
    assert np.allclose(obs[0], [0, 0, 0, -0.2, 0.5, 0, 1, 1, -1, 1, 0, 0])


def test_nearest_ties_broken_by_index():
    env = CooperativeNavigation(EnvConfig(n_agents=3, obs_k=1))
    s = _state([[0.0, 0.0], [0.3, 0.0], [-0.3, 0.0]], np.zeros((3, 2)))
    assert np.allclose(env.observe(s)[0, 2:4], [0.3, 0.0])


def test_partial_observation_with_k_n_minus_1_equals_full():
    full = CooperativeNavigation(EnvConfig(n_agents=4))
    part = CooperativeNavigation(EnvConfig(n_agents=4, obs_k=3))
    for seed in range(20):
        s, o = full.reset(seed)
        assert np.array_equal(o, part.observe(s))


@pytest.mark.parametrize("kw", [dict(n_agents=1), dict(episode_len=0), dict(n_agents=3, obs_k=3), dict(step_size=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        EnvConfig(**kw)


@pytest.mark.parametrize("n,k,obs", [(3, None, 12), (3, 1, 10), (5, 2, 16), (2, 0, 6)])
def test_dims(n, k, obs):
    cfg = EnvConfig(n_agents=n, obs_k=k)
    assert cfg.obs_dim == obs and cfg.state_dim == 4 * n and cfg.act_dim == 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5),
       acts=st.lists(st.floats(-3, 3, allow_nan=False), min_size=10, max_size=10))
def test_reward_bounds_and_box(seed, n, acts):
    cfg = EnvConfig(n_agents=n)
    env = CooperativeNavigation(cfg)
    s, _ = env.reset(seed)
    a = np.resize(np.array(acts), (n, 2))
    for _ in range(5):
        s, _, r, _ = env.step(s, a)
        assert cfg.reward_lower_bound() <= r <= 0.0
        assert np.all(np.abs(s.agent_pos) <= cfg.arena_half_width)


def test_episode_return_sums_exactly_episode_len_rewards():
    cfg = EnvConfig(episode_len=7)
    env = CooperativeNavigation(cfg)
    s, _ = env.reset(0)
    rewards, done = [], False
    while not done:
        s, _, r, done = env.step(s, np.full((3, 2), 0.3))
        rewards.append(r)
    assert len(rewards) == 7


def test_episode_seeds_deterministic_and_distinct():
    a = episode_seeds(5, 50)
    assert a == episode_seeds(5, 50)
    assert len(set(a)) == 50
    assert a[:10] == episode_seeds(5, 10)
