"""Policies, per-agent utilities, mixers and joint critics.

Batch layout throughout: states ``(B, S)``, per-agent tensors ``(B, N, D)``.
Each ``forward`` returns ``(value, cache)`` and each ``backward`` consumes the
cache and returns ``(param_grads, input_grads)`` with param grads ordered like
``params``.
"""

from __future__ import annotations

import numpy as np

from ..nn import Mlp, ShapeError

MIXERS = ("vdn", "mono", "nonmono")


def _stack_major(x: np.ndarray) -> np.ndarray:
    # (B, N, D) -> (N, B, D)
    return np.swapaxes(x, 0, 1)


class PolicySet:
    """N deterministic policies ``o^i -> a^i in [-1, 1]^act_dim`` (one per agent)."""

    def __init__(self, n_agents: int, obs_dim: int, act_dim: int, hidden=(64, 64),
                 rng: np.random.Generator | None = None, hidden_activation: str = "relu"):
        self.n_agents, self.obs_dim, self.act_dim = n_agents, obs_dim, act_dim
        self.hidden = tuple(hidden)
        self.net = Mlp([obs_dim, *hidden, act_dim], hidden_activation, "tanh", n_stack=n_agents, rng=rng)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def param_names(self) -> list[str]:
        return [f"policy.{k}" for k in _names(self.net)]

    def forward(self, obs: np.ndarray):
        out, cache = self.net.forward(_stack_major(obs))
        return np.swapaxes(out, 0, 1), cache

    def backward(self, cache, grad_actions: np.ndarray):
        grads, _ = self.net.backward(cache, _stack_major(grad_actions), input_grad=False)
        return grads

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic actions for obs shaped ``(B, N, O)`` or ``(N, O)``."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 2:
            return self.forward(obs[None])[0][0]
        return self.forward(obs)[0]

    def copy(self) -> "PolicySet":
        new = object.__new__(PolicySet)
        new.__dict__.update(self.__dict__)
        new.net = self.net.copy()
        return new


class Mixer:
    """State-conditioned monotonic / non-monotonic mixer, or plain VDN sum.

    mono/nonmono generate a one-hidden-layer mixing net per sample from the
    state: ``q_jt = elu(q @ W1 + b1) @ W2 + b2``. ``mono`` passes W1 and W2
    through ``abs`` so that dq_jt/dq_i >= 0.
    """

    def __init__(self, variant: str, n_agents: int, state_dim: int, embed_dim: int = 32,
                 rng: np.random.Generator | None = None):
        if variant not in MIXERS:
            raise ValueError(f"unknown mixer {variant!r}; expected one of {MIXERS}")
        self.variant, self.n_agents, self.state_dim, self.embed_dim = variant, n_agents, state_dim, embed_dim
        self.hypernets: list[Mlp] = []
        if variant != "vdn":
            H = embed_dim
            self.hyper_w1 = Mlp([state_dim, n_agents * H], rng=rng)
            self.hyper_b1 = Mlp([state_dim, H], rng=rng)
            self.hyper_w2 = Mlp([state_dim, H], rng=rng)
            self.hyper_b2 = Mlp([state_dim, H, 1], rng=rng)
            self.hypernets = [self.hyper_w1, self.hyper_b1, self.hyper_w2, self.hyper_b2]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.hypernets for p in net.params]

    def param_names(self) -> list[str]:
        tags = ("hyper_w1", "hyper_b1", "hyper_w2", "hyper_b2")
        return [f"mixer.{t}.{k}" for t, net in zip(tags, self.hypernets) for k in _names(net)]

    def forward(self, state: np.ndarray, q: np.ndarray):
        """``q``: (B, N) local utilities -> (B,) joint value."""
        if q.shape[-1] != self.n_agents:
            raise ShapeError(f"expected {self.n_agents} local values, got {q.shape[-1]}")
        if self.variant == "vdn":
            return q.sum(axis=-1), None
        B, N, H = q.shape[0], self.n_agents, self.embed_dim
        w1_raw, c_w1 = self.hyper_w1.forward(state)
        b1, c_b1 = self.hyper_b1.forward(state)
        w2_raw, c_w2 = self.hyper_w2.forward(state)
        b2, c_b2 = self.hyper_b2.forward(state)
        w1_raw = w1_raw.reshape(B, N, H)
        if self.variant == "mono":
            w1, w2 = np.abs(w1_raw), np.abs(w2_raw)
        else:
            w1, w2 = w1_raw, w2_raw
        pre = np.einsum("bn,bnh->bh", q, w1) + b1
        hid = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))
        out = (hid * w2).sum(axis=1) + b2[:, 0]
        cache = (q, w1_raw, w1, w2_raw, w2, pre, hid, c_w1, c_b1, c_w2, c_b2)
        return out, cache

    def backward(self, cache, grad_out: np.ndarray, param_grads: bool = True):
        """Returns (param grads, dq_jt/dq scaled by grad_out, shape (B, N))."""
        if self.variant == "vdn":
            return [], np.repeat(grad_out[:, None], self.n_agents, axis=1)
        q, w1_raw, w1, w2_raw, w2, pre, hid, c_w1, c_b1, c_w2, c_b2 = cache
        g = grad_out[:, None]
        d_w2 = g * hid
        d_hid = g * w2
        d_b2 = g
        d_pre = d_hid * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))
        d_b1 = d_pre
        d_q = np.einsum("bh,bnh->bn", d_pre, w1)
        if not param_grads:
            return None, d_q
        d_w1 = q[:, :, None] * d_pre[:, None, :]
        if self.variant == "mono":
            d_w1 = d_w1 * np.sign(w1_raw)
            d_w2 = d_w2 * np.sign(w2_raw)
        grads = []
        for net, c, d in ((self.hyper_w1, c_w1, d_w1.reshape(len(q), -1)), (self.hyper_b1, c_b1, d_b1),
                          (self.hyper_w2, c_w2, d_w2), (self.hyper_b2, c_b2, d_b2)):
            grads += net.backward(c, d, input_grad=False)[0]
        return grads, d_q

    def copy(self) -> "Mixer":
        new = object.__new__(Mixer)
        new.__dict__.update(self.__dict__)
        if self.variant != "vdn":
            new.hyper_w1, new.hyper_b1, new.hyper_w2, new.hyper_b2 = (n.copy() for n in self.hypernets)
            new.hypernets = [new.hyper_w1, new.hyper_b1, new.hyper_w2, new.hyper_b2]
        return new


class FactoredCritic:
    """``Q_jt(s, o, a) = mixer(s, Q^1(o^1, a^1), ..., Q^N(o^N, a^N))``."""

    def __init__(self, n_agents: int, obs_dim: int, act_dim: int, state_dim: int, mixer: str = "nonmono",
                 hidden=(64, 64), embed_dim: int = 32, rng: np.random.Generator | None = None):
        self.n_agents, self.obs_dim, self.act_dim, self.state_dim = n_agents, obs_dim, act_dim, state_dim
        self.utility = Mlp([obs_dim + act_dim, *hidden, 1], n_stack=n_agents, rng=rng)
        self.mixer = Mixer(mixer, n_agents, state_dim, embed_dim, rng=rng)

    @property
    def params(self) -> list[np.ndarray]:
        return self.utility.params + self.mixer.params

    def param_names(self) -> list[str]:
        return [f"utility.{k}" for k in _names(self.utility)] + self.mixer.param_names()

    def local_values(self, obs: np.ndarray, actions: np.ndarray):
        x = np.concatenate([_stack_major(obs), _stack_major(actions)], axis=-1)
        q, cache = self.utility.forward(x)  # (N, B, 1)
        return q[:, :, 0].T, cache

    def forward(self, state: np.ndarray, obs: np.ndarray, actions: np.ndarray):
        q_loc, c_u = self.local_values(obs, actions)
        q_jt, c_m = self.mixer.forward(state, q_loc)
        return q_jt, (c_u, c_m)

    def backward(self, cache, grad_q: np.ndarray, param_grads: bool = True, action_grads: bool = True):
        """Returns (param grads, dLoss/d actions with shape (B, N, A)); either may be skipped."""
        c_u, c_m = cache
        g_mix, d_qloc = self.mixer.backward(c_m, grad_q, param_grads)
        g_u, d_x = self.utility.backward(c_u, d_qloc.T[:, :, None], param_grads, action_grads)
        d_act = np.swapaxes(d_x[:, :, self.obs_dim:], 0, 1) if action_grads else None
        return (g_u + g_mix if param_grads else None), d_act

    def copy(self) -> "FactoredCritic":
        new = object.__new__(FactoredCritic)
        new.__dict__.update(self.__dict__)
        new.utility = self.utility.copy()
        new.mixer = self.mixer.copy()
        return new


class JointCritic:
    """Non-factored centralized critic ``Q(s, a^1, ..., a^N)``."""

    def __init__(self, n_agents: int, obs_dim: int, act_dim: int, state_dim: int, hidden=(64, 64),
                 rng: np.random.Generator | None = None):
        self.n_agents, self.obs_dim, self.act_dim, self.state_dim = n_agents, obs_dim, act_dim, state_dim
        self.net = Mlp([state_dim + n_agents * act_dim, *hidden, 1], rng=rng)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def param_names(self) -> list[str]:
        return [f"joint.{k}" for k in _names(self.net)]

    def forward(self, state: np.ndarray, obs: np.ndarray, actions: np.ndarray):
        B = state.shape[0]
        x = np.concatenate([state, actions.reshape(B, -1)], axis=1)
        q, cache = self.net.forward(x)
        return q[:, 0], cache

    def backward(self, cache, grad_q: np.ndarray, param_grads: bool = True, action_grads: bool = True):
        grads, d_x = self.net.backward(cache, grad_q[:, None], param_grads, action_grads)
        if not action_grads:
            return grads, None
        return grads, d_x[:, self.state_dim:].reshape(len(grad_q), self.n_agents, self.act_dim)

    def copy(self) -> "JointCritic":
        new = object.__new__(JointCritic)
        new.__dict__.update(self.__dict__)
        new.net = self.net.copy()
        return new


def _names(net: Mlp) -> list[str]:
    out = []
    for i in range(len(net.weights)):
        out += [f"W{i}", f"b{i}"]
    return out
