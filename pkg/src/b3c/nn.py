"""Dense network substrate: MLPs with hand-written backprop, Adam, Polyak blending.

Every network here is a plain numpy container. An :class:`Mlp` may be
*stacked*: ``n_stack`` independent networks of identical shape share one set
of 3-d weight arrays and are evaluated with a single batched matmul. Stacks are
how per-agent policies and per-agent critics are stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Input or cache does not match the network it is used with."""


class NonFiniteGradientError(FloatingPointError):
    pass


class Mlp:
    """Fully connected network ``layer_dims[0] -> ... -> layer_dims[-1]``.

    Weights have shape ``(in, out)`` (or ``(n_stack, in, out)``) and biases
    ``(1, out)`` (or ``(n_stack, 1, out)``) so that both broadcast against a
    batch laid out as ``(B, in)`` or ``(n_stack, B, in)``.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        n_stack: int | None = None,
        rng: np.random.Generator | None = None,
    ):
        if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
            raise ShapeError(f"bad layer_dims {list(layer_dims)}")
        if hidden_activation not in ("relu", "tanh") or output_activation not in ("identity", "tanh"):
            raise ValueError(f"unsupported activations {hidden_activation!r}/{output_activation!r}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.n_stack = n_stack
        rng = rng if rng is not None else np.random.default_rng(0)
        lead = () if n_stack is None else (n_stack,)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)))
            self.biases.append(np.zeros(lead + (1, fan_out)))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Live references, ordered ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_count(self) -> int:
        per_net = sum((i + 1) * o for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]))
        return per_net * (self.n_stack or 1)

    def signature(self) -> tuple:
        return tuple(w.shape for w in self.weights)

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.__dict__.update(self.__dict__)
        new.layer_dims = list(self.layer_dims)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def forward(self, x: np.ndarray):
        return mlp_forward(self, x)

    def backward(self, cache, output_grad: np.ndarray, param_grads: bool = True, input_grad: bool = True):
        return mlp_backward(self, cache, output_grad, param_grads, input_grad)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


@dataclass
class _Cache:
    signature: tuple
    activations: list = field(default_factory=list)  # layer inputs, then the final output
    squeeze: bool = False


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, _Cache]:
    """Evaluate ``net`` on a single vector or a batch; returns (output, cache)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        if net.n_stack is not None:
            raise ShapeError("stacked network needs input of shape (n_stack, B, in)")
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != layer_dims[0] = {net.in_dim}")
    if net.n_stack is not None and (x.ndim != 3 or x.shape[0] != net.n_stack):
        raise ShapeError(f"stacked input must be ({net.n_stack}, B, {net.in_dim}), got {x.shape}")
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w
        h += b
        kind = net.hidden_activation if i < last else net.output_activation
        if kind == "relu":
            np.maximum(h, 0.0, out=h)
        elif kind == "tanh":
            np.tanh(h, out=h)
        acts.append(h)
    cache = _Cache(net.signature(), acts, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(
    net: Mlp, cache: _Cache, output_grad, param_grads: bool = True, input_grad: bool = True
) -> tuple[list[np.ndarray] | None, np.ndarray | None]:
    """Backpropagate ``output_grad`` (dLoss/dOutput).

    Returns the parameter gradients in ``net.params`` order and the gradient
    with respect to the network input; either can be switched off (``None``).
    """
    if cache.signature != net.signature():
        raise ShapeError("stale cache: network shapes changed since forward")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    acts = cache.activations
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {acts[-1].shape}")
    grads: list = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        kind = net.hidden_activation if i < last else net.output_activation
        out = acts[i + 1]
        if kind == "relu":
            g = g * (out > 0.0)
        elif kind == "tanh":
            g = g * (1.0 - out * out)
        if param_grads:
            grads[2 * i] = np.swapaxes(acts[i], -1, -2) @ g
            grads[2 * i + 1] = g.sum(axis=-2, keepdims=True)
        if i > 0 or input_grad:
            wt = np.swapaxes(net.weights[i], -1, -2)
            # a k=1 matmul is an outer product; broadcasting is much cheaper
            g = g * wt if g.shape[-1] == 1 else g @ wt
    dx = (g[0] if cache.squeeze else g) if input_grad else None
    return (grads if param_grads else None), dx


def grad_check(
    params,
    loss_and_grads: Callable[[], tuple[float, list[np.ndarray]]],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``params`` is a list of arrays (or anything with a ``params`` attribute)
    that ``loss_and_grads`` reads in place. Each entry is perturbed by ±h and
    restored afterwards.
    """
    if hasattr(params, "params"):
        params = params.params
    _, analytic = loss_and_grads()
    analytic = [np.array(a, dtype=np.float64) for a in analytic]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        af = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_and_grads()[0]
            flat[j] = orig - h
            lm = loss_and_grads()[0]
            flat[j] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(af[j] - num) / max(1e-8, abs(af[j]) + abs(num))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.first_moment)} moments")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[k] if names is not None else f"block {k}"
            raise NonFiniteGradientError(f"non-finite gradient in parameter {label}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def polyak_blend(target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float) -> None:
    """In place: ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if len(target) != len(online):
        raise ShapeError("target/online parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ShapeError(f"shape mismatch {t.shape} vs {o.shape}")
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
