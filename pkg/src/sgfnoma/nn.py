"""Dense ReLU Q-networks with a plain or dueling head, backprop and Adam.

A :class:`QNetwork` holds a *stack* of ``members`` independent networks that
share one architecture. Member ``k`` only ever sees its own slice of the
parameters, inputs and gradients; stacking exists so that a team of learners
can be evaluated with one batched matmul instead of a Python loop.

All parameters of a stack live in one contiguous ``(members, n_params)``
float64 array and the per-layer weights are views into it, so the optimizer
and checkpointing work on a single flat buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

HEAD_KINDS = ("plain", "dueling")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dueling_aggregate(value, advantage) -> np.ndarray:
    """Combine state value and action advantages into Q-values.

    ``Q_a = V + A_a - mean(A)``. ``value`` broadcasts against ``advantage``
    with the action axis last.
    """
    advantage = np.asarray(advantage)
    if not np.issubdtype(advantage.dtype, np.floating):
        advantage = advantage.astype(float)
    if advantage.ndim == 0 or advantage.shape[-1] == 0:
        raise ValueError("advantage vector is empty")
    value = np.asarray(value, dtype=advantage.dtype)
    if value.ndim == advantage.ndim and value.shape[-1] == 1:
        pass
    elif value.ndim == advantage.ndim - 1:
        value = value[..., None]
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


@dataclass
class _Dense:
    name: str
    fan_in: int
    fan_out: int
    w_offset: int
    b_offset: int


class QNetwork:
    """Stack of dense feed-forward Q-networks.

    Plain head: ``in -> hidden... -> n_actions`` with ReLU on every hidden
    layer. Dueling head: the hidden layers form a shared trunk, followed by a
    value stream ``(width -> 1)`` and an advantage stream
    ``(width -> n_actions)``, each with one ReLU layer of ``stream_width``
    units (defaults to the last hidden width), merged by
    :func:`dueling_aggregate`.
    """

    def __init__(
        self,
        n_inputs: int,
        n_actions: int,
        hidden: tuple[int, ...] = (250, 120, 60),
        head: str = "plain",
        members: int = 1,
        rng: np.random.Generator | None = None,
        stream_width: int | None = None,
        dtype=np.float64,
    ):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head!r}")
        if n_inputs < 1 or n_actions < 1 or members < 1:
            raise ValueError("n_inputs, n_actions and members must be >= 1")
        self.n_inputs = int(n_inputs)
        self.n_actions = int(n_actions)
        self.hidden = tuple(int(h) for h in hidden)
        self.head = head
        self.members = int(members)
        self.dtype = np.dtype(dtype)
        trunk_out = self.hidden[-1] if self.hidden else self.n_inputs
        self.stream_width = int(stream_width or trunk_out)

        self._layers: dict[str, list[_Dense]] = {"trunk": [], "value": [], "advantage": []}
        offset = 0

        def add(group: str, fan_in: int, fan_out: int) -> None:
            nonlocal offset
            name = f"{group}{len(self._layers[group])}"
            layer = _Dense(name, fan_in, fan_out, offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out + fan_out
            self._layers[group].append(layer)

        dims = [self.n_inputs, *self.hidden]
        for a, b in zip(dims[:-1], dims[1:]):
            add("trunk", a, b)
        if head == "plain":
            add("trunk", dims[-1], self.n_actions)
        else:
            add("value", trunk_out, self.stream_width)
            add("value", self.stream_width, 1)
            add("advantage", trunk_out, self.stream_width)
            add("advantage", self.stream_width, self.n_actions)
        self.n_params = offset
        self.params = np.zeros((self.members, self.n_params), dtype=self.dtype)
        self._grad_buffer: QNetwork | None = None
        self._bind_views()
        if rng is not None:
            self.init_params(rng)

    # -- parameter layout -------------------------------------------------

    def _bind_views(self) -> None:
        self.weights: dict[str, np.ndarray] = {}
        self.biases: dict[str, np.ndarray] = {}
        for group in self._layers.values():
            for layer in group:
                w = self.params[:, layer.w_offset:layer.b_offset]
                self.weights[layer.name] = w.reshape(self.members, layer.fan_in, layer.fan_out)
                self.biases[layer.name] = self.params[:, layer.b_offset:layer.b_offset + layer.fan_out]

    def layer_names(self) -> list[str]:
        return [layer.name for group in self._layers.values() for layer in group]

    def architecture(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "n_actions": self.n_actions,
            "hidden": list(self.hidden),
            "head": self.head,
            "members": self.members,
            "stream_width": self.stream_width,
            "dtype": self.dtype.name,
        }

    def init_params(self, rng: np.random.Generator, member: int | None = None) -> None:
        """He-style uniform fan-in initialization, zero biases.

        With ``member`` given only that member is (re)initialized.
        """
        rows = slice(None) if member is None else slice(member, member + 1)
        count = self.members if member is None else 1
        self.params[rows] = 0.0
        for group in self._layers.values():
            for layer in group:
                bound = np.sqrt(6.0 / layer.fan_in)
                self.weights[layer.name][rows] = rng.uniform(
                    -bound, bound, size=(count, layer.fan_in, layer.fan_out)
                )

    def copy_from(self, other: "QNetwork") -> None:
        if other.architecture() != self.architecture():
            raise ValueError("architecture mismatch")
        np.copyto(self.params, other.params)

    def clone(self) -> "QNetwork":
        net = self._blank()
        net.copy_from(self)
        return net

    # -- forward / backward ----------------------------------------------

    def _as_stacked(self, x) -> tuple[np.ndarray, int]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.n_inputs:
            raise ValueError(f"expected input dimension {self.n_inputs}, got {x.shape[-1]}")
        if x.ndim == 3:
            if x.shape[0] != self.members:
                raise ValueError(f"expected {self.members} members, got {x.shape[0]}")
            return x, 3
        if self.members != 1 or x.ndim not in (1, 2):
            raise ValueError(f"input of shape {x.shape} does not match a {self.members}-member stack")
        return x.reshape(1, -1, self.n_inputs), x.ndim

    def _mlp(self, group: str, h: np.ndarray, cache: list | None, relu_last: bool) -> np.ndarray:
        layers = self._layers[group]
        for i, layer in enumerate(layers):
            z = np.matmul(h, self.weights[layer.name])
            z += self.biases[layer.name][:, None, :]
            activated = i < len(layers) - 1 or relu_last
            out = np.maximum(z, 0.0) if activated else z
            if cache is not None:
                cache.append((layer.name, h, out, activated))
            h = out
        return h

    def _forward3(self, x: np.ndarray, cache: dict | None = None):
        if self.head == "plain":
            trunk: list | None = [] if cache is not None else None
            q = self._mlp("trunk", x, trunk, relu_last=False)
            if cache is not None:
                cache["trunk"] = trunk
            return q
        trunk = [] if cache is not None else None
        v_cache = [] if cache is not None else None
        a_cache = [] if cache is not None else None
        feat = self._mlp("trunk", x, trunk, relu_last=True)
        value = self._mlp("value", feat, v_cache, relu_last=False)
        adv = self._mlp("advantage", feat, a_cache, relu_last=False)
        if cache is not None:
            cache.update(trunk=trunk, value=v_cache, advantage=a_cache, v=value, a=adv)
        return dueling_aggregate(value, adv)

    def forward(self, x) -> np.ndarray:
        """Q-values for ``x``.

        ``x`` may be ``(members, batch, n_inputs)``; for a one-member stack
        ``(n_inputs,)`` and ``(batch, n_inputs)`` are accepted and the output
        keeps the input's leading shape.
        """
        x3, ndim = self._as_stacked(x)
        q = self._forward3(x3)
        if ndim == 3:
            return q
        return q[0, 0] if ndim == 1 else q[0]

    def streams(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Raw ``(value, advantage)`` outputs of a dueling head."""
        if self.head != "dueling":
            raise ValueError("streams() needs a dueling head")
        x3, _ = self._as_stacked(x)
        cache: dict = {}
        self._forward3(x3, cache)
        return cache["v"], cache["a"]

    def _blank(self) -> "QNetwork":
        return QNetwork(
            self.n_inputs, self.n_actions, self.hidden, self.head, self.members,
            stream_width=self.stream_width, dtype=self.dtype,
        )

    @staticmethod
    def _backprop(cache: list, g: np.ndarray, weights: dict, grads: "QNetwork") -> np.ndarray:
        for name, h_in, out, activated in reversed(cache):
            if activated:
                g = g * (out > 0.0)
            np.matmul(h_in.transpose(0, 2, 1), g, out=grads.weights[name])
            np.sum(g, axis=1, out=grads.biases[name])
            g = np.matmul(g, weights[name].transpose(0, 2, 1))
        return g

    def loss_and_grad(self, states, actions, targets) -> tuple[np.ndarray, np.ndarray]:
        """Mean squared TD error on the taken actions and its gradient.

        Returns ``(loss, grad)`` with ``loss`` of shape ``(members,)`` and
        ``grad`` of shape ``(members, n_params)`` in the layout of
        :attr:`params`.
        """
        x3, _ = self._as_stacked(states)
        actions = np.asarray(actions, dtype=np.intp).reshape(self.members, -1)
        targets = np.asarray(targets, dtype=self.dtype).reshape(self.members, -1)
        batch = x3.shape[1]
        cache: dict = {}
        q = self._forward3(x3, cache)
        rows = np.arange(self.members)[:, None]
        cols = np.arange(batch)[None, :]
        resid = q[rows, cols, actions] - targets
        loss = np.mean(resid * resid, axis=1)

        dq = np.zeros_like(q)
        dq[rows, cols, actions] = 2.0 * resid / batch
        if self._grad_buffer is None:
            self._grad_buffer = self._blank()
        grads = self._grad_buffer
        if self.head == "plain":
            self._backprop(cache["trunk"], dq, self.weights, grads)
        else:
            dv = dq.sum(axis=-1, keepdims=True)
            da = dq - dq.mean(axis=-1, keepdims=True)
            g_feat = self._backprop(cache["value"], dv, self.weights, grads)
            g_feat += self._backprop(cache["advantage"], da, self.weights, grads)
            self._backprop(cache["trunk"], g_feat, self.weights, grads)
        return loss, grads.params.copy()


def forward(net: QNetwork, state) -> np.ndarray:
    return net.forward(state)


def backward(net: QNetwork, states, targets, actions) -> np.ndarray:
    """Gradient of the mean squared TD error with respect to every parameter."""
    return net.loss_and_grad(states, actions, targets)[1]


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, beta1, beta2, lr_t, eps_t, tiny):
    # single fused pass; every array is C-contiguous with identical shape.
    # Moments of units whose gradient stays exactly zero decay through the
    # subnormal range, where float arithmetic is very slow; they are flushed
    # to zero once below the smallest normal number.
    p = p.reshape(-1)
    g = g.reshape(-1)
    m = m.reshape(-1)
    v = v.reshape(-1)
    one = p.dtype.type(1.0)
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (one - beta1) * gi
        vi = beta2 * v[i] + (one - beta2) * gi * gi
        if abs(mi) < tiny:
            mi = mi * 0
        if vi < tiny:
            vi = vi * 0
        m[i] = mi
        v[i] = vi
        p[i] -= lr_t * mi / (np.sqrt(vi) + eps_t)


@dataclass
class Adam:
    """Adam with bias correction over a flat parameter array.

    The bias corrections are folded into the step size and epsilon
    (``lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)``), which is algebraically
    the textbook update; the element loop is one fused numba pass.
    """

    shape: tuple[int, ...]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: object = np.float64
    step_count: int = 0
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.shape = tuple(self.shape)
        self.dtype = np.dtype(self.dtype)
        self.m = np.zeros(self.shape, dtype=self.dtype)
        self.v = np.zeros(self.shape, dtype=self.dtype)

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """Update ``params`` in place."""
        if grads.shape != self.shape or params.shape != self.shape:
            raise ValueError(f"gradient shape {grads.shape} does not match optimizer {self.shape}")
        if not np.isfinite(grads).all():
            raise FloatingPointError("non-finite gradient")
        grads = np.ascontiguousarray(grads, dtype=self.dtype)
        self.step_count += 1
        t = self.step_count
        correction2 = np.sqrt(1.0 - self.beta2 ** t)
        lr_t = self.lr * correction2 / (1.0 - self.beta1 ** t)
        eps_t = self.eps * correction2
        cast = self.dtype.type
        _adam_kernel(params, grads, self.m, self.v, cast(self.beta1), cast(self.beta2),
                     cast(lr_t), cast(eps_t), cast(np.finfo(self.dtype).tiny))

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step_count": self.step_count, "m": self.m.copy(), "v": self.v.copy(),
        }

    def load_state_dict(self, state: dict) -> None:
        if tuple(np.shape(state["m"])) != self.shape:
            raise ValueError("optimizer state shape mismatch")
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.step_count = int(state["step_count"])
        self.m[...] = state["m"]
        self.v[...] = state["v"]


def adam_step(net: QNetwork, grads: np.ndarray, opt: Adam) -> QNetwork:
    opt.step(net.params, grads)
    return net


def clip_by_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale each member's gradient so its L2 norm is at most ``max_norm``."""
    norms = np.sqrt(np.sum(grads * grads, axis=-1, keepdims=True))
    scale = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return grads * scale
