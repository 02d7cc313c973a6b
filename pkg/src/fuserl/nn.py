"""Small feed-forward network stack with exact hand-derived gradients.

An :class:`MLP` is either a single network (weights ``(in, out)``) or a
*stack* of ``E`` independent networks of identical shape (weights
``(E, in, out)``) evaluated in one batched matmul.  Critic ensembles are
stacks; because Adam is elementwise, one optimizer over a stack is
equivalent to ``E`` independent optimizers.
"""

from __future__ import annotations

import base64
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, ContractViolation, ModelMismatchError


def encode_array(a: np.ndarray) -> dict[str, Any]:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).astype(float)


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return params


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with stacked operands multiplied member by member.

    A Python loop of 2-D BLAS calls beats numpy's batched matmul here.
    """
    if a.ndim == 3 and b.ndim == 3:
        out = np.empty((a.shape[0], a.shape[1], b.shape[2]))
        for e in range(a.shape[0]):
            np.matmul(a[e], b[e], out=out[e])
        return out
    return a @ b


class MLP:
    """ReLU hidden layers, identity or range-squashed output.

    With ``output="tanh"`` the last layer maps through
    ``mid + half * tanh(z)`` onto ``out_range``.
    """

    def __init__(self, sizes: Sequence[int], params: list[np.ndarray], output: str = "identity",
                 out_range: tuple[float, float] = (-1.0, 1.0)):
        if output not in ("identity", "tanh"):
            raise ContractViolation(f"unknown output activation {output!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.out_range = (float(out_range[0]), float(out_range[1]))
        self.params = [np.array(p, dtype=float) for p in params]
        self.stack = self.params[0].shape[0] if self.params[0].ndim == 3 else None
        self._check_shapes()
        self._cache: tuple | None = None

    @classmethod
    def create(cls, sizes: Sequence[int], rngs: np.random.Generator | Sequence[np.random.Generator],
               output: str = "identity", out_range=(-1.0, 1.0)) -> "MLP":
        """Random network; passing a list of generators builds a stack."""
        if isinstance(rngs, np.random.Generator):
            return cls(sizes, init_params(sizes, rngs), output, out_range)
        members = [init_params(sizes, r) for r in rngs]
        params = []
        for i in range(len(members[0])):
            p = np.stack([m[i] for m in members])
            params.append(p if i % 2 == 0 else p[:, None, :])
        return cls(sizes, params, output, out_range)

    @classmethod
    def zeros(cls, sizes: Sequence[int], output: str = "identity", out_range=(-1.0, 1.0),
              stack: int | None = None) -> "MLP":
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if stack is None:
                params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
            else:
                params += [np.zeros((stack, fan_in, fan_out)), np.zeros((stack, 1, fan_out))]
        return cls(sizes, params, output, out_range)

    def _check_shapes(self) -> None:
        if len(self.params) != 2 * (len(self.sizes) - 1):
            raise ContractViolation("parameter count inconsistent with layer sizes")
        lead = () if self.stack is None else (self.stack,)
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            want_b = (fan_out,) if self.stack is None else (self.stack, 1, fan_out)
            if w.shape != lead + (fan_in, fan_out) or b.shape != want_b:
                raise ContractViolation(f"layer {i} has shapes {w.shape}/{b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def arch(self) -> dict[str, Any]:
        return {"sizes": list(self.sizes), "output": self.output,
                "out_range": list(self.out_range), "stack": self.stack}

    # -- evaluation -------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network, caching activations for :meth:`backward`.

        ``x`` is ``(in,)``, ``(B, in)``, or for stacks also ``(E, B, in)``.
        Stacks return ``(E, B, out)``.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise ContractViolation(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        inputs = []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            z = _matmul(h, self.params[2 * i])
            z += self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.maximum(z, 0.0, out=z)
            else:
                h = self._out(z)
        self._cache = (x.ndim, inputs, h, single)
        if single and self.stack is None:
            return h[0]
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def _out(self, z: np.ndarray) -> np.ndarray:
        if self.output == "identity":
            return z
        lo, hi = self.out_range
        return 0.5 * (hi + lo) + 0.5 * (hi - lo) * np.tanh(z)

    def backward(self, grad_out: np.ndarray, param_grads: bool = True, want_input: bool = True):
        """Back-propagate ``d objective / d output`` from the last forward.

        Returns ``(grads, grad_input)``; ``grads`` is ``None`` when
        ``param_grads`` is false.  For a stack fed a shared ``(B, in)`` input
        the input gradient is summed over stack members.  With ``want_input``
        false the input gradient is skipped and returned as ``None``.
        """
        if self._cache is None:
            raise ContractViolation("backward called without a cached forward pass")
        x_ndim, inputs, out, single = self._cache
        g = np.asarray(grad_out, dtype=float)
        if single and self.stack is None:
            g = g[None, :]
        if self.output == "tanh":
            lo, hi = self.out_range
            t = (out - 0.5 * (hi + lo)) / (0.5 * (hi - lo))
            g = g * 0.5 * (hi - lo) * (1.0 - t * t)
        grads = [None] * len(self.params) if param_grads else None
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                # the next layer's input is this layer's ReLU output, positive exactly where it passed
                np.multiply(g, inputs[i + 1] > 0, out=g)
            w = self.params[2 * i]
            if param_grads:
                h = inputs[i]
                grads[2 * i] = np.swapaxes(h, -1, -2) @ g if h.ndim == g.ndim else h.T @ g
                grads[2 * i + 1] = g.sum(axis=-2, keepdims=self.stack is not None)
            if i == 0 and not want_input:
                break
            g = _matmul(g, np.swapaxes(w, -1, -2))
        if not want_input:
            return grads, None
        if g.ndim > x_ndim:
            g = g.sum(axis=0)
        if single:
            g = g[0]
        return grads, g

    # -- parameter plumbing -----------------------------------------------
    def copy(self) -> "MLP":
        return MLP(self.sizes, [p.copy() for p in self.params], self.output, self.out_range)

    def same_arch(self, other: "MLP") -> bool:
        return self.arch() == other.arch()

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)

    def to_dict(self) -> dict[str, Any]:
        return {**self.arch(), "params": [encode_array(p) for p in self.params]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MLP":
        return cls(d["sizes"], [decode_array(p) for p in d["params"]], d["output"], tuple(d["out_range"]))


class Adam:
    """Adam with bias correction, one moment pair per parameter array."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ContractViolation("gradient shapes do not match parameters")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self) -> dict[str, Any]:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t,
                "m": [encode_array(a) for a in self.m], "v": [encode_array(a) for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Adam":
        opt = cls([], d["lr"], tuple(d["betas"]), d["eps"])
        opt.t = int(d["t"])
        opt.m = [decode_array(a) for a in d["m"]]
        opt.v = [decode_array(a) for a in d["v"]]
        return opt


@dataclass(frozen=True)
class TargetUpdateConfig:
    tau: float = 0.08
    delay: int = 15

    def validate(self, path: str = "agent.target_update") -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"{path}.tau", "tau must lie in (0, 1]")
        if self.delay < 1:
            raise ConfigError(f"{path}.delay", "delay must be >= 1")


def soft_update(target: MLP, online: MLP, config: TargetUpdateConfig, global_step: int) -> bool:
    """Blend ``target <- (1 - tau) target + tau online`` on every ``delay``-th step.

    Returns whether an update was applied.
    """
    if not target.same_arch(online):
        raise ModelMismatchError("target and online networks differ in architecture")
    if global_step % config.delay != 0:
        return False
    tau = config.tau
    for t, o in zip(target.params, online.params):
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
    return True
