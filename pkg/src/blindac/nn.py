"""Dense-network substrate in numpy: MLP forward/backward, Adam, target
network soft updates, replay memory, OU exploration noise and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A gradient, loss or parameter stopped being finite."""


class ReplayNotReady(LookupError):
    """Replay memory holds fewer transitions than the requested batch."""


_ACTIVATIONS = ("tanh", "relu", "linear")


class MLP:
    """Fully connected network. Weights are stored as ``(fan_in, fan_out)``.

    All parameters live in one flat buffer ``flat``; ``params`` holds per-layer
    views ``[W0, b0, W1, b1, ...]`` into it.
    """

    def __init__(self, sizes: Sequence[int], hidden: str = "tanh", output: str = "linear",
                 rng: Optional[np.random.Generator] = None, out_scale: float = 1.0):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        if hidden not in _ACTIVATIONS or output not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden!r}/{output!r}")
        self.sizes = [int(s) for s in sizes]
        self.hidden = hidden
        self.output = output
        self._bind(np.zeros(self.n_params))
        rng = rng if rng is not None else np.random.default_rng(0)
        for i in range(self.n_layers):
            bound = 1.0 / math.sqrt(self.sizes[i])
            if i == self.n_layers - 1:
                bound *= out_scale
            w = self.params[2 * i]
            w[...] = rng.uniform(-bound, bound, size=w.shape)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def _bind(self, flat: np.ndarray) -> None:
        self.flat = flat
        self.params = self.split(flat)
        self._acts = [self.output if i == self.n_layers - 1 else self.hidden for i in range(self.n_layers)]

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        """Per-layer views ``[W0, b0, ...]`` into a flat parameter-shaped vector."""
        views = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            views.append(flat[off: off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            views.append(flat[off: off + fan_out])
            off += fan_out
        return views

    def activation(self, layer: int) -> str:
        return self._acts[layer]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns ``(output, cache)``; ``x`` is one vector or a ``(batch, in)`` array."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        h = x
        cache = [h]
        p = self.params
        for i, act in enumerate(self._acts):
            z = h @ p[2 * i]
            z += p[2 * i + 1]
            if act == "tanh":
                h = np.tanh(z, out=z)
            elif act == "relu":
                h = np.maximum(z, 0.0, out=z)
            else:
                h = z
            cache.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], upstream: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum(upstream * output)`` w.r.t. every parameter.

        Use :meth:`split` for the per-layer view.
        """
        g = np.asarray(upstream, dtype=float)
        if g.shape != cache[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {cache[-1].shape}")
        flat = np.empty(self.n_params)
        grads = self.split(flat)
        batched = g.ndim == 2
        for i in reversed(range(self.n_layers)):
            act = self._acts[i]
            h = cache[i + 1]
            if act == "tanh":
                gz = g * (1.0 - h * h)
            elif act == "relu":
                gz = g * (h > 0.0)
            else:
                gz = g
            h_prev = cache[i]
            if batched:
                np.matmul(h_prev.T, gz, out=grads[2 * i])
                np.sum(gz, axis=0, out=grads[2 * i + 1])
            else:
                np.outer(h_prev, gz, out=grads[2 * i])
                grads[2 * i + 1][...] = gz
            if i:
                g = gz @ self.params[2 * i].T
        return flat

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.sizes = list(self.sizes)
        clone.hidden = self.hidden
        clone.output = self.output
        clone._bind(self.flat.copy())
        return clone

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "hidden": self.hidden,
            "output": self.output,
            "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in d["sizes"]]
        net.hidden = d["hidden"]
        net.output = d["output"]
        if net.hidden not in _ACTIVATIONS or net.output not in _ACTIVATIONS:
            raise ValueError("unknown activation in checkpoint")
        net._bind(np.zeros(net.n_params))
        if len(d["params"]) != len(net.params):
            raise ValueError("checkpoint parameter count does not match declared sizes")
        for view, p in zip(net.params, d["params"]):
            if list(view.shape) != list(p["shape"]):
                raise ValueError("checkpoint layer shapes do not match declared sizes")
            view[...] = np.array(p["data"], dtype=float).reshape(view.shape)
        return net

    def equal(self, other: "MLP") -> bool:
        return self.sizes == other.sizes and np.array_equal(self.flat, other.flat)


class Adam:
    """Adam over one flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> None:
        """In-place descent step of ``params`` along ``grad``."""
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not np.isfinite(grad).all():
            bad = int(grad.size - np.count_nonzero(np.isfinite(grad)))
            raise NonFiniteError(f"non-finite gradient ({bad} non-finite entries, step {self.t})")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        m, v = self.m, self.v
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * (grad * grad)
        step_size = lr / (1.0 - b1 ** self.t)
        denom = np.sqrt(v / (1.0 - b2 ** self.t))
        denom += self.eps
        params -= step_size * m / denom


def soft_update(target: MLP, online: MLP, coeff: float) -> None:
    """target <- coeff * online + (1 - coeff) * target, in place."""
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    if target.sizes != online.sizes:
        raise ValueError("target and online networks differ in shape")
    target.flat[...] = coeff * online.flat + (1.0 - coeff) * target.flat


@dataclass
class OUNoise:
    theta: float = 0.2
    sigma: float = 0.4
    x: float = 0.0

    def step(self, dt: float, rng: np.random.Generator) -> float:
        if not dt > 0:
            raise ValueError("dt must be positive")
        noise = rng.standard_normal() if self.sigma else 0.0
        self.x = self.x + self.theta * (0.0 - self.x) * dt + self.sigma * math.sqrt(dt) * noise
        return self.x

    def reset(self) -> None:
        self.x = 0.0


@dataclass
class Transition:
    s: np.ndarray
    a: float
    r_prev: float
    r_next: float
    delta_t: float
    s_next: np.ndarray
    terminal: bool
    mc_sum: float = 0.0
    discount: float = 0.0


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r_prev: np.ndarray
    r_next: np.ndarray
    delta_t: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    mc_sum: np.ndarray
    discount: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.s[i], float(self.a[i]), float(self.r_prev[i]), float(self.r_next[i]),
                       float(self.delta_t[i]), self.s_next[i], bool(self.terminal[i]),
                       float(self.mc_sum[i]), float(self.discount[i]))
            for i in range(len(self))
        ]


class ReplayMemory:
    """FIFO ring buffer of transitions backed by growable numpy columns."""

    _scalar_cols = ("a", "r_prev", "r_next", "delta_t", "terminal", "mc_sum", "discount")

    def __init__(self, capacity: int, state_dim: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.size = 0
        self.head = 0
        self._alloc = 0
        self._s = np.empty((0, state_dim))
        self._s_next = np.empty((0, state_dim))
        self._cols = {name: np.empty(0) for name in self._scalar_cols}

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        new = min(self.capacity, max(1024, 2 * self._alloc))
        def grow(arr: np.ndarray) -> np.ndarray:
            out = np.empty((new,) + arr.shape[1:])
            out[: self._alloc] = arr[: self._alloc]
            return out
        self._s = grow(self._s)
        self._s_next = grow(self._s_next)
        self._cols = {k: grow(v) for k, v in self._cols.items()}
        self._alloc = new

    def push(self, tr: Transition) -> None:
        if self.head >= self._alloc:
            self._grow()
        i = self.head
        self._s[i] = tr.s
        self._s_next[i] = tr.s_next
        c = self._cols
        c["a"][i] = tr.a
        c["r_prev"][i] = tr.r_prev
        c["r_next"][i] = tr.r_next
        c["delta_t"][i] = tr.delta_t
        c["terminal"][i] = float(tr.terminal)
        c["mc_sum"][i] = tr.mc_sum
        c["discount"][i] = tr.discount
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ready(self, batch: int) -> bool:
        return self.size >= batch

    def oldest(self) -> Transition:
        if not self.size:
            raise ReplayNotReady("memory is empty")
        i = self.head if self.size == self.capacity else 0
        return self._at(np.array([i])).transitions()[0]

    def _indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        size = self.size
        if size < 4 * n:
            return rng.choice(size, n, replace=False)
        draw = rng.integers(0, size, 2 * n)
        _, first = np.unique(draw, return_index=True)
        if len(first) < n:
            return rng.choice(size, n, replace=False)
        return draw[np.sort(first)[:n]]

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample of ``n`` distinct transitions."""
        if self.size < n:
            raise ReplayNotReady(f"memory holds {self.size} < {n} transitions")
        return self._at(self._indices(n, rng))

    def _at(self, idx: np.ndarray) -> TransitionBatch:
        c = self._cols
        return TransitionBatch(
            self._s[idx], c["a"][idx], c["r_prev"][idx], c["r_next"][idx], c["delta_t"][idx],
            self._s_next[idx], c["terminal"][idx] > 0.5, c["mc_sum"][idx], c["discount"][idx], idx,
        )


def save_checkpoint(path: str | Path, nets: dict[str, MLP], meta: Optional[dict] = None) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "networks": {name: net.to_dict() for name, net in sorted(nets.items())},
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, MLP], dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    nets = {name: MLP.from_dict(d) for name, d in blob["networks"].items()}
    return nets, blob.get("meta", {})
