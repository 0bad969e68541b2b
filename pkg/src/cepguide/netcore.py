"""Small fully connected networks with hand-written reverse-mode gradients.

Everything is float64 so finite-difference checks are meaningful. A network
is a :class:`NetworkSpec` plus one flat parameter vector; per-layer weights
are views into that vector, so optimizers and target-network averaging work
on a single array.

Parameter layout (also the checkpoint blob layout): for each layer in order,
the weight matrix of shape ``(fan_in, fan_out)`` in row-major order followed
by the bias of length ``fan_out``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "cepguide-network/1"
TIME_EMBEDDINGS = ("none", "concat", "sinusoidal")
ACTIVATIONS = ("silu", "relu")


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int = 1
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_embedding: str = "sinusoidal"
    time_dim: int = 16
    cond_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"unknown time embedding {self.time_embedding!r}")
        if self.time_embedding == "sinusoidal" and (self.time_dim < 2 or self.time_dim % 2):
            raise ValueError("sinusoidal time_dim must be a positive even number")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")

    @property
    def time_features(self) -> int:
        return {"none": 0, "concat": 1, "sinusoidal": self.time_dim}[self.time_embedding]

    @property
    def feature_dim(self) -> int:
        return self.input_dim + self.time_features + self.cond_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.feature_dim, *self.hidden, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Sin/cos features of ``t`` at geometrically spaced frequencies in [1, 64]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, math.log(64.0), dim // 2))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _sigmoid(z):
    # in-place chain; clip keeps exp finite for very negative z
    s = np.clip(z, -700.0, None)
    np.negative(s, out=s)
    np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    return s


def _silu_grad(z, s):
    g = 1.0 - s
    g *= z
    g += 1.0
    g *= s
    return g


class Network:
    """A multilayer perceptron evaluated on batches of rows."""

    def __init__(self, spec: NetworkSpec, params: np.ndarray | None = None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.param_count)
        params = np.array(params, dtype=np.float64)
        if params.shape != (spec.param_count,):
            raise ValueError(f"expected {spec.param_count} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self._params = params
        self._bind()

    def _bind(self):
        self.layers = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            w = self._params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self._params[offset : offset + fan_out]
            offset += fan_out
            self.layers.append((w, b))

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._params.shape:
            raise ValueError("parameter shape mismatch")
        self._params[...] = value

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def copy(self) -> "Network":
        return Network(self.spec, self._params.copy())

    def features(self, x, t=None, c=None) -> np.ndarray:
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"expected input of shape (n, {spec.input_dim}), got {x.shape}")
        n = x.shape[0]
        parts = [x]
        if spec.time_embedding != "none":
            if t is None:
                raise ValueError("this network needs a time input")
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
            if spec.time_embedding == "concat":
                parts.append(tt[:, None])
            else:
                parts.append(sinusoidal_embedding(tt, spec.time_dim))
        if spec.cond_dim:
            if c is None:
                raise ValueError("this network needs a condition input")
            cc = np.asarray(c, dtype=np.float64)
            if cc.shape[-1] != spec.cond_dim:
                raise ValueError(f"condition must have {spec.cond_dim} columns, got {cc.shape}")
            parts.append(np.broadcast_to(cc, (n, spec.cond_dim)))
        elif c is not None:
            raise ValueError("this network takes no condition input")
        return np.concatenate(parts, axis=1) if len(parts) > 1 else x

    def forward_cached(self, x, t=None, c=None):
        """Forward pass on a 2-D batch, also returning what backward needs."""
        h = self.features(x, t, c)
        acts = [h]
        pre = []
        last = len(self.layers) - 1
        relu = self.spec.activation == "relu"
        for i, (w, b) in enumerate(self.layers):
            z = h @ w + b
            if i == last:
                h = z
            elif relu:
                pre.append((z, None))
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                s = _sigmoid(z)
                pre.append((z, s))
                h = z * s
                acts.append(h)
        return h, (acts, pre)

    def forward(self, x, t=None, c=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out, _ = self.forward_cached(x[None, :] if single else x, t, c)
        return out[0] if single else out

    __call__ = forward

    def backward(self, cache, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Pull ``grad_out`` back; returns (parameter gradient, input gradient).

        The input gradient covers only the ``x`` columns, not time or condition.
        """
        acts, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        grads = np.empty_like(self._params)
        offsets = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            offsets.append(offset)
            offset += fan_in * fan_out + fan_out
        relu = self.spec.activation == "relu"
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            fan_in, fan_out = w.shape
            o = offsets[i]
            grads[o : o + fan_in * fan_out] = (acts[i].T @ g).ravel()
            grads[o + fan_in * fan_out : o + fan_in * fan_out + fan_out] = g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                z, s = pre[i - 1]
                g = g * ((z > 0) if relu else _silu_grad(z, s))
        return grads, g[:, : self.spec.input_dim]


def init(spec: NetworkSpec, seed: int) -> Network:
    """Fan-in uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.param_count)
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / math.sqrt(fan_in)
        params[offset : offset + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
        offset += fan_in * fan_out + fan_out
    return Network(spec, params)


class Tape:
    """Records forward passes of one network so a loss can be pulled back.

    A loss closure receives the tape, calls it like the network, and returns
    ``(loss, upstream)`` where ``upstream`` lists ``d loss / d output`` for
    every call, in call order.
    """

    def __init__(self, net: Network):
        self.net = net
        self.caches = []

    def __call__(self, x, t=None, c=None):
        out, cache = self.net.forward_cached(x, t, c)
        self.caches.append(cache)
        return out


class _Plain:
    def __init__(self, net):
        self.net = net

    def __call__(self, x, t=None, c=None):
        return self.net.forward_cached(x, t, c)[0]


LossClosure = Callable[[Callable], tuple[float, Sequence[np.ndarray]]]


def loss_value(net: Network, loss_closure: LossClosure) -> float:
    return float(loss_closure(_Plain(net))[0])


def value_and_grad(net: Network, loss_closure: LossClosure) -> tuple[float, np.ndarray]:
    tape = Tape(net)
    loss, upstream = loss_closure(tape)
    loss = float(loss)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    if len(upstream) != len(tape.caches):
        raise ValueError("loss closure must return one upstream gradient per forward call")
    grad = np.zeros(net.param_count)
    for cache, g in zip(tape.caches, upstream):
        grad += net.backward(cache, g)[0]
    return loss, grad


def grad_params(net: Network, loss_closure: LossClosure) -> np.ndarray:
    return value_and_grad(net, loss_closure)[1]


def vjp_input(net: Network, x, t=None, c=None, v=None) -> np.ndarray:
    """``v^T d net(x) / dx`` per row; ``v`` defaults to ones."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out, cache = net.forward_cached(x, t, c)
    v = np.ones_like(out) if v is None else np.broadcast_to(np.asarray(v, dtype=np.float64), out.shape)
    return net.backward(cache, v)[1]


def grad_input(net: Network, x, t=None, c=None) -> np.ndarray:
    """Gradient of a scalar-output network w.r.t. ``x`` (rows or a single point)."""
    if net.spec.output_dim != 1:
        raise ValueError("grad_input needs a scalar-output network")
    x = np.asarray(x, dtype=np.float64)
    g = vjp_input(net, x, t, c)
    return g[0] if x.ndim == 1 else g


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta_m: float = 0.9
    beta_v: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, learning_rate: float = 1e-3, **kw) -> "OptimizerState":
        return cls(np.zeros(net.param_count), np.zeros(net.param_count), learning_rate=learning_rate, **kw)


def adam_step(net: Network, state: OptimizerState, gradient, learning_rate: float | None = None):
    """One bias-corrected Adam update, in place. Returns ``(net, state)``."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError("gradient length does not match optimizer state")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient; step skipped")
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    state.m *= state.beta_m
    state.m += (1.0 - state.beta_m) * g
    state.v *= state.beta_v
    state.v += (1.0 - state.beta_v) * g * g
    m_hat = state.m / (1.0 - state.beta_m**state.step_count)
    v_hat = state.v / (1.0 - state.beta_v**state.step_count)
    net.params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state


def polyak_update(target: Network, online: Network, tau: float) -> Network:
    if target.spec != online.spec:
        raise ValueError("target and online networks have different specs")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    return Network(target.spec, (1.0 - tau) * target.params + tau * online.params)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    frac = min(step / max(total, 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 512
    learning_rate: float = 1e-4
    cosine_decay: bool = False
    log_every: int = 100
    extra: dict = field(default_factory=dict)


def save_network(path, net: Network, metadata: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    header = {
        "format": CHECKPOINT_FORMAT,
        "spec": net.spec.to_dict(),
        "param_count": net.param_count,
        "dtype": "<f8",
        "blob": blob_path.name,
        "metadata": metadata or {},
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(net.params.astype("<f8").tobytes())
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path, blob_path


def load_network(path) -> tuple[Network, dict]:
    header_path = Path(path).with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {header.get('format')!r}")
    spec = NetworkSpec.from_dict(header["spec"])
    raw = (header_path.parent / header["blob"]).read_bytes()
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if params.size != header["param_count"]:
        raise ValueError("checkpoint blob length does not match header")
    return Network(spec, params), header["metadata"]
