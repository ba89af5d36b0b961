"""Numeric substrate: seeded randomness, a dense MLP with manual backprop, Adam.

Randomness
----------
Every random draw goes through :class:`SeededRng`, a thin wrapper over numpy's
PCG64 bit generator seeded with ``SeedSequence(seed, spawn_key=(stream_id,))``.
Normals come from numpy's ziggurat sampler (``Generator.standard_normal``).
The pair ``(seed, stream_id)`` therefore fixes the integer stream, and two
different stream ids give statistically independent streams.

Network
-------
Hidden layers use SiLU, ``x * sigmoid(x)``. It is smooth everywhere, so central
finite differences agree with the analytic gradient to high precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import TrainingDivergenceError

__all__ = [
    "SeededRng",
    "stream_id",
    "gaussian_vector",
    "poisson_subsample",
    "Mlp",
    "MlpGrads",
    "mlp_forward",
    "mlp_backward",
    "AdamState",
    "adam_step",
    "finite_diff_grad",
    "flatten",
    "unflatten",
]

_U64 = (1 << 64) - 1


def stream_id(label: str | int, *extra: int) -> int:
    """Map a component label (plus optional integer coordinates) to a 64-bit id."""
    if isinstance(label, int) and not extra:
        return label & _U64
    key = repr((label,) + tuple(int(e) for e in extra)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


class SeededRng:
    """Reproducible random stream keyed by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & _U64
        self.stream_id = stream_id(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str | int, *extra: int) -> "SeededRng":
        """Independent stream for a sub-component, derived from this one's ids."""
        return SeededRng(self.seed, stream_id(repr((self.stream_id, label)), *extra))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id:#018x})"


def gaussian_vector(rng: SeededRng, dim: int, std: float) -> np.ndarray:
    """``dim`` i.i.d. draws from N(0, std**2)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not np.isfinite(std) or std < 0:
        raise ValueError(f"std must be finite and nonnegative, got {std}")
    if std == 0:
        return np.zeros(dim)
    return std * rng.normal(dim)


def poisson_subsample(rng: SeededRng, n: int, q: float) -> np.ndarray:
    """Include each of ``range(n)`` independently with probability ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    if q == 0.0:
        return np.zeros(0, dtype=np.int64)
    if q == 1.0:
        return np.arange(n, dtype=np.int64)
    return np.flatnonzero(rng.uniform(n) < q).astype(np.int64)


# ---------------------------------------------------------------------------
# MLP


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Mlp:
    """Dense network ``layer_dims[0] -> ... -> layer_dims[-1]``.

    ``weights[i]`` has shape ``(layer_dims[i + 1], layer_dims[i])``. The output
    head is either ``"identity"`` or ``"sigmoid"`` (values squashed into [0, 1]).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"

    def __post_init__(self):
        if self.output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output head {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} != previous output")

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: SeededRng, output: str = "identity",
             final_scale: float = 1.0) -> "Mlp":
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer_dims {layer_dims}")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if i == len(dims) - 2:
                scale *= final_scale
            weights.append(scale * rng.normal((fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, output)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(list(params[0::2]), list(params[1::2]), self.output)

    def copy(self) -> "Mlp":
        return self.with_params([p.copy() for p in self.params()])


@dataclass
class MlpGrads:
    """Gradients matching :meth:`Mlp.params` order.

    With ``per_sample=True`` every array gains a leading batch axis.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.weights[0].shape[1]:
        raise ValueError(f"input shape {x.shape} incompatible with input dim {net.weights[0].shape[1]}")
    return x, single


def _forward_cache(net: Mlp, x: np.ndarray):
    acts, pres = [x], []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pres.append(z)
        if i < last:
            a = _silu(z)
        elif net.output == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
        acts.append(a)
    return acts, pres


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Forward pass for one input vector or a ``(batch, in)`` matrix."""
    xb, single = _as_batch(net, x)
    out = _forward_cache(net, xb)[0][-1]
    return out[0] if single else out


def mlp_backward(net: Mlp, x, output_grad, per_sample: bool = False):
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

    Returns ``(MlpGrads, input_grad)``. Batched inputs sum parameter gradients
    over the batch unless ``per_sample`` is set, in which case each array keeps
    a leading batch axis holding that example's own gradient.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], net.weights[-1].shape[0]):
        raise ValueError(f"output_grad shape {g.shape} does not match output {(xb.shape[0], net.weights[-1].shape[0])}")
    acts, pres = _forward_cache(net, xb)
    n = len(net.weights)
    if net.output == "sigmoid":
        s = acts[-1]
        delta = g * s * (1.0 - s)
    else:
        delta = g
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        a_prev = acts[i]
        if per_sample:
            gw[i] = np.einsum("bo,bi->boi", delta, a_prev)
            gb[i] = delta.copy()
        else:
            gw[i] = delta.T @ a_prev
            gb[i] = delta.sum(axis=0)
        back = delta @ net.weights[i]
        if i > 0:
            delta = back * _silu_grad(pres[i - 1])
    grads = MlpGrads(gw, gb)
    if single:
        back = back[0]
        if per_sample:
            grads = MlpGrads([w[0] for w in gw], [b[0] for b in gb])
    return grads, back


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient passed to Adam")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t, b1, b2, state.eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f(x)
        flat_x[i] = orig - h
        fm = f(x)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2 * h)
    return grad


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vector: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(np.asarray(vector[pos:pos + a.size]).reshape(a.shape))
        pos += a.size
    if pos != len(vector):
        raise ValueError(f"vector of length {len(vector)} does not match {pos} parameters")
    return out
