"""Time-conditioned dense network with hand-written backprop and Adam.

The drift networks are small enough that a numpy MLP is the simplest
exact implementation: one forward pass keeps the activations, one
reverse pass turns an output cotangent into parameter gradients.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

DATA_DIM = 2
ACTIVATIONS = ("relu", "silu", "tanh")
# first-layer gain on the point coordinates relative to the time features
DATA_INIT_GAIN = 2.0


class StructuralError(ValueError):
    """Raised when array shapes do not fit the network topology."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True, eq=False)
class ParameterSet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    time_embed_dim: int
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise StructuralError("need matching, non-empty weight and bias lists")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise StructuralError("time_embed_dim must be a positive even integer")
        fan_in = DATA_DIM + self.time_embed_dim
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != fan_in:
                raise StructuralError(f"layer {k}: weight shape {w.shape} does not chain from {fan_in}")
            if b.shape != (w.shape[0],):
                raise StructuralError(f"layer {k}: bias shape {b.shape} != ({w.shape[0]},)")
            fan_in = w.shape[0]
        if fan_in != DATA_DIM:
            raise StructuralError(f"last layer outputs {fan_in} dims, expected {DATA_DIM}")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("parameter entries must be finite")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], time_embed_dim: int, activation: str) -> "ParameterSet":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]), time_embed_dim, activation)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    @functools.cached_property
    def digest(self) -> str:
        """Content hash; used to stamp replay caches with their producer."""
        h = hashlib.sha1(f"{self.time_embed_dim}:{self.activation}".encode())
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def map(self, fn, *others: "ParameterSet") -> "ParameterSet":
        """Apply ``fn`` entrywise over this and congruent parameter sets."""
        arrays = [fn(*group) for group in zip(self.arrays(), *(o.arrays() for o in others))]
        return ParameterSet.from_arrays(arrays, self.time_embed_dim, self.activation)


# Gradients have exactly the layout of the parameters they differentiate.
Gradient = ParameterSet


def init_params(
    rng: np.random.Generator,
    hidden: Sequence[int] = (128, 128, 128),
    time_embed_dim: int = 32,
    activation: str = "silu",
    zero_last: bool = True,
) -> ParameterSet:
    sizes = [DATA_DIM + time_embed_dim, *hidden, DATA_DIM]
    weights, biases = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and k == len(sizes) - 2:
            weights.append(np.zeros((n_out, n_in)))
            biases.append(np.zeros(n_out))
            continue
        bound = 1.0 / np.sqrt(n_in)
        if k == 0:
            # separate fan-in per input block so the two point coordinates
            # are not drowned out by the wider time embedding
            w = np.concatenate(
                [
                    rng.uniform(-1.0, 1.0, size=(n_out, DATA_DIM)) * DATA_INIT_GAIN / np.sqrt(DATA_DIM),
                    rng.uniform(-1.0, 1.0, size=(n_out, time_embed_dim)) / np.sqrt(time_embed_dim),
                ],
                axis=1,
            )
            weights.append(w)
        else:
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return ParameterSet(tuple(weights), tuple(biases), time_embed_dim, activation)


def zeros_like(params: ParameterSet) -> ParameterSet:
    return params.map(np.zeros_like)


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/T; ``t`` may be a scalar or one index per row."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / float(T)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(200.0), half))
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(name: str, z: np.ndarray):
    """Activation value plus whatever its derivative needs later."""
    if name == "relu":
        return np.maximum(z, 0.0), z
    if name == "tanh":
        a = np.tanh(z)
        return a, a
    s = expit(z)
    return z * s, (z, s)


def _act_grad(name: str, saved) -> np.ndarray:
    if name == "relu":
        return (saved > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - saved * saved
    z, s = saved
    return s * (1.0 + z * (1.0 - s))


def _inputs(params: ParameterSet, x: np.ndarray, t, T: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != DATA_DIM:
        raise StructuralError(f"expected points of shape (n, {DATA_DIM}), got {x.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"timestep outside [0, {T}]")
    emb = time_embedding(t, T, params.time_embed_dim)
    if emb.shape[0] == 1 and x.shape[0] != 1:
        emb = np.broadcast_to(emb, (x.shape[0], emb.shape[1]))
    elif emb.shape[0] != x.shape[0]:
        raise StructuralError("per-row timesteps must match the batch size")
    return np.concatenate([x, emb], axis=1)


def _forward(params: ParameterSet, h: np.ndarray):
    pre, post = [], [h]
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if k == last:
            h = z
        else:
            h, saved = _act(params.activation, z)
            pre.append(saved)
        post.append(h)
    return h, (pre, post)


def _backward(params: ParameterSet, cache, dout: np.ndarray) -> Gradient:
    pre, post = cache
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = dout
    for k in range(n_layers - 1, -1, -1):
        gw[k] = delta.T @ post[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * _act_grad(params.activation, pre[k - 1])
    return ParameterSet(tuple(gw), tuple(gb), params.time_embed_dim, params.activation)


def net_forward(params: ParameterSet, x: np.ndarray, t, T: int) -> np.ndarray:
    """Evaluate the drift network on a batch of points at timestep(s) ``t``."""
    out, _ = _forward(params, _inputs(params, x, t, T))
    return out


def regression_loss_and_grad(
    params: ParameterSet,
    inputs: np.ndarray,
    t,
    T: int,
    terms: Sequence[tuple[np.ndarray, float]],
    *,
    offset: np.ndarray | None = None,
    scale: np.ndarray | float = 1.0,
    row_weights: np.ndarray | None = None,
) -> tuple[float, Gradient]:
    """Weighted sum of MSE terms sharing one prediction.

    The prediction is ``offset + scale * net(inputs, t)`` (``offset`` defaults
    to zero, ``scale`` may be per-row). Each term is ``(target, weight)`` and
    contributes ``weight * mean_i w_i ||pred_i - target_i||^2`` with per-row
    ``w_i`` from ``row_weights`` (all ones when omitted).
    """
    h0 = _inputs(params, inputs, t, T)
    n = h0.shape[0]
    if n == 0:
        raise ValueError("loss needs a non-empty batch")
    out, cache = _forward(params, h0)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim == 1:
        scale = scale[:, None]
    pred = scale * out if offset is None else offset + scale * out
    loss = 0.0
    dpred = np.zeros_like(pred)
    rw = None if row_weights is None else np.asarray(row_weights, dtype=np.float64)[:, None]
    for target, weight in terms:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != pred.shape:
            raise StructuralError(f"target shape {target.shape} != prediction shape {pred.shape}")
        r = pred - target if rw is None else (pred - target) * rw
        if rw is None:
            loss += weight * float(np.mean(np.sum(r * r, axis=1)))
            dpred += (2.0 * weight / n) * r
        else:
            loss += weight * float(np.mean(np.sum(r * (pred - target), axis=1)))
            dpred += (2.0 * weight / n) * r
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    return loss, _backward(params, cache, dpred * scale)


def loss_and_grad(params: ParameterSet, inputs: np.ndarray, t, T: int, targets: np.ndarray) -> tuple[float, Gradient]:
    """Mean squared Euclidean error of the raw network output and its gradient."""
    targets = np.asarray(targets, dtype=np.float64)
    if np.shape(inputs) != targets.shape:
        raise StructuralError("inputs and targets must have the same shape")
    return regression_loss_and_grad(params, inputs, t, T, [(targets, 1.0)])


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    hyper: AdamConfig = field(default_factory=AdamConfig)


def init_optimizer(params: ParameterSet, hyper: AdamConfig | None = None) -> OptimizerState:
    z = zeros_like(params)
    return OptimizerState(m=z, v=z, step=0, hyper=hyper or AdamConfig())


def optimizer_step(params: ParameterSet, grad: Gradient, state: OptimizerState) -> tuple[ParameterSet, OptimizerState]:
    """One bias-corrected Adam update. Non-finite gradients abort."""
    for g in grad.arrays():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient has non-finite entries")
    hp = state.hyper
    step = state.step + 1
    m = state.m.map(lambda m_, g: hp.beta1 * m_ + (1.0 - hp.beta1) * g, grad)
    v = state.v.map(lambda v_, g: hp.beta2 * v_ + (1.0 - hp.beta2) * g * g, grad)
    c1 = 1.0 - hp.beta1**step
    c2 = 1.0 - hp.beta2**step
    new = params.map(lambda p, m_, v_: p - hp.lr * (m_ / c1) / (np.sqrt(v_ / c2) + hp.eps), m, v)
    return new, replace(state, m=m, v=v, step=step)


def ema_update(ema: ParameterSet, params: ParameterSet, decay: float) -> ParameterSet:
    return ema.map(lambda e, p: decay * e + (1.0 - decay) * p, params)
