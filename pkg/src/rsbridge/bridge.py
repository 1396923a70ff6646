"""Discrete-time Gaussian Markov kernels and trajectory rollouts.

Both directions use the same kernel shape: the next state is drawn from
``N(x + gamma_t * drift(x), 2 * gamma_t * I)``. A forward step from ``x_t``
uses drift index ``t``; a backward step from ``x_{t+1}`` uses drift index
``t + 1``. Both use the step size ``gamma_t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .nnet import NonFiniteError, ParameterSet, net_forward

Direction = Literal["forward", "backward"]


class DivergenceError(NonFiniteError):
    def __init__(self, message: str, timestep: int | None = None):
        super().__init__(message)
        self.timestep = timestep


@dataclass(frozen=True)
class TimeGrid:
    gamma: tuple[float, ...]

    def __post_init__(self):
        if len(self.gamma) < 1:
            raise ValueError("a time grid needs at least one step")
        if not all(g > 0 and np.isfinite(g) for g in self.gamma):
            raise ValueError("all step sizes must be positive and finite")

    @classmethod
    def uniform(cls, T: int, horizon: float = 1.0) -> "TimeGrid":
        if T < 1:
            raise ValueError("T must be >= 1")
        return cls(tuple([horizon / T] * T))

    @property
    def T(self) -> int:
        return len(self.gamma)

    @property
    def gammas(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=np.float64)


@dataclass(frozen=True)
class DriftRole:
    """What supplies the drift: a learned net, the VP linear drift, or nothing."""

    kind: Literal["learned", "vp_linear", "zero"]
    params: ParameterSet | None = None
    beta_min: float = 0.0
    beta_max: float = 0.0

    def __post_init__(self):
        if self.kind not in ("learned", "vp_linear", "zero"):
            raise ValueError(f"unknown drift role {self.kind!r}")
        if self.kind == "learned" and self.params is None:
            raise ValueError("a learned role needs parameters")
        if self.kind == "vp_linear" and not 0 <= self.beta_min <= self.beta_max:
            raise ValueError("need 0 <= beta_min <= beta_max")

    @classmethod
    def zero(cls) -> "DriftRole":
        return cls("zero")

    @classmethod
    def vp_linear(cls, beta_min: float, beta_max: float) -> "DriftRole":
        return cls("vp_linear", beta_min=float(beta_min), beta_max=float(beta_max))

    @classmethod
    def learned(cls, params: ParameterSet) -> "DriftRole":
        return cls("learned", params=params)

    @property
    def stamp(self) -> str:
        """Identity of the process; replay caches carry it to detect staleness."""
        if self.kind == "learned":
            return f"learned:{self.params.digest}"
        if self.kind == "vp_linear":
            return f"vp_linear:{self.beta_min!r}:{self.beta_max!r}"
        return "zero"


def vp_beta(role: DriftRole, t, T: int):
    return role.beta_min + (role.beta_max - role.beta_min) * (np.asarray(t, dtype=np.float64) / T)


def drift_eval(role: DriftRole, x: np.ndarray, t, grid: TimeGrid) -> np.ndarray:
    """Drift f_t(x) before the step-size factor. ``t`` may be per-row."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > grid.T):
        raise ValueError(f"timestep outside [0, {grid.T}]")
    if role.kind == "zero":
        return np.zeros_like(x)
    if role.kind == "vp_linear":
        beta = vp_beta(role, t, grid.T)
        if np.ndim(beta) == 1:
            beta = beta[:, None]
        return -0.5 * beta * x
    return net_forward(role.params, x, t, grid.T)


def transition(
    role: DriftRole,
    x: np.ndarray,
    t: int,
    grid: TimeGrid,
    rng: np.random.Generator,
    *,
    direction: Direction = "forward",
    noise: bool = True,
) -> np.ndarray:
    """One kernel step from time index ``t``.

    Forward: ``x`` is x_t, the result is x_{t+1}. Backward: ``x`` is x_t and
    the result is x_{t-1}, drawn with drift index ``t`` and step size
    ``gamma_{t-1}``. With ``noise=False`` the kernel mean is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if direction == "forward":
        if not 0 <= t < grid.T:
            raise ValueError(f"forward step needs 0 <= t < {grid.T}, got {t}")
        g = grid.gamma[t]
    else:
        if not 1 <= t <= grid.T:
            raise ValueError(f"backward step needs 1 <= t <= {grid.T}, got {t}")
        g = grid.gamma[t - 1]
    out = x + g * drift_eval(role, x, t, grid)
    if noise:
        out = out + np.sqrt(2.0 * g) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"{direction} kernel produced non-finite states at timestep {t}", timestep=t)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Rollout states in rollout order: ``states[0]`` is the starting batch."""

    states: np.ndarray
    direction: Direction
    grid: TimeGrid

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[0] != self.grid.T + 1 or self.states.shape[2] != 2:
            raise ValueError(f"trajectory states must be (T+1, n, 2), got {self.states.shape}")

    def time_ordered(self) -> np.ndarray:
        """States indexed by time: element ``t`` is x_t."""
        return self.states if self.direction == "forward" else self.states[::-1]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path: str | Path, scale: float = 1.0) -> None:
        """Columns ``t, sample_id, x, y``; ``t`` is the rollout step."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sample_id", "x", "y"])
            for k, batch in enumerate(self.states):
                for i, (x, y) in enumerate(batch * scale):
                    w.writerow([k, i, repr(float(x)), repr(float(y))])


def rollout(
    role: DriftRole,
    x_start: np.ndarray,
    grid: TimeGrid,
    rng: np.random.Generator,
    direction: Direction = "forward",
    *,
    final_mean: bool = False,
) -> Trajectory:
    """Run the chain over the whole grid.

    A forward rollout starts at x_0 and visits drift indices 0..T-1. A
    backward rollout starts at x_T and visits drift indices T..1.
    ``final_mean`` drops the noise of the last step (used for evaluation).
    """
    x = np.asarray(x_start, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("starting states must be finite")
    T = grid.T
    states = np.empty((T + 1,) + x.shape)
    states[0] = x
    for k in range(T):
        t = k if direction == "forward" else T - k
        last = k == T - 1
        x = transition(role, x, t, grid, rng, direction=direction, noise=not (final_mean and last))
        states[k + 1] = x
    return Trajectory(states, direction, grid)


def vp_closed_form(x0: np.ndarray, beta_min: float, beta_max: float, horizon: float) -> tuple[np.ndarray, float]:
    """Mean and per-coordinate variance of the VP SDE kernel p(x_t | x_0).

    ``beta`` rises linearly from ``beta_min`` to ``beta_max`` over ``[0, horizon]``.
    """
    integral = 0.5 * (beta_min + beta_max) * horizon
    return np.asarray(x0) * np.exp(-0.5 * integral), 1.0 - np.exp(-integral)


EndpointSampler = Callable[[int, np.random.Generator], np.ndarray]
