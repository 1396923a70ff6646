"""Iterative proportional fitting of the forward/backward drift networks.

Each half-stage freezes one direction, fills a replay cache with its
trajectories and regresses the other direction's kernel mean onto the
mean-matching target built from the frozen drift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from . import metrics, toydata
from .bridge import Direction, DriftRole, TimeGrid, drift_eval, rollout
from .nnet import (
    AdamConfig,
    Gradient,
    NonFiniteError,
    OptimizerState,
    ParameterSet,
    ema_update,
    init_optimizer,
    init_params,
    optimizer_step,
    regression_loss_and_grad,
)
from .toydata import ToySpec

log = logging.getLogger(__name__)

# Ratio of the full per-stage iteration budget to the desk default.
FULL_BUDGET_FACTOR = 5


class StaleCacheError(RuntimeError):
    """Minibatch was produced by a process other than the frozen one."""


class TrainingDiverged(NonFiniteError):
    pass


@dataclass(frozen=True)
class Task:
    kind: Literal["unconditional", "translation"]
    start: ToySpec
    end: ToySpec

    @classmethod
    def unconditional(cls, data: ToySpec) -> "Task":
        return cls("unconditional", data, ToySpec("standard_gaussian", 1.0))

    @classmethod
    def translation(cls, source: ToySpec, target: ToySpec) -> "Task":
        return cls("translation", source, target)

    @property
    def scales(self) -> tuple[float, float]:
        """Standardization divisors for the x_0 side and the x_T side."""
        if self.kind == "unconditional":
            return self.start.standardizer, 1.0
        shared = max(self.start.standardizer, self.end.standardizer)
        return shared, shared

    def sample_start(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return toydata.sample(self.start, n, rng) / self.scales[0]

    def sample_end(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return toydata.sample(self.end, n, rng) / self.scales[1]


@dataclass(frozen=True)
class TrainConfig:
    task: Task
    grid: TimeGrid
    alpha: float = 0.5
    beta_reg: float = 2.5
    ipf_stages: int = 10
    iters_backward: int = 4000
    iters_forward: int | None = None
    batch_size: int = 256
    cache_trajectories: int | None = None
    cache_refresh_every: int = 500
    lr: float = 1e-4
    lr_final: float | None = None  # geometric per-stage decay from lr; None keeps lr fixed
    hidden: tuple[int, ...] = (128, 128, 128)
    time_embed_dim: int = 32
    activation: str = "silu"
    ema: bool = True
    ema_decay: float = 0.999
    vp_beta_min: float = 0.1
    vp_beta_max: float = 3.0
    seed: int = 0
    log_every: int = 100
    eval_samples: int = 2000

    def __post_init__(self):
        if self.alpha < 0 or self.beta_reg < 0:
            raise ValueError("alpha and beta_reg must be non-negative")
        for name in ("ipf_stages", "iters_backward", "batch_size", "cache_refresh_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iters_forward is not None and self.iters_forward < 1:
            raise ValueError("iters_forward must be >= 1")
        if self.cache_trajectories is not None and self.cache_trajectories < 1:
            raise ValueError("cache_trajectories must be >= 1")
        if not self.lr > 0 or (self.lr_final is not None and not self.lr_final > 0):
            raise ValueError("learning rates must be positive")

    @property
    def forward_iters(self) -> int:
        if self.iters_forward is not None:
            return self.iters_forward
        if self.task.kind == "unconditional":
            return max(1, self.iters_backward // 2)
        return self.iters_backward

    @property
    def n_cache(self) -> int:
        return self.cache_trajectories or 10 * self.batch_size

    def stage_lr(self, stage: int) -> float:
        if self.lr_final is None or self.ipf_stages == 1:
            return self.lr
        frac = min(stage, self.ipf_stages - 1) / (self.ipf_stages - 1)
        return float(self.lr * (self.lr_final / self.lr) ** frac)

    def iters(self, direction: Direction) -> int:
        return self.iters_backward if direction == "backward" else self.forward_iters

    def initial_forward_role(self) -> DriftRole:
        if self.task.kind == "unconditional":
            return DriftRole.vp_linear(self.vp_beta_min, self.vp_beta_max)
        return DriftRole.zero()


# --------------------------------------------------------------------------
# regression targets and losses


def _gammas(grid: TimeGrid, t) -> np.ndarray:
    return grid.gammas[np.asarray(t)]


def _col(v):
    v = np.asarray(v, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def backward_target(frozen_forward: DriftRole, x_t, x_t1, t, grid: TimeGrid) -> np.ndarray:
    """x_{t+1} + F_t(x_t) - F_t(x_{t+1}), written as x_t + g_t (f_t(x_t) - f_t(x_{t+1}))."""
    g = _col(_gammas(grid, t))
    return x_t + g * (drift_eval(frozen_forward, x_t, t, grid) - drift_eval(frozen_forward, x_t1, t, grid))


def forward_target(frozen_backward: DriftRole, x_t1, x_t, t, grid: TimeGrid) -> np.ndarray:
    """x_t + B_{t+1}(x_{t+1}) - B_{t+1}(x_t), written as x_{t+1} + g_t (b(x_{t+1}) - b(x_t))."""
    g = _col(_gammas(grid, t))
    t1 = np.asarray(t) + 1
    return x_t1 + g * (drift_eval(frozen_backward, x_t1, t1, grid) - drift_eval(frozen_backward, x_t, t1, grid))


@dataclass(frozen=True, eq=False)
class Minibatch:
    x_t: np.ndarray
    x_t1: np.ndarray
    t: np.ndarray
    stamp: str
    target: np.ndarray | None = None  # precomputed by the producing cache
    anchor: np.ndarray | None = None  # trainee kernel mean before the half-stage


@dataclass(frozen=True, eq=False)
class ReplayCache:
    """Time-ordered trajectories ``(n, T+1, 2)`` from one frozen process."""

    states: np.ndarray
    stamp: str
    producer: Direction
    targets: np.ndarray | None = None
    anchors: np.ndarray | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Minibatch:
        """Uniform draw of (trajectory, t) pairs."""
        n, T1, _ = self.states.shape
        i = rng.integers(n, size=batch_size)
        t = rng.integers(T1 - 1, size=batch_size)
        target = None if self.targets is None else self.targets[i, t]
        anchor = None if self.anchors is None else self.anchors[i, t]
        return Minibatch(self.states[i, t], self.states[i, t + 1], t, self.stamp, target, anchor)


def kernel_mean(role: DriftRole, x, t_net, t_step, grid: TimeGrid) -> np.ndarray:
    """``x + gamma_{t_step} * drift(x, t_net)``: the mean of one transition."""
    return x + _col(_gammas(grid, t_step)) * drift_eval(role, x, t_net, grid)


def refresh_cache(
    frozen: DriftRole,
    endpoint_sampler: Callable[[int, np.random.Generator], np.ndarray],
    grid: TimeGrid,
    n_trajectories: int,
    rng: np.random.Generator,
    direction: Direction,
    anchor: DriftRole | None = None,
) -> ReplayCache:
    """Roll out ``n_trajectories`` chains of the frozen process in one batch.

    The regression targets of every (trajectory, t) pair are computed once
    here, since they depend only on the frozen process. With ``anchor`` (the
    trainee's role before the half-stage) its kernel means are stored too.
    """
    start = endpoint_sampler(n_trajectories, rng)
    traj = rollout(frozen, start, grid, rng, direction)
    states = np.ascontiguousarray(traj.time_ordered().transpose(1, 0, 2))
    n, T1, _ = states.shape
    t = np.repeat(np.arange(T1 - 1)[None, :], n, axis=0).ravel()
    x_t = states[:, :-1].reshape(-1, 2)
    x_t1 = states[:, 1:].reshape(-1, 2)
    if direction == "forward":
        targets = backward_target(frozen, x_t, x_t1, t, grid)
        inputs, t_net = x_t1, t + 1
    else:
        targets = forward_target(frozen, x_t1, x_t, t, grid)
        inputs, t_net = x_t, t
    anchors = None
    if anchor is not None:
        anchors = kernel_mean(anchor, inputs, t_net, t, grid).reshape(n, T1 - 1, 2)
    return ReplayCache(states, frozen.stamp, direction, targets.reshape(n, T1 - 1, 2), anchors)


def _trainee_terms(
    frozen: DriftRole,
    batch: Minibatch,
    direction: Direction,
    grid: TimeGrid,
    alpha: float,
    beta_reg: float,
    anchor: DriftRole | None = None,
):
    if batch.stamp != frozen.stamp:
        raise StaleCacheError(f"minibatch stamped {batch.stamp[:24]}... does not match frozen {frozen.stamp[:24]}...")
    if direction == "backward":
        inputs, t_net, other = batch.x_t1, batch.t + 1, batch.x_t
        target = batch.target if batch.target is not None else backward_target(frozen, batch.x_t, batch.x_t1, batch.t, grid)
    else:
        inputs, t_net, other = batch.x_t, batch.t, batch.x_t1
        target = batch.target if batch.target is not None else forward_target(frozen, batch.x_t1, batch.x_t, batch.t, grid)
    terms = [(target, 1.0)]
    # proximal term: stay near the kernel mean held before this half-stage
    if alpha:
        if batch.anchor is not None:
            prev = batch.anchor
        else:
            prev = kernel_mean(anchor or DriftRole.zero(), inputs, t_net, batch.t, grid)
        terms.append((prev, alpha))
    # direct regression of the kernel mean onto the neighbouring state
    if beta_reg:
        terms.append((other, beta_reg))
    return inputs, t_net, terms


def _regress(trainee: ParameterSet, inputs, t_net, terms, grid: TimeGrid, t) -> tuple[float, Gradient]:
    gammas = _gammas(grid, t)
    # Residual variance grows with gamma; weighting rows by (mean(gamma)/gamma_t)^2
    # keeps short steps from being starved. A uniform grid needs no weights.
    g = grid.gammas
    rw = None if np.all(g == g[0]) else (float(np.mean(g)) / gammas) ** 2
    return regression_loss_and_grad(trainee, inputs, t_net, grid.T, terms, offset=inputs, scale=gammas, row_weights=rw)


def dsb_loss(
    trainee: ParameterSet,
    frozen: DriftRole,
    batch: Minibatch,
    direction: Direction,
    grid: TimeGrid,
) -> tuple[float, Gradient]:
    """Mean-matching loss of the trainee's kernel mean ``x + gamma * net(x)``."""
    inputs, t_net, terms = _trainee_terms(frozen, batch, direction, grid, 0.0, 0.0)
    return _regress(trainee, inputs, t_net, terms, grid, batch.t)


def rsb_loss(
    trainee: ParameterSet,
    frozen: DriftRole,
    batch: Minibatch,
    direction: Direction,
    grid: TimeGrid,
    alpha: float,
    beta_reg: float,
    anchor: DriftRole | None = None,
) -> tuple[float, Gradient]:
    """Mean-matching loss plus the alpha/beta weighted regularizers.

    With the kernel mean ``M(x) = x + gamma * net(x)`` at the trainee's input
    ``x``, ``y`` the neighbouring state in the same trajectory pair and
    ``M_prev`` the trainee's kernel mean before the current half-stage::

        loss = E||M(x) - target||^2 + alpha * E||M(x) - M_prev(x)||^2 + beta * E||M(x) - y||^2

    The alpha term is a proximal penalty: it damps the swing between IPF
    iterates and vanishes at the IPF fixed point, so it does not bias the
    converged bridge. The beta term regresses the kernel mean directly onto
    the conditional mean E[y | x], which the mean-matching target only
    matches to first order in gamma. ``M_prev`` comes from ``batch.anchor``
    when the cache precomputed it, else from the ``anchor`` role (zero drift
    by default). ``alpha = beta = 0`` is exactly :func:`dsb_loss`.
    """
    if alpha < 0 or beta_reg < 0:
        raise ValueError("regularization weights must be non-negative")
    inputs, t_net, terms = _trainee_terms(frozen, batch, direction, grid, alpha, beta_reg, anchor)
    return _regress(trainee, inputs, t_net, terms, grid, batch.t)


# --------------------------------------------------------------------------
# IPF state and loop


@dataclass(frozen=True, eq=False)
class DirectionState:
    params: ParameterSet
    ema: ParameterSet
    opt: OptimizerState


@dataclass(frozen=True, eq=False)
class IPFState:
    stage: int
    forward: DirectionState
    backward: DirectionState
    forward_role: DriftRole
    backward_role: DriftRole
    caches: dict = field(default_factory=dict)
    history: tuple = ()

    def role(self, direction: Direction) -> DriftRole:
        return self.forward_role if direction == "forward" else self.backward_role

    def side(self, direction: Direction) -> DirectionState:
        return self.forward if direction == "forward" else self.backward


@dataclass(frozen=True)
class MetricRow:
    stage: int
    direction: str
    iteration: int
    loss: float | None = None
    sliced_w: float | None = None
    mode_coverage: float | None = None


def init_state(cfg: TrainConfig) -> IPFState:
    rng = np.random.default_rng([cfg.seed, 0xB1D])
    hyper = AdamConfig(lr=cfg.lr)
    sides = {}
    for d in ("forward", "backward"):
        p = init_params(rng, cfg.hidden, cfg.time_embed_dim, cfg.activation)
        sides[d] = DirectionState(p, p, init_optimizer(p, hyper))
    return IPFState(
        stage=0,
        forward=sides["forward"],
        backward=sides["backward"],
        forward_role=cfg.initial_forward_role(),
        backward_role=DriftRole.learned(sides["backward"].params),
    )


def _half_stage_rng(cfg: TrainConfig, stage: int, direction: Direction) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage, 0 if direction == "backward" else 1])


def evaluate_direction(role: DriftRole, cfg: TrainConfig, direction: Direction, rng: np.random.Generator) -> tuple[float, float | None]:
    """Sliced W2 (raw units) and mode coverage of samples generated in ``direction``."""
    task, n = cfg.task, cfg.eval_samples
    s0, s1 = task.scales
    if direction == "backward":
        start, spec, scale = task.sample_end(n, rng), task.start, s0
    else:
        start, spec, scale = task.sample_start(n, rng), task.end, s1
    out = rollout(role, start, cfg.grid, rng, "backward" if direction == "backward" else "forward", final_mean=True).terminal * scale
    truth = toydata.sample(spec, n, rng)
    sw = metrics.sliced_w2(out, truth, 256, rng)
    cov = None
    if spec.kind in toydata.MIXTURE_KINDS:
        centers = toydata.mode_centers(spec)
        cov, _ = metrics.mode_coverage(out, centers, 3 * spec.mode_std, max(1, n // 100))
    return sw, cov


def ipf_half_stage(
    state: IPFState,
    direction: Direction,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    *,
    iters: int | None = None,
) -> IPFState:
    """Train ``direction`` against the frozen opposite process."""
    iters = cfg.iters(direction) if iters is None else iters
    if iters < 1:
        raise ValueError("a half-stage needs at least one iteration")
    rng = rng or _half_stage_rng(cfg, state.stage, direction)
    other: Direction = "backward" if direction == "forward" else "forward"
    frozen = state.role(other)
    anchor = state.role(direction) if cfg.alpha else None
    if direction == "backward":
        sampler = cfg.task.sample_start
    else:
        sampler = cfg.task.sample_end
    side = state.side(direction)
    params, ema, opt = side.params, side.ema, side.opt
    opt = replace(opt, hyper=replace(opt.hyper, lr=cfg.stage_lr(state.stage)))
    cache = None
    rows = []
    running = []
    for it in range(iters):
        if it % cfg.cache_refresh_every == 0:
            cache = refresh_cache(frozen, sampler, cfg.grid, cfg.n_cache, rng, other, anchor)
        batch = cache.sample(cfg.batch_size, rng)
        try:
            loss, grad = rsb_loss(params, frozen, batch, direction, cfg.grid, cfg.alpha, cfg.beta_reg)
            params, opt = optimizer_step(params, grad, opt)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"stage {state.stage}, {direction} iteration {it}: {exc}") from exc
        ema = ema_update(ema, params, cfg.ema_decay) if cfg.ema else params
        running.append(loss)
        if (it + 1) % cfg.log_every == 0 or it == iters - 1:
            rows.append(MetricRow(state.stage, direction, it + 1, loss=float(np.mean(running))))
            running = []
    new_side = DirectionState(params, ema, opt)
    new_role = DriftRole.learned(ema if cfg.ema else params)
    caches = dict(state.caches)
    caches[other] = cache
    kwargs = {direction: new_side, f"{direction}_role": new_role}
    return replace(state, caches=caches, history=state.history + tuple(rows), **kwargs)


def train(
    cfg: TrainConfig,
    on_stage: Callable[[IPFState], None] | None = None,
    state: IPFState | None = None,
    evaluate: bool = True,
) -> IPFState:
    """Run ``cfg.ipf_stages`` backward/forward alternations."""
    state = state or init_state(cfg)
    while state.stage < cfg.ipf_stages:
        for direction in ("backward", "forward"):
            state = ipf_half_stage(state, direction, cfg)
            if evaluate:
                erng = np.random.default_rng([cfg.seed, state.stage, 7])
                sw, cov = evaluate_direction(state.role(direction), cfg, direction, erng)
                row = MetricRow(state.stage, direction, cfg.iters(direction), sliced_w=sw, mode_coverage=cov)
                state = replace(state, history=state.history + (row,))
                log.info("stage %d %s: sliced_w=%.4f coverage=%s", state.stage, direction, sw, cov)
        state = replace(state, stage=state.stage + 1)
        if on_stage is not None:
            on_stage(state)
    return state


def generate(
    state: IPFState,
    cfg: TrainConfig,
    n: int,
    direction: Direction,
    rng: np.random.Generator,
    start: np.ndarray | None = None,
    final_mean: bool = True,
):
    """Sample in raw data units; returns the full trajectory (raw units) too."""
    s0, s1 = cfg.task.scales
    if direction == "backward":
        x = cfg.task.sample_end(n, rng) if start is None else np.asarray(start, dtype=np.float64) / s1
        traj = rollout(state.backward_role, x, cfg.grid, rng, "backward", final_mean=final_mean)
        out_scale = s0
    else:
        x = cfg.task.sample_start(n, rng) if start is None else np.asarray(start, dtype=np.float64) / s0
        traj = rollout(state.forward_role, x, cfg.grid, rng, "forward", final_mean=final_mean)
        out_scale = s1
    return traj, out_scale


def baseline_backward_role(cfg: TrainConfig) -> DriftRole:
    """The untrained backward process (zero-initialized output layer)."""
    return init_state(cfg).backward_role
