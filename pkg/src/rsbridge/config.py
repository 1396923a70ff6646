"""TOML run configuration <-> :class:`~rsbridge.ipf.TrainConfig`."""

from __future__ import annotations

from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bridge import TimeGrid
from .ipf import FULL_BUDGET_FACTOR, Task, TrainConfig
from .toydata import ToySpec


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


_MISSING = object()


def _get(doc: dict, dotted: str, default: Any = _MISSING, kind=None):
    node: Any = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is _MISSING:
                raise ConfigError(dotted, "missing required field")
            return default
        node = node[part]
    if kind is not None:
        if kind is float and isinstance(node, int) and not isinstance(node, bool):
            node = float(node)
        if not isinstance(node, kind) or (kind is int and isinstance(node, bool)):
            raise ConfigError(dotted, f"expected {getattr(kind, '__name__', kind)}, got {type(node).__name__}")
    return node


def _toy(doc: dict, key: str) -> ToySpec:
    kind = _get(doc, f"task.{key}", kind=str)
    overrides = _get(doc, f"task.{key}_params", {}, dict)
    try:
        return ToySpec.default(kind, **{k: float(v) for k, v in overrides.items()})
    except ValueError as exc:
        raise ConfigError(f"task.{key}", str(exc)) from None


def config_from_dict(doc: dict, *, full_budget: bool | None = None, seed: int | None = None) -> TrainConfig:
    kind = _get(doc, "task.kind", kind=str)
    if kind == "unconditional":
        task = Task.unconditional(_toy(doc, "data"))
    elif kind == "translation":
        task = Task.translation(_toy(doc, "source"), _toy(doc, "target"))
    else:
        raise ConfigError("task.kind", f"expected 'unconditional' or 'translation', got {kind!r}")

    T = _get(doc, "grid.timesteps", kind=int)
    if T < 1:
        raise ConfigError("grid.timesteps", "must be >= 1")
    horizon = _get(doc, "grid.horizon", 1.0, float)
    if not horizon > 0:
        raise ConfigError("grid.horizon", "must be positive")
    gamma = _get(doc, "grid.gamma", None, list)
    if gamma is not None and len(gamma) != T:
        raise ConfigError("grid.gamma", f"needs exactly {T} step sizes")
    try:
        grid = TimeGrid.uniform(T, horizon) if gamma is None else TimeGrid(tuple(float(g) for g in gamma))
    except ValueError as exc:
        raise ConfigError("grid.gamma", str(exc)) from None

    budget = full_budget if full_budget is not None else _get(doc, "train.full_budget", False, bool)
    factor = FULL_BUDGET_FACTOR if budget else 1
    iters_b = _get(doc, "train.iters_backward", kind=int)
    iters_f = _get(doc, "train.iters_forward", None, int)

    kwargs = dict(
        task=task,
        grid=grid,
        alpha=_get(doc, "rsb.alpha", kind=float),
        beta_reg=_get(doc, "rsb.beta", kind=float),
        ipf_stages=_get(doc, "train.ipf_stages", 10, int),
        iters_backward=iters_b * factor,
        iters_forward=None if iters_f is None else iters_f * factor,
        batch_size=_get(doc, "train.batch_size", 256, int),
        cache_trajectories=_get(doc, "train.cache_trajectories", None, int),
        cache_refresh_every=_get(doc, "train.cache_refresh_every", 500, int),
        lr=_get(doc, "train.lr", 1e-4, float),
        lr_final=_get(doc, "train.lr_final", None, float),
        ema=_get(doc, "train.ema", True, bool),
        ema_decay=_get(doc, "train.ema_decay", 0.999, float),
        log_every=_get(doc, "train.log_every", 100, int),
        eval_samples=_get(doc, "train.eval_samples", 2000, int),
        hidden=tuple(_get(doc, "net.hidden", [128, 128, 128], list)),
        time_embed_dim=_get(doc, "net.time_embed_dim", 32, int),
        activation=_get(doc, "net.activation", "silu", str),
        vp_beta_min=_get(doc, "init.vp_beta_min", 0.1, float),
        vp_beta_max=_get(doc, "init.vp_beta_max", 3.0, float),
        seed=seed if seed is not None else _get(doc, "seed", 0, int),
    )
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None


def load_config(path: str | Path, **overrides) -> tuple[TrainConfig, dict]:
    """Parse a TOML file; returns the config and the raw document."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from None
    return config_from_dict(doc, **overrides), doc


def run_name(doc: dict, path: str | Path) -> str:
    name = doc.get("name")
    return name if isinstance(name, str) and name else Path(path).stem


def _toy_dict(spec: ToySpec) -> dict:
    return {"scale": spec.scale, "mode_std": spec.mode_std}


def config_to_dict(cfg: TrainConfig) -> dict:
    """Canonical document; ``config_from_dict`` inverts it exactly."""
    task: dict = {"kind": cfg.task.kind}
    if cfg.task.kind == "unconditional":
        task.update(data=cfg.task.start.kind, data_params=_toy_dict(cfg.task.start))
    else:
        task.update(
            source=cfg.task.start.kind,
            source_params=_toy_dict(cfg.task.start),
            target=cfg.task.end.kind,
            target_params=_toy_dict(cfg.task.end),
        )
    T = cfg.grid.T
    train = {
        "ipf_stages": cfg.ipf_stages,
        "iters_backward": cfg.iters_backward,
        "batch_size": cfg.batch_size,
        "cache_refresh_every": cfg.cache_refresh_every,
        "lr": cfg.lr,
        "ema": cfg.ema,
        "ema_decay": cfg.ema_decay,
        "log_every": cfg.log_every,
        "eval_samples": cfg.eval_samples,
        "full_budget": False,
    }
    if cfg.iters_forward is not None:
        train["iters_forward"] = cfg.iters_forward
    if cfg.cache_trajectories is not None:
        train["cache_trajectories"] = cfg.cache_trajectories
    if cfg.lr_final is not None:
        train["lr_final"] = cfg.lr_final
    return {
        "seed": cfg.seed,
        "task": task,
        "grid": {"timesteps": T, "gamma": list(cfg.grid.gamma)},
        "rsb": {"alpha": cfg.alpha, "beta": cfg.beta_reg},
        "train": train,
        "net": {"hidden": list(cfg.hidden), "time_embed_dim": cfg.time_embed_dim, "activation": cfg.activation},
        "init": {"vp_beta_min": cfg.vp_beta_min, "vp_beta_max": cfg.vp_beta_max},
    }
