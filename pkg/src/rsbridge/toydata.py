"""2D toy distributions: 8/25 Gaussians, checkerboard, circles and N(0, I)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("eight_gaussians", "twentyfive_gaussians", "checkerboard", "circles", "standard_gaussian")
MIXTURE_KINDS = ("eight_gaussians", "twentyfive_gaussians")

_DEFAULTS = {
    "eight_gaussians": (8.0, 0.3),
    "twentyfive_gaussians": (8.0, 0.15),
    "checkerboard": (4.0, 0.0),
    "circles": (8.0, 0.2),
    "standard_gaussian": (1.0, 0.0),
}


@dataclass(frozen=True)
class ToySpec:
    kind: str
    scale: float
    mode_std: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown toy distribution {self.kind!r}; choose from {KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.kind in MIXTURE_KINDS + ("circles",) and not self.mode_std > 0:
            raise ValueError(f"{self.kind} needs a positive mode_std")

    @classmethod
    def default(cls, kind: str, **overrides) -> "ToySpec":
        if kind not in _DEFAULTS:
            raise ValueError(f"unknown toy distribution {kind!r}; choose from {KINDS}")
        scale, std = _DEFAULTS[kind]
        return cls(kind, overrides.get("scale", scale), overrides.get("mode_std", std))

    @property
    def standardizer(self) -> float:
        """Divisor that brings samples roughly into [-2, 2]^2."""
        if self.kind == "standard_gaussian":
            return 1.0
        return self.scale / 2.0


def mode_centers(spec: ToySpec) -> np.ndarray:
    if spec.kind == "eight_gaussians":
        ang = np.arange(8) * np.pi / 4
        return spec.scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if spec.kind == "twentyfive_gaussians":
        g = np.arange(-2, 3, dtype=np.float64) * (spec.scale / 2)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)
    raise ValueError(f"{spec.kind} is not a Gaussian mixture; it has no mode centers")


def ring_radii(spec: ToySpec) -> tuple[float, float]:
    if spec.kind != "circles":
        raise ValueError("ring radii only exist for circles")
    return spec.scale, spec.scale / 2


def on_black_square(points: np.ndarray, scale: float) -> np.ndarray:
    """Checkerboard membership: cell indices with even parity are black."""
    cell = scale / 2
    inside = np.all(np.abs(points) <= scale, axis=1)
    ix = np.floor(points[:, 0] / cell).astype(int)
    iy = np.floor(points[:, 1] / cell).astype(int)
    return inside & ((ix + iy) % 2 == 0)


def sample(spec: ToySpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros((0, 2))
    if spec.kind == "standard_gaussian":
        return rng.standard_normal((n, 2))
    if spec.kind in MIXTURE_KINDS:
        centers = mode_centers(spec)
        idx = rng.integers(len(centers), size=n)
        return centers[idx] + spec.mode_std * rng.standard_normal((n, 2))
    if spec.kind == "circles":
        radii = np.array(ring_radii(spec))
        r = radii[rng.integers(2, size=n)] + spec.mode_std * rng.standard_normal(n)
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    # checkerboard: 8 black cells of a 4x4 board over [-scale, scale]^2
    cell = spec.scale / 2
    black = np.array([(i, j) for i in range(-2, 2) for j in range(-2, 2) if (i + j) % 2 == 0], dtype=np.float64)
    idx = rng.integers(len(black), size=n)
    return (black[idx] + rng.uniform(0.0, 1.0, size=(n, 2))) * cell


def write_points_csv(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in np.asarray(points).reshape(-1, 2):
            w.writerow([repr(float(x)), repr(float(y))])


def read_points_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 2))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])
