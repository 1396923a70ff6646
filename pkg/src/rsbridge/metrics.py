"""Sample-quality numbers for the 2D experiments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class EvalReport:
    sliced_w2: float
    mode_coverage: float | None
    per_mode_counts: list[int]
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def random_directions(n_proj: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n_proj, 2))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w2(A: np.ndarray, B: np.ndarray, n_proj: int, rng: np.random.Generator) -> float:
    """Mean over random unit directions of the 1D W2 between projections."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"sliced_w2 needs equally sized batches, got {A.shape} and {B.shape}")
    if A.shape[0] < 1 or n_proj < 1:
        raise ValueError("need at least one sample and one projection")
    dirs = random_directions(n_proj, rng)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def mode_coverage(samples: np.ndarray, centers: np.ndarray, radius: float, min_count: int) -> tuple[float, list[int]]:
    """Fraction of centers that receive at least ``min_count`` nearby samples.

    A sample counts for its nearest center, and only if it lies within ``radius``.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise ValueError("mode_coverage needs at least one center")
    if not radius > 0:
        raise ValueError("radius must be positive")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    counts = np.zeros(len(centers), dtype=int)
    if len(samples):
        d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        nearest = d2.argmin(axis=1)
        close = d2[np.arange(len(samples)), nearest] <= radius**2
        counts = np.bincount(nearest[close], minlength=len(centers))
    return float(np.mean(counts >= min_count)), counts.tolist()


def ring_membership(samples: np.ndarray, radii, tol: float) -> float:
    """Fraction of samples whose radius is within ``tol`` of one of ``radii``."""
    r = np.linalg.norm(np.asarray(samples).reshape(-1, 2), axis=1)
    if r.size == 0:
        return 0.0
    gap = np.min(np.abs(r[:, None] - np.asarray(radii, dtype=np.float64)[None, :]), axis=1)
    return float(np.mean(gap <= tol))
