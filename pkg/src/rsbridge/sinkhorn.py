"""Entropic optimal transport between discrete measures (Sinkhorn scaling).

Used as an oracle for the endpoint coupling of a learned bridge, and as a
standalone solver behind ``rsbridge oracle``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_DOMAIN_BELOW = 1e-2


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if support.shape[0] != weights.shape[0]:
            raise ValueError("support and weights must have the same length")
        if support.shape[0] == 0:
            raise ValueError("a measure needs at least one support point")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        if len(np.unique(support, axis=0)) != len(support):
            raise ValueError("support points must be distinct")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, support) -> "DiscreteMeasure":
        support = np.asarray(support, dtype=np.float64).reshape(-1, 2)
        return cls(support, np.full(len(support), 1.0 / len(support)))

    @classmethod
    def normalized(cls, support, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        # absorb rounding into the largest entry so the sum is 1 to the last ulp
        w[np.argmax(w)] += 1.0 - w.sum()
        return cls(support, w)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class Coupling:
    plan: np.ndarray
    row_measure: DiscreteMeasure
    col_measure: DiscreteMeasure
    n_iters: int = 0
    marginal_violation: float = 0.0
    converged: bool = True
    log_domain: bool = False

    def cost(self, C: np.ndarray) -> float:
        return float(np.sum(self.plan * C))


def cost_matrix(X: DiscreteMeasure, Y: DiscreteMeasure) -> np.ndarray:
    """Squared Euclidean cost between support points."""
    diff = X.support[:, None, :] - Y.support[None, :, :]
    return np.sum(diff * diff, axis=-1)


def gibbs_kernel(C: np.ndarray, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return np.exp(-np.asarray(C, dtype=np.float64) / eps)


def _violation(plan, a, b) -> float:
    return max(float(np.abs(plan.sum(axis=1) - a).sum()), float(np.abs(plan.sum(axis=0) - b).sum()))


def _solve_standard(a, b, C, eps, max_iters, tol):
    K = gibbs_kernel(C, eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    plan = None
    with np.errstate(over="raise", divide="raise", invalid="raise"):
        for it in range(1, max_iters + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise FloatingPointError("non-finite scaling")
            if it % 10 == 0 or it == max_iters:
                plan = u[:, None] * K * v[None, :]
                err = _violation(plan, a, b)
                if err <= tol:
                    return plan, it, err
    plan = u[:, None] * K * v[None, :]
    return plan, max_iters, _violation(plan, a, b)


def _solve_log(a, b, C, eps, max_iters, tol):
    with np.errstate(divide="ignore"):
        la, lb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    M = -C / eps

    def plan_of(f, g):
        return np.exp(f[:, None] + M + g[None, :])

    for it in range(1, max_iters + 1):
        f = la - logsumexp(M + g[None, :], axis=1)
        g = lb - logsumexp(M + f[:, None], axis=0)
        if it % 10 == 0 or it == max_iters:
            plan = plan_of(f, g)
            err = _violation(plan, a, b)
            if err <= tol:
                return plan, it, err
    plan = plan_of(f, g)
    return plan, max_iters, _violation(plan, a, b)


def sinkhorn_solve(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    eps: float,
    max_iters: int = 10_000,
    tol: float = 1e-9,
    log_domain: bool | None = None,
    C: np.ndarray | None = None,
) -> Coupling:
    """Entropic OT plan between ``mu`` and ``nu`` for squared Euclidean cost.

    Small ``eps`` (or an overflow in the plain iteration) switches to
    log-domain updates. Non-convergence is reported, not raised.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    C = cost_matrix(mu, nu) if C is None else np.asarray(C, dtype=np.float64)
    a, b = mu.weights, nu.weights
    use_log = eps <= LOG_DOMAIN_BELOW if log_domain is None else log_domain
    if not use_log:
        try:
            plan, it, err = _solve_standard(a, b, C, eps, max_iters, tol)
        except FloatingPointError:
            use_log = True
    if use_log:
        plan, it, err = _solve_log(a, b, C, eps, max_iters, tol)
    converged = err <= tol
    if not converged:
        warnings.warn(f"sinkhorn stopped after {it} iterations with marginal violation {err:.3e}", RuntimeWarning)
    return Coupling(plan, mu, nu, n_iters=it, marginal_violation=err, converged=converged, log_domain=use_log)


def coupling_objective(plan: np.ndarray, C: np.ndarray, eps: float, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Transport cost plus eps * KL(plan | mu x nu), with 0 log 0 = 0."""
    plan = np.asarray(plan, dtype=np.float64)
    ref = np.outer(mu.weights, nu.weights)
    pos = plan > 0
    kl = float(np.sum(plan[pos] * np.log(plan[pos] / ref[pos])))
    return float(np.sum(plan * C)) + eps * kl


def plan_entropy(plan: np.ndarray) -> float:
    p = plan[plan > 0]
    return float(-np.sum(p * np.log(p)))


# --------------------------------------------------------------------------
# comparing a learned bridge's endpoint coupling with the oracle


def _bin(points: np.ndarray, lo: np.ndarray, hi: np.ndarray, res: int) -> np.ndarray:
    rel = (points - lo) / np.where(hi > lo, hi - lo, 1.0)
    idx = np.clip(np.floor(rel * res).astype(int), 0, res - 1)
    return idx[:, 0] * res + idx[:, 1]


def _cell_centers(lo, hi, res):
    w = (hi - lo) / res
    i, j = np.divmod(np.arange(res * res), res)
    return np.stack([lo[0] + (i + 0.5) * w[0], lo[1] + (j + 0.5) * w[1]], axis=1)


def binned_coupling(x0: np.ndarray, xT: np.ndarray, grid_resolution: int):
    """Histogram endpoint pairs; returns (joint, mu, nu, row_cells, col_cells)."""
    res = grid_resolution
    lo0, hi0 = x0.min(axis=0), x0.max(axis=0)
    lo1, hi1 = xT.min(axis=0), xT.max(axis=0)
    i0 = _bin(x0, lo0, hi0, res)
    i1 = _bin(xT, lo1, hi1, res)
    joint = np.zeros((res * res, res * res))
    np.add.at(joint, (i0, i1), 1.0)
    joint /= len(x0)
    rows = np.flatnonzero(joint.sum(axis=1) > 0)
    cols = np.flatnonzero(joint.sum(axis=0) > 0)
    joint = joint[np.ix_(rows, cols)]
    mu = DiscreteMeasure.normalized(_cell_centers(lo0, hi0, res)[rows], joint.sum(axis=1))
    nu = DiscreteMeasure.normalized(_cell_centers(lo1, hi1, res)[cols], joint.sum(axis=0))
    return joint, mu, nu


def bridge_vs_oracle(endpoint_pairs: np.ndarray, grid_resolution: int, eps: float, max_iters: int = 10_000) -> float:
    """Total-variation distance between binned endpoint pairs and the Sinkhorn plan.

    ``endpoint_pairs`` has shape ``(n, 2, 2)``: ``[:, 0]`` are x_0, ``[:, 1]`` are x_T.
    Empty cells carry zero weight and are left out of the oracle problem.
    """
    pairs = np.asarray(endpoint_pairs, dtype=np.float64)
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 2):
        raise ValueError("endpoint_pairs must have shape (n, 2, 2)")
    if len(pairs) < 1000:
        raise ValueError("need at least 1000 endpoint pairs")
    joint, mu, nu = binned_coupling(pairs[:, 0], pairs[:, 1], grid_resolution)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        oracle = sinkhorn_solve(mu, nu, eps, max_iters=max_iters, tol=1e-10)
    return 0.5 * float(np.abs(joint - oracle.plan).sum())


def best_matching_eps(endpoint_pairs: np.ndarray, grid_resolution: int, eps_grid) -> tuple[float, float]:
    """Sweep ``eps_grid``; return (eps, discrepancy) with the smallest discrepancy."""
    scores = [(bridge_vs_oracle(endpoint_pairs, grid_resolution, e), e) for e in eps_grid]
    d, e = min(scores)
    return e, d


# --------------------------------------------------------------------------
# CSV / JSON surfaces


def read_measure_csv(path: str | Path) -> DiscreteMeasure:
    """Columns ``x,y,weight``; weights are normalised to sum to one."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: measure file has no rows")
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    w = np.array([float(r["weight"]) for r in rows])
    return DiscreteMeasure.normalized(pts, w)


def write_plan_csv(path: str | Path, plan: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(plan)):
            w.writerow([int(i), int(j), repr(float(plan[i, j]))])


def summary(coupling: Coupling, C: np.ndarray, eps: float) -> dict:
    return {
        "eps": eps,
        "n_iters": coupling.n_iters,
        "converged": coupling.converged,
        "marginal_violation": coupling.marginal_violation,
        "log_domain": coupling.log_domain,
        "transport_cost": coupling.cost(C),
        "objective": coupling_objective(coupling.plan, C, eps, coupling.row_measure, coupling.col_measure),
        "shape": list(coupling.plan.shape),
    }
