"""Self-checks shared by the command line and the test-suite.

``gradient_check`` compares the adjoint gradient with central differences of
the discretized objective; ``w2_selftest`` compares the assignment-based
Wasserstein distance with enumeration over permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mflab.dynamics import DEFAULT_STEPS_PER_LAYER
from mflab.measures import DataMeasure, DiscreteMeasure, ParameterPath, w2, w2_brute_force
from mflab.model import VectorFieldModel, make_model
from mflab.objective import eval_objective, wasserstein_gradient

__all__ = [
    "GradCheckResult",
    "relative_errors",
    "gradient_check",
    "random_instance",
    "W2SelfTest",
    "w2_selftest",
    "exponential_series",
    "lojasiewicz_series",
]

FD_STEP = 1e-5
GRAD_TOL = 1e-6
# Coordinates whose gradient is tiny compared with the largest one are
# compared against this fraction of the sup norm; their central differences
# carry only rounding noise of order eps * J / h.
REL_FLOOR = 1e-2


def relative_errors(fd: np.ndarray, g: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|fd - g| / max(|fd|, |g|, floor * max|g|)`` element-wise."""
    fd = np.asarray(fd, dtype=float)
    g = np.asarray(g, dtype=float)
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(g)), floor * np.max(np.abs(g), initial=0.0))
    diff = np.abs(fd - g)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(diff == 0.0, 0.0, diff / scale)


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_coordinates: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def gradient_check(model: VectorFieldModel, path: ParameterPath, data: DataMeasure, lam: float,
                   steps_per_layer: int = DEFAULT_STEPS_PER_LAYER, h: float = FD_STEP,
                   tol: float = GRAD_TOL, perturb: float = 0.0) -> GradCheckResult:
    """Coordinate-wise central differences against ``dt_k w_kj G[k, j]``.

    ``perturb`` adds a relative bias to the adjoint gradient before comparing
    and exists only to exercise the failure path.
    """
    G = wasserstein_gradient(model, path, data, lam, steps_per_layer)
    g = G.particle_gradient(path) * (1.0 + perturb)
    fd = np.empty_like(g)
    base = path.points
    for idx in np.ndindex(*base.shape):
        pts = base.copy()
        pts[idx] = base[idx] + h
        jp = eval_objective(model, path.with_points(pts), data, lam, steps_per_layer).J
        pts[idx] = base[idx] - h
        jm = eval_objective(model, path.with_points(pts), data, lam, steps_per_layer).J
        fd[idx] = (jp - jm) / (2.0 * h)
    rel = relative_errors(fd, g)
    return GradCheckResult(float(rel.max()), float(np.max(np.abs(fd - g))), g.size, tol)


def random_instance(rng: np.random.Generator, kind: str, d: int | None = None,
                    L: int | None = None, N: int | None = None, n: int | None = None,
                    max_m: int = 20, scale: float = 0.5):
    """Random (model, path, data) with ``m <= max_m`` and small L, N, n.

    Sizes left as ``None`` are drawn at random within the desk-scale limits.
    """
    if d is None:
        dims = [dd for dd in range(1, 5) if make_model(kind, dd).m <= max_m]
        d = int(rng.choice(dims))
    model = make_model(kind, d)
    L = int(rng.integers(1, 5)) if L is None else L
    N = int(rng.integers(1, 9)) if N is None else N
    n = int(rng.integers(1, 9)) if n is None else n
    path = ParameterPath(scale * rng.standard_normal((L, N, model.m)))
    x = rng.uniform(-1.0, 1.0, size=(n, d))
    y = rng.uniform(-1.0, 1.0, size=(n, d))
    return model, path, DataMeasure(x, y)


@dataclass(frozen=True)
class W2SelfTest:
    instances: int
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def w2_selftest(seed: int = 0, instances: int = 200, max_n: int = 6, max_dim: int = 5,
                tol: float = 1e-10) -> W2SelfTest:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        dim = int(rng.integers(1, max_dim + 1))
        a = DiscreteMeasure.uniform(rng.standard_normal((n, dim)))
        b = DiscreteMeasure.uniform(rng.standard_normal((n, dim)))
        worst = max(worst, abs(w2(a, b)[0] - w2_brute_force(a, b)))
    return W2SelfTest(instances, worst, tol)


def exponential_series(rate: float, j_star: float = 1.0, amplitude: float = 1.0,
                       tau_max: float = 10.0, n: int = 200):
    """``J = J* + a exp(-rate tau)`` with the matching slope ``sqrt(-dJ/dtau)``."""
    tau = np.linspace(0.0, tau_max, n)
    gap = amplitude * np.exp(-rate * tau)
    return tau, j_star + gap, np.sqrt(rate * gap)


def lojasiewicz_series(alpha: float, j_star: float = 0.0, C: float = 1.0,
                       tau_min: float = 1.0, tau_max: float = 1e3, n: int = 400):
    """Self-similar solution ``g = (q tau / C^2)^(-1/q)``, ``q = 1 - 2 alpha``.

    It solves ``dg/dtau = -(g^(1-alpha) / C)^2`` exactly, so the gap decays
    like ``tau^(-1/(1 - 2 alpha))`` and slope equals ``g^(1-alpha) / C`` at
    every sample.
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    q = 1.0 - 2.0 * alpha
    tau = np.geomspace(tau_min, tau_max, n)
    gap = (q * tau / C**2) ** (-1.0 / q)
    return tau, j_star + gap, gap ** (1.0 - alpha) / C
