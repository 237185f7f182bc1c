"""Discrete probability measures, layered parameter paths and exact optimal transport.

A :class:`ParameterPath` is a piecewise-constant curve ``t -> eta_t`` on a
layer grid ``0 = t_0 < ... < t_L = 1``; every layer is a discrete measure with
the same number of particles ``N`` in ``R^m``. Distances between layers are
exact 2-Wasserstein distances, obtained from an assignment solver when both
measures are uniform with equal counts and from a small linear program
otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from mflab.errors import (
    DimensionMismatch,
    GridMismatch,
    InvalidMeasure,
    SolverCapExceeded,
    TooFewLayers,
    TooLarge,
)

__all__ = [
    "DiscreteMeasure",
    "ParameterPath",
    "DataMeasure",
    "TransportPlan",
    "w2",
    "w1",
    "w2_brute_force",
    "path_distance",
    "time_marginal",
    "dirichlet_energy",
    "support_radius",
    "second_moment",
    "mix_paths",
    "DEFAULT_LP_CAP",
]

DEFAULT_LP_CAP = 512
# Lexicographic tie-breaking re-solves O(N^2) sub-assignments; beyond this
# size only the solver's own (deterministic) optimum is returned.
LEX_TIE_BREAK_MAX_N = 128
_WEIGHT_TOL = 1e-12


def _as_points(points) -> np.ndarray:
    pts = np.array(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise InvalidMeasure(f"points must be a 2-d array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure ``sum_i w_i delta_{x_i}``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] < 1 or pts.shape[0] != w.shape[0]:
            raise InvalidMeasure(
                f"need len(points) == len(weights) >= 1, got {pts.shape[0]} and {w.shape[0]}"
            )
        if not np.all(np.isfinite(pts)):
            raise InvalidMeasure("points contain non-finite coordinates")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidMeasure("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise InvalidMeasure(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = _as_points(points)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.size) <= _WEIGHT_TOL))

    def shifted(self, c) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + np.asarray(c, dtype=float), self.weights)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two discrete measures.

    ``pairs`` is an integer array of ``(source, target)`` indices sorted
    lexicographically and ``mass`` holds the matching masses.
    """

    pairs: np.ndarray
    mass: np.ndarray
    cost: float

    def marginals(self, n_source: int, n_target: int) -> tuple[np.ndarray, np.ndarray]:
        a = np.bincount(self.pairs[:, 0], weights=self.mass, minlength=n_source)
        b = np.bincount(self.pairs[:, 1], weights=self.mass, minlength=n_target)
        return a, b

    def permutation(self) -> np.ndarray:
        """Target index for each source index; only meaningful for assignment plans."""
        perm = np.full(self.pairs[:, 0].max() + 1, -1, dtype=int)
        perm[self.pairs[:, 0]] = self.pairs[:, 1]
        return perm


def _sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _euclid_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(_sq_cost(a, b))


def _lexicographic_assignment(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment whose column sequence is lexicographically smallest."""
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=int)
    perm[rows] = cols
    if n > LEX_TIE_BREAK_MAX_N:
        return perm
    best = float(cost[np.arange(n), perm].sum())
    tol = 1e-12 * (1.0 + abs(best)) * n
    fixed = 0.0
    free_cols = list(range(n))
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        for j in free_cols:
            if j >= perm[i]:
                break
            cols_left = [c for c in free_cols if c != j]
            sub = cost[np.ix_(rest_rows, cols_left)] if rest_rows.size else None
            value = fixed + cost[i, j]
            if sub is not None:
                r, c = linear_sum_assignment(sub)
                value += float(sub[r, c].sum())
            if value <= best + tol:
                perm[i] = j
                if sub is not None:
                    perm[rest_rows[r]] = np.asarray(cols_left)[c]
                break
        fixed += cost[i, perm[i]]
        free_cols.remove(perm[i])
    return perm


def _check_dims(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"measures live in R^{a.dim} and R^{b.dim}")


def _transport(a: DiscreteMeasure, b: DiscreteMeasure, cost: np.ndarray,
               lp_cap: int, tie_break: bool) -> TransportPlan:
    if a.size == b.size and a.is_uniform() and b.is_uniform():
        n = a.size
        if tie_break:
            perm = _lexicographic_assignment(cost)
        else:
            rows, cols = linear_sum_assignment(cost)
            perm = np.empty(n, dtype=int)
            perm[rows] = cols
        pairs = np.column_stack([np.arange(n), perm])
        mass = np.full(n, 1.0 / n)
        return TransportPlan(pairs, mass, float(cost[np.arange(n), perm].sum() / n))

    na, nb = a.size, b.size
    if na + nb > lp_cap:
        raise SolverCapExceeded(
            f"support size {na + nb} exceeds the exact LP cap {lp_cap}"
        )
    # Equality constraints: row sums = a.weights, column sums = b.weights.
    A_rows = sparse.kron(sparse.eye(na), np.ones((1, nb)))
    A_cols = sparse.kron(np.ones((1, na)), sparse.eye(nb))
    A_eq = sparse.vstack([A_rows, A_cols]).tocsr()
    b_eq = np.concatenate([a.weights, b.weights])
    res = linprog(cost.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverCapExceeded(f"LP solver failed: {res.message}")
    gamma = np.clip(res.x.reshape(na, nb), 0.0, None)
    src, tgt = np.nonzero(gamma > 1e-15)
    mass = gamma[src, tgt]
    return TransportPlan(np.column_stack([src, tgt]), mass, float(np.sum(cost[src, tgt] * mass)))


def w2(a: DiscreteMeasure, b: DiscreteMeasure, *, lp_cap: int = DEFAULT_LP_CAP,
       tie_break: bool = True) -> tuple[float, TransportPlan]:
    """Exact 2-Wasserstein distance and an optimal plan.

    Uniform measures with equal support size are solved as an assignment
    problem (Birkhoff: some optimal plan is a permutation). Among optimal
    permutations the lexicographically smallest is returned when
    ``tie_break`` is set. Anything else goes to an LP with at most
    ``lp_cap`` support points in total.
    """
    _check_dims(a, b)
    plan = _transport(a, b, _sq_cost(a.points, b.points), lp_cap, tie_break)
    return float(np.sqrt(max(plan.cost, 0.0))), plan


def w1(a: DiscreteMeasure, b: DiscreteMeasure, *, lp_cap: int = DEFAULT_LP_CAP) -> float:
    """Exact 1-Wasserstein distance (Euclidean ground cost)."""
    _check_dims(a, b)
    return _transport(a, b, _euclid_cost(a.points, b.points), lp_cap, False).cost


def w2_brute_force(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Minimum over all N! matchings; test oracle for :func:`w2`."""
    _check_dims(a, b)
    n = a.size
    if b.size != n or not (a.is_uniform() and b.is_uniform()):
        raise InvalidMeasure("brute force needs uniform weights and equal counts")
    if n > 8:
        raise TooLarge(f"N={n} > 8 matchings is too many to enumerate")
    cost = _sq_cost(a.points, b.points)
    rows = np.arange(n)
    best = min(cost[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return float(np.sqrt(best / n))


@dataclass(frozen=True)
class ParameterPath:
    """Piecewise-constant curve of parameter measures over the layer grid.

    ``points`` has shape ``(L, N, m)`` and ``weights`` shape ``(L, N)``;
    layer ``k`` is the measure used on ``[t_k, t_{k+1})``.
    """

    points: np.ndarray
    weights: np.ndarray = None
    layer_grid: np.ndarray = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 3 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidMeasure(f"points must have shape (L, N, m), got {pts.shape}")
        L, N, _ = pts.shape
        w = (np.full((L, N), 1.0 / N) if self.weights is None
             else np.array(self.weights, dtype=float))
        grid = (np.linspace(0.0, 1.0, L + 1) if self.layer_grid is None
                else np.array(self.layer_grid, dtype=float))
        if w.shape != (L, N):
            raise InvalidMeasure(f"weights must have shape {(L, N)}, got {w.shape}")
        if grid.shape != (L + 1,):
            raise GridMismatch(f"layer grid needs {L + 1} breakpoints, got {grid.shape}")
        if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
            raise GridMismatch("layer grid must increase strictly from 0 to 1")
        if not np.all(np.isfinite(pts)):
            raise InvalidMeasure("path contains non-finite particles")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > _WEIGHT_TOL):
            raise InvalidMeasure("each layer's weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "layer_grid", grid)
        object.__setattr__(self, "_dt", np.diff(grid))

    @property
    def n_layers(self) -> int:
        return self.points.shape[0]

    @property
    def n_particles(self) -> int:
        return self.points.shape[1]

    @property
    def particle_dim(self) -> int:
        return self.points.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return self._dt

    @property
    def layers(self) -> list[DiscreteMeasure]:
        return [DiscreteMeasure(p, w) for p, w in zip(self.points, self.weights)]

    def layer(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.points[k], self.weights[k])

    def with_points(self, points) -> "ParameterPath":
        return ParameterPath(points, self.weights, self.layer_grid)

    @classmethod
    def from_layers(cls, layers, layer_grid=None) -> "ParameterPath":
        sizes = {(lay.size, lay.dim) for lay in layers}
        if len(sizes) != 1:
            raise DimensionMismatch("all layers must share particle count and dimension")
        return cls(np.stack([lay.points for lay in layers]),
                   np.stack([lay.weights for lay in layers]), layer_grid)


@dataclass(frozen=True)
class DataMeasure:
    """Empirical data distribution ``sum_i w_i delta_{(x_i, y_i)}`` on a bounded ball."""

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray = None
    radius: float = None

    def __post_init__(self):
        x = _as_points(self.x)
        y = _as_points(self.y)
        if x.shape != y.shape:
            raise DimensionMismatch(f"x and y shapes differ: {x.shape} vs {y.shape}")
        n = x.shape[0]
        w = np.full(n, 1.0 / n) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise InvalidMeasure("data weights must be nonnegative and sum to 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidMeasure("data contain non-finite values")
        norms = np.sqrt(np.sum(x**2, axis=1) + np.sum(y**2, axis=1))
        radius = float(norms.max()) if self.radius is None else float(self.radius)
        if norms.max() > radius * (1 + 1e-12):
            raise InvalidMeasure(
                f"sample of norm {norms.max():.6g} lies outside the declared ball of radius {radius}"
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "radius", radius)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def as_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(np.hstack([self.x, self.y]), self.weights)


def _check_grids(p: ParameterPath, q: ParameterPath) -> None:
    if p.layer_grid.shape != q.layer_grid.shape or np.any(p.layer_grid != q.layer_grid):
        raise GridMismatch("paths live on different layer grids")


def path_distance(p: ParameterPath, q: ParameterPath) -> float:
    """L^2(0,1; W_2) distance between two piecewise-constant paths."""
    _check_grids(p, q)
    sq = [w2(a, b, tie_break=False)[0] ** 2 for a, b in zip(p.layers, q.layers)]
    return float(np.sqrt(np.dot(p.dt, sq)))


def time_marginal(p: ParameterPath) -> DiscreteMeasure:
    """Pool the layers into the single measure ``int eta_t dt``."""
    w = (p.weights * p.dt[:, None]).reshape(-1)
    return DiscreteMeasure(p.points.reshape(-1, p.particle_dim), w / w.sum())


def dirichlet_energy(p: ParameterPath) -> float:
    """Forward-difference estimate of ``1/2 int |d eta/dt|^2 dt``.

    Consecutive layers are treated as samples at their left breakpoints, so
    the metric derivative between layers k and k+1 is
    ``W_2(eta_{k+1}, eta_k) / (t_{k+1} - t_k)``.
    """
    if p.n_layers < 2:
        raise TooFewLayers("the Dirichlet energy needs at least two layers")
    layers = p.layers
    total = 0.0
    for k in range(p.n_layers - 1):
        dist = w2(layers[k + 1], layers[k], tie_break=False)[0]
        total += dist**2 / (p.layer_grid[k + 1] - p.layer_grid[k])
    return 0.5 * total


def support_radius(p: ParameterPath) -> float:
    mask = p.weights > 0
    return float(np.max(np.linalg.norm(p.points, axis=-1)[mask], initial=0.0))


def second_moment(p: ParameterPath) -> float:
    """``sum_k dt_k sum_i w_i |theta_i|^2``."""
    sq = np.sum(p.points**2, axis=-1)
    return float(np.dot(p.dt, np.sum(p.weights * sq, axis=1)))


def mix_paths(p: ParameterPath, q: ParameterPath, tau: float) -> ParameterPath:
    """Flat (mass) interpolation ``(1 - tau) p + tau q`` layer by layer."""
    _check_grids(p, q)
    if p.particle_dim != q.particle_dim or p.n_layers != q.n_layers:
        raise DimensionMismatch("paths must share L and m to be mixed")
    return ParameterPath(
        np.concatenate([p.points, q.points], axis=1),
        np.concatenate([(1.0 - tau) * p.weights, tau * q.weights], axis=1),
        p.layer_grid,
    )
