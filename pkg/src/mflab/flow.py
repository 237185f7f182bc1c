"""Explicit-Euler particle discretization of the Wasserstein gradient flow of J.

Every particle follows ``d theta / d tau = -G[eta(tau)](t_k, theta)``; one
Euler step of size ``dtau`` is plain gradient descent on the discretized
objective in the ``L^2(0,1; L^2(eta_t))`` metric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.ndimage import uniform_filter1d

from mflab.dynamics import DEFAULT_STEPS_PER_LAYER
from mflab.errors import InsufficientData, NonFinite, StepFailure
from mflab.measures import DataMeasure, ParameterPath, dirichlet_energy, support_radius
from mflab.model import SquaredError, VectorFieldModel
from mflab.objective import (
    GradientField,
    ObjectiveReport,
    eval_objective,
    objective_and_gradient,
)

__all__ = [
    "FlowConfig",
    "FlowRecord",
    "FlowTrace",
    "StepReport",
    "DissipationReport",
    "flow_step",
    "run_flow",
    "dissipation_check",
    "sample_initial_path",
]

# Relative slack on "J did not increase": below this the comparison is rounding noise.
_MONOTONE_RTOL = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class FlowConfig:
    lam: float = 0.1
    dtau: float = 1e-2
    tau_max: float = 10.0
    stop_slope: float = 0.0
    record_every: int = 1
    steps_per_layer: int = DEFAULT_STEPS_PER_LAYER
    seed: int = 0
    backtracking: bool = False
    shrink: float = 0.5
    max_backtracks: int = 30
    max_wall_seconds: float | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")
        if self.tau_max < 0 or self.stop_slope < 0:
            raise ValueError("tau_max and stop_slope must be nonnegative")
        if self.record_every < 1 or self.steps_per_layer < 1:
            raise ValueError("record_every and steps_per_layer must be >= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass(frozen=True)
class StepReport:
    J_before: float
    slope: float
    step_size: float
    backtracks: int
    J_after: float | None = None


@dataclass(frozen=True)
class FlowRecord:
    tau: float
    J: float
    L: float
    reg: float
    slope: float
    support_radius: float
    dirichlet: float
    step_size: float
    accepted: bool
    grad_sup: float = float("nan")


@dataclass
class FlowTrace:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    snapshot_index: list = field(default_factory=list)
    stop_reason: str = ""
    steps: int = 0

    def _column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def tau(self) -> np.ndarray:
        return self._column("tau")

    @property
    def J(self) -> np.ndarray:
        return self._column("J")

    @property
    def slope(self) -> np.ndarray:
        return self._column("slope")

    def column(self, name: str) -> np.ndarray:
        """Any :class:`FlowRecord` field as an array."""
        return self._column(name)

    @property
    def final_path(self) -> ParameterPath:
        return self.snapshots[-1]

    def snapshot_records(self) -> list:
        return [self.records[i] for i in self.snapshot_index]


def flow_step(model: VectorFieldModel, path: ParameterPath, data: DataMeasure | None,
              cfg: FlowConfig, loss: SquaredError | None = None,
              current: tuple[ObjectiveReport, GradientField] | None = None,
              ) -> tuple[ParameterPath, StepReport]:
    """One Euler step ``theta <- theta - dtau * G``, optionally with backtracking.

    With backtracking the step is halved (``cfg.shrink``) while J increases,
    at most ``cfg.max_backtracks`` times.
    """
    if current is None:
        current = objective_and_gradient(model, path, data, cfg.lam, cfg.steps_per_layer, loss)
    rep, G = current
    dt = cfg.dtau
    new_points = path.points - dt * G.values
    if not np.all(np.isfinite(new_points)):
        raise NonFinite("Euler step produced non-finite particles")
    new_path = path.with_points(new_points)
    if not cfg.backtracking:
        return new_path, StepReport(rep.J, rep.slope, dt, 0)

    limit = rep.J + _MONOTONE_RTOL * abs(rep.J)
    J_new = eval_objective(model, new_path, data, cfg.lam, cfg.steps_per_layer, loss).J
    backtracks = 0
    while not J_new <= limit:
        backtracks += 1
        if backtracks > cfg.max_backtracks:
            raise StepFailure(f"J still increases after {cfg.max_backtracks} step halvings")
        dt *= cfg.shrink
        new_path = path.with_points(path.points - dt * G.values)
        J_new = eval_objective(model, new_path, data, cfg.lam, cfg.steps_per_layer, loss).J
    return new_path, StepReport(rep.J, rep.slope, dt, backtracks, J_new)


def _record(path, current, tau, step_size, accepted) -> FlowRecord:
    rep, G = current
    dirichlet = dirichlet_energy(path) if path.n_layers >= 2 else float("nan")
    return FlowRecord(tau, rep.J, rep.L, rep.regularizer, rep.slope,
                      support_radius(path), dirichlet, step_size, bool(accepted), G.sup_norm())


def run_flow(model: VectorFieldModel, path0: ParameterPath, data: DataMeasure | None,
             cfg: FlowConfig, loss: SquaredError | None = None, callback=None,
             snapshot_every: int = 1) -> FlowTrace:
    """Iterate :func:`flow_step` until the slope drops below ``cfg.stop_slope`` or ``tau_max``.

    Diagnostics are recorded every ``cfg.record_every`` steps and always at
    the final state; a path snapshot is kept for every ``snapshot_every``-th
    record (0 keeps only the first and last). ``accepted`` on a record tells
    whether the step leading to it did not increase J. ``callback(record,
    path)`` is invoked after each record.
    """
    if snapshot_every < 0:
        raise ValueError("snapshot_every must be >= 0")
    trace = FlowTrace()
    path = path0
    tau = 0.0
    step = 0
    step_size = 0.0
    accepted = True
    tol = 1e-9 * cfg.dtau
    start = time.monotonic()
    current = objective_and_gradient(model, path, data, cfg.lam, cfg.steps_per_layer, loss)
    while True:
        rep = current[0]
        stop = ""
        if rep.slope < cfg.stop_slope:
            stop = "slope"
        elif tau >= cfg.tau_max - tol:
            stop = "tau_max"
        elif cfg.max_wall_seconds is not None and time.monotonic() - start > cfg.max_wall_seconds:
            stop = "timeout"
        if stop or step % cfg.record_every == 0:
            record = _record(path, current, tau, step_size, accepted)
            i = len(trace.records)
            trace.records.append(record)
            if stop or i == 0 or (snapshot_every and i % snapshot_every == 0):
                trace.snapshots.append(path)
                trace.snapshot_index.append(i)
            if callback is not None:
                callback(record, path)
        if stop:
            trace.stop_reason = stop
            trace.steps = step
            return trace
        path, srep = flow_step(model, path, data, cfg, loss, current)
        current = objective_and_gradient(model, path, data, cfg.lam, cfg.steps_per_layer, loss)
        accepted = current[0].J <= rep.J + _MONOTONE_RTOL * abs(rep.J)
        step_size = srep.step_size
        tau += step_size
        step += 1


@dataclass(frozen=True)
class DissipationReport:
    drop: float
    dissipated: float
    mismatch: float


def dissipation_check(trace: FlowTrace, start: int = 0, stop: int | None = None) -> DissipationReport:
    """Compare ``J(tau_0) - J(tau_1)`` with the trapezoidal integral of slope^2."""
    tau, J, slope = trace.tau, trace.J, trace.slope
    sl = slice(start, None if stop is None else stop + 1)
    tau, J, slope = tau[sl], J[sl], slope[sl]
    if tau.size < 2:
        raise InsufficientData("dissipation check needs at least two records")
    drop = float(J[0] - J[-1])
    dissipated = float(trapezoid(slope**2, tau))
    gap = abs(drop - dissipated)
    if gap == 0.0:
        mismatch = 0.0
    else:
        mismatch = gap / abs(drop) if drop != 0.0 else float("inf")
    return DissipationReport(drop, dissipated, mismatch)


def sample_initial_path(rng: np.random.Generator, n_layers: int, n_particles: int, dim: int,
                        scale: float = 1.0, smoothing: int = 1) -> ParameterPath:
    """I.i.d. Gaussian particles, optionally averaged across ``smoothing`` neighbouring layers.

    Particle ``j`` of every layer is treated as one curve in depth; the moving
    average makes consecutive layers close, i.e. a small Dirichlet energy.
    """
    pts = scale * rng.standard_normal((n_layers, n_particles, dim))
    if smoothing > 1:
        pts = uniform_filter1d(pts, size=int(smoothing), axis=0, mode="nearest")
    return ParameterPath(pts)
