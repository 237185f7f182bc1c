"""The regularized training objective and its Wasserstein gradient.

``J(eta) = L(eta) + lam/2 * int_0^1 int |theta|^2 d eta_t dt`` with
``L(eta) = sum_i w_i l(X_1(x_i), y_i)``. The gradient field returned by
:func:`wasserstein_gradient` is the ascent direction
``G[k, j] = lam * theta_j + grad_theta (dL/d eta)(k, theta_j)``, where the
functional derivative of ``L`` is averaged over the layer with the RK4 stage
weights of the discrete adjoint. With this convention

    dJ / d theta_j^(k) = dt_k * w_j^(k) * G[k, j]

holds exactly for the discretized objective, which is what the gradient
checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mflab.dynamics import (
    DEFAULT_STEPS_PER_LAYER,
    CostateTrace,
    ForwardTrace,
    integrate_costate,
    integrate_forward,
)
from mflab.errors import NonFinite, ShapeMismatch
from mflab.measures import DataMeasure, ParameterPath, second_moment
from mflab.model import SquaredError, VectorFieldModel

__all__ = [
    "ObjectiveReport",
    "GradientField",
    "FunctionalDerivative",
    "eval_objective",
    "functional_derivative",
    "wasserstein_gradient",
    "objective_and_gradient",
    "metric_slope",
    "critical_point_residual",
]


@dataclass(frozen=True)
class ObjectiveReport:
    J: float
    L: float
    regularizer: float
    slope: float = float("nan")


@dataclass(frozen=True)
class GradientField:
    """Per-particle ascent field, shape ``(L, N, m)`` like the path it came from."""

    values: np.ndarray

    def particle_gradient(self, path: ParameterPath) -> np.ndarray:
        """Euclidean gradient ``dJ/d theta`` of the discretized objective."""
        return self.values * (path.dt[:, None, None] * path.weights[:, :, None])

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1), initial=0.0))


def _loss_value(loss, data, trace) -> float:
    return float(np.dot(data.weights, loss.value(trace.final, data.y)))


def eval_objective(model: VectorFieldModel, path: ParameterPath, data: DataMeasure | None,
                   lam: float, steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                   loss: SquaredError | None = None) -> ObjectiveReport:
    """Evaluate ``J``; ``data=None`` drops the loss term (pure regularizer)."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    reg = 0.5 * lam * second_moment(path)
    if data is None:
        return ObjectiveReport(reg, 0.0, reg)
    loss = SquaredError() if loss is None else loss
    trace = integrate_forward(model, path, data, steps_per_layer)
    L = _loss_value(loss, data, trace)
    return ObjectiveReport(L + reg, L, reg)


class FunctionalDerivative:
    """``dL/d eta [eta](t, theta) = <grad_x phi_t, v_theta>_{mu_t}`` from one forward/costate pair.

    ``at_node(s, theta)`` is the pointwise formula at trace node ``s``.
    ``__call__(k, theta)`` averages it over layer ``k`` with the discrete
    adjoint's stage weights; its theta-gradient is the loss part of the
    gradient field. ``theta`` may be a single vector or a stack ``(P, m)``.
    """

    def __init__(self, model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                 trace: ForwardTrace, costate: CostateTrace):
        self.model = model
        self.path = path
        self.data = data
        self.trace = trace
        self.costate = costate
        S = trace.steps_per_layer
        d = data.d
        self._Z = []
        self._P = []
        for k in range(path.n_layers):
            sl = slice(k * S, (k + 1) * S)
            Z = trace.stages[sl].reshape(-1, d)
            P = (costate.stage_adjoints[sl] * data.weights[None, None, :, None]).reshape(-1, d)
            self._Z.append(Z)
            self._P.append(P / path.dt[k])

    @staticmethod
    def _stack(theta):
        theta = np.asarray(theta, dtype=float)
        return theta[None] if theta.ndim == 1 else theta, theta.ndim == 1

    def __call__(self, k: int, theta):
        thetas, single = self._stack(theta)
        vals = self.model.values(self._Z[k], thetas)
        out = np.einsum("ia,ija->j", self._P[k], vals)
        return float(out[0]) if single else out

    def grad(self, k: int, theta) -> np.ndarray:
        thetas, single = self._stack(theta)
        g = self.model.vjp_theta(self._Z[k], thetas, self._P[k])
        return g[0] if single else g

    def at_node(self, node: int, theta):
        thetas, single = self._stack(theta)
        vals = self.model.values(self.trace.states[node], thetas)
        p = self.costate.costates[node] * self.data.weights[:, None]
        out = np.einsum("ia,ija->j", p, vals)
        return float(out[0]) if single else out

    def integrate_against(self, path: ParameterPath) -> float:
        """``int_0^1 int dL/d eta(t, theta) d path_t(theta) dt`` for any path on the same grid."""
        return float(sum(path.dt[k] * np.dot(path.weights[k], self(k, path.points[k]))
                         for k in range(path.n_layers)))


def functional_derivative(model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                          steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                          loss: SquaredError | None = None) -> FunctionalDerivative:
    trace = integrate_forward(model, path, data, steps_per_layer)
    costate = integrate_costate(model, path, data, trace, loss)
    return FunctionalDerivative(model, path, data, trace, costate)


def objective_and_gradient(model: VectorFieldModel, path: ParameterPath,
                           data: DataMeasure | None, lam: float,
                           steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                           loss: SquaredError | None = None) -> tuple[ObjectiveReport, GradientField]:
    """One forward and one costate sweep; the report includes the metric slope."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    reg = 0.5 * lam * second_moment(path)
    G = lam * path.points
    L = 0.0
    if data is not None:
        loss = SquaredError() if loss is None else loss
        fd = functional_derivative(model, path, data, steps_per_layer, loss)
        L = _loss_value(loss, data, fd.trace)
        G = G + np.stack([fd.grad(k, path.points[k]) for k in range(path.n_layers)])
    if not np.all(np.isfinite(G)):
        raise NonFinite("gradient field has non-finite entries")
    field = GradientField(G)
    return ObjectiveReport(L + reg, L, reg, metric_slope(path, field)), field


def wasserstein_gradient(model: VectorFieldModel, path: ParameterPath, data: DataMeasure | None,
                         lam: float, steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                         loss: SquaredError | None = None) -> GradientField:
    return objective_and_gradient(model, path, data, lam, steps_per_layer, loss)[1]


def metric_slope(path: ParameterPath, gradient: GradientField) -> float:
    """Norm of the gradient field in ``L^2(0,1; L^2(eta_t))``."""
    G = gradient.values if isinstance(gradient, GradientField) else np.asarray(gradient)
    if G.shape != path.points.shape:
        raise ShapeMismatch(f"gradient shape {G.shape} does not match path {path.points.shape}")
    sq = np.sum(G**2, axis=-1)
    return float(np.sqrt(np.dot(path.dt, np.sum(path.weights * sq, axis=1))))


def critical_point_residual(model: VectorFieldModel, path: ParameterPath,
                            data: DataMeasure | None, lam: float,
                            steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                            loss: SquaredError | None = None) -> float:
    """Sup norm of the gradient field over all particles."""
    return wasserstein_gradient(model, path, data, lam, steps_per_layer, loss).sup_norm()
