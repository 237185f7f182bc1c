"""Forward flow map of the data ODE and its discrete adjoint.

The data ODE on layer ``k`` is ``dx/dt = sum_j w_j v(x, theta_j^(k))`` with the
particle measure frozen on ``[t_k, t_{k+1})``. Each layer is integrated with
``S`` classical RK4 steps. The costate sweep differentiates that RK4 scheme
exactly, so gradients built from it agree with finite differences of the
discretized objective to rounding error.

Trace arrays use the node index ``s = k * S + r`` (``0 <= s <= L * S``):

``states[s]``            ``X_{t_s}(x_i)``, shape ``(n, d)``
``stages[s, q]``         input of RK4 stage ``q`` in step ``s``
``costates[s]``          ``d l(X_1(x_i), y_i) / d X_{t_s}``
``stage_adjoints[s, q]`` derivative of the terminal loss w.r.t. stage slope ``q``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mflab import _kernels
from mflab.errors import NonFiniteState, TraceMismatch
from mflab.measures import DataMeasure, DiscreteMeasure, ParameterPath
from mflab.model import SquaredError, VectorFieldModel

__all__ = [
    "ForwardTrace",
    "CostateTrace",
    "integrate_forward",
    "integrate_between",
    "push_forward",
    "integrate_costate",
    "fundamental_matrix",
    "gronwall_violation",
    "DEFAULT_STEPS_PER_LAYER",
]

DEFAULT_STEPS_PER_LAYER = 8


@dataclass(frozen=True)
class ForwardTrace:
    states: np.ndarray
    stages: np.ndarray
    steps_per_layer: int
    node_times: np.ndarray
    step_sizes: np.ndarray
    path_points: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def layer_of_step(self, s: int) -> int:
        return s // self.steps_per_layer

    def max_state_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.states, axis=-1)))


@dataclass(frozen=True)
class CostateTrace:
    costates: np.ndarray
    stage_adjoints: np.ndarray


def _node_grid(path: ParameterPath, S: int) -> tuple[np.ndarray, np.ndarray]:
    h = np.repeat(path.dt / S, S)
    times = np.concatenate([[0.0], np.cumsum(h)])
    times[-1] = 1.0
    return times, h


def _rk4_step(model, x, thetas, w, h, stage_out=None):
    k1 = model.mean_field(x, thetas, w)
    z2 = x + 0.5 * h * k1
    k2 = model.mean_field(z2, thetas, w)
    z3 = x + 0.5 * h * k2
    k3 = model.mean_field(z3, thetas, w)
    z4 = x + h * k3
    k4 = model.mean_field(z4, thetas, w)
    if stage_out is not None:
        stage_out[0] = x
        stage_out[1] = z2
        stage_out[2] = z3
        stage_out[3] = z4
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_model(model: VectorFieldModel, path: ParameterPath, d: int) -> None:
    if path.particle_dim != model.m:
        raise TraceMismatch(f"path particles live in R^{path.particle_dim}, model needs R^{model.m}")
    if d != model.d:
        raise TraceMismatch(f"data live in R^{d}, model needs R^{model.d}")


def integrate_forward(model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                      steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                      compiled: bool = True) -> ForwardTrace:
    """RK4 flow of every data sample through all layers, recording stage inputs.

    ``compiled=False`` forces the numpy reference implementation.
    """
    S = int(steps_per_layer)
    if S < 1:
        raise ValueError("steps_per_layer must be >= 1")
    _check_model(model, path, data.d)
    times, h = _node_grid(path, S)
    K = path.n_layers * S
    states = np.empty((K + 1, data.n, data.d))
    stages = np.empty((K, 4, data.n, data.d))
    if compiled and model.kernel_id is not None:
        _kernels.rk4_forward(model.kernel_id, data.x, path.points, path.weights, h, S,
                             states, stages)
    else:
        states[0] = data.x
        x = data.x.copy()
        with np.errstate(all="ignore"):
            for s in range(K):
                k = s // S
                x = _rk4_step(model, x, path.points[k], path.weights[k], h[s], stages[s])
                states[s + 1] = x
    finite = np.all(np.isfinite(states), axis=(1, 2))
    if not finite.all():
        node = int(np.argmin(finite))
        raise NonFiniteState(f"state blew up at node {node} (t={times[node]:.6g})", node=node)
    return ForwardTrace(states, stages, S, times, h, path.points)


def integrate_between(model: VectorFieldModel, path: ParameterPath, X0, node_a: int, node_b: int,
                      steps_per_layer: int = DEFAULT_STEPS_PER_LAYER) -> np.ndarray:
    """Transport arbitrary states from node ``a`` to node ``b`` on the same grid."""
    S = int(steps_per_layer)
    _, h = _node_grid(path, S)
    x = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
    for s in range(node_a, node_b):
        k = s // S
        x = _rk4_step(model, x, path.points[k], path.weights[k], h[s])
    return x


def push_forward(trace: ForwardTrace, data: DataMeasure, node: int) -> DiscreteMeasure:
    """``(X_t x Id)_# mu_0`` at a trace node, as a measure on ``R^d x R^d``."""
    return DiscreteMeasure(np.hstack([trace.states[node], data.y]), data.weights)


def _check_trace(path: ParameterPath, data: DataMeasure, trace: ForwardTrace) -> None:
    if (trace.states.shape[1:] != data.x.shape
            or trace.n_nodes != path.n_layers * trace.steps_per_layer + 1
            or trace.path_points.shape != path.points.shape
            or not np.array_equal(trace.path_points, path.points)
            or not np.array_equal(trace.states[0], data.x)):
        raise TraceMismatch("forward trace was not produced from this path and data")


def integrate_costate(model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                      trace: ForwardTrace, loss: SquaredError | None = None,
                      compiled: bool = True) -> CostateTrace:
    """Reverse sweep through the recorded RK4 stages.

    ``costates[s]`` is the exact derivative of ``l(X_1(x_i), y_i)`` with
    respect to the discrete state at node ``s``; sample weights are not
    applied.
    """
    _check_trace(path, data, trace)
    loss = SquaredError() if loss is None else loss
    S = trace.steps_per_layer
    K = trace.n_nodes - 1
    costates = np.empty_like(trace.states)
    adj = np.empty_like(trace.stages)
    p = loss.grad(trace.final, data.y)
    if compiled and model.kernel_id is not None:
        _kernels.rk4_adjoint(model.kernel_id, p, path.points, path.weights, trace.step_sizes, S,
                             trace.stages, costates, adj)
        return CostateTrace(costates, adj)
    costates[K] = p
    for s in range(K - 1, -1, -1):
        k = s // S
        thetas, w, h = path.points[k], path.weights[k], trace.step_sizes[s]
        z = trace.stages[s]
        g4 = (h / 6.0) * p
        gz4 = model.mean_vjp_x(z[3], thetas, w, g4)
        g3 = (h / 3.0) * p + h * gz4
        gz3 = model.mean_vjp_x(z[2], thetas, w, g3)
        g2 = (h / 3.0) * p + 0.5 * h * gz3
        gz2 = model.mean_vjp_x(z[1], thetas, w, g2)
        g1 = (h / 6.0) * p + 0.5 * h * gz2
        gz1 = model.mean_vjp_x(z[0], thetas, w, g1)
        adj[s, 0], adj[s, 1], adj[s, 2], adj[s, 3] = g1, g2, g3, g4
        p = p + gz1 + gz2 + gz3 + gz4
        costates[s] = p
    return CostateTrace(costates, adj)


def fundamental_matrix(model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                       trace: ForwardTrace, sample: int, node_a: int, node_b: int) -> np.ndarray:
    """Linearized flow ``M(x_i; t_a, t_b)`` with ``dM/dt = D_x v_eta(X_t) M``, ``M(t_a) = I``.

    Uses the trace's own RK4 stages, so ``M`` is the Jacobian of the discrete
    flow map between the two nodes.
    """
    _check_trace(path, data, trace)
    if not 0 <= node_a <= node_b < trace.n_nodes:
        raise TraceMismatch(f"need 0 <= node_a <= node_b < {trace.n_nodes}")
    S = trace.steps_per_layer
    d = data.d
    M = np.eye(d)
    for s in range(node_a, node_b):
        k = s // S
        thetas, w, h = path.points[k], path.weights[k], trace.step_sizes[s]
        A = model.mean_jac_x(trace.stages[s, :, sample], thetas, w)
        k1 = A[0] @ M
        k2 = A[1] @ (M + 0.5 * h * k1)
        k3 = A[2] @ (M + 0.5 * h * k2)
        k4 = A[3] @ (M + h * k3)
        M = M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return M


def gronwall_violation(model: VectorFieldModel, path: ParameterPath, data: DataMeasure,
                       trace: ForwardTrace) -> float:
    """Largest excess of ``|X_t(x)|`` over ``(|x| + K t) exp(K t)``; <= 0 when the bound holds.

    ``K = C * max_k sum_j w_j |theta_j|^p`` is the growth rate of the
    particle-averaged field.
    """
    p = model.growth_exponent
    mean_norm = np.sum(path.weights * np.linalg.norm(path.points, axis=-1) ** p, axis=1)
    K = model.growth_constant * float(mean_norm.max())
    t = trace.node_times[:, None]
    x0 = np.linalg.norm(data.x, axis=-1)[None, :]
    bound = (x0 + K * t) * np.exp(K * t)
    norms = np.linalg.norm(trace.states, axis=-1)
    return float(np.max(norms - bound * (1.0 + 1e-12) - 1e-12))
