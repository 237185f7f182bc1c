"""Post-hoc checks of the convergence theory on recorded flow traces.

* :func:`estimate_j_star` extrapolates the limit value of J from the tail.
* :func:`ls_fit` estimates the Lojasiewicz exponent ``alpha`` and constant
  ``C`` in ``(J - J*)^(1 - alpha) <= C |dJ|``.
* :func:`rate_fit` fits the matching decay law: exponential for
  ``alpha = 1/2``, ``tau^(-1/(1 - 2 alpha))`` otherwise.
* :func:`convexity_probe` measures the Lipschitz constant of ``d/ds J`` along
  particle-level generalized geodesics.

Trace-like inputs only need ``tau``, ``J`` and ``slope`` array attributes
(:class:`mflab.flow.FlowTrace` and :class:`Series` both qualify).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from mflab.dynamics import DEFAULT_STEPS_PER_LAYER
from mflab.errors import FitFailure, InsufficientData, ShapeMismatch
from mflab.flow import dissipation_check, sample_initial_path
from mflab.measures import ParameterPath, path_distance, w2
from mflab.objective import objective_and_gradient

__all__ = [
    "Series",
    "TailFit",
    "LSFit",
    "RateFit",
    "ConvexityReport",
    "fit_tail",
    "estimate_j_star",
    "ls_fit",
    "rate_fit",
    "generalized_geodesic",
    "convexity_probe",
    "ConvexitySurvey",
    "convexity_survey",
    "analysis_report",
]

EXPONENTIAL = "exponential"
POLYNOMIAL = "polynomial"


@dataclass
class Series:
    tau: np.ndarray
    J: np.ndarray
    slope: np.ndarray = None

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.J = np.asarray(self.J, dtype=float)
        self.slope = (np.full_like(self.J, np.nan) if self.slope is None
                      else np.asarray(self.slope, dtype=float))


def _tail(n: int, tail_fraction: float) -> slice:
    start = min(int(np.floor(n * (1.0 - tail_fraction))), max(n - 1, 0))
    return slice(start, n)


def _r2(y: np.ndarray, fitted: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - fitted) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


@dataclass(frozen=True)
class TailFit:
    model: str
    j_star: float
    amplitude: float
    rate: float
    r2: float


def _project(basis: np.ndarray, J: np.ndarray):
    # J ~ j_star + amplitude * basis, solved by linear least squares.
    A = np.column_stack([np.ones_like(basis), basis])
    coef, *_ = np.linalg.lstsq(A, J, rcond=None)
    resid = J - A @ coef
    return coef, float(resid @ resid)


def _fit_family(tau, J, basis_fn, log_lo, log_hi, model):
    def sse(log_rate):
        return _project(basis_fn(np.exp(log_rate)), J)[1]

    grid = np.linspace(log_lo, log_hi, 241)
    values = [sse(g) for g in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best = minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                           options={"xatol": 1e-10})
    log_rate = best.x if best.fun <= values[i] else grid[i]
    rate = float(np.exp(log_rate))
    coef, _ = _project(basis_fn(rate), J)
    fitted = coef[0] + coef[1] * basis_fn(rate)
    return TailFit(model, float(coef[0]), float(coef[1]), rate, _r2(J, fitted))


def fit_tail(tau, J, tail_fraction: float = 0.5, min_points: int = 5) -> TailFit:
    """Fit ``J* + a exp(-b tau)`` and ``J* + a tau^(-c)`` to the tail; keep the better R^2."""
    tau = np.asarray(tau, dtype=float)
    J = np.asarray(J, dtype=float)
    sl = _tail(tau.size, tail_fraction)
    t, y = tau[sl], J[sl]
    if t.size < min_points:
        raise FitFailure(f"tail has {t.size} points, need at least {min_points}")
    if np.ptp(y) <= 1e-14 * max(1.0, abs(y[-1])):
        return TailFit("constant", float(y[-1]), 0.0, 0.0, 1.0)
    span = float(t[-1] - t[0])
    if span <= 0:
        raise FitFailure("tail has zero time span")
    # Rates are searched over decay lengths from 1e-3 to 1e3 tail spans.
    t0 = t - t[0]
    fits = [_fit_family(t, y, lambda b: np.exp(-b * t0), np.log(1e-3 / span),
                        np.log(1e3 / span), EXPONENTIAL)]
    if t[0] > 0:
        fits.append(_fit_family(t, y, lambda c: (t / t[0]) ** (-c), np.log(1e-2),
                                np.log(50.0), POLYNOMIAL))
    return max(fits, key=lambda f: f.r2)


def estimate_j_star(trace, tail_fraction: float = 0.5) -> float:
    """Extrapolated limit of J along the flow."""
    return fit_tail(trace.tau, trace.J, tail_fraction).j_star


@dataclass(frozen=True)
class LSFit:
    alpha: float
    C: float
    residual: float
    gap_floor: float
    alpha_raw: float
    tau_window: tuple
    n_points: int

    def holds_on(self, gap: np.ndarray, slope: np.ndarray) -> bool:
        return bool(np.all(gap ** (1.0 - self.alpha) <= self.C * slope * (1 + 1e-12)))


def _ls_points(trace, j_star, gap_floor, tail_fraction):
    sl = _tail(len(trace.J), tail_fraction)
    tau = np.asarray(trace.tau, float)[sl]
    gap = np.asarray(trace.J, float)[sl] - j_star
    slope = np.asarray(trace.slope, float)[sl]
    keep = (gap > gap_floor) & (slope > 0) & np.isfinite(slope)
    return tau[keep], gap[keep], slope[keep]


def ls_fit(trace, j_star: float, gap_floor: float = 1e-12, tail_fraction: float = 0.5,
           min_points: int = 3) -> LSFit:
    """Regress ``log(J - J*)`` on ``log|dJ|``; the slope of that line is ``1 / (1 - alpha)``.

    ``alpha`` is clipped to ``(0, 1/2]`` and ``C`` is the largest observed
    ratio ``(J - J*)^(1 - alpha) / |dJ|``, so the inequality holds on every
    fitted point with the reported constants.
    """
    tau, gap, slope = _ls_points(trace, j_star, gap_floor, tail_fraction)
    if gap.size < min_points:
        raise InsufficientData(f"only {gap.size} tail points above the gap floor {gap_floor:g}")
    X, Y = np.log(slope), np.log(gap)
    if np.ptp(X) == 0.0:
        raise InsufficientData("slope is constant on the tail")
    k, c = np.polyfit(X, Y, 1)
    residual = float(np.sqrt(np.mean((Y - (k * X + c)) ** 2)))
    alpha_raw = float(1.0 - 1.0 / k) if k != 0 else float("-inf")
    alpha = float(np.clip(alpha_raw, np.finfo(float).tiny, 0.5)) if np.isfinite(alpha_raw) else 0.5
    C = float(np.max(gap ** (1.0 - alpha) / slope))
    return LSFit(alpha, C, residual, gap_floor, alpha_raw,
                 (float(tau[0]), float(tau[-1])), int(gap.size))


@dataclass
class RateFit:
    branch: str
    rate: float
    r2: float
    predicted_exponent: float
    C_hat: float
    C_ls: float
    table: list = field(default_factory=list)
    distance_checks: list = field(default_factory=list)
    eta_star_is_proxy: bool = True

    @property
    def distance_bound_holds(self) -> bool:
        return all(c["ok"] for c in self.distance_checks)


def rate_fit(trace, j_star: float, alpha: float, C: float, gap_floor: float = 1e-12,
             tail_fraction: float = 0.5, alpha_tol: float = 0.05, snapshots=None,
             snapshot_index=None) -> RateFit:
    """Fit the decay law selected by ``alpha``.

    ``alpha >= 1/2 - alpha_tol`` selects the exponential branch
    ``log(J - J*) = a - tau / (2 C_hat^2)``; otherwise the polynomial branch
    ``log(J - J*) = a - c log(tau)`` is fitted and compared with
    ``c = 1 / (1 - 2 alpha)``. If ``snapshots`` are given, the distance bound
    ``W(eta(tau), eta*) <= (C / alpha) (J - J*)^alpha`` is checked on each of
    them against the last snapshot standing in for ``eta*``.
    ``snapshot_index`` maps snapshots to trace records (default: one
    snapshot per record).
    """
    tau, gap, _ = _ls_points(trace, j_star, gap_floor, tail_fraction)
    if gap.size < 3:
        raise InsufficientData(f"only {gap.size} tail points above the gap floor {gap_floor:g}")
    logg = np.log(gap)
    if alpha >= 0.5 - alpha_tol:
        slope_, icpt = np.polyfit(tau, logg, 1)
        rate = float(-slope_)
        fitted = icpt + slope_ * tau
        branch = EXPONENTIAL
        predicted = float("inf")
        C_hat = float(np.sqrt(1.0 / (2.0 * rate))) if rate > 0 else float("inf")
    else:
        if np.any(tau <= 0):
            keep = tau > 0
            tau, gap, logg = tau[keep], gap[keep], logg[keep]
        slope_, icpt = np.polyfit(np.log(tau), logg, 1)
        rate = float(-slope_)
        fitted = icpt + slope_ * np.log(tau)
        branch = POLYNOMIAL
        predicted = 1.0 / (1.0 - 2.0 * alpha)
        C_hat = float("nan")
    table = [{"tau": float(t), "gap": float(g), "fitted": float(np.exp(f))}
             for t, g, f in zip(tau, gap, fitted)]
    result = RateFit(branch, rate, _r2(logg, fitted), predicted, C_hat, float(C), table)

    if snapshots is not None:
        eta_star = snapshots[-1]
        index = range(len(snapshots)) if snapshot_index is None else snapshot_index
        J = np.asarray(trace.J, float)[list(index)]
        taus = np.asarray(trace.tau, float)[list(index)]
        for t, j, snap in zip(taus, J, snapshots):
            g = max(j - j_star, 0.0)
            dist = path_distance(snap, eta_star)
            bound = (C / alpha) * g**alpha
            result.distance_checks.append(
                {"tau": float(t), "distance": dist, "bound": float(bound),
                 "ok": bool(dist <= bound * (1 + 1e-9) + 1e-12)})
    return result


def generalized_geodesic(path1: ParameterPath, path2: ParameterPath, anchor: ParameterPath):
    """Particle-level generalized geodesic from ``path1`` to ``path2`` through ``anchor``.

    Each anchor particle is matched to a particle of ``path1`` and of
    ``path2`` by optimal assignments; returns ``(start, direction, W2_eta)``
    where the geodesic is ``start + s * direction`` with the anchor's weights
    and ``W2_eta`` is the squared 3-plan length ``|direction|^2`` integrated
    over the plan.
    """
    paths = (path1, path2, anchor)
    if len({p.points.shape for p in paths}) != 1:
        raise ShapeMismatch("generalized geodesics need three paths of identical shape")
    if not all(np.array_equal(p.layer_grid, anchor.layer_grid) for p in paths):
        raise ShapeMismatch("paths live on different layer grids")
    start = np.empty_like(anchor.points)
    end = np.empty_like(anchor.points)
    for k in range(anchor.n_layers):
        a = anchor.layer(k)
        if not (a.is_uniform() and path1.layer(k).is_uniform() and path2.layer(k).is_uniform()):
            raise ShapeMismatch("generalized geodesics are built for uniform layers only")
        perm1 = w2(a, path1.layer(k))[1].permutation()
        perm2 = w2(a, path2.layer(k))[1].permutation()
        start[k] = path1.points[k][perm1]
        end[k] = path2.points[k][perm2]
    direction = end - start
    sq = np.sum(direction**2, axis=-1)
    W2_eta = float(np.dot(anchor.dt, np.sum(anchor.weights * sq, axis=1)))
    return anchor.with_points(start), direction, W2_eta


@dataclass
class ConvexityReport:
    grid: np.ndarray
    h: np.ndarray
    W2_eta: float
    lipschitz: float
    lambda_est: float


def convexity_probe(model, path1: ParameterPath, path2: ParameterPath, path0: ParameterPath,
                    data, lam: float, steps_per_layer: int = DEFAULT_STEPS_PER_LAYER,
                    grid=None, loss=None) -> ConvexityReport:
    """Evaluate ``h(s) = d/ds J(eta_s)`` on a grid along the generalized geodesic.

    ``lipschitz`` is ``max |h(s2) - h(s1)| / (W2_eta |s2 - s1|)`` over
    consecutive grid points and ``lambda_est`` the smallest signed ratio, a
    lower estimate of the convexity modulus. Both are 0 for a zero-length
    geodesic.
    """
    grid = np.linspace(0.0, 1.0, 11) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must hold at least two increasing points")
    start, direction, W2_eta = generalized_geodesic(path1, path2, path0)
    weights = path0.weights * path0.dt[:, None]
    h = np.empty(grid.size)
    for i, s in enumerate(grid):
        geo = start.with_points(start.points + s * direction)
        G = objective_and_gradient(model, geo, data, lam, steps_per_layer, loss)[1].values
        h[i] = float(np.sum(weights * np.sum(G * direction, axis=-1)))
    if W2_eta == 0.0:
        return ConvexityReport(grid, h, 0.0, 0.0, 0.0)
    ratios = np.diff(h) / (W2_eta * np.diff(grid))
    return ConvexityReport(grid, h, W2_eta, float(np.max(np.abs(ratios))), float(np.min(ratios)))


@dataclass
class ConvexitySurvey:
    lipschitz: np.ndarray
    lambda_est: np.ndarray
    W2_eta: np.ndarray

    @property
    def max_lipschitz(self) -> float:
        return float(np.max(self.lipschitz))

    @property
    def min_lambda(self) -> float:
        return float(np.min(self.lambda_est))


def convexity_survey(model, data, lam: float, rng: np.random.Generator, count: int,
                     n_layers: int, n_particles: int, scale: float = 0.5, smoothing: int = 1,
                     steps_per_layer: int = DEFAULT_STEPS_PER_LAYER, grid=None,
                     loss=None) -> ConvexitySurvey:
    """Run :func:`convexity_probe` on ``count`` geodesics between random initial-style paths."""
    lips, lams, lengths = [], [], []
    for _ in range(count):
        p1, p2, p0 = (sample_initial_path(rng, n_layers, n_particles, model.m, scale, smoothing)
                      for _ in range(3))
        rep = convexity_probe(model, p1, p2, p0, data, lam, steps_per_layer, grid, loss)
        lips.append(rep.lipschitz)
        lams.append(rep.lambda_est)
        lengths.append(rep.W2_eta)
    return ConvexitySurvey(np.array(lips), np.array(lams), np.array(lengths))


def _finite_or_none(x):
    return float(x) if x is not None and np.isfinite(x) else None


def analysis_report(trace, gap_floor: float = 1e-12, tail_fraction: float = 0.5,
                    alpha_tol: float = 0.05, dissipation_tol: float = 0.05) -> dict:
    """JSON-ready summary: limit estimate, exponent fit, rate branch and checks.

    Failed fits leave the corresponding fields ``None`` and add a failing
    entry to ``checks`` instead of raising.
    """
    report = {"alpha": None, "C": None, "branch": None, "R2": None, "j_star": None,
              "checks": []}
    checks = report["checks"]
    if len(trace.J) >= 2:
        dis = dissipation_check(trace)
        checks.append({"name": "dissipation", "ok": bool(dis.mismatch <= dissipation_tol),
                       "mismatch": _finite_or_none(dis.mismatch), "drop": dis.drop,
                       "dissipated": dis.dissipated, "tol": dissipation_tol})
    try:
        tail = fit_tail(trace.tau, trace.J, tail_fraction)
        report["j_star"] = tail.j_star
        report["j_star_model"] = tail.model
        ls = ls_fit(trace, tail.j_star, gap_floor, tail_fraction)
        report.update(alpha=ls.alpha, C=ls.C, alpha_raw=_finite_or_none(ls.alpha_raw),
                      ls_residual=ls.residual, tau_window=list(ls.tau_window),
                      gap_floor=gap_floor)
        tau, gap, slope = _ls_points(trace, tail.j_star, gap_floor, tail_fraction)
        checks.append({"name": "lojasiewicz_inequality", "ok": ls.holds_on(gap, slope),
                       "points": ls.n_points})
        snaps = getattr(trace, "snapshots", None) or None
        index = getattr(trace, "snapshot_index", None) or None
        rf = rate_fit(trace, tail.j_star, ls.alpha, ls.C, gap_floor, tail_fraction, alpha_tol,
                      snaps, index)
        report.update(branch=rf.branch, R2=rf.r2, rate=rf.rate,
                      predicted_exponent=_finite_or_none(rf.predicted_exponent),
                      C_hat=_finite_or_none(rf.C_hat))
        if rf.branch == EXPONENTIAL:
            # The exponent bound gives decay at least as fast as exp(-tau / (2 C^2)).
            checks.append({"name": "rate_constant", "ok": bool(rf.C_hat <= ls.C * (1 + 1e-9)),
                           "C_hat": _finite_or_none(rf.C_hat), "C": ls.C})
        else:
            rel = abs(rf.rate - rf.predicted_exponent) / rf.predicted_exponent
            checks.append({"name": "rate_exponent", "ok": bool(rel <= 0.05),
                           "observed": rf.rate, "predicted": rf.predicted_exponent,
                           "rel_error": rel})
        if snaps is not None:
            worst = max((c["distance"] - c["bound"] for c in rf.distance_checks), default=0.0)
            checks.append({"name": "distance_bound", "ok": rf.distance_bound_holds,
                           "snapshots": len(rf.distance_checks), "max_excess": worst,
                           "eta_star_is_proxy": True})
    except (FitFailure, InsufficientData) as exc:
        checks.append({"name": "fit", "ok": False, "detail": str(exc)})
    return report
