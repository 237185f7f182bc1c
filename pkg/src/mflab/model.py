"""Analytic vector fields ``v(x, theta)`` and the data-fit loss.

Two closed-form fields are provided:

``LinearTanh``
    ``theta = (W, b)``, ``v(x, theta) = W tanh(x) + b``, ``m = d^2 + d``.
    Linear in ``theta``, so its second parameter derivative vanishes.
``GatedTanh``
    ``theta = (a, W, b)``, ``v(x, theta) = a * tanh(W x + b)``,
    ``m = d + d^2 + d``.

``W`` is stored row-major inside the flat parameter vector. Besides the
single-point methods (``eval_v``, ``jac_v_x``, ``jac_v_theta``) each model
has batched kernels used by the integrators: ``X`` is ``(n, d)``, particle
arrays are ``(N, m)`` with weights ``(N,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mflab.errors import CertificateViolated, DimensionMismatch, NonFinite

__all__ = [
    "VectorFieldModel",
    "LinearTanh",
    "GatedTanh",
    "SquaredError",
    "GrowthReport",
    "make_model",
    "make_loss",
    "certify_growth",
    "grad_loss",
]


class VectorFieldModel:
    kind: str = ""
    # Index of the compiled sweep in mflab._kernels, or None for numpy only.
    kernel_id: int | None = None

    def __init__(self, d: int, growth_constant: float | None = None, growth_exponent: float = 1.0):
        if d < 1:
            raise DimensionMismatch("state dimension must be positive")
        self.d = int(d)
        self.growth_constant = (self.default_growth_constant()
                                if growth_constant is None else float(growth_constant))
        self.growth_exponent = float(growth_exponent)
        if not self.growth_exponent < 2:
            raise ValueError("growth exponent p must be < 2")

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, C={self.growth_constant}, p={self.growth_exponent})"

    @property
    def m(self) -> int:
        raise NotImplementedError

    @property
    def theta_linear(self) -> bool:
        """True when d^2 v / d theta^2 vanishes identically."""
        return False

    def default_growth_constant(self) -> float:
        raise NotImplementedError

    def lipschitz_bound(self, radius: float) -> float:
        """Bound on ``|v(x1) - v(x2)| / (|theta|^p |x1 - x2|)`` for ``|theta| <= radius``."""
        raise NotImplementedError

    # single-point interface -------------------------------------------------

    def _check(self, x, theta):
        x = np.asarray(x, dtype=float).reshape(-1)
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if x.shape[0] != self.d or theta.shape[0] != self.m:
            raise DimensionMismatch(
                f"expected x in R^{self.d} and theta in R^{self.m}, "
                f"got {x.shape[0]} and {theta.shape[0]}"
            )
        return x, theta

    def eval_v(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        out = self.values(x[None], theta[None])[0, 0]
        if not np.all(np.isfinite(out)):
            raise NonFinite("vector field evaluated to a non-finite value")
        return out

    def jac_v_x(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        return self.mean_jac_x(x[None], theta[None], np.ones(1))[0]

    def jac_v_theta(self, x, theta) -> np.ndarray:
        x, theta = self._check(x, theta)
        # Row a of the Jacobian is the pullback of the unit covector e_a.
        eye = np.eye(self.d)
        return np.stack([self.vjp_theta(x[None], theta[None], eye[a][None])[0]
                         for a in range(self.d)])

    # batched kernels ----------------------------------------------------------

    def values(self, X, thetas) -> np.ndarray:
        """``v(X_i, theta_j)`` with shape ``(n, N, d)``."""
        raise NotImplementedError

    def mean_field(self, X, thetas, w) -> np.ndarray:
        """``sum_j w_j v(X_i, theta_j)``, shape ``(n, d)``."""
        return np.einsum("j,ija->ia", w, self.values(X, thetas))

    def mean_jac_x(self, X, thetas, w) -> np.ndarray:
        """``sum_j w_j d_x v(X_i, theta_j)``, shape ``(n, d, d)``."""
        raise NotImplementedError

    def mean_vjp_x(self, X, thetas, w, G) -> np.ndarray:
        """``(sum_j w_j d_x v(X_i, theta_j))^T G_i``, shape ``(n, d)``."""
        return np.einsum("iab,ia->ib", self.mean_jac_x(X, thetas, w), G)

    def vjp_theta(self, X, thetas, G) -> np.ndarray:
        """``sum_i d_theta v(X_i, theta_j)^T G_i`` for every particle, shape ``(N, m)``."""
        raise NotImplementedError

    def jvp_theta(self, X, thetas, dthetas) -> np.ndarray:
        """``d_theta v(X_i, theta_j) dtheta_j``, shape ``(n, N, d)``."""
        raise NotImplementedError


class LinearTanh(VectorFieldModel):
    kind = "linear-tanh"
    kernel_id = 0

    @property
    def m(self) -> int:
        return self.d * self.d + self.d

    @property
    def theta_linear(self) -> bool:
        return True

    def default_growth_constant(self) -> float:
        # |W tanh x + b| <= |W|_F |x| + |b| <= |theta| (1 + |x|); sqrt(d)*2 is
        # the looser documented certificate.
        return 2.0 * np.sqrt(self.d)

    def lipschitz_bound(self, radius: float) -> float:
        return self.growth_constant

    def split(self, thetas):
        d = self.d
        thetas = np.asarray(thetas, dtype=float)
        return thetas[..., : d * d].reshape(thetas.shape[:-1] + (d, d)), thetas[..., d * d:]

    def values(self, X, thetas):
        W, b = self.split(thetas)
        return np.einsum("jab,ib->ija", W, np.tanh(X)) + b[None]

    def mean_field(self, X, thetas, w):
        W, b = self.split(w @ thetas)
        return np.tanh(X) @ W.T + b

    def mean_jac_x(self, X, thetas, w):
        W, _ = self.split(w @ thetas)
        sech2 = 1.0 - np.tanh(X) ** 2
        return W[None, :, :] * sech2[:, None, :]

    def mean_vjp_x(self, X, thetas, w, G):
        W, _ = self.split(w @ thetas)
        return (G @ W) * (1.0 - np.tanh(X) ** 2)

    def vjp_theta(self, X, thetas, G):
        T = np.tanh(X)
        row = np.concatenate([(G.T @ T).reshape(-1), G.sum(axis=0)])
        return np.broadcast_to(row, (np.shape(thetas)[0], self.m)).copy()

    def jvp_theta(self, X, thetas, dthetas):
        return self.values(X, dthetas)


class GatedTanh(VectorFieldModel):
    kind = "gated-tanh"
    kernel_id = 1

    @property
    def m(self) -> int:
        return self.d * self.d + 2 * self.d

    def default_growth_constant(self) -> float:
        # |a * tanh(.)| <= |a| <= |theta|.
        return 1.0

    def lipschitz_bound(self, radius: float) -> float:
        # |a| |W|_F <= |theta|^2 / 2, so the ratio to |theta| is <= radius / 2.
        return max(self.growth_constant, 0.5 * radius)

    def split(self, thetas):
        d = self.d
        thetas = np.asarray(thetas, dtype=float)
        a = thetas[..., :d]
        W = thetas[..., d: d + d * d].reshape(thetas.shape[:-1] + (d, d))
        b = thetas[..., d + d * d:]
        return a, W, b

    def _hidden(self, X, thetas):
        a, W, b = self.split(thetas)
        return a, W, np.tanh(np.einsum("jab,ib->ija", W, X) + b[None])

    def values(self, X, thetas):
        a, _, H = self._hidden(X, thetas)
        return a[None] * H

    def mean_jac_x(self, X, thetas, w):
        a, W, H = self._hidden(X, thetas)
        gain = w[None, :, None] * a[None] * (1.0 - H**2)
        return np.einsum("ija,jab->iab", gain, W)

    def mean_vjp_x(self, X, thetas, w, G):
        a, W, H = self._hidden(X, thetas)
        gain = w[None, :, None] * a[None] * (1.0 - H**2) * G[:, None, :]
        return np.einsum("ija,jab->ib", gain, W)

    def vjp_theta(self, X, thetas, G):
        a, W, H = self._hidden(X, thetas)
        da = np.einsum("ia,ija->ja", G, H)
        D = G[:, None, :] * a[None] * (1.0 - H**2)
        dW = np.einsum("ija,ib->jab", D, X)
        db = D.sum(axis=0)
        N = da.shape[0]
        return np.concatenate([da, dW.reshape(N, -1), db], axis=1)

    def jvp_theta(self, X, thetas, dthetas):
        a, W, H = self._hidden(X, thetas)
        da, dW, db = self.split(dthetas)
        dz = np.einsum("jab,ib->ija", dW, X) + db[None]
        return da[None] * H + a[None] * (1.0 - H**2) * dz


_MODELS = {cls.kind: cls for cls in (LinearTanh, GatedTanh)}
_MODEL_ALIASES = {"LinearTanh": "linear-tanh", "GatedTanh": "gated-tanh"}


def make_model(kind: str, d: int, **kwargs) -> VectorFieldModel:
    kind = _MODEL_ALIASES.get(kind, kind)
    try:
        return _MODELS[kind](d, **kwargs)
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(_MODELS)}") from None


@dataclass(frozen=True)
class SquaredError:
    """``l(x, y) = |x - y|^2`` with growth bound ``l <= A + B |x|^2``.

    With ``|y| <= R`` one may take ``A = 2 R^2`` and ``B = 2``.
    """

    A: float = 2.0
    B: float = 2.0
    kind: str = "squared-error"

    @classmethod
    def for_radius(cls, radius: float) -> "SquaredError":
        return cls(A=max(2.0 * radius**2, 1e-300), B=2.0)

    def value(self, X, Y) -> np.ndarray:
        diff = np.asarray(X, dtype=float) - np.asarray(Y, dtype=float)
        return np.sum(diff**2, axis=-1)

    def grad(self, X, Y) -> np.ndarray:
        return 2.0 * (np.asarray(X, dtype=float) - np.asarray(Y, dtype=float))

    def check_growth(self, X, Y) -> bool:
        X = np.atleast_2d(X)
        return bool(np.all(self.value(X, Y) <= self.A + self.B * np.sum(X**2, axis=-1) + 1e-12))


def make_loss(kind: str = "squared-error", radius: float | None = None) -> SquaredError:
    if kind not in ("squared-error", "SquaredError"):
        raise ValueError(f"unknown loss kind {kind!r}")
    return SquaredError() if radius is None else SquaredError.for_radius(radius)


def grad_loss(loss: SquaredError, x, y) -> np.ndarray:
    return loss.grad(x, y)


@dataclass
class GrowthReport:
    growth_ratio: float
    lipschitz_ratio: float
    C: float
    p: float
    lipschitz_bound: float
    radius: float
    probes: int

    @property
    def passed(self) -> bool:
        return self.growth_ratio <= self.C and self.lipschitz_ratio <= self.lipschitz_bound


def _ratio(num: float, den: float) -> float:
    if num == 0.0:
        return 0.0
    return num / den if den > 0 else np.inf


def certify_growth(model: VectorFieldModel, probe_count: int, radius: float,
                   rng: np.random.Generator | None = None,
                   theta_probes: np.ndarray | None = None) -> GrowthReport:
    """Probe ``|v| <= C |theta|^p (1 + |x|)`` and the matching x-Lipschitz clause.

    Points are drawn uniformly from balls of the given radius. Pass
    ``theta_probes`` to pin the parameter probes (e.g. all zeros). Raises
    :class:`CertificateViolated` when an observed ratio exceeds the bound.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng

    def ball(n, dim):
        u = rng.standard_normal((n, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return radius * u * rng.uniform(size=(n, 1)) ** (1.0 / dim)

    xs, xs2 = ball(probe_count, model.d), ball(probe_count, model.d)
    thetas = ball(probe_count, model.m) if theta_probes is None else np.asarray(theta_probes, float)
    p = model.growth_exponent
    growth = lip = 0.0
    for x, x2, th in zip(xs, xs2, thetas):
        v1 = model.eval_v(x, th)
        v2 = model.eval_v(x2, th)
        tp = np.linalg.norm(th) ** p
        growth = max(growth, _ratio(np.linalg.norm(v1), tp * (1.0 + np.linalg.norm(x))))
        lip = max(lip, _ratio(np.linalg.norm(v1 - v2), tp * np.linalg.norm(x - x2)))
    report = GrowthReport(growth, lip, model.growth_constant, p,
                          model.lipschitz_bound(radius), radius, probe_count)
    if not report.passed:
        raise CertificateViolated(
            f"{model!r}: growth ratio {growth:.4g} (C={report.C:.4g}), "
            f"Lipschitz ratio {lip:.4g} (bound {report.lipschitz_bound:.4g})"
        )
    return report
