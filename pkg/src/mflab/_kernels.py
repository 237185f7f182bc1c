"""Compiled RK4 forward and adjoint sweeps for the built-in vector fields.

The numpy kernels on the model classes are the reference; these loops do the
same arithmetic per sample without the per-stage array overhead. ``kind``
selects the field: 0 = LinearTanh, 1 = GatedTanh.
"""

import math

import numpy as np
from numba import njit

LINEAR_TANH = 0
GATED_TANH = 1


@njit(cache=True)
def _field(kind, x, thetas, w, d, out):
    N = thetas.shape[0]
    for a in range(d):
        out[a] = 0.0
    if kind == LINEAR_TANH:
        for j in range(N):
            for a in range(d):
                acc = thetas[j, d * d + a]
                for b in range(d):
                    acc += thetas[j, a * d + b] * math.tanh(x[b])
                out[a] += w[j] * acc
    else:
        for j in range(N):
            for a in range(d):
                z = thetas[j, d + d * d + a]
                for b in range(d):
                    z += thetas[j, d + a * d + b] * x[b]
                out[a] += w[j] * thetas[j, a] * math.tanh(z)


@njit(cache=True)
def _vjp_x(kind, x, thetas, w, g, d, out):
    N = thetas.shape[0]
    for b in range(d):
        out[b] = 0.0
    if kind == LINEAR_TANH:
        for b in range(d):
            t = math.tanh(x[b])
            acc = 0.0
            for j in range(N):
                for a in range(d):
                    acc += w[j] * g[a] * thetas[j, a * d + b]
            out[b] = acc * (1.0 - t * t)
    else:
        for j in range(N):
            for a in range(d):
                z = thetas[j, d + d * d + a]
                for b in range(d):
                    z += thetas[j, d + a * d + b] * x[b]
                t = math.tanh(z)
                gain = w[j] * g[a] * thetas[j, a] * (1.0 - t * t)
                for b in range(d):
                    out[b] += gain * thetas[j, d + a * d + b]


@njit(cache=True)
def rk4_forward(kind, X0, points, weights, h, S, states, stages):
    n, d = X0.shape
    K = h.shape[0]
    x = np.empty(d)
    z = np.empty(d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    for i in range(n):
        for a in range(d):
            x[a] = X0[i, a]
            states[0, i, a] = x[a]
        for s in range(K):
            lay = s // S
            th = points[lay]
            w = weights[lay]
            hs = h[s]
            for a in range(d):
                stages[s, 0, i, a] = x[a]
            _field(kind, x, th, w, d, k1)
            for a in range(d):
                z[a] = x[a] + 0.5 * hs * k1[a]
                stages[s, 1, i, a] = z[a]
            _field(kind, z, th, w, d, k2)
            for a in range(d):
                z[a] = x[a] + 0.5 * hs * k2[a]
                stages[s, 2, i, a] = z[a]
            _field(kind, z, th, w, d, k3)
            for a in range(d):
                z[a] = x[a] + hs * k3[a]
                stages[s, 3, i, a] = z[a]
            _field(kind, z, th, w, d, k4)
            for a in range(d):
                x[a] = x[a] + (hs / 6.0) * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])
                states[s + 1, i, a] = x[a]


@njit(cache=True)
def rk4_adjoint(kind, pT, points, weights, h, S, stages, costates, adjoints):
    n, d = pT.shape
    K = h.shape[0]
    p = np.empty(d)
    g = np.empty(d)
    gz = np.empty(d)
    acc = np.empty(d)
    for i in range(n):
        for a in range(d):
            p[a] = pT[i, a]
            costates[K, i, a] = p[a]
        for s in range(K - 1, -1, -1):
            lay = s // S
            th = points[lay]
            w = weights[lay]
            hs = h[s]
            for a in range(d):
                acc[a] = p[a]
            # stage 4
            for a in range(d):
                g[a] = (hs / 6.0) * p[a]
                adjoints[s, 3, i, a] = g[a]
            _vjp_x(kind, stages[s, 3, i], th, w, g, d, gz)
            for a in range(d):
                acc[a] += gz[a]
                g[a] = (hs / 3.0) * p[a] + hs * gz[a]
                adjoints[s, 2, i, a] = g[a]
            # stage 3
            _vjp_x(kind, stages[s, 2, i], th, w, g, d, gz)
            for a in range(d):
                acc[a] += gz[a]
                g[a] = (hs / 3.0) * p[a] + 0.5 * hs * gz[a]
                adjoints[s, 1, i, a] = g[a]
            # stage 2
            _vjp_x(kind, stages[s, 1, i], th, w, g, d, gz)
            for a in range(d):
                acc[a] += gz[a]
                g[a] = (hs / 6.0) * p[a] + 0.5 * hs * gz[a]
                adjoints[s, 0, i, a] = g[a]
            # stage 1
            _vjp_x(kind, stages[s, 0, i], th, w, g, d, gz)
            for a in range(d):
                p[a] = acc[a] + gz[a]
                costates[s, i, a] = p[a]
