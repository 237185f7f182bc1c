"""Acceptance criteria 1-9, one PASS/FAIL line each.

Every test records its verdict before asserting, so the summary at the end of
the pytest run lists all nine criteria whether they hold or not.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from mflab import analysis, checks
from mflab.cli import main
from mflab.config import build_experiment, load_config
from mflab.flow import dissipation_check, run_flow, sample_initial_path
from mflab.measures import mix_paths
from mflab.objective import critical_point_residual, eval_objective, functional_derivative

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GOLDEN = CONFIGS / "gd-linear-tanh.toml"
PROBE = CONFIGS / "dissipation-probe.toml"


@pytest.fixture(scope="module")
def golden():
    exp = build_experiment(load_config(GOLDEN))
    cfg = exp.config.flow
    trace = run_flow(exp.model, exp.path0, exp.data, cfg, exp.loss, snapshot_every=0)
    return exp, trace


def test_acc1_gradient_exactness(verdict):
    rng = np.random.default_rng(20240101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        kind = ("linear-tanh", "gated-tanh")[i % 2]
        model, path, data = checks.random_instance(rng, kind)
        assert model.m <= 20 and path.n_layers <= 4 and path.points.shape[1] <= 8 and data.n <= 8
        worst = max(worst, checks.gradient_check(model, path, data, lam=0.1, h=1e-5).max_rel_error)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 30
    verdict("ACC1 gradient exactness", ok, f"max rel error {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_acc2_exact_transport(verdict):
    start = time.perf_counter()
    res = checks.w2_selftest(seed=0, instances=200, max_n=6, max_dim=5, tol=1e-10)
    elapsed = time.perf_counter() - start
    ok = res.passed and res.instances == 200 and elapsed < 10
    verdict("ACC2 exact OT", ok, f"max |w2 - brute| {res.max_error:.1e}, {elapsed:.2f} s")
    assert ok


def test_acc3_dissipation(verdict):
    cfg = load_config(PROBE)
    exp = build_experiment(cfg)
    assert cfg.flow.dtau == 1e-3 and cfg.flow.lam == 0.1
    start = time.perf_counter()
    mismatch = []
    for dtau in (cfg.flow.dtau, cfg.flow.dtau / 2):
        fc = dataclasses.replace(cfg.flow, dtau=dtau)
        trace = run_flow(exp.model, exp.path0, exp.data, fc, exp.loss, snapshot_every=0)
        mismatch.append(dissipation_check(trace).mismatch)
    elapsed = time.perf_counter() - start
    ratio = mismatch[0] / mismatch[1]
    ok = mismatch[0] <= 0.05 and ratio >= 2.0 and elapsed < 120
    verdict("ACC3 dissipation", ok,
            f"mismatch {mismatch[0]:.3e}, halving ratio {ratio:.4f}, {elapsed:.1f} s")
    assert ok


def test_acc4_support_and_dirichlet(verdict):
    details, ok = [], True
    for seed in range(5):
        exp = build_experiment(load_config(GOLDEN).with_seed(seed))
        cfg = exp.config.flow
        trace = run_flow(exp.model, exp.path0, exp.data, cfg, exp.loss, snapshot_every=0)
        radius = trace.column("support_radius")
        dirichlet = trace.column("dirichlet")
        bound = 2 * max(radius[0], trace.column("grad_sup").max() / cfg.lam)
        ratio = dirichlet.max() / dirichlet[0]
        ok &= bool(radius.max() <= bound and ratio <= 10)
        details.append(f"s{seed}: R {radius.max():.2f}/{bound:.2f} Dir x{ratio:.2f}")
    verdict("ACC4 support/Dirichlet", ok, "; ".join(details))
    assert ok


def test_acc5_rate_dichotomy(golden, verdict):
    _, trace = golden
    j_star = analysis.estimate_j_star(trace)
    ls = analysis.ls_fit(trace, j_star)
    rf = analysis.rate_fit(trace, j_star, ls.alpha, ls.C)
    golden_ok = rf.branch == "exponential" and rf.r2 > 0.99 and abs(ls.alpha - 0.5) <= 0.05

    series = analysis.Series(*checks.lojasiewicz_series(0.25))
    j_syn = analysis.estimate_j_star(series)
    ls_syn = analysis.ls_fit(series, j_syn)
    rf_syn = analysis.rate_fit(series, j_syn, ls_syn.alpha, ls_syn.C)
    target = 1.0 / (1.0 - 2.0 * 0.25)
    syn_ok = rf_syn.branch == "polynomial" and abs(rf_syn.rate - target) <= 0.05 * target
    ok = golden_ok and syn_ok
    verdict("ACC5 rate dichotomy", ok,
            f"golden alpha {ls.alpha:.3f} {rf.branch} R2 {rf.r2:.6f}; "
            f"synthetic {rf_syn.branch} exponent {rf_syn.rate:.4f} vs {target:g}")
    assert ok


def test_acc6_critical_point(golden, verdict):
    exp, trace = golden
    lam = exp.config.flow.lam
    path = trace.final_path
    stopped = trace.stop_reason == "slope" and trace.slope[-1] < 1e-6
    residual = critical_point_residual(exp.model, path, exp.data, lam, loss=exp.loss)
    fd = functional_derivative(exp.model, path, exp.data, loss=exp.loss)
    identity = max(np.abs(lam * path.points[k] + fd.grad(k, path.points[k])).max()
                   for k in range(path.n_layers))
    ok = stopped and residual < 1e-4 and identity < 1e-4
    verdict("ACC6 critical point", ok,
            f"final slope {trace.slope[-1]:.1e}, residual {residual:.2e}, identity {identity:.2e}")
    assert ok


def test_acc7_flat_derivative(golden, verdict):
    exp, _ = golden
    rng = np.random.default_rng(7)
    model, data, lam = exp.model, exp.data, exp.config.flow.lam
    mids = (np.arange(64) + 0.5) / 64
    worst = 0.0
    for _ in range(10):
        p, q = (sample_initial_path(rng, 4, 8, model.m, 0.5, 2) for _ in range(2))
        dL = eval_objective(model, q, data, lam).L - eval_objective(model, p, data, lam).L
        quad = 0.0
        for s in mids:
            fd = functional_derivative(model, mix_paths(p, q, s), data)
            quad += (fd.integrate_against(q) - fd.integrate_against(p)) / mids.size
        worst = max(worst, abs(quad - dL) / abs(dL))
    ok = worst <= 1e-3
    verdict("ACC7 flat derivative", ok, f"max rel error {worst:.2e} on 10 pairs")
    assert ok


def test_acc8_convexity_probe(golden, verdict):
    exp, _ = golden
    pc = exp.config.path
    maxima = []
    for seed in (0, 1):
        survey = analysis.convexity_survey(exp.model, exp.data, exp.config.flow.lam,
                                           np.random.default_rng(seed), 100, pc.L, pc.N,
                                           pc.init_scale, pc.smoothing, loss=exp.loss)
        maxima.append(survey.max_lipschitz)
    finite = all(np.isfinite(maxima))
    spread = abs(maxima[0] - maxima[1]) / max(maxima)
    ok = finite and spread <= 0.10
    verdict("ACC8 convexity probe", ok,
            f"max Lip seed0 {maxima[0]:.4f}, seed1 {maxima[1]:.4f}, spread {spread:.1%}")
    assert ok


def test_acc9_determinism(tmp_path, verdict):
    for name in ("a", "b"):
        assert main(["run", "--config", str(GOLDEN), "--seed", "0",
                     "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "trace.csv").read_bytes()
    b = (tmp_path / "b" / "trace.csv").read_bytes()
    records = len(a.splitlines()) - 1
    ok = a == b and records > 0
    verdict("ACC9 determinism", ok, f"{records} records, identical={a == b}")
    assert ok
