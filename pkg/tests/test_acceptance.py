"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python3 tests/test_acceptance.py``.  The coverage study (criterion 4)
and the group recovery study (criterion 8) take several minutes.
"""

import math
import sys
import time

import numpy as np
import pytest

from cdcm.errors import CDCMError
from cdcm.group import SubjectRecord, group_fit, group_summary
from cdcm.identify import audit, deconvolve, identify
from cdcm.inference import (
    CDCMPosterior, SamplerConfig, block_bootstrap_mse, ess_threshold, grad_log_posterior,
    log_posterior, nuts_sample, summarize,
)
from cdcm.inference.diagnostics import batch_means_cov
from cdcm.model import Hypothesis, ParamSet, StimulusDesign, convolve, hrf_kernel, neural_trajectory
from cdcm.simulate import (
    SimulationSpec, benchmark_design, chain_models, rk_trajectory, simple_model_truth, simulate,
)

try:
    from conftest import GaussianTarget, record_acceptance
except ImportError:  # pragma: no cover - direct script run
    sys.path.insert(0, __file__.rsplit("/", 1)[0])
    from conftest import GaussianTarget, record_acceptance


def report(num, ok, detail, seconds):
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}"
    record_acceptance(line)
    return line


def normwise_relerr(est, true):
    return float(np.max(np.abs(est - true)) / np.max(np.abs(true)))


# ------------------------------------------------------------------ criterion 1

def random_identifiable_case(rng):
    d = int(rng.integers(1, 5))
    m = int(rng.integers(1, 4))
    r = float(rng.choice([0.72, 2.0, 3.22]))
    h = Hypothesis(rng.uniform(size=(d, d)) < 0.6, rng.uniform(size=(m, d, d)) < 0.3,
                   rng.uniform(size=(d, m)) < 0.7)
    A = np.where(h.mask_A, rng.normal(scale=0.3, size=(d, d)), 0.0)
    A[np.diag_indices(d)] = -0.5 * np.exp(rng.normal(scale=0.3, size=d)) - 0.2 * np.arange(d)
    B = np.where(h.mask_B, rng.normal(scale=0.2, size=(m, d, d)), 0.0)
    C = np.where(h.mask_C, rng.normal(size=(d, m)), 0.0)
    p = ParamSet.from_matrices(h, A, B, C, rng.normal(scale=0.3, size=d))
    stims = [np.zeros(m, dtype=int)] + list(np.eye(m, dtype=int))
    rows = []
    for _ in range(2):
        for s in stims:
            rows += [s] * (d + 2 + int(rng.integers(0, 4)))
    return h, p, StimulusDesign(np.array(rows), r)


def identification_error(h, p, design):
    z = neural_trajectory(p, h, design)
    res = identify(z, design)
    true = np.concatenate([p.A(h).ravel(), p.B(h).ravel(), p.C(h).ravel(), p.s_star])
    est = np.concatenate([res.A.ravel(), res.B.ravel(), res.C.ravel(), res.s_star])
    return normwise_relerr(est, true)


def test_criterion_1_constructive_identification():
    t0 = time.perf_counter()
    h, p = simple_model_truth()
    errs = [identification_error(h, p, benchmark_design())]
    rng = np.random.default_rng(101)
    drawn = 0
    while len(errs) < 101:
        drawn += 1
        h, p, des = random_identifiable_case(rng)
        z = neural_trajectory(p, h, des)
        if not audit(des, h.d, p, h, z).passed:
            continue
        try:
            errs.append(identification_error(h, p, des))
        except CDCMError as exc:
            errs.append(math.inf)
            print(f"  recovery raised {type(exc).__name__} on an audited case: {exc}")
    dt = time.perf_counter() - t0
    worst = max(errs)
    ok = worst <= 1e-6 and dt <= 60
    print(report(1, ok, f"simple model error {errs[0]:.2e}; 100 random hypotheses "
                        f"({drawn} drawn) worst relative error {worst:.2e} (limit 1e-6)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 2

def test_criterion_2_deconvolution_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = {}
    for k in range(100):
        r = (0.72, 2.0, 3.22)[k % 3]
        n = int(rng.integers(10, 501))
        z = rng.standard_normal((n, 2))
        hk = hrf_kernel(r, n)
        with np.errstate(all="ignore"):
            back = deconvolve(convolve(z, hk), hk)
        err = float(np.max(np.abs(back - z)) / np.max(np.abs(z)))
        if not np.isfinite(err):
            err = math.inf
        worst[r] = max(worst.get(r, 0.0), err)
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-10 for v in worst.values()) and dt <= 10
    detail = "; ".join(f"r={r}: worst error {v:.2e}" for r, v in sorted(worst.items()))
    print(report(2, ok, detail + " (limit 1e-10)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 3

def _best_time(fn, reps):
    fn()
    best = math.inf
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def test_criterion_3_trajectory_vs_rk():
    t0 = time.perf_counter()
    design = benchmark_design()
    parts, ok = [], True
    for label, (h, p) in (("simple", simple_model_truth()), ("complex", chain_models(3))):
        z_an = neural_trajectory(p, h, design)
        z_rk = rk_trajectory(p, h, design, rtol=1e-9, atol=1e-9)
        err = float(np.max(np.abs(z_an - z_rk)))
        t_an = _best_time(lambda: neural_trajectory(p, h, design), 20)
        t_rk = _best_time(lambda: rk_trajectory(p, h, design, rtol=1e-9, atol=1e-9), 5)
        speed = t_rk / t_an
        ok &= err <= 1e-6 and speed >= 5
        parts.append(f"{label}: max error {err:.2e}, speedup {speed:.1f}x")
    dt = time.perf_counter() - t0
    ok &= dt <= 120
    print(report(3, ok, "; ".join(parts) + " (limits 1e-6, 5x)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 4

@pytest.mark.slow
def test_criterion_4_coverage():
    t0 = time.perf_counter()
    h, p = simple_model_truth()
    design = benchmark_design()
    truth = np.concatenate([np.diag(p.A(h)), p.offdiag_A, p.B_entries, p.C_entries])
    hits, lengths = [], []
    for rep in range(20):
        b = simulate(SimulationSpec(p, h, design, snr=1.68, seed=4000 + rep))
        post = CDCMPosterior(h, design, b.Y)
        pd = nuts_sample(post, SamplerConfig(warmup=2000, num_samples=1500, seed=rep))
        s = summarize(pd)
        hpd = s.natural_hpd[:h.n_neural]
        hits.append((hpd[:, 0] <= truth) & (truth <= hpd[:, 1]))
        lengths.append(hpd[:, 1] - hpd[:, 0])
    cov = float(np.mean(hits))
    mean_len = float(np.mean(lengths))
    dt = time.perf_counter() - t0
    ok = 0.85 <= cov <= 1.0 and abs(mean_len - 0.353) <= 0.3 * 0.353 and dt <= 1800
    print(report(4, ok, f"coverage {cov:.3f} (range [0.85, 1]); mean HPD length {mean_len:.3f} "
                        f"(0.353 +/- 30%)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 5

def test_criterion_5_ess_threshold_anchor():
    t0 = time.perf_counter()
    w = ess_threshold(19, 0.05, 0.048)
    ok = 9130 <= w <= 9500
    print(report(5, ok, f"W(19, 0.05, 0.048) = {w:.2f} (range [9130, 9500])",
                 time.perf_counter() - t0))
    assert ok


# ------------------------------------------------------------------ criterion 6

def test_criterion_6_gradient():
    t0 = time.perf_counter()
    h, p = simple_model_truth()
    design = benchmark_design()
    post = CDCMPosterior(h, design, simulate(SimulationSpec(p, h, design, seed=606)).Y)
    rng = np.random.default_rng(606)
    worst, points = 0.0, 0
    while points < 20:
        x = post.prior_draw(rng)
        # unstable draws put |lp| near 1e30, where a float64 central difference
        # cannot resolve the smaller components
        a_tilde = post.block_systems(x)[0]
        if np.max(np.linalg.eigvals(a_tilde).real) >= 0:
            continue
        if not math.isfinite(log_posterior(x, post)):
            continue
        points += 1
        g = grad_log_posterior(x, post)
        for j in range(post.dim):
            step = 1e-5 * max(1.0, abs(x[j]))
            e = np.zeros(post.dim)
            e[j] = step
            fd = (log_posterior(x + e, post) - log_posterior(x - e, post)) / (2 * step)
            worst = max(worst, abs(fd - g[j]) / max(abs(g[j]), abs(fd), 1.0))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt <= 30
    print(report(6, ok, f"worst relative error {worst:.2e} over 20 stable prior points "
                        f"x {post.dim} components (limit 1e-5)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 7

def test_criterion_7_nuts_calibration():
    t0 = time.perf_counter()
    pd = nuts_sample(GaussianTarget(np.zeros(5), np.eye(5)),
                     SamplerConfig(warmup=1000, num_samples=10000, seed=707))
    x = pd.draws
    sigma, _ = batch_means_cov(x, pd.chain)
    mcse = np.sqrt(np.diag(sigma) / x.shape[0])
    z = np.abs(x.mean(0)) / mcse
    cov_err = np.linalg.norm(np.cov(x, rowvar=False) - np.eye(5)) / np.linalg.norm(np.eye(5))
    rho = 0.9
    pd2 = nuts_sample(GaussianTarget([0.0, 0.0], [[1.0, rho], [rho, 1.0]]),
                      SamplerConfig(warmup=1000, num_samples=10000, seed=708))
    rho_hat = float(np.corrcoef(pd2.draws, rowvar=False)[0, 1])
    dt = time.perf_counter() - t0
    ok = bool(np.all(z <= 3)) and cov_err <= 0.1 and abs(rho_hat - rho) <= 0.05 and dt <= 120
    print(report(7, ok, f"standard normal P=5: max |mean|/MCSE {z.max():.2f} (limit 3), "
                        f"covariance error {cov_err:.3f} (limit 0.1); correlated pair "
                        f"rho_hat {rho_hat:.3f} (0.9 +/- 0.05)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 8

@pytest.mark.slow
def test_criterion_8_group_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    K, p, q = 50, 6, 3
    alpha = rng.normal(scale=0.5, size=p)
    Theta = np.zeros((p, q))
    Theta[:, 0] = rng.normal(scale=0.4, size=p)  # first covariate active, the rest null
    tau = rng.uniform(0.1, 0.3, size=p)
    T = np.diag(tau ** 2)
    b = rng.standard_normal((K, q))
    b = (b - b.mean(0)) / b.std(0, ddof=1)
    S = 0.01 * np.eye(p)
    records = []
    for k in range(K):
        th = rng.multivariate_normal(alpha + Theta @ b[k], T + S)
        records.append(SubjectRecord(th, S, b[k]))
    pd, post = group_fit(records)
    summ = group_summary(pd, post)
    names = post.param_names
    hits = [summ["alpha"][n]["hpd_lo"] <= alpha[i] <= summ["alpha"][n]["hpd_hi"]
            for i, n in enumerate(names)]
    null_z = [abs(summ["Theta"][f"{n},{c}"]["mean"]) / summ["Theta"][f"{n},{c}"]["sd"]
              for n in names for c in post.covariate_names[1:]]
    dt = time.perf_counter() - t0
    cover = float(np.mean(hits))
    ok = cover >= 0.8 and max(null_z) <= 3 and dt <= 600
    print(report(8, ok, f"alpha HPD coverage {cover:.2f} (limit 0.8); null Theta max "
                        f"|mean|/sd {max(null_z):.2f} (limit 3)", dt))
    assert ok


# ------------------------------------------------------------------ criterion 9

def test_criterion_9_declared_and_bootstrap_shape():
    t0 = time.perf_counter()
    rng = np.random.default_rng(909)
    y = rng.standard_normal(150)
    zero = block_bootstrap_mse(y, y, block_len=10, reps=10000, seed=1)
    v = 0.7
    e = rng.normal(scale=math.sqrt(v), size=1500)
    iid = block_bootstrap_mse(e, np.zeros_like(e), block_len=10, reps=10000, seed=2)
    se_iid = float(np.std(e ** 2, ddof=1) / math.sqrt(e.size))
    ok = (zero.mse == 0 and zero.se == 0 and abs(iid.mse - v) <= 3 * se_iid
          and abs(iid.se / se_iid - 1) <= 0.15)
    print(report(9, ok, "real-data results declared out of scope; bootstrap shape: "
                        f"zero residual se {zero.se:g}; iid mse {iid.mse:.3f} vs {v}, "
                        f"bootstrap se {iid.se:.4f} vs iid se {se_iid:.4f} (within 15%)", time.perf_counter() - t0))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
