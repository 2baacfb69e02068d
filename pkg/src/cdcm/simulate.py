"""Forward data generation: benchmark designs, ground truths, noisy BOLD."""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DegenerateSignalError, InvalidInputError
from .model import (Hypothesis, ParamSet, StimulusDesign, assemble_block_system,
                    convolve, hrf_kernel, neural_trajectory)

log = logging.getLogger(__name__)

SNR_DEFAULT = 1.68
RANGE_LIMIT = 4.0

# cross-copy coupling used by chain_models (stand-in values, see README)
CHAIN_FORWARD = 0.3
CHAIN_BACKWARD = 0.1


def benchmark_design(n=150, r=2.0, block_len=10, prescan_rest=True):
    """Rest / U1 / rest / U2 in ``block_len``-scan blocks, repeating."""
    U = np.zeros((n, 2), dtype=np.int64)
    for b, start in enumerate(range(0, n, block_len)):
        phase = b % 4
        if phase == 1:
            U[start:start + block_len, 0] = 1
        elif phase == 3:
            U[start:start + block_len, 1] = 1
    return StimulusDesign(U, r, prescan_rest)


def _simple_matrices():
    A = np.array([[-0.55, 0.3], [0.4, -0.55]])
    B = np.zeros((2, 2, 2))
    B[1, 0, 1] = -0.2
    C = np.array([[0.7, 0.0], [0.0, 0.0]])
    return A, B, C


def simple_model_truth():
    """Two-ROI, two-stimulus ground truth with ``s* = (0.1, 0.1)``."""
    return chain_models(1)


def chain_models(k):
    """``k`` copies of the simple model coupled in a chain.

    Copy ``i`` occupies ROIs ``2i, 2i+1``.  Neighbouring copies are linked
    both ways: ``A[2i+2, 2i+1] = 0.3`` and ``A[2i+1, 2i+2] = 0.1``.  The
    two-way link keeps the eigenvalues of every block system real and
    distinct (the one-way chain would repeat each copy's spectrum).
    """
    if int(k) != k or k < 1:
        raise InvalidInputError(f"k must be a positive integer, got {k}")
    k = int(k)
    d = 2 * k
    a0, b0, c0 = _simple_matrices()
    A = np.zeros((d, d))
    B = np.zeros((2, d, d))
    C = np.zeros((d, 2))
    for i in range(k):
        s = slice(2 * i, 2 * i + 2)
        A[s, s] = a0
        B[:, s, s] = b0
        C[s] = c0
    for i in range(k - 1):
        A[2 * i + 2, 2 * i + 1] = CHAIN_FORWARD
        A[2 * i + 1, 2 * i + 2] = CHAIN_BACKWARD
    h = Hypothesis(A != 0, B != 0, C != 0)
    p = ParamSet.from_matrices(h, A, B, C, np.full(d, 0.1), np.zeros(d), np.ones(d))
    return h, p


@dataclass
class SimulationSpec:
    truth: ParamSet
    hypothesis: Hypothesis
    design: StimulusDesign
    snr: float = SNR_DEFAULT
    seed: int = 0
    range_clamp: bool = True

    def __post_init__(self):
        if not self.snr > 0:
            raise InvalidInputError(f"snr must be positive, got {self.snr}")
        self.truth.check(self.hypothesis)
        if self.design.m != self.hypothesis.m:
            raise InvalidInputError("design and hypothesis disagree on the stimulus count")

    def to_dict(self):
        return {"snr": self.snr, "seed": int(self.seed), "range_clamp": self.range_clamp,
                "tr_seconds": self.design.r, "prescan_rest": self.design.prescan_rest,
                "n": self.design.n, "hypothesis": self.hypothesis.to_dict(),
                "truth": self.truth.to_dict()}


@dataclass
class TrajectoryBundle:
    """Latent states, noise-free means (without ``beta``) and observed BOLD."""

    z: np.ndarray
    mu: np.ndarray
    Y: np.ndarray
    noise_sd: np.ndarray = field(default=None)
    clamp_factor: float = 1.0


def roi_streams(seed, d):
    """One independent generator per ROI; adding ROIs leaves others intact."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))
            for i in range(d)]


def _range(x):
    return float(np.max(x) - np.min(x))


def clamp_factor(signal, noise, limit=RANGE_LIMIT, iters=200):
    """Largest ``k`` in ``[0, 1]`` with ``range(signal + k noise) <= limit``.

    The range is convex in ``k``, so the feasible set is an interval
    starting at 0 and bisection finds its right end.
    """
    if _range(signal + noise) <= limit:
        return 1.0
    if _range(signal) > limit:
        log.warning("noise-free signal already spans %.3g > %.3g", _range(signal), limit)
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _range(signal + mid * noise) <= limit:
            lo = mid
        else:
            hi = mid
    return lo


def simulate(spec):
    """Noisy BOLD with per-ROI noise SD ``sd(mu) / snr``.

    With ``range_clamp`` the whole noise matrix is scaled by the largest
    factor that keeps ``max(Y) - min(Y) <= 4``.
    """
    h, p, design = spec.hypothesis, spec.truth, spec.design
    z = neural_trajectory(p, h, design)
    mu = convolve(z, hrf_kernel(design.r, design.n))
    signal = mu + p.beta
    if math.isinf(spec.snr):
        return TrajectoryBundle(z, mu, signal.copy(), np.zeros(h.d), 1.0)
    sd = mu.std(axis=0, ddof=1) if design.n > 1 else np.zeros(h.d)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise DegenerateSignalError(f"noise-free signal has zero variance in ROI(s) "
                                    f"{np.flatnonzero(~(sd > 0)).tolist()}")
    noise_sd = sd / spec.snr
    noise = np.column_stack([g.standard_normal(design.n) for g in roi_streams(spec.seed, h.d)])
    noise *= noise_sd
    k = clamp_factor(signal, noise) if spec.range_clamp else 1.0
    return TrajectoryBundle(z, mu, signal + k * noise, noise_sd * k, k)


def rk_trajectory(p, h, design, rtol=1e-9, atol=1e-9, method="RK45"):
    """Reference states at ``k r`` from an adaptive Runge-Kutta integrator.

    Each constant-stimulus segment is integrated separately so the solver
    never steps across a discontinuity of the vector field.
    """
    r, n = design.r, design.n
    z = np.empty((n, h.d))
    z[0] = p.s_star
    state = p.s_star.astype(float)
    for seg in design.segments:
        last = min(seg.stop, n - 1)
        if last <= seg.start:
            continue
        a_t, c_t = assemble_block_system(p, h, seg.stimulus)
        t0, t1 = seg.start * r, last * r
        grid = np.arange(seg.start + 1, last + 1) * r
        sol = solve_ivp(lambda t, y: a_t @ y + c_t, (t0, t1), state, method=method,
                        t_eval=grid, rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"reference integrator failed: {sol.message}")
        z[seg.start + 1:last + 1] = sol.y.T
        state = sol.y[:, -1]
    return z
