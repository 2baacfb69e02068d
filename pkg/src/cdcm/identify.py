"""Identifiability audits (A1-A4) and constructive parameter recovery.

Recovery chain for a noiseless trajectory:

1. pick one qualifying block per distinct stimulus so that the
   intercept-augmented stimulus matrix ``U*`` is invertible;
2. inside each block recover ``(A_tilde, c_tilde)`` from ``d + 2``
   consecutive states;
3. unmix the block systems into ``A``, ``B_1..B_m`` and ``C``;
4. step the pre-scan interval backwards to obtain ``s*``.

BOLD means are first deconvolved with the lower-triangular Toeplitz HRF
matrix when the trajectory itself is not observed.

Tolerances are policy choices: eigenvalues count as real when their
imaginary part is below ``1e-10`` relative to the spectral radius, as
distinct when relative gaps exceed ``1e-8``, and a data matrix counts as
invertible when its 2-norm condition number is at most ``1e10``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (DesignViolationError, InvalidInputError,
                     NonInjectiveObservationError, TrajectoryDegenerateError)
from .linalg import mat_exp, mat_log_real, w_antideriv
from .model import assemble_block_system, conv_matrix

EIG_IMAG_TOL = 1e-10
EIG_GAP_TOL = 1e-8
COND_MAX = 1e10
HRF_MIN = 1e-12


@dataclass
class AuditReport:
    """Outcome of the assumption checks; ``None`` marks a check that did not run."""

    d: int
    a1: dict | None = None
    a2: dict | None = None
    a3: dict | None = None
    a4: dict | None = None
    thresholds: dict = field(default_factory=lambda: {
        "eig_imag_rel": EIG_IMAG_TOL, "eig_gap_rel": EIG_GAP_TOL, "cond_max": COND_MAX})

    @property
    def passed(self):
        ran = [c for c in (self.a1, self.a2, self.a3, self.a4) if c is not None]
        return all(c["pass"] for c in ran)

    @property
    def selected(self):
        return [] if self.a2 is None else self.a2["blocks"]

    def to_dict(self):
        return {"d": self.d, "passed": self.passed,
                "checks_run": [k for k in ("a1", "a2", "a3", "a4") if getattr(self, k) is not None],
                "a1": self.a1, "a2": self.a2, "a3": self.a3, "a4": self.a4,
                "thresholds": self.thresholds}


def _block_dict(seg):
    return {"start": seg.start, "length": seg.length, "stimulus": list(seg.stimulus)}


def available_states(seg, n):
    """Number of consecutive states ``z[start..]`` governed by ``seg``."""
    return min(seg.stop, n - 1) - seg.start + 1


def qualifying_segments(design, d):
    """Segments offering the ``d + 2`` consecutive states block recovery needs."""
    return [s for s in design.segments if available_states(s, design.n) >= d + 2]


def _augmented(stimuli):
    u = np.asarray(stimuli, dtype=float).reshape(len(stimuli), -1)
    return np.hstack([np.ones((u.shape[0], 1)), u])


def select_blocks(design, d):
    """Greedy choice of blocks whose augmented stimulus matrix is invertible.

    The first qualifying block of each distinct stimulus is a candidate.
    At each step the candidate that raises the rank and leaves the largest
    smallest singular value is added, until ``m + 1`` rows are reached.
    Returns the selection (possibly incomplete).
    """
    m = design.m
    first = {}
    for seg in qualifying_segments(design, d):
        first.setdefault(seg.stimulus, seg)
    cands = list(first.values())
    chosen = []
    while len(chosen) < m + 1 and cands:
        best, best_sv = None, 0.0
        for seg in cands:
            rows = _augmented([s.stimulus for s in chosen + [seg]])
            sv = np.linalg.svd(rows, compute_uv=False)[-1]
            if sv > best_sv + 1e-12:
                best, best_sv = seg, sv
        if best is None:
            break
        chosen.append(best)
        cands.remove(best)
    return chosen


def check_design(design, d):
    """Evaluate A1 (block lengths) and A2 (unconfounded stimuli)."""
    counts = [b.length for b in design.blocks]
    a1 = {"pass": bool(all(c >= d + 1 for c in counts)), "required": d + 1,
          "block_lengths": counts}
    chosen = select_blocks(design, d)
    ok = len(chosen) == design.m + 1
    cond = float(np.linalg.cond(_augmented([s.stimulus for s in chosen]))) if ok else float("inf")
    a2 = {"pass": bool(ok and cond <= COND_MAX), "blocks": [_block_dict(s) for s in chosen],
          "cond_U_star": cond, "n_qualifying": len(qualifying_segments(design, d))}
    return AuditReport(d=d, a1=a1, a2=a2)


def _segments_from(blocks):
    out = []
    for b in blocks:
        if isinstance(b, dict):
            out.append((b["start"], b["length"], tuple(b["stimulus"])))
        else:
            out.append((b.start, b.length, tuple(b.stimulus)))
    return out


def spectrum_verdict(a):
    lam = np.linalg.eigvals(a)
    scale = max(np.max(np.abs(lam)), np.finfo(float).tiny)
    real = bool(np.all(np.abs(lam.imag) <= EIG_IMAG_TOL * scale))
    srt = np.sort(lam.real)
    gaps = np.diff(srt) / np.maximum(np.abs(srt[1:]), np.abs(srt[:-1])).clip(min=np.finfo(float).tiny)
    distinct = bool(srt.size < 2 or np.all(gaps >= EIG_GAP_TOL))
    return real and distinct, lam


def check_A3(p, h, blocks):
    """Real, distinct eigenvalues of each selected block system."""
    out = []
    for start, length, stim in _segments_from(blocks):
        a_t, _ = assemble_block_system(p, h, stim)
        ok, lam = spectrum_verdict(a_t)
        out.append({"start": start, "stimulus": list(stim), "pass": ok,
                    "eig_real": lam.real.tolist(), "eig_imag": lam.imag.tolist()})
    return {"pass": bool(all(b["pass"] for b in out)), "blocks": out}


def check_A4(z, design, blocks):
    """Condition number of ``X_0 = [[z_0 .. z_d], [1 .. 1]]`` per block."""
    z = np.asarray(z, dtype=float)
    d = z.shape[1]
    out = []
    for start, length, stim in _segments_from(blocks):
        if length < d or start + d >= z.shape[0]:
            raise InvalidInputError(f"block starting at {start} has fewer than {d + 1} states")
        X0 = np.vstack([z[start:start + d + 1].T, np.ones(d + 1)])
        cond = float(np.linalg.cond(X0))
        out.append({"start": start, "stimulus": list(stim), "cond_X0": cond,
                    "pass": bool(np.isfinite(cond) and cond <= COND_MAX)})
    return {"pass": bool(all(b["pass"] for b in out)), "blocks": out}


def audit(design, d, p=None, h=None, z=None):
    """All checks that the supplied inputs allow."""
    rep = check_design(design, d)
    blocks = rep.a2["blocks"]
    if p is not None and h is not None:
        rep.a3 = check_A3(p, h, blocks)
    if z is not None:
        rep.a4 = check_A4(z, design, blocks)
    return rep


def recover_block(v, r):
    """Block system ``(A_tilde, c_tilde)`` from consecutive states ``v``.

    ``v`` holds ``d + 2`` (or more) states spaced ``r`` apart under one
    constant stimulus.  With more than ``d + 2`` rows the transition matrix
    is fitted by least squares over all successive differences.

    Raises
    ------
    TrajectoryDegenerateError
        The state differences do not span ``R^d``.
    NotRealLogIdentifiableError
        The fitted transition matrix has no unique real logarithm.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 2 or v.shape[0] < v.shape[1] + 2:
        raise InvalidInputError(f"need at least d + 2 states, got shape {v.shape}")
    d = v.shape[1]
    dv = np.diff(v, axis=0)
    prev, nxt = dv[:-1].T, dv[1:].T
    if v.shape[0] == d + 2:
        z10 = prev
        cond = np.linalg.cond(z10)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise TrajectoryDegenerateError(f"state differences are singular (cond {cond:.3g})")
        phi = np.linalg.solve(z10.T, nxt.T).T
        p_vec = v[1] - phi @ v[0]
    else:
        cond = np.linalg.cond(prev @ prev.T)
        if not np.isfinite(cond) or cond > COND_MAX ** 2:
            raise TrajectoryDegenerateError(f"state differences are singular (cond {cond:.3g})")
        phi = np.linalg.lstsq(prev.T, nxt.T, rcond=None)[0].T
        p_vec = np.mean(v[1:] - v[:-1] @ phi.T, axis=0)
    a_tilde = mat_log_real(phi, gap_tol=EIG_GAP_TOL, imag_tol=EIG_IMAG_TOL) / r
    c_tilde = np.linalg.solve(w_antideriv(r, a_tilde), p_vec)
    return a_tilde, c_tilde


@dataclass
class GlobalSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    residual: float
    c_intercept: np.ndarray


def recover_global(block_systems, d, m):
    """Unmix per-block systems into ``A``, ``B`` (m x d x d) and ``C`` (d x m).

    ``block_systems`` is a list of ``(u_b, A_tilde_b, c_tilde_b)``.  With more
    than ``m + 1`` blocks the stacked system is solved in the least-squares
    sense; ``residual`` is the largest absolute misfit of the block systems
    (``c_intercept`` should vanish for consistent input and is included).
    """
    if len(block_systems) < m + 1:
        raise DesignViolationError(f"need at least {m + 1} block systems, got {len(block_systems)}")
    us = np.array([np.asarray(u, dtype=float).reshape(m) for u, _, _ in block_systems]).reshape(-1, m)
    ustar = _augmented(us)
    if np.linalg.matrix_rank(ustar) < m + 1 or np.linalg.cond(ustar) > COND_MAX:
        raise DesignViolationError("augmented stimulus matrix is singular (confounded stimuli)")
    at = np.array([np.asarray(a, dtype=float).reshape(d, d) for _, a, _ in block_systems])
    ct = np.array([np.asarray(c, dtype=float).reshape(d) for _, _, c in block_systems])
    rhs = np.hstack([at.reshape(len(block_systems), d * d), ct])
    coef = np.linalg.lstsq(ustar, rhs, rcond=None)[0]
    fit = ustar @ coef
    mats = coef[:, :d * d].reshape(m + 1, d, d)
    cols = coef[:, d * d:]
    A = mats[0]
    B = mats[1:]
    C = cols[1:].T
    resid = float(max(np.max(np.abs(fit - rhs)), np.max(np.abs(cols[0]))))
    return GlobalSystem(A, B, C, resid, cols[0])


def recover_initial(z_r, A_init, c_init, r):
    """Initial state from ``z(r)`` by inverting one affine step of length ``r``."""
    A_init = np.asarray(A_init, dtype=float)
    z_r = np.asarray(z_r, dtype=float).reshape(-1)
    c_init = np.asarray(c_init, dtype=float).reshape(-1)
    return mat_exp(-r * A_init) @ (z_r - w_antideriv(r, A_init) @ c_init)


def deconvolve(mu, hker):
    """Invert the HRF convolution by forward substitution.

    Raises
    ------
    NonInjectiveObservationError
        If ``|hker[1]| <= 1e-12``: the first scan carries no information.
    """
    mu = np.asarray(mu, dtype=float)
    hker = np.asarray(hker, dtype=float)
    if hker.shape[0] < 2 or abs(hker[1]) <= HRF_MIN:
        raise NonInjectiveObservationError("HRF at one repetition time is zero")
    squeeze = mu.ndim == 1
    mu2 = mu.reshape(mu.shape[0], -1)
    H = conv_matrix(hker, mu2.shape[0])
    z = solve_triangular(H, mu2, lower=True)
    return z[:, 0] if squeeze else z


@dataclass
class Identification:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    s_star: np.ndarray
    block_systems: list
    residual: float
    report: AuditReport

    def to_dict(self):
        return {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
                "s_star": self.s_star.tolist(), "residual": self.residual,
                "block_systems": [{"stimulus": list(map(int, u)), "A_tilde": a.tolist(),
                                   "c_tilde": c.tolist()} for u, a, c in self.block_systems],
                "audit": self.report.to_dict()}


def identify(z, design, extra_states=0):
    """Recover ``(s*, A, B, C)`` from a noiseless latent trajectory.

    ``extra_states`` adds that many further states per block to the
    least-squares fit of the transition matrix.
    """
    z = np.asarray(z, dtype=float)
    n, d = z.shape
    if n != design.n:
        raise InvalidInputError(f"trajectory has {n} rows, design {design.n}")
    rep = check_design(design, d)
    if not rep.a2["pass"]:
        raise DesignViolationError("no unconfounded block selection exists for this design")
    systems = []
    for b in rep.a2["blocks"]:
        avail = min(b["start"] + b["length"], n - 1) - b["start"] + 1
        take = min(avail, d + 2 + extra_states)
        a_t, c_t = recover_block(z[b["start"]:b["start"] + take], design.r)
        systems.append((np.array(b["stimulus"]), a_t, c_t))
    rep.a4 = check_A4(z, design, rep.a2["blocks"])
    g = recover_global(systems, d, design.m)
    u0 = design.initial_stimulus.astype(float)
    A_init = g.A + np.tensordot(u0, g.B, axes=1)
    c_init = g.C @ u0
    s_star = recover_initial(z[1], A_init, c_init, design.r)
    return Identification(g.A, g.B, g.C, s_star, systems, g.residual, rep)


def identify_from_bold(mu, design, hker):
    """Deconvolve noise-free BOLD means (baseline removed) and identify."""
    return identify(deconvolve(mu, hker), design)
