"""The CDCM probability model.

Latent neural state ``z`` follows block-wise affine dynamics

    dz/dt = (A + sum_i u_i B_i) z + C u

and the mean BOLD response is the discrete convolution of ``z`` with the
canonical double-gamma HRF plus a per-ROI baseline ``beta``.

Time indexing used throughout the package: ``z[k] = z(k r)`` for
``k = 0..n-1`` with ``z[0] = s_star``; BOLD row ``j`` (0-based) is the scan at
``t = (j + 1) r`` and depends on ``z[0..j]``.  Row ``k`` of ``U`` is the
stimulus on ``[k r, (k + 1) r)``.  With ``prescan_rest`` the stimulus on
``[0, r)`` is forced to zero.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import gammaln

from .errors import InvalidInputError
from .linalg import affine_propagator

__all__ = [
    "CanonicalHRF",
    "HRF",
    "Hypothesis",
    "Block",
    "StimulusDesign",
    "ParamSet",
    "hrf_eval",
    "hrf_kernel",
    "block_partition",
    "assemble_block_system",
    "neural_trajectory",
    "convolve",
    "conv_matrix",
    "log_prior",
    "log_likelihood",
    "mean_bold",
    "PRIOR_SD_DIAG",
    "PRIOR_SD_OFFDIAG",
    "PRIOR_SD_STATE",
    "PRIOR_SD_BETA",
    "SIGMA_RATE",
    "DIAG_BASELINE",
]

DIAG_BASELINE = -0.5
PRIOR_SD_DIAG = 0.125
PRIOR_SD_OFFDIAG = 1.0
PRIOR_SD_STATE = 0.3
PRIOR_SD_BETA = 1.0
SIGMA_RATE = 0.5

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CanonicalHRF:
    """Difference of two gamma densities with SPM's fixed shape/rate."""

    alpha1: float = 6.0
    alpha2: float = 16.0
    beta1: float = 1.0
    beta2: float = 1.0
    c: float = 1.0 / 6.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise InvalidInputError("HRF is only defined for finite t >= 0")
        with np.errstate(divide="ignore"):
            logt = np.log(t)
        g1 = np.exp(self.alpha1 * math.log(self.beta1) - gammaln(self.alpha1)
                    + (self.alpha1 - 1) * logt - self.beta1 * t)
        g2 = np.exp(self.alpha2 * math.log(self.beta2) - gammaln(self.alpha2)
                    + (self.alpha2 - 1) * logt - self.beta2 * t)
        out = g1 - self.c * g2
        return out if out.ndim else float(out)


HRF = CanonicalHRF()


def hrf_eval(t):
    """Canonical HRF at ``t`` seconds (scalar or array); ``h(0) = 0``."""
    return HRF(t)


@lru_cache(maxsize=64)
def _kernel_cached(r, n):
    h = np.asarray(HRF(r * np.arange(n + 1)), dtype=float)
    h.setflags(write=False)
    return h


def hrf_kernel(r, n):
    """HRF sampled at ``0, r, ..., n r`` (length ``n + 1``, read-only)."""
    if not r > 0 or n < 1:
        raise InvalidInputError(f"need r > 0 and n >= 1, got r={r}, n={n}")
    return _kernel_cached(float(r), int(n))


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """Sparsity pattern of ``A``, ``B_1..B_m`` and ``C``.

    The diagonal of ``mask_A`` is always free.  Free entries are vectorised
    row-major: off-diagonal ``A``, then ``B`` ordered by (stimulus, row, col),
    then ``C`` ordered by (row, stimulus).
    """

    mask_A: np.ndarray
    mask_B: np.ndarray
    mask_C: np.ndarray
    d: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        a = np.array(self.mask_A, dtype=bool, ndmin=2)
        c = np.array(self.mask_C, dtype=bool, ndmin=2)
        d = a.shape[0]
        if a.shape != (d, d) or d < 1:
            raise InvalidInputError(f"mask_A must be square, got {a.shape}")
        if c.shape[0] != d or c.shape[1] < 1:
            raise InvalidInputError(f"mask_C must be d x m, got {c.shape}")
        m = c.shape[1]
        b = np.array(self.mask_B, dtype=bool)
        if b.size == 0:
            b = np.zeros((m, d, d), dtype=bool)
        if b.shape != (m, d, d):
            raise InvalidInputError(f"mask_B must be m x d x d, got {b.shape}")
        np.fill_diagonal(a, True)
        for arr in (a, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "mask_A", a)
        object.__setattr__(self, "mask_B", b)
        object.__setattr__(self, "mask_C", c)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)

    @property
    def offdiag_A_index(self):
        off = self.mask_A & ~np.eye(self.d, dtype=bool)
        return tuple(zip(*np.nonzero(off)))

    @property
    def B_index(self):
        return tuple(zip(*np.nonzero(self.mask_B)))

    @property
    def C_index(self):
        return tuple(zip(*np.nonzero(self.mask_C)))

    @property
    def n_offdiag_A(self):
        return len(self.offdiag_A_index)

    @property
    def n_B(self):
        return int(self.mask_B.sum())

    @property
    def n_C(self):
        return int(self.mask_C.sum())

    @property
    def n_neural(self):
        return self.d + self.n_offdiag_A + self.n_B + self.n_C

    @property
    def n_params(self):
        return self.n_neural + 3 * self.d

    def neural_names(self):
        names = [f"nuA[{i + 1}]" for i in range(self.d)]
        names += [f"A[{i + 1},{j + 1}]" for i, j in self.offdiag_A_index]
        names += [f"B{k + 1}[{i + 1},{j + 1}]" for k, i, j in self.B_index]
        names += [f"C[{i + 1},{k + 1}]" for i, k in self.C_index]
        return names

    def param_names(self):
        names = self.neural_names()
        for prefix in ("s_star", "beta", "log_sigma"):
            names += [f"{prefix}[{i + 1}]" for i in range(self.d)]
        return names

    def B_is_diag(self):
        """Boolean per free B entry: does it sit on a diagonal?"""
        return np.array([i == j for _, i, j in self.B_index], dtype=bool)

    def to_dict(self):
        return {
            "d": self.d,
            "m": self.m,
            "mask_A": self.mask_A.tolist(),
            "mask_B": self.mask_B.tolist(),
            "mask_C": self.mask_C.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        h = cls(obj["mask_A"], obj.get("mask_B", []), obj["mask_C"])
        if "d" in obj and int(obj["d"]) != h.d:
            raise InvalidInputError(f"declared d={obj['d']} but masks give {h.d}")
        if "m" in obj and int(obj["m"]) != h.m:
            raise InvalidInputError(f"declared m={obj['m']} but masks give {h.m}")
        return h

    @classmethod
    def full(cls, d, m):
        return cls(np.ones((d, d), bool), np.ones((m, d, d), bool),
                   np.ones((d, m), bool))

    def permuted(self, perm):
        """Hypothesis with ROIs reordered by ``perm``."""
        p = np.asarray(perm)
        return Hypothesis(self.mask_A[np.ix_(p, p)],
                          self.mask_B[:, p][:, :, p],
                          self.mask_C[p])


@dataclass(frozen=True)
class Block:
    start: int
    length: int
    stimulus: tuple

    @property
    def stop(self):
        return self.start + self.length


def _runs(rows):
    blocks = []
    start = 0
    n = rows.shape[0]
    for k in range(1, n + 1):
        if k == n or not np.array_equal(rows[k], rows[start]):
            blocks.append(Block(start, k - start, tuple(int(v) for v in rows[start])))
            start = k
    return tuple(blocks)


@dataclass(frozen=True, eq=False)
class StimulusDesign:
    """Binary stimulus matrix with its repetition time and block partition.

    ``blocks`` partitions the rows of ``U``.  ``segments`` partitions the
    transitions actually applied to the ODE (identical to ``blocks`` unless
    ``prescan_rest`` overrides a non-rest first row).
    """

    U: np.ndarray
    r: float
    prescan_rest: bool = True
    blocks: tuple = field(init=False)

    def __post_init__(self):
        u = np.array(self.U, ndmin=2)
        if u.ndim != 2 or u.shape[0] < 1 or u.shape[1] < 1:
            raise InvalidInputError(f"U must be a non-empty n x m matrix, got {u.shape}")
        if not np.all((u == 0) | (u == 1)):
            raise InvalidInputError("U must contain only 0/1 entries")
        if not (np.isfinite(self.r) and self.r > 0):
            raise InvalidInputError(f"repetition time must be positive, got {self.r}")
        u = u.astype(np.int64)
        u.setflags(write=False)
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "blocks", _runs(u))

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def m(self):
        return self.U.shape[1]

    @property
    def transition_stimuli(self):
        """Stimulus governing ``[k r, (k+1) r)`` for ``k = 0..n-1``."""
        e = self.U.copy()
        if self.prescan_rest:
            e[0] = 0
        return e

    @property
    def segments(self):
        return _runs(self.transition_stimuli)

    @property
    def initial_stimulus(self):
        return self.transition_stimuli[0]

    def stimulus_codes(self):
        """Distinct transition stimuli and, per transition, its row index."""
        e = self.transition_stimuli
        uniq, codes = np.unique(e, axis=0, return_inverse=True)
        return uniq.astype(float), np.asarray(codes, dtype=np.int64).reshape(-1)


def block_partition(U, r, prescan_rest=True):
    """Split ``U`` into maximal runs of identical rows."""
    return StimulusDesign(np.asarray(U), r, prescan_rest)


@dataclass
class ParamSet:
    """Full parameter state in the sampler's natural layout.

    ``diag(A) = -0.5 * exp(nu_diagA)``; ``sigma`` is the noise SD per ROI.
    """

    nu_diagA: np.ndarray
    offdiag_A: np.ndarray
    B_entries: np.ndarray
    C_entries: np.ndarray
    s_star: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("nu_diagA", "offdiag_A", "B_entries", "C_entries",
                     "s_star", "beta", "sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))

    def neural_vector(self):
        return np.concatenate([self.nu_diagA, self.offdiag_A, self.B_entries,
                               self.C_entries])

    def to_vector(self):
        """Unconstrained vector: neural, s_star, beta, log(sigma)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            ls = np.log(self.sigma)
        return np.concatenate([self.neural_vector(), self.s_star, self.beta, ls])

    @classmethod
    def from_vector(cls, x, h):
        x = np.asarray(x, dtype=float)
        if x.shape != (h.n_params,):
            raise InvalidInputError(f"expected {h.n_params} values, got {x.shape}")
        d = h.d
        cuts = np.cumsum([d, h.n_offdiag_A, h.n_B, h.n_C, d, d])
        parts = np.split(x, cuts)
        return cls(parts[0], parts[1], parts[2], parts[3], parts[4], parts[5],
                   np.exp(parts[6]))

    def A(self, h):
        a = np.zeros((h.d, h.d))
        a[np.diag_indices(h.d)] = DIAG_BASELINE * np.exp(self.nu_diagA)
        for v, (i, j) in zip(self.offdiag_A, h.offdiag_A_index):
            a[i, j] = v
        return a

    def B(self, h):
        b = np.zeros((h.m, h.d, h.d))
        for v, idx in zip(self.B_entries, h.B_index):
            b[idx] = v
        return b

    def C(self, h):
        c = np.zeros((h.d, h.m))
        for v, idx in zip(self.C_entries, h.C_index):
            c[idx] = v
        return c

    def check(self, h):
        expected = {"nu_diagA": h.d, "offdiag_A": h.n_offdiag_A, "B_entries": h.n_B,
                    "C_entries": h.n_C, "s_star": h.d, "beta": h.d, "sigma": h.d}
        for name, size in expected.items():
            if getattr(self, name).size != size:
                raise InvalidInputError(
                    f"{name} has {getattr(self, name).size} values, hypothesis needs {size}")
        return self

    @classmethod
    def from_matrices(cls, h, A, B, C, s_star, beta=None, sigma=None):
        """Build from dense matrices; entries outside the masks must be zero."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float).reshape(h.m, h.d, h.d)
        C = np.asarray(C, dtype=float).reshape(h.d, h.m)
        diag = np.diag(A)
        if np.any(diag >= 0):
            raise InvalidInputError("diag(A) must be strictly negative")
        off = ~h.mask_A
        if np.any(A[off] != 0) or np.any(B[~h.mask_B] != 0) or np.any(C[~h.mask_C] != 0):
            raise InvalidInputError("matrix has nonzero entries outside the hypothesis masks")
        d = h.d
        return cls(
            np.log(diag / DIAG_BASELINE),
            np.array([A[i, j] for i, j in h.offdiag_A_index]),
            np.array([B[k] for k in h.B_index]),
            np.array([C[k] for k in h.C_index]),
            s_star,
            np.zeros(d) if beta is None else beta,
            np.ones(d) if sigma is None else sigma,
        )

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in (
            "nu_diagA", "offdiag_A", "B_entries", "C_entries", "s_star", "beta", "sigma")}

    @classmethod
    def from_dict(cls, obj, h=None):
        """Accept either the vector layout or dense ``A``/``B``/``C`` matrices."""
        if "A" in obj:
            if h is None:
                raise InvalidInputError("matrix-form parameters need a hypothesis")
            return cls.from_matrices(h, obj["A"], obj.get("B", np.zeros((h.m, h.d, h.d))),
                                     obj["C"], obj["s_star"], obj.get("beta"),
                                     obj.get("sigma"))
        p = cls(**{k: obj[k] for k in (
            "nu_diagA", "offdiag_A", "B_entries", "C_entries", "s_star", "beta", "sigma")})
        return p.check(h) if h is not None else p


def assemble_block_system(p, h, u_b):
    """Return ``(A + sum_i u_b[i] B_i, C u_b)`` for one block."""
    u_b = np.asarray(u_b, dtype=float).reshape(-1)
    if u_b.shape != (h.m,) or not np.all((u_b == 0) | (u_b == 1)):
        raise InvalidInputError(f"u_b must be a binary vector of length {h.m}")
    a_tilde = p.A(h) + np.tensordot(u_b, p.B(h), axes=1)
    return a_tilde, p.C(h) @ u_b


def neural_trajectory(p, h, design):
    """Latent states ``z[0..n-1]`` by block-wise closed-form propagation."""
    d, n, r = h.d, design.n, design.r
    if design.m != h.m:
        raise InvalidInputError(f"design has {design.m} stimuli, hypothesis {h.m}")
    z = np.empty((n, d))
    z[0] = p.s_star
    for seg in design.segments:
        a_t, c_t = assemble_block_system(p, h, seg.stimulus)
        phi, g = affine_propagator(a_t, c_t, r)
        for k in range(seg.start, min(seg.stop, n - 1)):
            z[k + 1] = phi @ z[k] + g
    return z


def conv_matrix(hker, n):
    """Lower-triangular Toeplitz ``H`` with ``H[j, k] = hker[j + 1 - k]``."""
    hker = np.asarray(hker, dtype=float)
    if hker.shape[0] < n + 1:
        raise InvalidInputError(f"kernel needs at least {n + 1} taps, has {hker.shape[0]}")
    return toeplitz(hker[1:n + 1], np.zeros(n))


def convolve(z, hker):
    """Mean BOLD (without baseline) at scans ``1..n`` from states ``z[0..n-1]``."""
    z = np.asarray(z, dtype=float)
    squeeze = z.ndim == 1
    z = z.reshape(z.shape[0], -1)
    out = conv_matrix(hker, z.shape[0]) @ z
    return out[:, 0] if squeeze else out


def _normal_logpdf(x, sd):
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * (x / sd) ** 2 - math.log(sd) - 0.5 * _LOG_2PI))


def log_prior(p, h):
    """Log prior density (normalised); ``-inf`` outside ``sigma > 0``."""
    if np.any(p.sigma <= 0) or not np.all(np.isfinite(p.sigma)):
        return -math.inf
    diagB = h.B_is_diag()
    lp = _normal_logpdf(p.nu_diagA, PRIOR_SD_DIAG)
    lp += _normal_logpdf(p.B_entries[diagB], PRIOR_SD_DIAG)
    lp += _normal_logpdf(p.B_entries[~diagB], PRIOR_SD_OFFDIAG)
    lp += _normal_logpdf(p.offdiag_A, PRIOR_SD_OFFDIAG)
    lp += _normal_logpdf(p.C_entries, PRIOR_SD_OFFDIAG)
    lp += _normal_logpdf(p.s_star, PRIOR_SD_STATE)
    lp += _normal_logpdf(p.beta, PRIOR_SD_BETA)
    lp += float(np.sum(math.log(SIGMA_RATE) - SIGMA_RATE * p.sigma))
    return lp


def mean_bold(p, h, design):
    """Noise-free BOLD ``mu + beta`` at scans ``1..n``."""
    z = neural_trajectory(p, h, design)
    return convolve(z, hrf_kernel(design.r, design.n)) + p.beta


def log_likelihood(p, h, design, Y):
    """Gaussian log-likelihood of BOLD ``Y`` (n x d)."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (design.n, h.d):
        raise InvalidInputError(f"Y has shape {Y.shape}, expected {(design.n, h.d)}")
    resid = Y - mean_bold(p, h, design)
    s2 = p.sigma ** 2
    return float(np.sum(-0.5 * np.log(2 * math.pi * s2) - 0.5 * resid ** 2 / s2))
