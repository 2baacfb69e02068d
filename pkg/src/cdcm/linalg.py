"""Dense matrix kernels for piecewise-affine ODE propagation.

All routines operate on small dense ``float64`` matrices (d up to ~10).
The exponential uses scaling and squaring with Pade approximants
(Higham 2005); the compiled kernel ``expm_kernel`` is shared with the
likelihood/gradient code in :mod:`cdcm._kernels`.
"""

import math

import numba
import numpy as np

from .errors import InvalidInputError, NotRealLogIdentifiableError

__all__ = [
    "mat_exp",
    "w_antideriv",
    "affine_step",
    "affine_propagator",
    "mat_log_real",
    "expm_kernel",
]

# Higham (2005), Table 2.3: max 1-norm for which the degree-m approximant
# attains unit roundoff without scaling.
_THETA = (1.495585217958292e-2, 2.539398330063230e-1, 9.504178996162932e-1,
          2.097847961257068e0, 5.371920351148152e0)

_B3 = np.array([120.0, 60.0, 12.0, 1.0])
_B5 = np.array([30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0])
_B7 = np.array([17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0,
                56.0, 1.0])
_B9 = np.array([17643225600.0, 8821612800.0, 2075673600.0, 302702400.0,
                30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0])
_B13 = np.array([64764752532480000.0, 32382376266240000.0,
                 7771770303897600.0, 1187353796428800.0, 129060195264000.0,
                 10559470521600.0, 670442572800.0, 33522128640.0,
                 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0])


@numba.njit(cache=True)
def _norm1(a):
    n = a.shape[0]
    best = 0.0
    for j in range(n):
        s = 0.0
        for i in range(n):
            s += abs(a[i, j])
        if s > best:
            best = s
    return best


@numba.njit(cache=True)
def _pade_low(a, b):
    # degrees 3..9: odd powers build U, even powers build V
    n = a.shape[0]
    ident = np.eye(n)
    a2 = a @ a
    u_acc = b[1] * ident
    v_acc = b[0] * ident
    pw = ident.copy()
    m = b.shape[0] - 1
    for k in range(2, m + 1, 2):
        pw = pw @ a2
        if k + 1 <= m:
            u_acc = u_acc + b[k + 1] * pw
        v_acc = v_acc + b[k] * pw
    u = a @ u_acc
    return np.ascontiguousarray(np.linalg.solve(v_acc - u, v_acc + u))


@numba.njit(cache=True)
def _pade13(a, b):
    n = a.shape[0]
    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    return np.ascontiguousarray(np.linalg.solve(v - u, v + u))


@numba.njit(cache=True)
def expm_kernel(a):
    """Matrix exponential of a finite square array (no input checks)."""
    nrm = _norm1(a)
    if not math.isfinite(nrm):
        return np.full(a.shape, np.nan)
    if nrm <= 1.495585217958292e-2:
        return _pade_low(a, _B3)
    if nrm <= 2.539398330063230e-1:
        return _pade_low(a, _B5)
    if nrm <= 9.504178996162932e-1:
        return _pade_low(a, _B7)
    if nrm <= 2.097847961257068e0:
        return _pade_low(a, _B9)
    s = 0
    if nrm > 5.371920351148152e0:
        s = int(math.ceil(math.log2(nrm / 5.371920351148152e0)))
    r = _pade13(a / 2.0 ** s, _B13)
    for _ in range(s):
        r = r @ r
    return r


def _as_square(m, name="matrix"):
    a = np.array(m, dtype=float, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def mat_exp(m):
    """Return ``exp(m)`` for a finite square matrix."""
    return expm_kernel(_as_square(m))


def affine_propagator(a, c, tau):
    """Return ``(exp(a*tau), w(tau; a) @ c)`` from one augmented exponential.

    The top row of ``exp(tau * [[a, c], [0, 0]])`` holds both pieces, which
    avoids inverting ``a``.
    """
    d = a.shape[0]
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = a
    aug[:d, d] = c
    e = expm_kernel(aug * tau)
    return e[:d, :d], e[:d, d]


def w_antideriv(t, a):
    """Antiderivative ``w(t; a) = sum_k t^(k+1)/(k+1)! a^k`` of ``exp(t a)``.

    Computed as the top-right block of ``exp(t [[a, I], [0, 0]])`` so it is
    exact (to expm accuracy) for singular ``a``.
    """
    if not np.isfinite(t) or t < 0:
        raise InvalidInputError(f"t must be a finite non-negative time, got {t}")
    a = _as_square(a, "A")
    d = a.shape[0]
    aug = np.zeros((2 * d, 2 * d))
    aug[:d, :d] = a
    aug[:d, d:] = np.eye(d)
    return expm_kernel(aug * t)[:d, d:]


def affine_step(z0, a, c, tau):
    """Advance ``dz/dt = a z + c`` from ``z0`` by ``tau`` seconds.

    Uses ``z(tau) = exp(a tau) z0 + w(tau; a) c``, valid for singular ``a``.
    """
    a = _as_square(a, "A")
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    c = np.asarray(c, dtype=float).reshape(-1)
    if z0.shape[0] != a.shape[0] or c.shape[0] != a.shape[0]:
        raise InvalidInputError("z0, A and c dimensions disagree")
    if not (np.all(np.isfinite(z0)) and np.all(np.isfinite(c)) and np.isfinite(tau)):
        raise InvalidInputError("non-finite input to affine_step")
    if tau < 0:
        raise InvalidInputError(f"tau must be non-negative, got {tau}")
    phi, g = affine_propagator(a, c, tau)
    return phi @ z0 + g


def mat_log_real(phi, gap_tol=1e-8, imag_tol=1e-10):
    """Real logarithm of a matrix with distinct positive real eigenvalues.

    Raises
    ------
    NotRealLogIdentifiableError
        If an eigenvalue is complex, non-positive, or two eigenvalues are
        closer than ``gap_tol`` in relative terms.  In that case the real
        logarithm is not unique (or does not exist).
    """
    phi = _as_square(phi, "Phi")
    lam, vec = np.linalg.eig(phi)
    scale = max(np.max(np.abs(lam)), np.finfo(float).tiny)
    if np.any(np.abs(lam.imag) > imag_tol * scale):
        raise NotRealLogIdentifiableError(f"complex eigenvalues {lam}")
    lam = lam.real
    if np.any(lam <= 0):
        raise NotRealLogIdentifiableError(f"non-positive eigenvalues {lam}")
    srt = np.sort(lam)
    if srt.size > 1 and np.any(np.diff(srt) < gap_tol * srt[1:]):
        raise NotRealLogIdentifiableError(f"repeated eigenvalues {lam}")
    vec = vec.real
    return (vec * np.log(lam)) @ np.linalg.inv(vec)
