"""Convergence and fit diagnostics: multivariate ESS, HPD, bootstrap MSE."""

import math
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from ..errors import DegenerateDrawsError, InvalidInputError


def batch_means_cov(draws, chain_ids=None, batch_size=None):
    """Multivariate batch-means estimate of the asymptotic covariance.

    With several chains, batches never straddle a chain boundary and each
    batch mean is centred on its own chain's mean.

    Returns
    -------
    sigma : (P, P) ndarray
    dof : int
        Number of batches minus number of chains.
    """
    x = np.asarray(draws, dtype=float)
    if chain_ids is None:
        groups = [x]
    else:
        chain_ids = np.asarray(chain_ids)
        groups = [x[chain_ids == c] for c in np.unique(chain_ids)]
    if batch_size is None:
        batch_size = max(1, int(math.isqrt(min(g.shape[0] for g in groups))))
    b = int(batch_size)
    P = x.shape[1]
    acc = np.zeros((P, P))
    dof = 0
    for g in groups:
        a = g.shape[0] // b
        if a < 1:
            continue
        bm = g[:a * b].reshape(a, b, P).mean(axis=1)
        dev = bm - bm.mean(axis=0)
        acc += dev.T @ dev
        dof += a - 1
    if dof < 1:
        return np.full((P, P), np.nan), 0
    return b * acc / dof, dof


def multi_ess(draws, chain_ids=None, batch_size=None):
    """Multivariate effective sample size ``N (|Lambda| / |Sigma|)^(1/P)``.

    ``Lambda`` is the sample covariance of the draws and ``Sigma`` the
    batch-means estimate with batch size ``floor(sqrt(N))`` (per chain).
    Returns ``nan`` when the estimate is not available (``N <= 2P`` or too
    few batches for a full-rank ``Sigma``).

    Raises
    ------
    DegenerateDrawsError
        If the sample covariance is singular, e.g. a constant column.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, P = x.shape
    if N <= 2 * P:
        return math.nan
    if chain_ids is None:
        lam = np.cov(x, rowvar=False).reshape(P, P)
    else:
        # within-chain covariance so that disagreeing chains do not inflate ESS
        ids = np.asarray(chain_ids)
        centred = np.concatenate([x[ids == c] - x[ids == c].mean(axis=0)
                                  for c in np.unique(ids)])
        lam = centred.T @ centred / (N - 1)
    sign_l, logdet_l = np.linalg.slogdet(lam)
    spread = np.ptp(x, axis=0)
    if sign_l <= 0 or np.any(spread == 0):
        raise DegenerateDrawsError("sample covariance of the draws is singular")
    sigma, dof = batch_means_cov(x, chain_ids, batch_size)
    if dof < P:
        return math.nan
    sign_s, logdet_s = np.linalg.slogdet(sigma)
    if sign_s <= 0:
        return math.nan
    return float(N * math.exp((logdet_l - logdet_s) / P))


def ess_threshold(P, alpha=0.05, eps=0.05):
    """Minimum multivariate ESS for relative precision ``eps`` at level ``alpha``.

    ``W = 2^(2/P) pi (P Gamma(P/2))^(-2/P) chi2_{1-alpha,P} / eps^2``
    (Vats, Flegal and Jones 2019).
    """
    if int(P) != P or P < 1:
        raise InvalidInputError(f"P must be a positive integer, got {P}")
    if not 0 < alpha < 1 or not eps > 0:
        raise InvalidInputError("need 0 < alpha < 1 and eps > 0")
    log_w = ((2.0 / P) * math.log(2.0) + math.log(math.pi)
             - (2.0 / P) * (math.log(P) + gammaln(P / 2.0))
             + math.log(chi2.ppf(1.0 - alpha, P)) - 2.0 * math.log(eps))
    return math.exp(log_w)


def _hpd(x, prob):
    s = np.sort(np.asarray(x, dtype=float))
    n = s.size
    k = min(n, max(1, math.ceil(prob * n)))
    widths = s[k - 1:] - s[:n - k + 1]
    i = int(np.argmin(widths))
    return float(s[i]), float(s[i + k - 1])


def hpd_interval(draws_1d, prob=0.95):
    """Shortest interval containing ``ceil(prob * N)`` of the sorted draws."""
    x = np.asarray(draws_1d, dtype=float).reshape(-1)
    if not 0 < prob < 1:
        raise InvalidInputError(f"prob must lie in (0, 1), got {prob}")
    if x.size < 20:
        raise InvalidInputError(f"need at least 20 draws, got {x.size}")
    return _hpd(x, prob)


class BootstrapMSE(NamedTuple):
    mse: float
    se: float
    ci_95: tuple


def block_bootstrap_mse(obs, pred, block_len=10, reps=10000, seed=0):
    """Mean squared residual with a circular moving-block bootstrap SE.

    Blocks of ``block_len`` consecutive residual indices (wrapping around the
    end) are resampled until ``n`` indices are collected.
    """
    obs = np.asarray(obs, dtype=float).reshape(-1)
    pred = np.asarray(pred, dtype=float).reshape(-1)
    if obs.shape != pred.shape:
        raise InvalidInputError("obs and pred lengths differ")
    n = obs.size
    if block_len < 1 or reps < 100:
        raise InvalidInputError("need block_len >= 1 and reps >= 100")
    if n < block_len:
        raise InvalidInputError(f"series of length {n} is shorter than block_len {block_len}")
    sq = (obs - pred) ** 2
    mse = float(sq.mean())
    if block_len == n:
        # every circular block is the whole series
        return BootstrapMSE(mse, 0.0, (mse, mse))
    rng = np.random.Generator(np.random.Philox(seed))
    nb = -(-n // block_len)
    starts = rng.integers(0, n, size=(reps, nb))
    idx = (starts[:, :, None] + np.arange(block_len)).reshape(reps, -1)[:, :n] % n
    boot = sq[idx].mean(axis=1)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return BootstrapMSE(mse, float(boot.std(ddof=1)), (float(lo), float(hi)))
