"""Group-level synthesis of subject fits with a marginal normal-normal model.

Subject ``k`` contributes posterior means ``theta_hat_k`` and covariance
``S_k``; marginally ``theta_hat_k ~ N(alpha + Theta b_k, T + S_k)`` with
``T = diag(tau) L L^T diag(tau)``.  Priors: standard normal on ``alpha`` and
``vec(Theta)``, half-normal(0, 1) on each ``tau``, LKJ(2) on the correlation
Cholesky factor ``L``.

Sampling uses the unconstrained vector ``[alpha, vec(Theta), log tau, y]``
where ``y`` maps to ``L`` through canonical partial correlations
``tanh(y)``.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import DegenerateCovarianceError, InvalidInputError
from .inference.diagnostics import _hpd
from .inference.nuts import SamplerConfig, nuts_sample

JITTER = 1e-8
LKJ_ETA = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def _is_missing(v):
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == "" or v.strip().lower() in ("na", "nan")
    try:
        return bool(np.isnan(v))
    except TypeError:
        return False


def _as_float(values):
    try:
        return np.array([float(v) for v in values])
    except (TypeError, ValueError):
        return None


def encode_covariates(raw, categorical=()):
    """Standardise continuous and effect-code categorical covariates.

    Parameters
    ----------
    raw : dict
        Column name to list of values (one per subject).
    categorical : iterable of str
        Columns to treat as categorical even if numeric.  Non-numeric
        columns are always categorical.

    Returns
    -------
    X : (K, q) ndarray
    names : list of str
        ``col`` for continuous columns, ``col[level]`` for each effect-coded
        level (the last level in sorted order is the reference, coded -1).
    """
    cols = list(raw)
    if not cols:
        raise InvalidInputError("no covariate columns")
    K = len(raw[cols[0]])
    out, names = [], []
    cat = set(categorical)
    for c in cols:
        vals = list(raw[c])
        if len(vals) != K:
            raise InvalidInputError(f"column {c!r} has {len(vals)} values, expected {K}")
        bad = [i for i, v in enumerate(vals) if _is_missing(v)]
        if bad:
            raise InvalidInputError(f"column {c!r} has missing values at rows {bad}")
        num = None if c in cat else _as_float(vals)
        if num is not None:
            sd = num.std(ddof=1) if K > 1 else 0.0
            if not sd > 0:
                raise InvalidInputError(f"continuous column {c!r} has zero variance")
            out.append((num - num.mean()) / sd)
            names.append(c)
            continue
        levels = sorted({str(v) for v in vals})
        if len(levels) < 2:
            raise InvalidInputError(f"categorical column {c!r} has a single level")
        labels = np.array([str(v) for v in vals])
        ref = levels[-1]
        for lev in levels[:-1]:
            col = np.where(labels == lev, 1.0, np.where(labels == ref, -1.0, 0.0))
            out.append(col)
            names.append(f"{c}[{lev}]")
    return np.column_stack(out), names


@dataclass
class SubjectRecord:
    theta_hat: np.ndarray
    S: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, dtype=float).reshape(-1)
        p = self.theta_hat.size
        self.S = np.asarray(self.S, dtype=float).reshape(p, p)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if not np.allclose(self.S, self.S.T, atol=1e-12):
            raise InvalidInputError("S must be symmetric")


@dataclass
class GroupParams:
    alpha: np.ndarray
    Theta: np.ndarray
    tau: np.ndarray
    L_corr: np.ndarray

    @property
    def T(self):
        lt = self.tau[:, None] * self.L_corr
        return lt @ lt.T


def _stack(records):
    if not records:
        raise InvalidInputError("no subject records")
    p = records[0].theta_hat.size
    q = records[0].b.size
    for r in records:
        if r.theta_hat.size != p or r.b.size != q:
            raise InvalidInputError("subject records have inconsistent dimensions")
    th = np.array([r.theta_hat for r in records])
    S = np.array([r.S for r in records]) + JITTER * np.eye(p)
    b = np.array([r.b for r in records]).reshape(len(records), q)
    return th, S, b


def _marginal(th, S, b, alpha, Theta, T, want_grad=False):
    sig = T[None] + S
    chol = np.linalg.cholesky(sig)
    resid = th - alpha - b @ Theta.T
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    sinv = np.linalg.inv(sig)
    a = np.einsum("kij,kj->ki", sinv, resid)
    K, p = th.shape
    ll = -0.5 * float(np.sum(resid * a)) - 0.5 * float(logdet.sum()) - 0.5 * K * p * _LOG_2PI
    if not want_grad:
        return ll
    g_T = 0.5 * (np.einsum("ki,kj->ij", a, a) - sinv.sum(axis=0))
    return ll, a.sum(axis=0), a.T @ b, g_T


def group_marginal_loglik(records, g):
    """Sum over subjects of ``log N(theta_hat_k; alpha + Theta b_k, T + S_k)``.

    ``S_k`` receives a ``1e-8 I`` jitter before factorisation.

    Raises
    ------
    DegenerateCovarianceError
        If some ``T + S_k`` is not positive definite.
    """
    th, S, b = _stack(records)
    p, q = th.shape[1], b.shape[1]
    Theta = np.asarray(g.Theta, dtype=float).reshape(p, q)
    try:
        return _marginal(th, S, b, np.asarray(g.alpha, float), Theta, g.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("T + S_k is not positive definite") from exc


def cpc_to_cholesky(y, K):
    """Correlation Cholesky factor from unconstrained values; also log|J|."""
    z = np.tanh(np.asarray(y, dtype=float))
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    with np.errstate(divide="ignore"):
        logj = float(np.sum(np.log1p(-z * z)))
    k = 0
    for i in range(1, K):
        L[i, 0] = z[k]
        k += 1
        ss = L[i, 0] ** 2
        for j in range(1, i):
            # tanh saturates at |y| ~ 19; the boundary has zero density
            logj += 0.5 * math.log1p(-ss) if ss < 1.0 else -math.inf
            L[i, j] = z[k] * math.sqrt(max(1.0 - ss, 0.0))
            k += 1
            ss += L[i, j] ** 2
        L[i, i] = math.sqrt(max(1.0 - ss, 0.0))
    return L, logj


def cholesky_to_cpc(L):
    """Inverse of :func:`cpc_to_cholesky`."""
    L = np.asarray(L, dtype=float)
    K = L.shape[0]
    out = []
    for i in range(1, K):
        ss = 0.0
        for j in range(i):
            z = L[i, j] / math.sqrt(1.0 - ss) if j else L[i, j]
            out.append(math.atanh(z))
            ss += L[i, j] ** 2
    return np.array(out)


def _cpc_backward(y, L, gL):
    """Gradient w.r.t. ``y`` of ``f(L(y)) + log|J(y)|`` given ``gL = df/dL``."""
    K = L.shape[0]
    z = np.tanh(y)
    gz = np.zeros_like(z)
    k0 = 0
    for i in range(1, K):
        zi = z[k0:k0 + i]
        ss = np.concatenate([[0.0], np.cumsum(L[i, :i] ** 2)])
        gs = -0.5 * gL[i, i] / L[i, i]
        for j in range(i - 1, 0, -1):
            gl = gL[i, j] + gs * 2.0 * L[i, j]
            t = math.sqrt(1.0 - ss[j])
            gz[k0 + j] = gl * t
            gs += gl * zi[j] * (-0.5 / t) - 0.5 / (1.0 - ss[j])
        gz[k0] = gL[i, 0] + gs * 2.0 * zi[0]
        k0 += i
    return gz * (1.0 - z * z) - 2.0 * z


class GroupPosterior:
    """Log density of the marginal group model on the unconstrained scale."""

    def __init__(self, records, param_names=None, covariate_names=None):
        self.th, self.S, self.b = _stack(records)
        self.K, self.p = self.th.shape
        self.q = self.b.shape[1]
        p, q = self.p, self.q
        self.n_cpc = p * (p - 1) // 2
        self.dim = p + p * q + p + self.n_cpc
        pn = list(param_names or [f"theta[{i + 1}]" for i in range(p)])
        cn = list(covariate_names or [f"b[{j + 1}]" for j in range(q)])
        self.param_names, self.covariate_names = pn, cn
        self.names = ([f"alpha[{a}]" for a in pn]
                      + [f"Theta[{a},{c}]" for a in pn for c in cn]
                      + [f"log_tau[{a}]" for a in pn]
                      + [f"cpc[{i + 1},{j + 1}]" for i in range(1, p) for j in range(i)])
        # LKJ(eta) on the Cholesky factor: weights on log L[i, i], i >= 1
        i = np.arange(1, p)
        self._lkj = p - i - 1 + 2.0 * LKJ_ETA - 2.0

    def unpack(self, x):
        p, q = self.p, self.q
        alpha = x[:p]
        Theta = x[p:p + p * q].reshape(p, q)
        log_tau = x[p + p * q:2 * p + p * q]
        y = x[2 * p + p * q:]
        return alpha, Theta, log_tau, y

    def to_params(self, x):
        alpha, Theta, log_tau, y = self.unpack(np.asarray(x, dtype=float))
        L, _ = cpc_to_cholesky(y, self.p)
        return GroupParams(alpha.copy(), Theta.copy(), np.exp(log_tau), L)

    def from_params(self, g):
        return np.concatenate([g.alpha, np.asarray(g.Theta).reshape(-1), np.log(g.tau),
                               cholesky_to_cpc(g.L_corr)])

    def logp_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return -math.inf, None
        alpha, Theta, log_tau, y = self.unpack(x)
        with np.errstate(all="ignore"):
            tau = np.exp(log_tau)
            L, logj = cpc_to_cholesky(y, self.p)
            diag = np.diag(L)[1:]
            if np.any(diag <= 0) or not np.all(np.isfinite(tau)):
                return -math.inf, None
            R = L @ L.T
            T = tau[:, None] * R * tau[None, :]
            try:
                ll, g_a, g_th, g_T = _marginal(self.th, self.S, self.b, alpha, Theta, T, True)
            except np.linalg.LinAlgError:
                return -math.inf, None
            lp = ll
            lp += -0.5 * float(alpha @ alpha) - 0.5 * float(np.sum(Theta ** 2))
            lp += float(np.sum(-0.5 * tau ** 2 + log_tau))
            lp += float(self._lkj @ np.log(diag)) + logj
            lp -= 0.5 * (self.p + Theta.size) * _LOG_2PI
            lp += self.p * (math.log(2.0) - 0.5 * _LOG_2PI)

            g_tau = 2.0 * np.sum(g_T * R * tau[None, :], axis=1)
            gR = tau[:, None] * g_T * tau[None, :]
            gL = np.tril(2.0 * gR @ L)
            gL[np.arange(1, self.p), np.arange(1, self.p)] += self._lkj / diag
            grad = np.concatenate([
                g_a - alpha,
                (g_th - Theta).reshape(-1),
                g_tau * tau - tau ** 2 + 1.0,
                _cpc_backward(y, L, gL) if self.n_cpc else np.zeros(0),
            ])
        if not (math.isfinite(lp) and np.all(np.isfinite(grad))):
            return -math.inf, None
        return lp, grad

    def prior_draw(self, rng):
        x = np.empty(self.dim)
        n0 = self.p + self.p * self.q
        x[:n0] = rng.standard_normal(n0)
        x[n0:n0 + self.p] = np.log(np.abs(rng.standard_normal(self.p)) + 1e-3)
        x[n0 + self.p:] = rng.uniform(-0.5, 0.5, self.n_cpc)
        return x


def group_fit(records, cfg=None, param_names=None, covariate_names=None, init=None):
    """NUTS over the group model; defaults to 5 chains, 1000 warm-up, 5000 draws each."""
    if len(records) < 2:
        raise InvalidInputError("group fitting needs at least two subjects")
    cfg = cfg or SamplerConfig(warmup=1000, num_samples=5000, chains=5)
    post = GroupPosterior(records, param_names, covariate_names)
    return nuts_sample(post, cfg, init=init), post


def group_summary(pd, post, prob=0.95):
    """Means, SDs and HPDs of ``alpha``, ``Theta`` and ``tau`` (natural scale)."""
    x = pd.draws
    p, q = post.p, post.q
    out = {"alpha": {}, "Theta": {}, "tau": {}, "hpd_prob": prob}

    def stat(col):
        lo, hi = _hpd(col, prob)
        return {"mean": float(col.mean()), "sd": float(col.std(ddof=1) if col.size > 1 else 0.0),
                "hpd_lo": lo, "hpd_hi": hi}

    for i, a in enumerate(post.param_names):
        out["alpha"][a] = stat(x[:, i])
        out["tau"][a] = stat(np.exp(x[:, p + p * q + i]))
        for j, c in enumerate(post.covariate_names):
            out["Theta"][f"{a},{c}"] = stat(x[:, p + i * q + j])
    if post.n_cpc:
        Rs = np.array([(lambda L: L @ L.T)(cpc_to_cholesky(row[2 * p + p * q:], p)[0])
                       for row in x[:: max(1, x.shape[0] // 2000)]])
        out["correlation_mean"] = Rs.mean(axis=0).tolist()
    out["diagnostics"] = pd.diagnostics()
    return out
