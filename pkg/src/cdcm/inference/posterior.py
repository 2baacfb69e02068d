"""Unconstrained log-posterior of a single-subject CDCM fit, with gradient."""

import math

import numpy as np

from .. import _kernels
from ..errors import InvalidInputError
from ..model import (DIAG_BASELINE, PRIOR_SD_BETA, PRIOR_SD_DIAG,
                     PRIOR_SD_OFFDIAG, PRIOR_SD_STATE, SIGMA_RATE, ParamSet,
                     hrf_kernel)

_LOG_2PI = math.log(2.0 * math.pi)


class CDCMPosterior:
    """Log-density over ``x = [theta_z, s_star, beta, log sigma]``.

    Instances are immutable after construction and safe to share between
    chains; every call allocates its own work arrays.
    """

    def __init__(self, hypothesis, design, Y):
        Y = np.asarray(Y, dtype=float)
        h = hypothesis
        if design.m != h.m:
            raise InvalidInputError(f"design has {design.m} stimuli, hypothesis {h.m}")
        if Y.shape != (design.n, h.d):
            raise InvalidInputError(f"Y has shape {Y.shape}, expected {(design.n, h.d)}")
        if not np.all(np.isfinite(Y)):
            raise InvalidInputError("Y contains non-finite values")
        self.hypothesis = h
        self.design = design
        self.Y = np.ascontiguousarray(Y)
        self.dim = h.n_params
        self.names = h.param_names()
        self.stimuli, self.codes = design.stimulus_codes()
        self.stimuli = np.ascontiguousarray(self.stimuli)
        self.hker = np.ascontiguousarray(hrf_kernel(design.r, design.n), dtype=float)

        d = h.d
        self._off = np.array(h.offdiag_A_index, dtype=np.int64).reshape(-1, 2)
        self._b = np.array(h.B_index, dtype=np.int64).reshape(-1, 3)
        self._c = np.array(h.C_index, dtype=np.int64).reshape(-1, 2)
        cuts = np.cumsum([d, h.n_offdiag_A, h.n_B, h.n_C, d, d])
        self._slices = [slice(a, b) for a, b in zip(np.r_[0, cuts], np.r_[cuts, self.dim])]
        diagB = h.B_is_diag()
        self._prior_sd = np.concatenate([
            np.full(d, PRIOR_SD_DIAG),
            np.full(h.n_offdiag_A, PRIOR_SD_OFFDIAG),
            np.where(diagB, PRIOR_SD_DIAG, PRIOR_SD_OFFDIAG),
            np.full(h.n_C, PRIOR_SD_OFFDIAG),
            np.full(d, PRIOR_SD_STATE),
            np.full(d, PRIOR_SD_BETA),
        ])
        self._n_gauss = self._prior_sd.size

    def split(self, x):
        return [x[s] for s in self._slices]

    def to_params(self, x):
        return ParamSet.from_vector(x, self.hypothesis)

    def from_params(self, p):
        return p.check(self.hypothesis).to_vector()

    def block_systems(self, x):
        """``(A_tilde, c_tilde)`` stacked over distinct stimulus vectors."""
        h = self.hypothesis
        nu, off, bv, cv = self.split(x)[:4]
        A = np.zeros((h.d, h.d))
        A[np.diag_indices(h.d)] = DIAG_BASELINE * np.exp(nu)
        A[self._off[:, 0], self._off[:, 1]] = off
        B = np.zeros((h.m, h.d, h.d))
        B[self._b[:, 0], self._b[:, 1], self._b[:, 2]] = bv
        C = np.zeros((h.d, h.m))
        C[self._c[:, 0], self._c[:, 1]] = cv
        a_tilde = A[None] + np.einsum("km,mij->kij", self.stimuli, B)
        c_tilde = self.stimuli @ C.T
        return np.ascontiguousarray(a_tilde), np.ascontiguousarray(c_tilde), A

    def _prior_and_grad(self, x):
        gx = np.zeros(self.dim)
        head = x[:self._n_gauss]
        sd = self._prior_sd
        lp = float(np.sum(-0.5 * (head / sd) ** 2 - np.log(sd))) - 0.5 * _LOG_2PI * head.size
        gx[:self._n_gauss] = -head / sd ** 2
        log_sigma = x[self._slices[6]]
        sigma = np.exp(log_sigma)
        # Exp(rate) on sigma plus log-Jacobian of sigma = exp(x)
        lp += float(np.sum(math.log(SIGMA_RATE) - SIGMA_RATE * sigma + log_sigma))
        gx[self._slices[6]] = -SIGMA_RATE * sigma + 1.0
        return lp, gx

    def log_likelihood(self, x):
        return self._loglik_and_grad(x)[0]

    def _loglik_and_grad(self, x):
        parts = self.split(x)
        a_tilde, c_tilde, A = self.block_systems(x)
        s_star, beta, log_sigma = parts[4], parts[5], parts[6]
        sigma = np.exp(log_sigma)
        ll, ga, gc, gs, gb, gsig = _kernels.loglik_and_grad(
            a_tilde, c_tilde, self.codes, np.ascontiguousarray(s_star), self.hker,
            self.Y, np.ascontiguousarray(beta), sigma, self.design.r)
        h = self.hypothesis
        gA = ga.sum(axis=0)
        gB = np.einsum("km,kij->mij", self.stimuli, ga)
        gC = gc.T @ self.stimuli
        gx = np.empty(self.dim)
        gx[self._slices[0]] = np.diag(gA) * np.diag(A)
        gx[self._slices[1]] = gA[self._off[:, 0], self._off[:, 1]]
        gx[self._slices[2]] = gB[self._b[:, 0], self._b[:, 1], self._b[:, 2]]
        gx[self._slices[3]] = gC[self._c[:, 0], self._c[:, 1]]
        gx[self._slices[4]] = gs
        gx[self._slices[5]] = gb
        gx[self._slices[6]] = gsig * sigma
        return ll, gx

    def logp_and_grad(self, x):
        """Return ``(log posterior, gradient)``; ``(-inf, None)`` if undefined."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            return -math.inf, None
        with np.errstate(all="ignore"):
            try:
                val, grad = _kernels.logpost_and_grad(
                    x, self.hypothesis.d, self.hypothesis.m, self._off, self._b, self._c,
                    self._prior_sd, self.stimuli, self.codes, self.hker, self.Y,
                    self.design.r, SIGMA_RATE, DIAG_BASELINE)
            except (ValueError, ZeroDivisionError, OverflowError, np.linalg.LinAlgError):
                return -math.inf, None
        if not (math.isfinite(val) and np.all(np.isfinite(grad))):
            return -math.inf, None
        return val, grad

    def logp_and_grad_reference(self, x):
        """Same quantity assembled in NumPy around the likelihood kernel."""
        x = np.asarray(x, dtype=float)
        lp, gp = self._prior_and_grad(x)
        ll, gl = self._loglik_and_grad(x)
        return lp + ll, gp + gl

    def log_density(self, x):
        return self.logp_and_grad(x)[0]

    def grad(self, x):
        return self.logp_and_grad(x)[1]

    def prior_draw(self, rng):
        """One unconstrained draw from the prior."""
        z = rng.standard_normal(self._n_gauss) * self._prior_sd
        sigma = rng.exponential(1.0 / SIGMA_RATE, size=self.hypothesis.d)
        return np.concatenate([z, np.log(sigma)])

    def predicted_bold(self, x):
        """Noise-free ``mu + beta`` at parameters ``x``."""
        a_tilde, c_tilde, _ = self.block_systems(x)
        parts = self.split(x)
        phi, g = _kernels.propagators(a_tilde, c_tilde, self.design.r)
        z = _kernels.trajectory(phi, g, self.codes, np.ascontiguousarray(parts[4]),
                                self.design.n)
        return _kernels.convolve_states(z, self.hker) + parts[5]


def log_posterior(x, ctx):
    """Log posterior at unconstrained ``x``; ``ctx`` is a :class:`CDCMPosterior`."""
    return ctx.logp_and_grad(x)[0]


def grad_log_posterior(x, ctx):
    """Gradient of :func:`log_posterior`; ``None`` where the density is -inf."""
    return ctx.logp_and_grad(x)[1]
