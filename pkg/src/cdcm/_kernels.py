"""Compiled likelihood/gradient kernel for the sampler hot path.

Transitions are grouped by distinct stimulus vector ("code"): each code owns
one propagator ``exp(r [[A_k, c_k], [0, 0]])``.  The gradient is obtained by
an adjoint sweep over the state recursion followed by the adjoint Frechet
derivative of the matrix exponential, evaluated through the block identity
``L_exp(X, E) = [exp([[X, E], [0, X]])]_{12}`` with ``X = M^T``.
"""

import math

import numba
import numpy as np

from .linalg import expm_kernel


@numba.njit(cache=True)
def propagators(a_tilde, c_tilde, r):
    ncode, d = c_tilde.shape
    phi = np.empty((ncode, d, d))
    g = np.empty((ncode, d))
    aug = np.zeros((d + 1, d + 1))
    for c in range(ncode):
        aug[:d, :d] = a_tilde[c] * r
        aug[:d, d] = c_tilde[c] * r
        e = expm_kernel(aug)
        phi[c] = e[:d, :d]
        g[c] = e[:d, d]
    return phi, g


@numba.njit(cache=True)
def trajectory(phi, g, codes, s_star, n):
    d = s_star.shape[0]
    z = np.empty((n, d))
    z[0] = s_star
    for k in range(n - 1):
        c = codes[k]
        for i in range(d):
            acc = g[c, i]
            for j in range(d):
                acc += phi[c, i, j] * z[k, j]
            z[k + 1, i] = acc
    return z


@numba.njit(cache=True)
def convolve_states(z, hker):
    n, d = z.shape
    mu = np.zeros((n, d))
    for j in range(n):
        for k in range(j + 1):
            w = hker[j + 1 - k]
            for l in range(d):
                mu[j, l] += w * z[k, l]
    return mu


@numba.njit(cache=True)
def loglik_and_grad(a_tilde, c_tilde, codes, s_star, hker, y, beta, sigma, r):
    """Gaussian log-likelihood and its gradient w.r.t. the block systems.

    Returns ``(ll, g_a_tilde, g_c_tilde, g_s_star, g_beta, g_sigma)``.
    """
    n, d = y.shape
    ncode = c_tilde.shape[0]
    phi, g = propagators(a_tilde, c_tilde, r)
    z = trajectory(phi, g, codes, s_star, n)
    mu = convolve_states(z, hker)

    ll = 0.0
    dmu = np.empty((n, d))
    g_beta = np.zeros(d)
    g_sigma = np.zeros(d)
    for l in range(d):
        s2 = sigma[l] * sigma[l]
        norm = -0.5 * math.log(2.0 * math.pi * s2)
        for j in range(n):
            res = y[j, l] - mu[j, l] - beta[l]
            ll += norm - 0.5 * res * res / s2
            dmu[j, l] = res / s2
            g_beta[l] += res / s2
            g_sigma[l] += res * res / (s2 * sigma[l]) - 1.0 / sigma[l]

    # dz = H^T dmu
    dz = np.zeros((n, d))
    for k in range(n):
        for j in range(k, n):
            w = hker[j + 1 - k]
            for l in range(d):
                dz[k, l] += w * dmu[j, l]

    g_phi = np.zeros((ncode, d, d))
    g_g = np.zeros((ncode, d))
    used = np.zeros(ncode, dtype=np.bool_)
    lam = dz[n - 1].copy()
    new = np.empty(d)
    for k in range(n - 2, -1, -1):
        c = codes[k]
        used[c] = True
        for i in range(d):
            g_g[c, i] += lam[i]
            for j in range(d):
                g_phi[c, i, j] += lam[i] * z[k, j]
        for j in range(d):
            acc = dz[k, j]
            for i in range(d):
                acc += phi[c, i, j] * lam[i]
            new[j] = acc
        lam[:] = new

    g_a = np.zeros((ncode, d, d))
    g_c = np.zeros((ncode, d))
    p = d + 1
    big = np.zeros((2 * p, 2 * p))
    for c in range(ncode):
        if not used[c]:
            continue
        # the Frechet derivative is linear in E; normalise it so a huge
        # adjoint does not drive the scaling step of expm
        scale = 0.0
        for i in range(d):
            scale = max(scale, abs(g_g[c, i]))
            for j in range(d):
                scale = max(scale, abs(g_phi[c, i, j]))
        if scale == 0.0:
            continue
        big[:, :] = 0.0
        for i in range(d):
            for j in range(d):
                # M^T in both diagonal blocks
                big[j, i] = a_tilde[c, i, j] * r
                big[p + j, p + i] = a_tilde[c, i, j] * r
                big[i, p + j] = g_phi[c, i, j] / scale
            big[d, i] = c_tilde[c, i] * r
            big[p + d, p + i] = c_tilde[c, i] * r
            big[i, p + d] = g_g[c, i] / scale
        e = expm_kernel(big)
        for i in range(d):
            for j in range(d):
                g_a[c, i, j] = r * scale * e[i, p + j]
            g_c[c, i] = r * scale * e[i, p + d]
    return ll, g_a, g_c, lam, g_beta, g_sigma


@numba.njit(cache=True)
def logpost_and_grad(x, d, m, off_idx, b_idx, c_idx, prior_sd, stimuli, codes, hker, y, r,
                     sigma_rate, diag_baseline):
    """Unconstrained log posterior and gradient in one compiled call.

    Layout of ``x``: ``nu (d)``, free off-diagonal A, free B, free C,
    ``s_star (d)``, ``beta (d)``, ``log sigma (d)``.
    """
    n_off = off_idx.shape[0]
    n_b = b_idx.shape[0]
    n_c = c_idx.shape[0]
    ncode = stimuli.shape[0]
    o_off = d
    o_b = o_off + n_off
    o_c = o_b + n_b
    o_s = o_c + n_c
    o_beta = o_s + d
    o_sig = o_beta + d
    grad = np.zeros(x.shape[0])

    A = np.zeros((d, d))
    for i in range(d):
        A[i, i] = diag_baseline * math.exp(x[i])
    for t in range(n_off):
        A[off_idx[t, 0], off_idx[t, 1]] = x[o_off + t]
    a_tilde = np.empty((ncode, d, d))
    c_tilde = np.zeros((ncode, d))
    for c in range(ncode):
        a_tilde[c] = A
        for t in range(n_b):
            k = b_idx[t, 0]
            a_tilde[c, b_idx[t, 1], b_idx[t, 2]] += stimuli[c, k] * x[o_b + t]
        for t in range(n_c):
            c_tilde[c, c_idx[t, 0]] += stimuli[c, c_idx[t, 1]] * x[o_c + t]
    s_star = x[o_s:o_beta].copy()
    beta = x[o_beta:o_sig].copy()
    sigma = np.exp(x[o_sig:o_sig + d])

    ll, ga, gc, gs, gb, gsig = loglik_and_grad(a_tilde, c_tilde, codes, s_star, hker, y,
                                               beta, sigma, r)
    for c in range(ncode):
        for i in range(d):
            grad[i] += ga[c, i, i] * A[i, i]
        for t in range(n_off):
            grad[o_off + t] += ga[c, off_idx[t, 0], off_idx[t, 1]]
        for t in range(n_b):
            grad[o_b + t] += stimuli[c, b_idx[t, 0]] * ga[c, b_idx[t, 1], b_idx[t, 2]]
        for t in range(n_c):
            grad[o_c + t] += stimuli[c, c_idx[t, 1]] * gc[c, c_idx[t, 0]]
    for i in range(d):
        grad[o_s + i] += gs[i]
        grad[o_beta + i] += gb[i]
        grad[o_sig + i] += gsig[i] * sigma[i]

    lp = ll
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for t in range(prior_sd.shape[0]):
        sd = prior_sd[t]
        v = x[t] / sd
        lp += -0.5 * v * v - math.log(sd) - half_log_2pi
        grad[t] -= x[t] / (sd * sd)
    for i in range(d):
        # Exp(rate) on sigma, plus log-Jacobian of the log transform
        lp += math.log(sigma_rate) - sigma_rate * sigma[i] + x[o_sig + i]
        grad[o_sig + i] += 1.0 - sigma_rate * sigma[i]
    return lp, grad
