"""No-U-Turn Sampler with dual-averaging step size and diagonal metric.

The transition is the multinomial variant with the generalised no-U-turn
criterion (including the checks across sub-tree boundaries), following
Betancourt (2017).  Warm-up adaptation follows the usual windowed scheme:
a fast initial buffer, slow doubling windows that estimate the diagonal
metric, and a terminal fast buffer.

Any target works as long as it exposes ``dim`` and
``logp_and_grad(x) -> (lp, grad)`` returning ``(-inf, None)`` outside the
support.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import os

import numpy as np
from scipy.optimize import minimize

from ..errors import InvalidInputError, SamplerInitError
from .diagnostics import ess_threshold, multi_ess

log = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
_LOG_08 = math.log(0.8)


@dataclass
class SamplerConfig:
    """Sampler settings.

    ``num_samples=None`` keeps drawing in batches of ``batch_size`` until the
    multivariate ESS reaches the stopping threshold or ``max_iterations``
    (warm-up included, per chain) is hit.  A fixed ``num_samples`` draws
    exactly that many per chain and only reports the ESS.
    """

    warmup: int = 5000
    target_accept: float = 0.9
    max_treedepth: int = 10
    ess_alpha: float = 0.05
    ess_eps: float = 0.05
    max_iterations: int = 100000
    chains: int = 1
    seed: int = 0
    num_samples: int | None = None
    batch_size: int = 1000
    init_draws: int = 10
    init_refine: bool = True
    workers: int | None = None

    def __post_init__(self):
        if not 0 < self.target_accept < 1:
            raise InvalidInputError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if self.warmup < 100:
            raise InvalidInputError(f"warmup must be at least 100, got {self.warmup}")
        if self.max_treedepth < 1 or self.chains < 1 or self.batch_size < 1:
            raise InvalidInputError("max_treedepth, chains and batch_size must be positive")
        if self.num_samples is not None and self.num_samples < 1:
            raise InvalidInputError("num_samples must be positive")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PosteriorDraws:
    """Post-warm-up draws on the unconstrained scale plus sampler diagnostics."""

    names: list
    draws: np.ndarray
    chain: np.ndarray
    step_size: np.ndarray
    divergence_count: int
    max_depth_hits: int
    seed: int
    lp: np.ndarray | None = None
    n_warmup: int = 0
    converged: bool | None = None
    ess: float = math.nan
    ess_threshold: float = math.nan
    accept_stat: float = math.nan
    mean_tree_depth: float = math.nan
    inv_metric: np.ndarray | None = None
    warnings: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise InvalidInputError("draws must be a non-empty N x P matrix")
        if len(self.names) != self.draws.shape[1]:
            raise InvalidInputError("names do not match the number of columns")
        self.chain = np.asarray(self.chain, dtype=np.int64).reshape(-1)

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def column(self, name):
        return self.draws[:, self.names.index(name)]

    def diagnostics(self):
        return {
            "n_draws": int(self.n_draws),
            "n_chains": int(np.unique(self.chain).size),
            "n_warmup": int(self.n_warmup),
            "step_size": [float(s) for s in np.atleast_1d(self.step_size)],
            "divergence_count": int(self.divergence_count),
            "max_depth_hits": int(self.max_depth_hits),
            "accept_stat": float(self.accept_stat),
            "mean_tree_depth": float(self.mean_tree_depth),
            "multi_ess": float(self.ess),
            "ess_threshold": float(self.ess_threshold),
            "converged": self.converged,
            "seed": int(self.seed),
            "warnings": list(self.warnings),
            **self.metadata,
        }


def chain_rng(seed, chain):
    """Independent counter-based stream for one chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain,))))


def _crit(ps_minus, ps_plus, rho):
    return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0


class _Subtree:
    __slots__ = ("end", "p_beg", "p_end", "ps_beg", "ps_end", "rho", "lsw",
                 "prop", "n", "metro", "divergent", "valid")


class _Hamiltonian:
    def __init__(self, density, inv_metric):
        self.density = density
        self.minv = inv_metric
        self.sqrt_m = 1.0 / np.sqrt(inv_metric)

    def energy(self, lp, p):
        if not math.isfinite(lp):
            return math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            return -lp + 0.5 * float(p @ (self.minv * p))

    def leapfrog(self, q, p, g, step):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._leapfrog(q, p, g, step)

    def _leapfrog(self, q, p, g, step):
        p = p + 0.5 * step * g
        q = q + step * self.minv * p
        lp, g = self.density.logp_and_grad(q)
        if g is None:
            return q, p, -math.inf, np.zeros_like(q)
        p = p + 0.5 * step * g
        return q, p, lp, g

    def build(self, q, p, lp, g, depth, step, H0, rng):
        t = _Subtree()
        if depth == 0:
            q, p, lp, g = self.leapfrog(q, p, g, step)
            h = self.energy(lp, p)
            if not math.isfinite(h):
                h = math.inf
            t.divergent = h - H0 > MAX_DELTA_H
            t.valid = not t.divergent
            t.lsw = H0 - h
            t.metro = 1.0 if H0 - h > 0 else math.exp(H0 - h)
            t.n = 1
            t.end = (q, p, lp, g)
            t.prop = (q, lp, g)
            ps = self.minv * p
            t.p_beg = t.p_end = p
            t.ps_beg = t.ps_end = ps
            t.rho = p.copy()
            return t
        left = self.build(q, p, lp, g, depth - 1, step, H0, rng)
        if not left.valid:
            return left
        right = self.build(*left.end, depth - 1, step, H0, rng)
        t.n = left.n + right.n
        t.metro = left.metro + right.metro
        t.divergent = right.divergent
        t.end = right.end
        if not right.valid:
            t.valid = False
            return t
        t.lsw = np.logaddexp(left.lsw, right.lsw)
        t.prop = left.prop
        if rng.uniform() < math.exp(right.lsw - t.lsw):
            t.prop = right.prop
        t.rho = left.rho + right.rho
        t.p_beg, t.ps_beg = left.p_beg, left.ps_beg
        t.p_end, t.ps_end = right.p_end, right.ps_end
        t.valid = (_crit(left.ps_beg, right.ps_end, t.rho)
                   and _crit(left.ps_beg, right.ps_beg, left.rho + right.p_beg)
                   and _crit(left.ps_end, right.ps_end, right.rho + left.p_end))
        return t

    def transition(self, q, lp, g, eps, max_depth, rng):
        p0 = rng.standard_normal(q.size) * self.sqrt_m
        H0 = self.energy(lp, p0)
        fwd = bck = (q, p0, lp, g)
        p_fwd = p_bck = p0
        ps_fwd = ps_bck = self.minv * p0
        rho = p0.copy()
        lsw = 0.0
        sample = (q, lp, g)
        depth = n = 0
        metro = 0.0
        divergent = False
        while depth < max_depth:
            forward = rng.uniform() > 0.5
            start = fwd if forward else bck
            sub = self.build(*start, depth, eps if forward else -eps, H0, rng)
            n += sub.n
            metro += sub.metro
            divergent = divergent or sub.divergent
            if not sub.valid:
                break
            depth += 1
            if sub.lsw > lsw or rng.uniform() < math.exp(sub.lsw - lsw):
                sample = sub.prop
            lsw = np.logaddexp(lsw, sub.lsw)
            if forward:
                persist = (_crit(ps_bck, sub.ps_end, rho + sub.rho)
                           and _crit(ps_bck, sub.ps_beg, rho + sub.p_beg)
                           and _crit(ps_fwd, sub.ps_end, sub.rho + p_fwd))
                fwd, p_fwd, ps_fwd = sub.end, sub.p_end, sub.ps_end
            else:
                persist = (_crit(sub.ps_end, ps_fwd, rho + sub.rho)
                           and _crit(sub.ps_beg, ps_fwd, rho + sub.p_beg)
                           and _crit(sub.ps_end, ps_bck, sub.rho + p_bck))
                bck, p_bck, ps_bck = sub.end, sub.p_end, sub.ps_end
            rho = rho + sub.rho
            if not persist:
                break
        return sample, metro / max(n, 1), depth, divergent


class DualAveraging:
    """Nesterov dual averaging of ``log(step size)`` (Hoffman and Gelman 2014)."""

    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat):
        self.counter += 1
        a = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        w = self.counter ** -self.kappa
        self.x_bar = (1.0 - w) * self.x_bar + w * x
        return math.exp(x)

    @property
    def final(self):
        return math.exp(self.x_bar)


def adaptation_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Slow-adaptation windows ``[(start, stop), ...]`` for the metric."""
    if warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    last = warmup - term_buffer
    out = []
    start, size = init_buffer, base_window
    while start < last:
        stop = start + size
        if stop + 2 * size > last:
            stop = last
        out.append((start, stop))
        start, size = stop, 2 * size
    return out


@dataclass
class ChainState:
    """Everything one chain needs to continue; picklable."""

    chain: int
    q: np.ndarray
    lp: float
    grad: np.ndarray
    eps: float
    inv_metric: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    divergences: int = 0
    depth_hits: int = 0
    warmup_done: bool = False


def find_reasonable_step(ham, q, lp, g, eps, rng):
    """Double or halve ``eps`` until a one-step acceptance crosses 0.8."""
    direction = 0
    for _ in range(100):
        p = rng.standard_normal(q.size) * ham.sqrt_m
        H0 = ham.energy(lp, p)
        _, p1, lp1, _ = ham.leapfrog(q, p, g, eps)
        delta = H0 - ham.energy(lp1, p1)
        if direction == 0:
            direction = 1 if delta > _LOG_08 else -1
        elif (direction == 1 and not delta > _LOG_08) or (direction == -1 and not delta < _LOG_08):
            break
        eps = eps * 2.0 if direction == 1 else eps * 0.5
        if eps > 1e7 or eps < 1e-12:
            raise SamplerInitError(f"could not find a usable step size (reached {eps:g})")
    return eps


def run_warmup(density, state, cfg):
    """Adapt step size and diagonal metric in place; returns ``state``."""
    ham = _Hamiltonian(density, state.inv_metric)
    q, lp, g, rng = state.q, state.lp, state.grad, state.rng
    eps = find_reasonable_step(ham, q, lp, g, state.eps, rng)
    da = DualAveraging(eps, cfg.target_accept)
    windows = adaptation_windows(cfg.warmup)
    ends = {stop: start for start, stop in windows}
    in_window = np.zeros(cfg.warmup, dtype=bool)
    for start, stop in windows:
        in_window[start:stop] = True
    w_n, w_mean, w_m2 = 0, np.zeros(q.size), np.zeros(q.size)
    for it in range(cfg.warmup):
        (q, lp, g), acc, _, _ = ham.transition(q, lp, g, eps, cfg.max_treedepth, rng)
        eps = da.update(acc)
        if in_window[it]:
            w_n += 1
            delta = q - w_mean
            w_mean = w_mean + delta / w_n
            w_m2 = w_m2 + delta * (q - w_mean)
        if it + 1 in ends and w_n > 1:
            var = w_m2 / (w_n - 1)
            # shrink towards a small multiple of the identity
            var = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
            ham = _Hamiltonian(density, var)
            eps = find_reasonable_step(ham, q, lp, g, eps, rng)
            da.restart(eps)
            w_n, w_mean, w_m2 = 0, np.zeros(q.size), np.zeros(q.size)
    state.q, state.lp, state.grad = q, lp, g
    state.eps = da.final
    state.inv_metric = ham.minv
    state.iteration += cfg.warmup
    state.warmup_done = True
    return state


def run_batch(density, state, n, max_treedepth):
    """Draw ``n`` post-warm-up transitions; returns ``(state, draws, lp, stats)``."""
    ham = _Hamiltonian(density, state.inv_metric)
    q, lp, g, rng = state.q, state.lp, state.grad, state.rng
    out = np.empty((n, q.size))
    lps = np.empty(n)
    acc = np.empty(n)
    depths = np.empty(n, dtype=np.int64)
    for i in range(n):
        (q, lp, g), a, depth, div = ham.transition(q, lp, g, state.eps, max_treedepth, rng)
        out[i], lps[i], acc[i], depths[i] = q, lp, a, depth
        state.divergences += int(div)
        state.depth_hits += int(depth >= max_treedepth)
    state.q, state.lp, state.grad = q, lp, g
    state.iteration += n
    return state, out, lps, {"accept": acc, "depth": depths}


def _polish(density, x, maxiter):
    def f(v):
        lp, g = density.logp_and_grad(v)
        if g is None:
            return 1e300, np.zeros_like(v)
        return -lp, -g
    res = minimize(f, x, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    lp, g = density.logp_and_grad(res.x)
    if g is None or not math.isfinite(lp):
        return x, -math.inf
    return res.x, lp


def initialize(density, rng, n_draws=10, refine=True, maxiter=500):
    """Starting point from ``n_draws`` random candidates.

    Candidates come from ``density.prior_draw(rng)`` when available and
    from ``Uniform(-2, 2)`` otherwise.  With ``refine`` every candidate is
    run through L-BFGS and the best local mode wins (multimodal targets
    otherwise trap chains in poor modes); without it the best raw
    candidate is returned.
    """
    draw = getattr(density, "prior_draw", None)
    cands = []
    for _ in range(max(1, n_draws) * 10):
        x = draw(rng) if draw is not None else rng.uniform(-2.0, 2.0, density.dim)
        lp, g = density.logp_and_grad(x)
        if g is not None and math.isfinite(lp):
            cands.append((lp, x))
        if len(cands) >= n_draws:
            break
    if not cands:
        raise SamplerInitError("no finite starting point found")
    if refine:
        cands = [(lp, x) for x, lp in (_polish(density, x, maxiter) for _, x in cands)]
    lp, best = max(cands, key=lambda c: c[0])
    return np.asarray(best, dtype=float)


def _new_state(density, cfg, chain, init):
    rng = chain_rng(cfg.seed, chain)
    if init is None:
        q = initialize(density, rng, cfg.init_draws, cfg.init_refine)
    else:
        q = np.array(init, dtype=float, ndmin=2)[chain % len(np.atleast_2d(init))]
        if q.shape != (density.dim,):
            raise SamplerInitError(f"init has {q.size} values, target needs {density.dim}")
    lp, g = density.logp_and_grad(q)
    if g is None or not math.isfinite(lp):
        raise SamplerInitError("log density is not finite at the initial point")
    return ChainState(chain, q, lp, g, 1.0, np.ones(density.dim), rng)


def _warmup_job(args):
    density, state, cfg = args
    return run_warmup(density, state, cfg)


def _batch_job(args):
    density, state, n, depth = args
    return run_batch(density, state, n, depth)


def _worker_count(cfg):
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    cap = os.environ.get("CDCM_THREADS")
    try:
        cap = int(cap) if cap else 1
    except ValueError:
        cap = 1
    return max(1, min(cap, cfg.chains, os.cpu_count() or 1))


def _map(jobs, fn, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def nuts_sample(density, cfg=None, init=None, names=None):
    """Run NUTS and return :class:`PosteriorDraws`.

    Parameters
    ----------
    density
        Target exposing ``dim`` and ``logp_and_grad``.
    cfg : SamplerConfig
    init : array, optional
        Starting point (``P``) or one row per chain (``chains x P``).
    names : list of str, optional
        Column labels; defaults to ``density.names`` or ``x[i]``.
    """
    cfg = cfg or SamplerConfig()
    P = density.dim
    names = list(names or getattr(density, "names", None) or [f"x[{i + 1}]" for i in range(P)])
    workers = _worker_count(cfg)
    states = [_new_state(density, cfg, c, init) for c in range(cfg.chains)]
    states = _map([(density, s, cfg) for s in states], _warmup_job, workers)

    W = ess_threshold(P, cfg.ess_alpha, cfg.ess_eps)
    chunks, lps, chain_ids, accs, depths = [], [], [], [], []
    converged = None
    ess = math.nan
    per_chain = 0
    while True:
        if cfg.num_samples is not None:
            n = cfg.num_samples
        else:
            n = min(cfg.batch_size, cfg.max_iterations - cfg.warmup - per_chain)
            if n <= 0:
                break
        results = _map([(density, s, n, cfg.max_treedepth) for s in states], _batch_job, workers)
        states = []
        for st, out, lp, stats in results:
            states.append(st)
            chunks.append(out)
            lps.append(lp)
            chain_ids.append(np.full(n, st.chain))
            accs.append(stats["accept"])
            depths.append(stats["depth"])
        per_chain += n
        draws = np.concatenate(chunks)
        ids = np.concatenate(chain_ids)
        try:
            ess = multi_ess(draws, ids)
        except Exception as exc:  # degenerate draws: keep sampling
            log.debug("ESS not available: %s", exc)
            ess = math.nan
        converged = bool(math.isfinite(ess) and ess >= W)
        log.info("post-warmup draws per chain %d, multiESS %.1f (target %.1f)", per_chain, ess, W)
        if cfg.num_samples is not None or converged:
            break

    draws = np.concatenate(chunks)
    n_total = draws.shape[0]
    divs = sum(s.divergences for s in states)
    pd = PosteriorDraws(
        names=names,
        draws=draws,
        chain=np.concatenate(chain_ids),
        step_size=np.array([s.eps for s in states]),
        divergence_count=divs,
        max_depth_hits=sum(s.depth_hits for s in states),
        seed=cfg.seed,
        lp=np.concatenate(lps),
        n_warmup=cfg.warmup,
        converged=converged,
        ess=ess,
        ess_threshold=W,
        accept_stat=float(np.mean(np.concatenate(accs))),
        mean_tree_depth=float(np.mean(np.concatenate(depths))),
        inv_metric=np.array([s.inv_metric for s in states]),
        metadata={"asymptotic_covariance": "multivariate batch means, batch size floor(sqrt(N))",
                  "target_accept": cfg.target_accept},
    )
    if cfg.num_samples is None and not converged:
        pd.warnings.append(
            f"multivariate ESS {ess:.1f} below threshold {W:.1f} after {per_chain} draws per chain")
    if divs > 0.01 * n_total:
        pd.warnings.append(
            f"{divs} divergent transitions ({100.0 * divs / n_total:.1f}%); "
            "consider raising target_accept to 0.95 or 0.99")
    for w in pd.warnings:
        log.warning(w)
    return pd
