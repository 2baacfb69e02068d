"""Posterior summaries on the sampled and natural scales."""

from dataclasses import dataclass, field
import re

import numpy as np

from ..model import DIAG_BASELINE
from .diagnostics import _hpd

_NU = re.compile(r"^nuA\[(\d+)\]$")
_LOGSIG = re.compile(r"^log_sigma\[(\d+)\]$")
_NON_NEURAL = ("s_star[", "beta[", "log_sigma[")


def natural_transform(names, draws):
    """Map sampled-scale columns to the natural scale, draw by draw.

    ``nuA[i]`` becomes ``A[i,i] = -0.5 exp(nu)`` and ``log_sigma[i]`` becomes
    ``sigma[i]``; every other column is passed through.
    """
    draws = np.asarray(draws, dtype=float)
    out = draws.copy()
    new = list(names)
    for j, nm in enumerate(names):
        m = _NU.match(nm)
        if m:
            out[:, j] = DIAG_BASELINE * np.exp(draws[:, j])
            new[j] = f"A[{m.group(1)},{m.group(1)}]"
            continue
        m = _LOGSIG.match(nm)
        if m:
            out[:, j] = np.exp(draws[:, j])
            new[j] = f"sigma[{m.group(1)}]"
    return new, out


def neural_columns(names):
    return [j for j, nm in enumerate(names) if not nm.startswith(_NON_NEURAL)]


def _describe(x, prob):
    n = x.shape[0]
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(x.shape[1])
    hpd = np.array([_hpd(x[:, j], prob) for j in range(x.shape[1])]).reshape(-1, 2)
    return mean, sd, hpd


@dataclass
class PosteriorSummary:
    names: list
    mean: np.ndarray
    sd: np.ndarray
    hpd: np.ndarray
    natural_names: list
    natural_mean: np.ndarray
    natural_sd: np.ndarray
    natural_hpd: np.ndarray
    neural_names: list
    theta_hat: np.ndarray
    S: np.ndarray
    prob: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    def table(self, natural=False):
        """Rows of ``(name, mean, sd, hpd_lo, hpd_hi)``."""
        if natural:
            src = (self.natural_names, self.natural_mean, self.natural_sd, self.natural_hpd)
        else:
            src = (self.names, self.mean, self.sd, self.hpd)
        return [(n, float(m), float(s), float(h[0]), float(h[1])) for n, m, s, h in zip(*src)]

    def to_dict(self):
        def block(names, mean, sd, hpd):
            return {n: {"mean": float(m), "sd": float(s), "hpd_lo": float(h[0]),
                        "hpd_hi": float(h[1])} for n, m, s, h in zip(names, mean, sd, hpd)}
        return {
            "hpd_prob": self.prob,
            "sampled_scale": block(self.names, self.mean, self.sd, self.hpd),
            "natural_scale": block(self.natural_names, self.natural_mean,
                                   self.natural_sd, self.natural_hpd),
            "theta_hat": {"names": list(self.neural_names),
                          "values": [float(v) for v in self.theta_hat]},
            "S": [[float(v) for v in row] for row in self.S],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, obj):
        s = obj["sampled_scale"]
        nat = obj["natural_scale"]

        def unpack(block):
            names = list(block)
            mean = np.array([block[n]["mean"] for n in names])
            sd = np.array([block[n]["sd"] for n in names])
            hpd = np.array([[block[n]["hpd_lo"], block[n]["hpd_hi"]] for n in names]).reshape(-1, 2)
            return names, mean, sd, hpd

        n1, m1, s1, h1 = unpack(s)
        n2, m2, s2, h2 = unpack(nat)
        return cls(n1, m1, s1, h1, n2, m2, s2, h2,
                   list(obj["theta_hat"]["names"]), np.array(obj["theta_hat"]["values"], float),
                   np.array(obj["S"], dtype=float).reshape(len(obj["theta_hat"]["names"]), -1),
                   obj.get("hpd_prob", 0.95), obj.get("diagnostics", {}))


def summarize(pd, prob=0.95):
    """Means, SDs and HPD intervals plus the neural-parameter covariance ``S``.

    ``theta_hat`` and ``S`` refer to the neural parameters on the sampled
    scale (``nuA`` for the diagonal of ``A``).  Natural-scale summaries
    transform each draw first, so e.g. the reported ``A[i,i]`` mean is the
    mean of ``-0.5 exp(nu)``, not the transform of the mean.
    """
    x = np.asarray(pd.draws, dtype=float)
    names = list(pd.names)
    mean, sd, hpd = _describe(x, prob)
    nat_names, nat = natural_transform(names, x)
    nmean, nsd, nhpd = _describe(nat, prob)
    cols = neural_columns(names)
    theta = x[:, cols]
    if theta.shape[0] > 1:
        S = np.cov(theta, rowvar=False).reshape(len(cols), len(cols))
        S = 0.5 * (S + S.T)
    else:
        S = np.zeros((len(cols), len(cols)))
    diag = pd.diagnostics() if hasattr(pd, "diagnostics") else {}
    return PosteriorSummary(names, mean, sd, hpd, nat_names, nmean, nsd, nhpd,
                            [names[j] for j in cols], theta.mean(axis=0), S, prob, diag)
