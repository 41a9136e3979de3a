"""Forward/backward recursions and the HMM negative log-likelihood.

All recursions run in log space: each step is a log-sum-exp over the previous
log forward (or backward) vector plus the log transition matrix, so nothing
under- or overflows however long the series is.  The negative log-likelihood
is written with :mod:`hmmkit.adcore` operations and differentiates as is.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from hmmkit import adcore as ad
from hmmkit.params import (EmissionSpec, Family, NaturalParams, log_tpm,
                           split_working, stationary_generic)

LOG_2PI = float(np.log(2.0 * np.pi))


class ObservationSeries:
    """Validated 1-D observation vector."""

    def __init__(self, values, family: Family | str | None = None):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size < 1:
            raise ValueError("observation series is empty")
        if not np.all(np.isfinite(values)):
            bad = np.flatnonzero(~np.isfinite(values))
            raise ValueError(f"non-finite observations at positions {bad[:10].tolist()}")
        if family is not None and Family(family) is Family.POISSON:
            check_counts(values)
        self.values = values
        self.values.setflags(write=False)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @classmethod
    def from_csv(cls, path, header: bool | None = None, family=None) -> "ObservationSeries":
        """Read a single-column CSV.

        ``header=None`` skips the first line only if it does not parse as a
        number.
        """
        vals = []
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        for lineno, line in enumerate(lines, start=1):
            cell = line.strip()
            if not cell:
                continue
            if "," in cell:
                cell = cell.split(",")[0].strip()
            if lineno == 1 and header is not False:
                try:
                    float(cell)
                except ValueError:
                    continue
                if header:
                    continue
            try:
                x = float(cell)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None
            if not np.isfinite(x):
                raise ValueError(f"{path}:{lineno}: non-finite value {cell!r}")
            vals.append(x)
        return cls(vals, family=family)


def check_counts(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError("Poisson observations must be non-negative integers")


def _obs(obs) -> np.ndarray:
    return np.asarray(obs.values if isinstance(obs, ObservationSeries) else obs, dtype=float)


def log_emission_matrix(obs, spec: EmissionSpec, a, b=None):
    """``T x m`` matrix of log p_i(x_t).

    ``a`` is log-rate (Poisson) or mean (Gaussian); ``b`` is log-sd.
    """
    x = _obs(obs).reshape(-1, 1)
    m = spec.m
    if spec.family is Family.POISSON:
        check_counts(x)
        loglam = ad.reshape(a, (1, m))
        return x * loglam - ad.exp(loglam) - gammaln(x + 1.0)
    mu = ad.reshape(a, (1, m))
    logsd = ad.reshape(b, (1, m))
    z = (x - mu) * ad.exp(-logsd)
    return z * z * -0.5 - logsd - 0.5 * LOG_2PI


def _log_matmul(a, b, m):
    # batched matrix product in the log semiring: (K, m, m) x (K, m, m)
    k = _shape0(a)
    return ad.logsumexp(ad.reshape(a, (k, m, m, 1)) + ad.reshape(b, (k, 1, m, m)), axis=2)


def _forward_loglik(log_delta, log_gamma, logp, m):
    # The forward recursion is the row vector log(delta P(x1)) multiplied by
    # the matrices Gamma P(x_t), t >= 2, in the log semiring.  Products are
    # associative there too, so they are formed pairwise in a balanced tree:
    # about log2(T) batched steps instead of T sequential ones, which keeps
    # the recorded graph (and every derivative sweep) short.
    T = _shape0(logp)
    first = ad.reshape(log_delta, (1, m)) + logp[0:1]
    if T == 1:
        return ad.logsumexp(first)
    mats = ad.reshape(log_gamma, (1, m, m)) + ad.reshape(logp[1:], (T - 1, 1, m))
    k = T - 1
    pending = []
    while k > 1:
        if k % 2:
            pending.append(mats[k - 1:k])
            k -= 1
            mats = mats[0:k]
        mats = _log_matmul(mats[0::2], mats[1::2], m)
        k //= 2
    for right in reversed(pending):
        mats = _log_matmul(mats, right, m)
    last = ad.logsumexp(ad.reshape(first, (1, m, 1)) + mats, axis=1)
    return ad.logsumexp(last)


def _shape0(x):
    return x.shape[0]


def nll(w, obs, spec: EmissionSpec):
    """Negative log-likelihood at working parameters ``w``.

    Generic over ndarray, :class:`~hmmkit.adcore.Var` and
    :class:`~hmmkit.adcore.Dual` inputs.  The chain starts in its
    stationary distribution.
    """
    tau, a, b = split_working(w, spec)
    m = spec.m
    log_gamma = log_tpm(tau, m)
    delta = stationary_generic(ad.exp(log_gamma), m)
    logp = log_emission_matrix(obs, spec, a, b)
    return -_forward_loglik(ad.log(delta), log_gamma, logp, m)


def nll_function(obs, spec: EmissionSpec) -> ad.DiffFunction:
    x = _obs(obs)
    return ad.DiffFunction(lambda w: nll(w, x, spec), spec.n_working)


def natural_log_inputs(n: NaturalParams, obs):
    """Log delta, log Gamma and log emission matrix for plain natural parameters."""
    spec = n.spec
    with np.errstate(divide="ignore"):
        log_gamma = np.log(n.gamma)
        log_delta = np.log(n.delta)
    if spec.family is Family.POISSON:
        logp = log_emission_matrix(obs, spec, np.log(n.lam))
    else:
        logp = log_emission_matrix(obs, spec, n.mu, np.log(n.sigma))
    return log_delta, log_gamma, logp


def nll_natural(n: NaturalParams, obs) -> float:
    log_delta, log_gamma, logp = natural_log_inputs(n, obs)
    return float(-_forward_loglik(log_delta, log_gamma, logp, n.m))


@dataclass
class ForwardBackwardCache:
    log_alpha: np.ndarray   # m x T
    log_beta: np.ndarray    # m x T
    log_likelihood: float


def forward_backward_logs(log_delta, log_gamma, logp, m):
    """Log forward/backward arrays as lists of length-m vectors (generic)."""
    T = _shape0(logp)
    la = [log_delta + logp[0]]
    for t in range(1, T):
        la.append(ad.logsumexp(ad.reshape(la[-1], (m, 1)) + log_gamma, axis=0) + logp[t])
    lb = [None] * T
    lb[T - 1] = np.zeros(m)
    for t in range(T - 2, -1, -1):
        nxt = ad.reshape(logp[t + 1] + lb[t + 1], (1, m))
        lb[t] = ad.logsumexp(log_gamma + nxt, axis=1)
    return la, lb


def forward_backward(n: NaturalParams, obs) -> ForwardBackwardCache:
    log_delta, log_gamma, logp = natural_log_inputs(n, obs)
    la, lb = forward_backward_logs(log_delta, log_gamma, logp, n.m)
    log_alpha = np.stack(la, axis=1)
    log_beta = np.stack(lb, axis=1)
    ll = float(ad.logsumexp(log_alpha[:, -1], axis=0))
    return ForwardBackwardCache(log_alpha, log_beta, ll)


def _emission_prob(n: NaturalParams, x) -> np.ndarray:
    """``len(x) x m`` emission probabilities (plain arithmetic, for oracles)."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    if n.lam is not None:
        return np.exp(x * np.log(n.lam) - n.lam - gammaln(x + 1.0))
    return np.exp(-0.5 * ((x - n.mu) / n.sigma) ** 2) / (n.sigma * np.sqrt(2 * np.pi))


def brute_force_likelihood(n: NaturalParams, obs, max_paths: int = 10 ** 7) -> float:
    """Sum of path probabilities over every hidden state sequence."""
    x = _obs(obs)
    m, T = n.m, x.size
    if float(m) ** T > max_paths:
        raise ValueError(f"{m}**{T} state sequences exceed the limit of {max_paths}")
    p = _emission_prob(n, x)
    total = 0.0
    for path in itertools.product(range(m), repeat=T):
        prob = n.delta[path[0]] * p[0, path[0]]
        for t in range(1, T):
            prob *= n.gamma[path[t - 1], path[t]] * p[t, path[t]]
        total += prob
    return total


def matrix_product_likelihood(n: NaturalParams, obs) -> float:
    """``delta P(x1) Gamma P(x2) ... Gamma P(xT) 1'`` with dense matrices."""
    p = _emission_prob(n, _obs(obs))
    v = n.delta @ np.diag(p[0])
    for t in range(1, p.shape[0]):
        v = v @ n.gamma @ np.diag(p[t])
    return float(v.sum())
