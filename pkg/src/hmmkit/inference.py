"""Uncertainty after a fit: smoothing probabilities, delta-method covariances,
Wald intervals, the parametric bootstrap and information criteria.

Smoothing probabilities here are the conditional state probabilities given
the observed series, ``P(C_t = i | x_1..x_T)`` evaluated at the estimate;
their standard errors describe uncertainty from estimating the parameters,
not variation over resampled series.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from hmmkit import adcore as ad
from hmmkit.likelihood import (_obs, forward_backward,
                               forward_backward_logs, log_emission_matrix)
from hmmkit.optim import FitResult, OptimizerConfig, fit
from hmmkit.params import (EmissionSpec, Family, NaturalParams, log_tpm,
                           natural_bounds, natural_labels, natural_vector,
                           split_working, stationary_generic)

__all__ = [
    "FitResult", "ConfidenceInterval", "SmoothingReport", "BootstrapResult",
    "CovarianceUnavailableError", "BootstrapUnreliableError", "normal_quantile",
    "smoothing_probabilities", "smoothing_with_uncertainty", "inverse_hessian",
    "covariance_natural", "with_covariance", "wald_ci", "parameter_table",
    "parametric_bootstrap", "aic_bic", "default_init", "select_state_count",
]


class CovarianceUnavailableError(np.linalg.LinAlgError):
    pass


class BootstrapUnreliableError(RuntimeError):
    pass


def fmt(x) -> str:
    """Round-trip float formatting (17 significant digits)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# normal quantile
# ---------------------------------------------------------------------------

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Acklam's rational approximation (relative error ~1e-9) followed by one
    Halley step against ``erfc``, which brings it to near machine precision.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - plow:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def _z(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return normal_quantile(0.5 + level / 2)


# ---------------------------------------------------------------------------
# Wald intervals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfidenceInterval:
    estimate: float
    lower: float
    upper: float
    level: float

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if not self.lower <= self.estimate <= self.upper:
            raise ValueError("interval must bracket the estimate")


def wald_ci(estimate: float, se: float, level: float = 0.95,
            bounds: tuple[float, float] | None = None) -> ConfidenceInterval:
    """``estimate +- z * se``, intersected with ``bounds`` when given."""
    if se < 0 or not np.isfinite(se):
        raise ValueError(f"standard error must be finite and non-negative, got {se}")
    z = _z(level)
    lo, hi = estimate - z * se, estimate + z * se
    if bounds is not None:
        lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
    return ConfidenceInterval(float(estimate), float(min(lo, estimate)),
                              float(max(hi, estimate)), float(level))


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def inverse_hessian(h) -> np.ndarray:
    """Inverse of a positive definite Hessian by Cholesky.

    A singular or indefinite matrix gets one diagonal jitter of
    ``1e-8 * max(1, max|diag|)``; failing that, :class:`CovarianceUnavailableError`.
    """
    if h is None:
        raise CovarianceUnavailableError("no Hessian available at the estimate")
    h = np.asarray(h, dtype=float)
    h = 0.5 * (h + h.T)
    n = h.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        L = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * max(1.0, float(np.max(np.abs(np.diag(h)))))
        try:
            L = np.linalg.cholesky(h + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            with np.errstate(all="ignore"):
                cond = np.linalg.cond(h)
            raise CovarianceUnavailableError(
                f"Hessian is not positive definite (condition number {cond:.3g}, "
                f"min eigenvalue {np.linalg.eigvalsh(h).min():.3g})") from None
    linv = np.linalg.solve(L, np.eye(n))
    cov = linv.T @ linv
    return 0.5 * (cov + cov.T)


def covariance_natural(fit_: FitResult) -> np.ndarray:
    """Delta-method covariance ``G H^-1 G'`` of :func:`natural_vector`."""
    spec = fit_.spec
    cov_w = inverse_hessian(fit_.hessian_working)
    G = ad.jacobian(lambda w: natural_vector(w, spec), fit_.working_hat)
    cov = G @ cov_w @ G.T
    return 0.5 * (cov + cov.T)


def with_covariance(fit_: FitResult) -> FitResult:
    fit_.cov_natural = covariance_natural(fit_)
    return fit_


def natural_estimates(fit_: FitResult) -> np.ndarray:
    return np.asarray(natural_vector(fit_.working_hat, fit_.spec), dtype=float)


def parameter_table(fit_: FitResult, level: float = 0.95):
    """Rows ``(label, estimate, se, ConfidenceInterval)`` for every natural parameter."""
    spec = fit_.spec
    if fit_.cov_natural is None:
        with_covariance(fit_)
    est = natural_estimates(fit_)
    se = np.sqrt(np.clip(np.diag(fit_.cov_natural), 0.0, None))
    rows = []
    for lab, e, s, b in zip(natural_labels(spec), est, se, natural_bounds(spec)):
        rows.append((lab, float(e), float(s), wald_ci(float(e), float(s), level, b)))
    return rows


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def smoothing_probabilities(n: NaturalParams, obs) -> np.ndarray:
    """``m x T`` matrix of ``P(C_t = i | x)``, normalised column by column in log space."""
    cache = forward_backward(n, obs)
    s = cache.log_alpha + cache.log_beta
    return np.exp(s - ad.logsumexp(s, axis=0, keepdims=True))


def _smoothing_flat(w, x, spec: EmissionSpec):
    # generic in the scalar type: concatenated per-time probability vectors
    tau, a, b = split_working(w, spec)
    m = spec.m
    log_gamma = log_tpm(tau, m)
    delta = stationary_generic(ad.exp(log_gamma), m)
    logp = log_emission_matrix(x, spec, a, b)
    la, lb = forward_backward_logs(ad.log(delta), log_gamma, logp, m)
    cols = []
    for t in range(len(la)):
        s = la[t] + lb[t]
        cols.append(ad.exp(s - ad.logsumexp(s)))
    return ad.concatenate(cols)


@dataclass
class SmoothingReport:
    probs: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    most_likely_state: np.ndarray   # 0-based
    level: float = 0.95

    @property
    def m(self):
        return self.probs.shape[0]

    @property
    def T(self):
        return self.probs.shape[1]

    def rows(self):
        for t in range(self.T):
            for i in range(self.m):
                yield (t + 1, i + 1, self.probs[i, t], self.se[i, t], self.ci_lower[i, t],
                       self.ci_upper[i, t], int(self.most_likely_state[t]) + 1)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "state", "prob", "se", "lower", "upper", "most_likely"])
            for t, i, p, s, lo, hi, ml in self.rows():
                wr.writerow([t, i, fmt(p), fmt(s), fmt(lo), fmt(hi), ml])

    @classmethod
    def from_csv(cls, path, level=0.95) -> "SmoothingReport":
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        T = max(int(r["t"]) for r in rows)
        m = max(int(r["state"]) for r in rows)
        arrs = {k: np.zeros((m, T)) for k in ("prob", "se", "lower", "upper")}
        ml = np.zeros(T, dtype=int)
        for r in rows:
            t, i = int(r["t"]) - 1, int(r["state"]) - 1
            for k in arrs:
                arrs[k][i, t] = float(r[k])
            ml[t] = int(r["most_likely"]) - 1
        return cls(arrs["prob"], arrs["se"], arrs["lower"], arrs["upper"], ml, level)

    def to_dict(self) -> dict:
        return {"level": self.level, "probs": self.probs.tolist(), "se": self.se.tolist(),
                "ci_lower": self.ci_lower.tolist(), "ci_upper": self.ci_upper.tolist(),
                "most_likely_state": (self.most_likely_state + 1).tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def smoothing_jacobian(w, obs, spec: EmissionSpec):
    """Smoothing probabilities (``m x T``) and their Jacobian (``m x T x n``)
    with respect to the working parameters, from one forward-mode pass."""
    x = _obs(obs)
    m, T, n = spec.m, x.size, np.size(w)
    w = np.asarray(w, dtype=float)
    out = _smoothing_flat(ad.Dual(w, np.eye(n)), x, spec)
    if isinstance(out, ad.Dual):
        vals, tan = out.val, np.moveaxis(out.tan, 0, -1)
    else:
        vals, tan = np.asarray(out), np.zeros((m * T, n))
    probs = vals.reshape(T, m).T
    J = tan.reshape(T, m, n).transpose(1, 0, 2)
    return probs, J


def smoothing_with_uncertainty(fit_: FitResult, obs, level: float = 0.95) -> SmoothingReport:
    """Smoothing probabilities with delta-method standard errors and clipped Wald CIs."""
    if not fit_.converged:
        raise ValueError("smoothing uncertainty needs a converged fit")
    z = _z(level)
    cov_w = inverse_hessian(fit_.hessian_working)
    probs, J = smoothing_jacobian(fit_.working_hat, obs, fit_.spec)
    var = np.einsum("itk,kl,itl->it", J, cov_w, J)
    se = np.sqrt(np.clip(var, 0.0, None))
    lower = np.clip(np.minimum(probs - z * se, probs), 0.0, 1.0)
    upper = np.clip(np.maximum(probs + z * se, probs), 0.0, 1.0)
    return SmoothingReport(probs, se, lower, upper, np.argmax(probs, axis=0), level)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    labels: list
    estimates: np.ndarray      # successful replications x parameters
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_requested: int
    n_failed: int
    level: float = 0.95

    def intervals(self) -> dict:
        return {lab: (float(lo), float(md), float(hi))
                for lab, lo, md, hi in zip(self.labels, self.lower, self.median, self.upper)}

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["param", "median", "lower", "upper"])
            for lab, md, lo, hi in zip(self.labels, self.median, self.lower, self.upper):
                wr.writerow([lab, fmt(md), fmt(lo), fmt(hi)])


def _bootstrap_one(args):
    from hmmkit.studies import simulate
    natural, spec, T, seed, cfg = args
    x, _ = simulate(natural, T, seed)
    res = fit(spec, x, natural, cfg)
    if not res.converged or not np.isfinite(res.nll):
        return None
    return np.asarray(natural_vector(res.working_hat, spec), dtype=float)


def parametric_bootstrap(fit_: FitResult, B: int, seed, optcfg: OptimizerConfig | None = None,
                         T: int | None = None, level: float = 0.95,
                         workers: int | None = None) -> BootstrapResult:
    """Resimulate from the estimate, refit from it, and take percentile intervals.

    ``seed`` is an int (spawned into one child seed per replication) or a
    sequence of ``B`` per-replication seeds.  Failed refits are dropped and
    counted; more than half failing raises :class:`BootstrapUnreliableError`.
    """
    from hmmkit.studies import parallel_map, replication_seeds
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    if not fit_.converged:
        raise ValueError("bootstrap needs a converged fit")
    _z(level)
    spec = fit_.spec
    cfg = optcfg or OptimizerConfig.from_name(fit_.optimizer_id)
    T = int(T or fit_.n_obs)
    if np.ndim(seed) == 0:
        seeds = replication_seeds(int(seed), B)
    else:
        seeds = list(seed)
        if len(seeds) != B:
            raise ValueError("need one seed per replication")
    jobs = [(fit_.natural_hat, spec, T, s, cfg) for s in seeds]
    results = parallel_map(_bootstrap_one, jobs, workers)
    ok = [r for r in results if r is not None]
    n_failed = B - len(ok)
    if n_failed > B / 2:
        raise BootstrapUnreliableError(f"{n_failed} of {B} bootstrap refits failed")
    est = np.vstack(ok)
    alpha = (1 - level) / 2
    return BootstrapResult(
        natural_labels(spec), est, np.median(est, axis=0),
        np.quantile(est, alpha, axis=0), np.quantile(est, 1 - alpha, axis=0),
        B, n_failed, level)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

def aic_bic(nll: float, k: int, T: int) -> tuple[float, float]:
    if k < 1 or T < 1:
        raise ValueError("need k >= 1 and T >= 1")
    return 2 * nll + 2 * k, 2 * nll + k * math.log(T)


def default_init(obs, spec: EmissionSpec) -> NaturalParams:
    """Quantile-spread emission parameters and a TPM with 0.8 on the diagonal."""
    x = _obs(obs)
    m = spec.m
    gamma = (np.full((m, m), 0.2 / (m - 1)) + np.eye(m) * (0.8 - 0.2 / (m - 1))
             if m > 1 else np.ones((1, 1)))
    q = np.quantile(x, (np.arange(m) + 0.5) / m)
    spread = max(float(np.std(x)), 0.5)
    gap = 0.25 * spread / m
    for i in range(1, m):
        q[i] = max(q[i], q[i - 1] + gap)
    if spec.family is Family.POISSON:
        lam = np.maximum(q, 0.1)
        for i in range(1, m):
            lam[i] = max(lam[i], lam[i - 1] + gap)
        return NaturalParams(gamma=gamma, lam=lam)
    return NaturalParams(gamma=gamma, mu=q, sigma=np.full(m, spread / m))


@dataclass
class SelectionRow:
    m: int
    nll: float
    aic: float
    bic: float
    converged: bool
    best_aic: bool = False
    best_bic: bool = False


def select_state_count(obs, family, m_min: int, m_max: int,
                       optcfg: OptimizerConfig | None = None) -> list[SelectionRow]:
    """Fit ``m_min..m_max`` states and mark the AIC and BIC minimisers among converged fits."""
    if not 1 <= m_min <= m_max <= 8:
        raise ValueError("need 1 <= m_min <= m_max <= 8")
    x = _obs(obs)
    rows = []
    for m in range(m_min, m_max + 1):
        spec = EmissionSpec(family, m)
        res = fit(spec, x, default_init(x, spec), optcfg)
        ok = res.converged and np.isfinite(res.nll)
        a, b = aic_bic(res.nll, spec.n_free, x.size) if np.isfinite(res.nll) else (np.nan, np.nan)
        rows.append(SelectionRow(m, res.nll, a, b, ok))
    good = [r for r in rows if r.converged]
    if good:
        min(good, key=lambda r: r.aic).best_aic = True
        min(good, key=lambda r: r.bic).best_bic = True
    return rows
