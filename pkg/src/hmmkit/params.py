"""Natural and working parametrisations of Poisson and Gaussian HMMs."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from hmmkit import adcore as ad


class Family(str, enum.Enum):
    POISSON = "poisson"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class EmissionSpec:
    family: Family
    m: int

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if int(self.m) < 1:
            raise ValueError(f"state count must be >= 1, got {self.m}")
        object.__setattr__(self, "m", int(self.m))

    @property
    def n_tpm(self) -> int:
        return self.m * (self.m - 1)

    @property
    def n_working(self) -> int:
        per_state = 1 if self.family is Family.POISSON else 2
        return self.n_tpm + per_state * self.m

    @property
    def n_free(self) -> int:
        """Number of free parameters, as counted by AIC/BIC."""
        return self.n_working


@dataclass(frozen=True)
class NaturalParams:
    """Constrained HMM parameters.

    ``lam`` is set for Poisson models, ``mu``/``sigma`` for Gaussian ones.
    ``delta`` is the stationary distribution of ``gamma`` and is recomputed
    when omitted.
    """

    gamma: np.ndarray
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    delta: np.ndarray | None = field(default=None)

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1]:
            raise ValueError(f"gamma must be square, got shape {gamma.shape}")
        m = gamma.shape[0]
        if np.any(gamma < 0) or np.any(gamma > 1):
            raise ValueError("gamma entries must lie in [0, 1]")
        if np.max(np.abs(gamma.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("gamma rows must sum to one")
        if (self.lam is None) == (self.mu is None):
            raise ValueError("give exactly one of lam (Poisson) or mu/sigma (Gaussian)")
        for name in ("lam", "mu", "sigma"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float).reshape(-1)
                if v.size != m:
                    raise ValueError(f"{name} must have length {m}")
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        if self.lam is not None and np.any(self.lam <= 0):
            raise ValueError("Poisson rates must be positive")
        if self.mu is not None:
            if self.sigma is None:
                raise ValueError("Gaussian parameters need sigma")
            if np.any(self.sigma <= 0):
                raise ValueError("standard deviations must be positive")
        if self.delta is None:
            delta = stationary_distribution(gamma)
        else:
            delta = np.array(self.delta, dtype=float).reshape(-1)
            if delta.size != m or np.any(delta < 0) or abs(delta.sum() - 1.0) > 1e-8:
                raise ValueError("delta must be a probability vector of length m")
        gamma.setflags(write=False)
        delta.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "delta", delta)

    @property
    def m(self) -> int:
        return self.gamma.shape[0]

    @property
    def family(self) -> Family:
        return Family.POISSON if self.lam is not None else Family.GAUSSIAN

    @property
    def spec(self) -> EmissionSpec:
        return EmissionSpec(self.family, self.m)

    @property
    def location(self) -> np.ndarray:
        return self.lam if self.lam is not None else self.mu

    def permute(self, order) -> "NaturalParams":
        """Relabel states so that new state ``i`` is old state ``order[i]``."""
        order = np.asarray(order, dtype=int)
        g = self.gamma[np.ix_(order, order)]
        kw = {"gamma": g, "delta": self.delta[order]}
        if self.lam is not None:
            kw["lam"] = self.lam[order]
        else:
            kw["mu"] = self.mu[order]
            kw["sigma"] = self.sigma[order]
        return NaturalParams(**kw)

    def to_dict(self) -> dict:
        d = {"family": self.family.value, "m": self.m,
             "gamma": self.gamma.reshape(-1).tolist()}
        if self.lam is not None:
            d["lambda"] = self.lam.tolist()
        else:
            d["mu"] = self.mu.tolist()
            d["sigma"] = self.sigma.tolist()
        d["delta"] = self.delta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NaturalParams":
        m = int(d["m"])
        family = Family(d["family"])
        gamma = np.asarray(d["gamma"], dtype=float).reshape(m, m)
        delta = d.get("delta")
        if family is Family.POISSON:
            return cls(gamma=gamma, lam=d["lambda"], delta=delta)
        return cls(gamma=gamma, mu=d["mu"], sigma=d["sigma"], delta=delta)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NaturalParams":
        return cls.from_dict(json.loads(text))


def stationary_distribution(gamma) -> np.ndarray:
    """Solve ``delta (I - Gamma + U) = 1`` with ``U`` the all-ones matrix."""
    gamma = np.asarray(gamma, dtype=float)
    m = gamma.shape[0]
    a = np.eye(m) - gamma + 1.0
    try:
        delta = np.linalg.solve(a.T, np.ones(m))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"stationary distribution undefined (reducible chain?), "
            f"cond={np.linalg.cond(a):.3g}") from exc
    if not np.all(np.isfinite(delta)):
        raise np.linalg.LinAlgError("stationary distribution undefined")
    return delta


def offdiag_index(m: int):
    """Row-major positions of the off-diagonal entries of an ``m x m`` matrix."""
    rows, cols = np.nonzero(~np.eye(m, dtype=bool))
    return rows, cols


# generic pieces (work on ndarray, Var and Dual)

def log_tpm(tau, m: int):
    """Log transition matrix from off-diagonal logits (diagonal logit fixed at 0).

    Row-wise softmax with the max shift inside ``logsumexp`` keeps every
    entry finite for any finite ``tau``.
    """
    logits = ad.scatter(tau, offdiag_index(m), (m, m))
    return logits - ad.logsumexp(logits, axis=1, keepdims=True)


def stationary_generic(gamma, m: int):
    a = np.eye(m) - gamma + 1.0
    return ad.solve(ad.transpose(a), np.ones(m))


def split_working(w, spec: EmissionSpec):
    k = spec.n_tpm
    tau = w[0:k]
    if spec.family is Family.POISSON:
        return tau, w[k:k + spec.m], None
    return tau, w[k:k + spec.m], w[k + spec.m:k + 2 * spec.m]


def natural_vector(w, spec: EmissionSpec):
    """Flat natural parameters ``(gamma row-major, lam | mu, sigma, delta)``.

    Generic in the scalar type, so its forward-mode Jacobian drives the
    delta method.
    """
    tau, a, b = split_working(w, spec)
    m = spec.m
    gamma = ad.exp(log_tpm(tau, m))
    delta = stationary_generic(gamma, m)
    parts = [ad.reshape(gamma, (m * m,))]
    if spec.family is Family.POISSON:
        parts.append(ad.exp(a))
    else:
        parts += [a, ad.exp(b)]
    parts.append(delta)
    return ad.concatenate(parts)


def natural_labels(spec: EmissionSpec) -> list[str]:
    m = spec.m
    labels = [f"gamma{i + 1}{j + 1}" for i in range(m) for j in range(m)]
    if spec.family is Family.POISSON:
        labels += [f"lambda{i + 1}" for i in range(m)]
    else:
        labels += [f"mu{i + 1}" for i in range(m)] + [f"sigma{i + 1}" for i in range(m)]
    labels += [f"delta{i + 1}" for i in range(m)]
    return labels


def natural_bounds(spec: EmissionSpec) -> list[tuple[float, float] | None]:
    """Admissible range of each entry of :func:`natural_vector`."""
    m = spec.m
    unit = (0.0, 1.0)
    positive = (0.0, np.inf)
    bounds = [unit] * (m * m)
    if spec.family is Family.POISSON:
        bounds += [positive] * m
    else:
        bounds += [None] * m + [positive] * m
    return bounds + [unit] * m


def _check_working(w, spec: EmissionSpec) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != spec.n_working:
        raise ValueError(
            f"working vector has length {w.size}, expected {spec.n_working} "
            f"for {spec.family.value} m={spec.m}")
    if not np.all(np.isfinite(w)):
        raise ValueError("working parameters must be finite")
    return w


def natural_from_working(w, spec: EmissionSpec) -> NaturalParams:
    w = _check_working(w, spec)
    tau, a, b = split_working(w, spec)
    gamma = np.exp(log_tpm(tau, spec.m))
    # exact row normalisation; the log-space softmax is already within an ulp
    gamma = gamma / gamma.sum(axis=1, keepdims=True)
    if spec.family is Family.POISSON:
        return NaturalParams(gamma=gamma, lam=np.exp(a))
    return NaturalParams(gamma=gamma, mu=a, sigma=np.exp(b))


def working_from_natural(n: NaturalParams, spec: EmissionSpec | None = None) -> np.ndarray:
    spec = spec or n.spec
    if n.m != spec.m or n.family is not spec.family:
        raise ValueError("parameters do not match the emission spec")
    diag = np.diag(n.gamma)
    if np.any(diag <= 0):
        raise ValueError("working parameters need a strictly positive TPM diagonal")
    rows, cols = offdiag_index(spec.m)
    with np.errstate(divide="ignore"):
        tau = np.log(n.gamma[rows, cols] / diag[rows])
    if not np.all(np.isfinite(tau)):
        raise ValueError("zero off-diagonal TPM entry has no finite logit")
    if spec.family is Family.POISSON:
        return np.concatenate([tau, np.log(n.lam)])
    return np.concatenate([tau, n.mu, np.log(n.sigma)])


def permute_working(w, spec: EmissionSpec, order) -> np.ndarray:
    """Working vector of the model with states relabelled by ``order``.

    Goes through the log TPM, so off-diagonal entries that underflow in
    natural space keep their logits.
    """
    w = _check_working(w, spec)
    order = np.asarray(order, dtype=int)
    m = spec.m
    tau, a, b = split_working(w, spec)
    lg = log_tpm(tau, m)[np.ix_(order, order)]
    rows, cols = offdiag_index(m)
    parts = [lg[rows, cols] - lg[rows, rows], a[order]]
    if b is not None:
        parts.append(b[order])
    return np.concatenate(parts)


def state_order(w, spec: EmissionSpec) -> np.ndarray:
    """Permutation sorting states by increasing rate or mean."""
    _, a, _ = split_working(_check_working(w, spec), spec)
    return np.argsort(a, kind="stable")


def sort_states(n: NaturalParams) -> NaturalParams:
    """Order states by increasing Poisson rate or Gaussian mean."""
    order = np.argsort(n.location, kind="stable")
    if np.all(order == np.arange(n.m)):
        return n
    return n.permute(order)
