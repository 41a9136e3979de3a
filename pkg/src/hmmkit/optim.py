"""Unconstrained minimisers over working parameters, and the HMM fit driver.

All optimisers share one stopping contract (see :class:`OptimizerConfig`):

* converged when ``max|g| <= gtol * max(1, |f|)`` (gradient-based methods) or
  when the simplex has collapsed in both value and size (Nelder-Mead);
* an accepted step whose relative decrease in ``f`` is below ``ftol``, or
  whose length is below ``xtol``, ends the run as ``CONVERGED`` when the
  gradient is a finite-difference one (noise-limited); with an exact gradient
  only the gradient test can declare convergence;
* no acceptable step along a descent direction is ``LINE_SEARCH_FAILURE``.

One iteration is one accepted step.  Finite-difference gradient evaluations
are charged to ``function_evals`` and also reported as ``fd_evals``.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from hmmkit import adcore as ad
from hmmkit.likelihood import ObservationSeries, nll_function
from hmmkit.params import (EmissionSpec, NaturalParams, natural_from_working,
                           permute_working, state_order, working_from_natural)

_EVAL_ERRORS = (ad.EvaluationError, ad.NonDifferentiableError, np.linalg.LinAlgError,
                FloatingPointError, OverflowError, ValueError)
_EPS = np.finfo(float).eps


class Algorithm(str, enum.Enum):
    NELDER_MEAD = "nelder_mead"
    BFGS = "bfgs"
    CG = "cg"
    NEWTON = "newton"


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    EVALUATION_FAILURE = "evaluation_failure"
    LINE_SEARCH_FAILURE = "line_search_failure"


_ALIASES = {
    "nelder-mead": Algorithm.NELDER_MEAD, "neldermead": Algorithm.NELDER_MEAD,
    "nm": Algorithm.NELDER_MEAD, "nelder_mead": Algorithm.NELDER_MEAD,
    "bfgs": Algorithm.BFGS, "cg": Algorithm.CG, "conjugate_gradient": Algorithm.CG,
    "newton": Algorithm.NEWTON, "newton_type": Algorithm.NEWTON, "nlminb": Algorithm.NEWTON,
}


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: Algorithm = Algorithm.NEWTON
    use_supplied_gradient: bool = True
    use_supplied_hessian: bool = True
    max_iterations: int = 10_000
    gtol: float = 1e-8
    ftol: float = 1e-10
    xtol: float = 1e-10
    # Nelder-Mead: collapse size on top of the relative value spread ftol
    simplex_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "algorithm", parse_algorithm(self.algorithm))
        if self.algorithm is Algorithm.NELDER_MEAD:
            object.__setattr__(self, "use_supplied_gradient", False)
        if self.use_supplied_hessian and self.algorithm is not Algorithm.NEWTON:
            if self.algorithm is Algorithm.NELDER_MEAD:
                object.__setattr__(self, "use_supplied_hessian", False)
            else:
                raise ValueError("a supplied Hessian is only used by the newton algorithm")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")

    @property
    def name(self) -> str:
        """Routine name with ``_gr``/``_he``/``_grhe`` suffix as appropriate."""
        suffix = ("gr" if self.use_supplied_gradient else "") + (
            "he" if self.use_supplied_hessian else "")
        return self.algorithm.value + (f"_{suffix}" if suffix else "")

    @classmethod
    def from_name(cls, name: str, **kw) -> "OptimizerConfig":
        """Parse ``bfgs``, ``bfgs_gr``, ``newton_grhe``, ``nelder_mead`` ..."""
        key = name.strip().lower()
        gr = he = False
        for suffix, g, h in (("_grhe", True, True), ("_gr", True, False), ("_he", False, True)):
            if key.endswith(suffix):
                key, gr, he = key[: -len(suffix)], g, h
                break
        return cls(algorithm=parse_algorithm(key), use_supplied_gradient=gr,
                   use_supplied_hessian=he, **kw)

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm.value,
                "use_supplied_gradient": self.use_supplied_gradient,
                "use_supplied_hessian": self.use_supplied_hessian,
                "max_iterations": self.max_iterations, "gtol": self.gtol,
                "ftol": self.ftol, "xtol": self.xtol, "simplex_tol": self.simplex_tol}

    @classmethod
    def from_dict(cls, d) -> "OptimizerConfig":
        if isinstance(d, str):
            return cls.from_name(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"name"}
        if unknown:
            raise ValueError(f"unknown optimizer field(s): {sorted(unknown)}")
        if "name" in d:
            rest = {k: v for k, v in d.items() if k != "name"}
            return cls.from_name(d["name"], **rest)
        return cls(**d)


def parse_algorithm(a) -> Algorithm:
    if isinstance(a, Algorithm):
        return a
    key = str(a).strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown optimizer algorithm {a!r}; "
                         f"choose from {sorted(x.value for x in Algorithm)}")
    return _ALIASES[key]


@dataclass
class OptimOutcome:
    x_final: np.ndarray
    f_final: float
    iterations: int
    gradient_evals: int = 0
    function_evals: int = 0
    hessian_evals: int = 0
    fd_evals: int = 0
    status: Status = Status.CONVERGED
    grad_norm: float = float("nan")
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


class _Problem:
    """Evaluation bookkeeping around user callables."""

    def __init__(self, f, grad=None, hess=None):
        self.f_user = f
        self.grad_user = grad
        self.hess_user = hess
        self.nfev = self.ngev = self.nhev = self.nfd = 0

    def f(self, x) -> float:
        self.nfev += 1
        try:
            with np.errstate(all="ignore"):
                v = float(self.f_user(x))
        except _EVAL_ERRORS:
            return np.inf
        return v if np.isfinite(v) else np.inf

    def grad(self, x) -> np.ndarray | None:
        if self.grad_user is not None:
            self.ngev += 1
            try:
                with np.errstate(all="ignore"):
                    g = np.asarray(self.grad_user(x), dtype=float)
            except _EVAL_ERRORS:
                return None
            return g if np.all(np.isfinite(g)) else None
        return self.fd_grad(x)

    def fd_grad(self, x) -> np.ndarray | None:
        # central differences, step cbrt(eps) * max(1, |x_i|)
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        for i in range(x.size):
            h = _EPS ** (1 / 3) * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp, fm = self.f(xp), self.f(xm)
            self.nfd += 2
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return None
            g[i] = (fp - fm) / (xp[i] - xm[i])
        return g

    def fgh(self, x):
        """Value, gradient and Hessian from the supplied Hessian routine."""
        self.nfev += 1
        self.ngev += 1
        self.nhev += 1
        try:
            with np.errstate(all="ignore"):
                f, g, h = self.hess_user(x)
        except _EVAL_ERRORS:
            return np.inf, None, None
        f = float(f)
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            return np.inf, None, None
        return f, np.asarray(g, dtype=float), np.asarray(h, dtype=float)

    def outcome(self, x, f, it, status, g=None, trace=None) -> OptimOutcome:
        gn = float(np.max(np.abs(g))) if g is not None and g.size else float("nan")
        return OptimOutcome(np.array(x, dtype=float), float(f), it, self.ngev,
                            self.nfev, self.nhev, self.nfd, status, gn, trace or [])


def _grad_ok(g, f, cfg) -> bool:
    return g is not None and (g.size == 0 or np.max(np.abs(g)) <= cfg.gtol * max(1.0, abs(f)))


def _stall_converged(prob, g, f, cfg) -> bool:
    # an exact gradient must pass the gradient test (otherwise keep going);
    # a finite-difference one is noise-limited, so a stall is accepted
    exact = prob.grad_user is not None or prob.hess_user is not None
    return not exact or _grad_ok(g, f, cfg)


# consecutive stalled steps tolerated before declaring that the line search
# cannot make progress at working precision
MAX_STALLS = 20


class _StallGuard:
    def __init__(self):
        self.count = 0

    def update(self, stalled: bool) -> bool:
        """Record one step; True once the stall limit is reached."""
        self.count = self.count + 1 if stalled else 0
        return self.count >= MAX_STALLS


def _stalled(f_old, f_new, step, x, cfg) -> bool:
    small_f = abs(f_old - f_new) <= cfg.ftol * max(1.0, abs(f_new))
    small_x = np.linalg.norm(step) <= cfg.xtol * (1.0 + np.linalg.norm(x))
    return small_f or small_x


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------

class NelderMeadState:
    """Resumable simplex search; ``step()`` performs one simplex operation."""

    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5

    def __init__(self, problem: _Problem, x0):
        x0 = np.asarray(x0, dtype=float)
        n = x0.size
        self.problem = problem
        self.n = n
        simplex = np.tile(x0, (n + 1, 1))
        for i in range(n):
            simplex[i + 1, i] += 0.05 * max(1.0, abs(x0[i]))
        self.simplex = simplex
        self.fvals = np.array([problem.f(v) for v in simplex])
        self.iterations = 0
        self._order()

    def _order(self):
        idx = np.argsort(self.fvals, kind="stable")
        self.simplex = self.simplex[idx]
        self.fvals = self.fvals[idx]

    @property
    def x_best(self):
        return self.simplex[0].copy()

    @property
    def f_best(self):
        return float(self.fvals[0])

    def collapsed(self, cfg: OptimizerConfig) -> bool:
        spread = np.max(np.abs(self.fvals[1:] - self.fvals[0])) if self.n else 0.0
        size = np.max(np.abs(self.simplex[1:] - self.simplex[0])) if self.n else 0.0
        return spread <= cfg.ftol * max(1.0, abs(self.fvals[0])) and size <= cfg.simplex_tol

    def step(self):
        f = self.problem.f
        s, fv, n = self.simplex, self.fvals, self.n
        centroid = s[:-1].mean(axis=0)
        xr = centroid + self.alpha * (centroid - s[-1])
        fr = f(xr)
        if fr < fv[0]:
            xe = centroid + self.gamma * (xr - centroid)
            fe = f(xe)
            s[-1], fv[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fv[n - 1]:
            s[-1], fv[-1] = xr, fr
        else:
            if fr < fv[-1]:
                xc = centroid + self.rho * (xr - centroid)
                fc = f(xc)
                accept = fc <= fr
            else:
                xc = centroid + self.rho * (s[-1] - centroid)
                fc = f(xc)
                accept = fc < fv[-1]
            if accept:
                s[-1], fv[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    s[i] = s[0] + self.sigma * (s[i] - s[0])
                    fv[i] = f(s[i])
        self.iterations += 1
        self._order()


def nelder_mead(f, x0, config: OptimizerConfig | None = None,
                exact_iterations: int | None = None) -> OptimOutcome:
    """Simplex search (reflection 1, expansion 2, contraction 0.5, shrink 0.5).

    With ``exact_iterations`` the search runs that many iterations and skips
    the convergence test.
    """
    cfg = config or OptimizerConfig(algorithm=Algorithm.NELDER_MEAD)
    prob = _Problem(f)
    x0 = np.asarray(x0, dtype=float)
    if not np.isfinite(prob.f(x0)):
        return prob.outcome(x0, np.inf, 0, Status.EVALUATION_FAILURE)
    nm = NelderMeadState(prob, x0)
    trace = [nm.f_best]
    limit = exact_iterations if exact_iterations is not None else cfg.max_iterations
    status = Status.MAX_ITERATIONS
    if exact_iterations is None and nm.collapsed(cfg):
        status = Status.CONVERGED
    else:
        while nm.iterations < limit:
            nm.step()
            trace.append(nm.f_best)
            if exact_iterations is None and nm.collapsed(cfg):
                status = Status.CONVERGED
                break
        if exact_iterations is not None:
            status = Status.CONVERGED if np.isfinite(nm.f_best) else Status.EVALUATION_FAILURE
    return prob.outcome(nm.x_best, nm.f_best, nm.iterations, status, trace=trace)


# ---------------------------------------------------------------------------
# line searches
# ---------------------------------------------------------------------------

def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating value and slope at ``a`` and ``b``."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _quad_min(a, fa, da, b, fb):
    """Minimiser of the parabola through ``(a, fa)`` with slope ``da`` and ``(b, fb)``."""
    h = b - a
    curv = fb - fa - da * h
    if curv <= 0:
        return None
    return a - da * h * h / (2 * curv)


def _wolfe_search(prob, x, f0, g0, d, c1, c2, alpha0=1.0, max_iter=50):
    """Strong-Wolfe line search (bracket, then zoom) with a final cubic polish.

    Gradients are evaluated only where needed.  When value differences are
    within rounding noise of ``f0`` the bracket is steered by the sign of the
    directional derivative instead (approximate Wolfe conditions); accepted
    points never have a larger value than ``f0``.  Returns ``(alpha, f, g)``
    or ``None``.  The polish step makes the search exact on quadratics, which
    restores finite termination of CG and BFGS there.
    """
    dphi0 = float(g0 @ d)
    if dphi0 >= 0:
        return None
    noise = 1e3 * _EPS * max(1.0, abs(f0))

    def fval(a):
        fa = prob.f(x + a * d)
        return fa if np.isfinite(fa) else np.inf

    def slope(a):
        ga = prob.grad(x + a * d)
        if ga is None:
            return None, np.nan
        return ga, float(ga @ d)

    def too_high(a, fa, fref):
        # decisive rejection on values; ties within noise fall through
        if fa > f0 + c1 * a * dphi0 + noise or fa > fref + noise:
            return True
        return fa > f0 + c1 * a * dphi0 and fa > fref and -a * dphi0 > noise

    def acceptable(fa, da):
        return fa <= f0 and abs(da) <= -c2 * dphi0

    def zoom(lo, flo, dlo, glo, hi, fhi, dhi):
        for _ in range(max_iter):
            left, right = min(lo, hi), max(lo, hi)
            width = right - left
            if width <= 1e-16 * max(1.0, right):
                break
            trial = None
            if np.isfinite(fhi):
                if np.isfinite(dhi):
                    trial = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
                else:
                    trial = _quad_min(lo, flo, dlo, hi, fhi)
            if trial is None or not (left + 0.1 * width <= trial <= right - 0.1 * width):
                trial = 0.5 * (lo + hi)
            fa = fval(trial)
            if too_high(trial, fa, flo):
                hi, fhi, dhi = trial, fa, np.nan
                continue
            ga, da = slope(trial)
            if ga is None:
                hi, fhi, dhi = trial, np.inf, np.nan
                continue
            if acceptable(fa, da):
                return trial, fa, ga, da
            if da * (hi - lo) >= 0:
                hi, fhi, dhi = lo, flo, dlo
            lo, flo, dlo, glo = trial, fa, da, ga
        if lo > 0 and flo <= f0:
            return lo, flo, glo, dlo
        return None

    prev, fprev, dprev, gprev = 0.0, f0, dphi0, g0
    a = alpha0
    found = None
    for i in range(max_iter):
        fa = fval(a)
        if too_high(a, fa, fprev if i > 0 else np.inf):
            found = zoom(prev, fprev, dprev, gprev, a, fa, np.nan)
            break
        ga, da = slope(a)
        if ga is None:
            found = zoom(prev, fprev, dprev, gprev, a, np.inf, np.nan)
            break
        if acceptable(fa, da):
            found = (a, fa, ga, da)
            break
        if da >= 0:
            found = zoom(a, fa, da, ga, prev, fprev, dprev)
            break
        prev, fprev, dprev, gprev = a, fa, da, ga
        a *= 2.0
    if found is None:
        return None
    a, fa, ga, da = found
    polish = _cubic_min(0.0, f0, dphi0, a, fa, da)
    if polish is not None and polish > 0 and abs(polish - a) > 1e-8 * a:
        fp = fval(polish)
        if fp < fa:
            gp, dp = slope(polish)
            if gp is not None and acceptable(fp, dp):
                return polish, fp, gp
    return a, fa, ga


def _backtrack(prob, x, f0, g0, d, c1=1e-4, max_halvings=40):
    slope = float(g0 @ d)
    a = 1.0
    for _ in range(max_halvings + 1):
        fa = prob.f(x + a * d)
        if np.isfinite(fa) and fa <= f0 + c1 * a * slope:
            return a, fa
        a *= 0.5
    return None


# ---------------------------------------------------------------------------
# gradient methods
# ---------------------------------------------------------------------------

def _start(prob, x0):
    x = np.asarray(x0, dtype=float).copy()
    f = prob.f(x)
    g = prob.grad(x) if np.isfinite(f) else None
    return x, f, g


def bfgs(f, grad=None, x0=None, config: OptimizerConfig | None = None) -> OptimOutcome:
    """Quasi-Newton with inverse-Hessian updates and a Wolfe line search."""
    cfg = config or OptimizerConfig(algorithm=Algorithm.BFGS, use_supplied_hessian=False,
                                    use_supplied_gradient=grad is not None)
    prob = _Problem(f, grad if cfg.use_supplied_gradient else None)
    x, fx, g = _start(prob, x0)
    if g is None:
        return prob.outcome(x, fx, 0, Status.EVALUATION_FAILURE)
    n = x.size
    H = np.eye(n)
    trace = [fx]
    it = 0
    guard = _StallGuard()
    while True:
        if _grad_ok(g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if it >= cfg.max_iterations:
            return prob.outcome(x, fx, it, Status.MAX_ITERATIONS, g, trace)
        d = -H @ g
        if g @ d >= 0:
            H = np.eye(n)
            d = -g
        # unit-length first trial step until curvature information exists
        alpha0 = 1.0 if it else min(1.0, 1.0 / max(float(np.linalg.norm(d)), 1e-300))
        res = _wolfe_search(prob, x, fx, g, d, 1e-4, 0.9, alpha0=alpha0)
        if res is None:
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)
        a, fn, gn = res
        s = a * d
        y = gn - g
        x_new = x + s
        it += 1
        trace.append(fn)
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if it == 1:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s))
        stalled = _stalled(fx, fn, s, x_new, cfg)
        x, fx, g = x_new, fn, gn
        if stalled and _stall_converged(prob, g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if guard.update(stalled):
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)


def conjugate_gradient(f, grad=None, x0=None, config: OptimizerConfig | None = None) -> OptimOutcome:
    """Fletcher-Reeves conjugate gradients, restarted every ``n`` iterations.

    Uses the strong Wolfe conditions with ``c2 = 0.1`` so every direction is
    a descent direction.
    """
    cfg = config or OptimizerConfig(algorithm=Algorithm.CG, use_supplied_hessian=False,
                                    use_supplied_gradient=grad is not None)
    prob = _Problem(f, grad if cfg.use_supplied_gradient else None)
    x, fx, g = _start(prob, x0)
    if g is None:
        return prob.outcome(x, fx, 0, Status.EVALUATION_FAILURE)
    n = max(x.size, 1)
    d = -g
    trace = [fx]
    it = 0
    guard = _StallGuard()
    since_restart = 0
    alpha0 = 1.0 / max(1.0, float(np.linalg.norm(g)))
    while True:
        if _grad_ok(g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if it >= cfg.max_iterations:
            return prob.outcome(x, fx, it, Status.MAX_ITERATIONS, g, trace)
        if g @ d >= 0:
            d = -g
            since_restart = 0
        res = _wolfe_search(prob, x, fx, g, d, 1e-4, 0.1, alpha0=alpha0)
        if res is None and since_restart > 0:
            d = -g
            since_restart = 0
            res = _wolfe_search(prob, x, fx, g, d, 1e-4, 0.1,
                                alpha0=1.0 / max(1.0, float(np.linalg.norm(g))))
        if res is None:
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)
        a, fn, gn = res
        s = a * d
        x_new = x + s
        it += 1
        since_restart += 1
        trace.append(fn)
        stalled = _stalled(fx, fn, s, x_new, cfg)
        slope_old = float(g @ d)
        if since_restart >= n:
            d_new = -gn
            since_restart = 0
        else:
            beta = float(gn @ gn) / float(g @ g)
            d_new = -gn + beta * d
        slope_new = float(gn @ d_new)
        alpha0 = a * slope_old / slope_new if slope_new < 0 else 1.0
        x, fx, g, d = x_new, fn, gn, d_new
        if stalled and _stall_converged(prob, g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if guard.update(stalled):
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)


def _ridge_factor(H, mu0=1e-3):
    """Cholesky factor of ``H``, adding ``mu * I`` (x10 per rejection) if needed."""
    n = H.shape[0]
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    mu = mu0
    for _ in range(40):
        try:
            return np.linalg.cholesky(H + mu * np.eye(n)), mu
        except np.linalg.LinAlgError:
            mu *= 10.0
    raise np.linalg.LinAlgError("no positive definite ridge found")


def _chol_solve(L, b):
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def newton_type(f, grad=None, hess=None, x0=None,
                config: OptimizerConfig | None = None) -> OptimOutcome:
    """Damped Newton iteration with backtracking (up to 40 halvings).

    ``hess(x)`` must return ``(f, g, H)``; without it a BFGS approximation of
    the Hessian is maintained.  Indefinite Hessians get a Levenberg ridge.
    """
    cfg = config or OptimizerConfig(use_supplied_gradient=grad is not None,
                                    use_supplied_hessian=hess is not None)
    use_h = cfg.use_supplied_hessian and hess is not None
    prob = _Problem(f, grad if cfg.use_supplied_gradient else None,
                    hess if use_h else None)
    x = np.asarray(x0, dtype=float).copy()
    if use_h:
        fx, g, H = prob.fgh(x)
    else:
        fx = prob.f(x)
        g = prob.grad(x) if np.isfinite(fx) else None
        # scaled so the first quasi-Newton step has unit length
        H = np.eye(x.size) * max(1.0, float(np.linalg.norm(g))) if g is not None else None
    if g is None:
        return prob.outcome(x, fx, 0, Status.EVALUATION_FAILURE)
    trace = [fx]
    it = 0
    guard = _StallGuard()
    while True:
        if _grad_ok(g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if it >= cfg.max_iterations:
            return prob.outcome(x, fx, it, Status.MAX_ITERATIONS, g, trace)
        try:
            L, _ = _ridge_factor(H)
        except np.linalg.LinAlgError:
            return prob.outcome(x, fx, it, Status.EVALUATION_FAILURE, g, trace)
        d = -_chol_solve(L, g)
        res = _backtrack(prob, x, fx, g, d)
        if res is None and not use_h:
            # stale quasi-Newton model: retry along steepest descent
            H = np.eye(x.size) * max(1.0, float(np.linalg.norm(g)))
            d = -g / max(1.0, float(np.linalg.norm(g)))
            res = _backtrack(prob, x, fx, g, d)
        if res is None:
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)
        a, fn = res
        s = a * d
        x_new = x + s
        if use_h:
            fn, gn, Hn = prob.fgh(x_new)
            # derivatives can be undefined where the plain value is not
            # (a stationary probability rounding to zero): keep halving
            halvings = 0
            while gn is None and halvings < 40:
                a *= 0.5
                halvings += 1
                s = a * d
                x_new = x + s
                fn, gn, Hn = prob.fgh(x_new)
                if gn is not None and not fn <= fx + 1e-4 * a * float(g @ d):
                    gn = None
            if gn is None:
                return prob.outcome(x, fx, it, Status.EVALUATION_FAILURE, g, trace)
        else:
            gn = prob.grad(x_new)
            if gn is None:
                return prob.outcome(x, fx, it, Status.EVALUATION_FAILURE, g, trace)
            y = gn - g
            sy = float(s @ y)
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                if it == 0:
                    H = np.eye(x.size) * (float(y @ y) / sy)
                Hs = H @ s
                Hn = H - np.outer(Hs, Hs) / float(s @ Hs) + np.outer(y, y) / sy
            else:
                Hn = H
        it += 1
        trace.append(fn)
        stalled = _stalled(fx, fn, s, x_new, cfg)
        x, fx, g, H = x_new, fn, gn, Hn
        if stalled and _stall_converged(prob, g, fx, cfg):
            return prob.outcome(x, fx, it, Status.CONVERGED, g, trace)
        if guard.update(stalled):
            return prob.outcome(x, fx, it, Status.LINE_SEARCH_FAILURE, g, trace)


def hybrid(f, grad, hess, x0, nm_budget: int, config: OptimizerConfig | None = None) -> OptimOutcome:
    """``nm_budget`` Nelder-Mead iterations, then Newton with gradient and Hessian."""
    if nm_budget < 1:
        raise ValueError("nm_budget must be >= 1")
    cfg = config or OptimizerConfig()
    first = nelder_mead(f, x0, replace(cfg, algorithm=Algorithm.NELDER_MEAD),
                        exact_iterations=nm_budget)
    if not first.converged:
        return first
    second = newton_type(f, grad, hess, first.x_final,
                         replace(cfg, algorithm=Algorithm.NEWTON,
                                 use_supplied_gradient=True, use_supplied_hessian=True))
    return _merge(first, second)


def _merge(first: OptimOutcome, second: OptimOutcome) -> OptimOutcome:
    return OptimOutcome(
        second.x_final, second.f_final, first.iterations + second.iterations,
        first.gradient_evals + second.gradient_evals,
        first.function_evals + second.function_evals,
        first.hessian_evals + second.hessian_evals,
        first.fd_evals + second.fd_evals, second.status, second.grad_norm,
        first.trace + second.trace[1:])


def minimize(f, grad, hess, x0, config: OptimizerConfig) -> OptimOutcome:
    """Dispatch on ``config.algorithm``; ``grad``/``hess`` are used only if enabled."""
    a = config.algorithm
    if a is Algorithm.NELDER_MEAD:
        return nelder_mead(f, x0, config)
    if a is Algorithm.BFGS:
        return bfgs(f, grad, x0, config)
    if a is Algorithm.CG:
        return conjugate_gradient(f, grad, x0, config)
    return newton_type(f, grad, hess, x0, config)


def timed(fn: Callable, *args, **kw):
    t0 = time.perf_counter_ns()
    out = fn(*args, **kw)
    return out, time.perf_counter_ns() - t0


# ---------------------------------------------------------------------------
# HMM fit driver
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Maximum likelihood fit of an HMM, states sorted by rate or mean."""

    working_hat: np.ndarray
    natural_hat: NaturalParams | None
    nll: float
    converged: bool
    iterations: int
    optimizer_id: str
    hessian_working: np.ndarray | None
    cov_natural: np.ndarray | None = None
    status: Status = Status.CONVERGED
    n_obs: int = 0
    function_evals: int = 0
    gradient_evals: int = 0
    hessian_evals: int = 0
    grad_norm: float = float("nan")

    @property
    def spec(self) -> EmissionSpec:
        return self.natural_hat.spec

    def to_dict(self) -> dict:
        def mat(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()
        return {
            "optimizer_id": self.optimizer_id, "status": self.status.value,
            "converged": self.converged, "iterations": self.iterations,
            "nll": self.nll, "n_obs": self.n_obs,
            "function_evals": self.function_evals, "gradient_evals": self.gradient_evals,
            "hessian_evals": self.hessian_evals, "grad_norm": self.grad_norm,
            "working_hat": mat(self.working_hat),
            "natural_hat": None if self.natural_hat is None else self.natural_hat.to_dict(),
            "hessian_working": mat(self.hessian_working),
            "cov_natural": mat(self.cov_natural),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float)
        nat = d.get("natural_hat")
        return cls(
            working_hat=arr(d["working_hat"]),
            natural_hat=None if nat is None else NaturalParams.from_dict(nat),
            nll=float(d["nll"]), converged=bool(d["converged"]),
            iterations=int(d["iterations"]), optimizer_id=str(d["optimizer_id"]),
            hessian_working=arr(d.get("hessian_working")),
            cov_natural=arr(d.get("cov_natural")),
            status=Status(d.get("status", "converged")), n_obs=int(d.get("n_obs", 0)),
            function_evals=int(d.get("function_evals", 0)),
            gradient_evals=int(d.get("gradient_evals", 0)),
            hessian_evals=int(d.get("hessian_evals", 0)),
            grad_norm=float(d.get("grad_norm", float("nan"))))


def nll_callables(obs, spec: EmissionSpec):
    """``(f, grad, fgh)`` of the nll over working parameters."""
    df = nll_function(obs, spec)
    return (lambda w: ad.value(df, w),
            lambda w: ad.gradient(df, w),
            lambda w: ad.value_grad_hess(df, w))


def fit(spec: EmissionSpec, obs, init: NaturalParams,
        optcfg: OptimizerConfig | None = None, callables=None) -> FitResult:
    """Fit by direct numerical minimisation of the nll from ``init``.

    Never raises on non-convergence: the status is part of the result.
    ``callables`` may pass precomputed :func:`nll_callables` for reuse.
    """
    cfg = optcfg or OptimizerConfig()
    x = np.asarray(obs.values if isinstance(obs, ObservationSeries) else obs, dtype=float)
    w0 = working_from_natural(init, spec)
    f, g, fgh = callables or nll_callables(x, spec)
    out = minimize(f, g, fgh, w0, cfg)
    return _assemble(spec, x, out, cfg.name, fgh)


def fit_from_working(spec, obs, w0, optcfg=None, callables=None) -> FitResult:
    cfg = optcfg or OptimizerConfig()
    x = np.asarray(obs.values if isinstance(obs, ObservationSeries) else obs, dtype=float)
    f, g, fgh = callables or nll_callables(x, spec)
    return _assemble(spec, x, minimize(f, g, fgh, np.asarray(w0, dtype=float), cfg),
                     cfg.name, fgh)


def _assemble(spec, x, out: OptimOutcome, name, fgh) -> FitResult:
    w = out.x_final
    nat = hess = None
    nll_val = out.f_final
    if np.all(np.isfinite(w)):
        w = permute_working(w, spec, state_order(w, spec))
        try:
            nat = natural_from_working(w, spec)
        except (ValueError, np.linalg.LinAlgError):
            nat = None
        if out.status is not Status.EVALUATION_FAILURE:
            try:
                nll_val, _, hess = fgh(w)
            except _EVAL_ERRORS:
                hess = None
    return FitResult(
        working_hat=w, natural_hat=nat, nll=float(nll_val),
        converged=out.converged and nat is not None, iterations=out.iterations,
        optimizer_id=name, hessian_working=hess, status=out.status, n_obs=x.size,
        function_evals=out.function_evals, gradient_evals=out.gradient_evals,
        hessian_evals=out.hessian_evals, grad_norm=out.grad_norm)
