"""Simulation-study harness: speed, accuracy, initial-value robustness and the
hybrid Nelder-Mead/Newton escalation study.

Every replication draws from its own child of ``SeedSequence(cfg.seed)``, so
results are identical however the work is distributed over processes.
"""
from __future__ import annotations

import bisect
import csv
import enum
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hmmkit.likelihood import ObservationSeries, _obs
from hmmkit.optim import (NelderMeadState, OptimizerConfig, Status, _assemble,
                          _Problem, fit, nll_callables, newton_type)
from hmmkit.params import (EmissionSpec, Family, NaturalParams, natural_labels,
                           natural_vector, working_from_natural)


class StudyDegenerateError(RuntimeError):
    pass


class DegenerateDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# seeds and workers
# ---------------------------------------------------------------------------

def replication_seeds(seed: int, n: int) -> list:
    return np.random.SeedSequence(int(seed)).spawn(int(n))


def worker_count(requested: int | None = None) -> int:
    """Requested workers, capped by ``HMMKIT_THREADS`` (default 1)."""
    cap = os.environ.get("HMMKIT_THREADS")
    cap = max(1, int(cap)) if cap and cap.strip().isdigit() else None
    n = requested if requested is not None else (cap or 1)
    if cap is not None:
        n = min(n, cap)
    return max(1, int(n))


def parallel_map(fn: Callable, items, workers: int | None = None) -> list:
    """Ordered map; uses a process pool when more than one worker is allowed."""
    items = list(items)
    n = worker_count(workers)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * n))))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate(n: NaturalParams, T: int, seed=None, initial=None):
    """Draw ``(ObservationSeries, state path)`` of length ``T``.

    ``C_1 ~ initial`` (default: ``n.delta``), ``C_t | C_{t-1}`` from the row of
    Gamma, then emissions.  ``seed`` may be an int, a ``SeedSequence`` or a
    ``Generator``.
    """
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = n.m
    init = np.asarray(n.delta if initial is None else initial, dtype=float)
    cum = np.cumsum(n.gamma, axis=1)
    cum[:, -1] = 1.0
    rows = [list(r) for r in cum]
    u = rng.random(T).tolist()
    path = [0] * T
    c0 = np.cumsum(init / init.sum())
    c0[-1] = 1.0
    s = min(bisect.bisect_right(c0.tolist(), u[0]), m - 1)
    path[0] = s
    for t in range(1, T):
        s = min(bisect.bisect_right(rows[s], u[t]), m - 1)
        path[t] = s
    path = np.asarray(path, dtype=int)
    if n.family is Family.POISSON:
        x = rng.poisson(n.lam[path]).astype(float)
    else:
        x = rng.normal(n.mu[path], n.sigma[path])
    return ObservationSeries(x, n.family), path


def all_states_visited(path, m: int | None = None) -> bool:
    """True iff every state ``0..m-1`` appears in ``path``."""
    path = np.asarray(path, dtype=int)
    if m is None:
        m = int(path.max()) + 1 if path.size else 0
    return np.unique(path).size == m and (path.size == 0 or path.max() < m)


def simulate_visited(n: NaturalParams, T: int, rng, max_draws: int = 10_000):
    """Redraw until every state is visited; returns ``(obs, path, redraws)``."""
    for k in range(max_draws):
        obs, path = simulate(n, T, rng)
        if all_states_visited(path, n.m):
            return obs, path, k
    raise StudyDegenerateError(f"no series visiting all {n.m} states in {max_draws} draws")


# ---------------------------------------------------------------------------
# initial-value grids
# ---------------------------------------------------------------------------

def _step_values(lo, hi, step=0.5):
    k = int(np.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(k + 1)


def tpm_rows(m: int) -> list:
    """Admissible TPM rows: off-diagonals on the 0.1 grid, each >= 0.1, diagonal >= 0.1."""
    grid = np.round(np.arange(1, 10) / 10, 10)
    rows = [[] for _ in range(m)]
    if m == 1:
        return [[np.array([1.0])]]
    for i in range(m):
        for off in itertools.product(grid, repeat=m - 1):
            if sum(off) <= 0.9 + 1e-9:
                r = np.insert(np.array(off), i, 0.0)
                r[i] = 1.0 - r.sum()
                rows[i].append(r)
    return rows


@dataclass
class InitGrid:
    """Candidate starting values for one observed series."""

    candidates: list
    full_size: int
    location_values: np.ndarray
    sigma_values: np.ndarray | None = None

    def __len__(self):
        return len(self.candidates)


def sigma_bounds(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    lo, hi, mu = x.min(), x.max(), x.mean()
    return (float(np.sqrt((hi - lo) ** 2 / (2 * x.size))),
            float(np.sqrt((hi - mu) * (mu - lo))))


def build_init_grid(obs, spec: EmissionSpec, size: int | None = None, seed=None) -> InitGrid:
    """Cartesian grid of starting values, optionally subsampled uniformly to ``size``.

    Poisson rates step by 0.5 from ``max(0.5, x_min)`` to ``x_max``; Gaussian
    means by 0.5 from ``x_min``; both strictly increasing across states.
    Gaussian sds take 10 equidistant values between the two data-driven
    bounds.  Every TPM row combination from :func:`tpm_rows` is crossed in.
    """
    x = _obs(obs)
    if x.size < 2:
        raise DegenerateDataError("the grid needs at least two observations")
    if x.max() == x.min():
        raise DegenerateDataError("constant series: x_max equals x_min")
    m = spec.m
    if spec.family is Family.POISSON:
        loc = _step_values(max(0.5, x.min()), x.max())
        sig = None
    else:
        loc = _step_values(x.min(), x.max())
        lo, hi = sigma_bounds(x)
        if not hi > lo:
            raise DegenerateDataError("sd bounds collapse for this series")
        sig = np.linspace(lo, hi, 10)
    combos = [np.array(c) for c in itertools.combinations(loc, m)]
    if not combos:
        raise DegenerateDataError(f"fewer than {m} distinct location candidates")
    rows = tpm_rows(m)
    factors = [len(combos)] + [len(r) for r in rows]
    if sig is not None:
        factors += [len(sig)] * m
    full = int(np.prod([float(f) for f in factors])) if factors else 1

    def make(idx):
        gamma = np.vstack([rows[i][idx[1 + i]] for i in range(m)])
        if sig is None:
            return NaturalParams(gamma=gamma, lam=combos[idx[0]])
        sd = sig[list(idx[1 + m:])]
        return NaturalParams(gamma=gamma, mu=combos[idx[0]], sigma=sd)

    if size is None or size >= full:
        cands = [make(idx) for idx in itertools.product(*[range(f) for f in factors])]
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        chosen, seen = [], set()
        while len(chosen) < size:
            idx = tuple(int(rng.integers(f)) for f in factors)
            if idx not in seen:
                seen.add(idx)
                chosen.append(idx)
        cands = [make(idx) for idx in chosen]
    return InitGrid(cands, full, loc, sig)


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------

class Design(str, enum.Enum):
    SPEED = "speed"
    ACCURACY = "accuracy"
    ROBUSTNESS = "robustness"
    HYBRID = "hybrid"


@dataclass
class StudyConfig:
    design: Design
    spec: EmissionSpec
    truth: NaturalParams
    T: int
    replications: int = 1
    optimizers: list = field(default_factory=lambda: [OptimizerConfig()])
    seed: int = 0
    nll_margin: float = 0.05
    grid_size: int = 200           # robustness / hybrid inits
    nm_budget_max: int = 10_000    # hybrid escalation cap
    nm_budget_step: int = 10
    workers: int | None = None

    def __post_init__(self):
        errors = []
        try:
            self.design = Design(str(self.design).lower() if not isinstance(self.design, Design)
                                 else self.design)
        except ValueError:
            errors.append(f"design: unknown value {self.design!r} "
                          f"(choose from {[d.value for d in Design]})")
        if int(self.T) < 1:
            errors.append("T: must be >= 1")
        if int(self.replications) < 1:
            errors.append("replications: must be >= 1")
        if not 0 < float(self.nll_margin) < 1:
            errors.append("nll_margin: must lie in (0, 1)")
        if int(self.grid_size) < 1:
            errors.append("grid_size: must be >= 1")
        if int(self.nm_budget_max) < 1 or int(self.nm_budget_step) < 1:
            errors.append("nm_budget_max/nm_budget_step: must be >= 1")
        if not self.optimizers:
            errors.append("optimizers: need at least one")
        if self.truth.spec != self.spec:
            errors.append("truth: does not match family/m of spec")
        if errors:
            raise ConfigError(errors)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        errors = []
        known = set(cls.__dataclass_fields__) | {"family", "m"}
        for k in sorted(set(d) - known):
            errors.append(f"{k}: unknown field")
        for k in ("design", "truth", "T"):
            if k not in d:
                errors.append(f"{k}: required field missing")
        spec = truth = None
        try:
            sp = d.get("spec", {"family": d.get("family"), "m": d.get("m")})
            spec = EmissionSpec(sp["family"], sp["m"])
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(f"spec: {exc}")
        if "truth" in d:
            try:
                t = dict(d["truth"])
                if spec is not None:
                    t.setdefault("family", spec.family.value)
                    t.setdefault("m", spec.m)
                truth = NaturalParams.from_dict(t)
            except (ValueError, TypeError, KeyError) as exc:
                errors.append(f"truth: {exc}")
        opts = []
        for i, o in enumerate(d.get("optimizers", ["newton_grhe"])):
            try:
                opts.append(OptimizerConfig.from_dict(o))
            except (ValueError, TypeError) as exc:
                errors.append(f"optimizers[{i}]: {exc}")
        if errors:
            raise ConfigError(errors)
        kw = {k: d[k] for k in ("replications", "seed", "nll_margin", "grid_size",
                                "nm_budget_max", "nm_budget_step", "workers") if k in d}
        return cls(design=d["design"], spec=spec, truth=truth, T=int(d["T"]),
                   optimizers=opts, **kw)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"<file>: invalid JSON ({exc})"]) from None
        if not isinstance(d, dict):
            raise ConfigError(["<file>: top level must be an object"])
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"design": self.design.value,
                "spec": {"family": self.spec.family.value, "m": self.spec.m},
                "truth": self.truth.to_dict(), "T": self.T,
                "replications": self.replications,
                "optimizers": [o.to_dict() for o in self.optimizers],
                "seed": self.seed, "nll_margin": self.nll_margin,
                "grid_size": self.grid_size, "nm_budget_max": self.nm_budget_max,
                "nm_budget_step": self.nm_budget_step}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class StudyRecord:
    replication: int
    optimizer: str
    duration_ns: int
    iterations: int
    status: str
    nll: float
    estimates: list
    found_global: bool | None = None
    discarded: bool = False

    def row(self) -> list:
        return [self.replication, self.optimizer, self.duration_ns, self.iterations,
                self.status, format(self.nll, ".17g"),
                " ".join(format(v, ".17g") for v in self.estimates),
                "" if self.found_global is None else int(self.found_global),
                int(self.discarded)]

    HEADER = ["replication", "optimizer", "duration_ns", "iterations", "status", "nll",
              "estimates", "found_global", "discarded"]


@dataclass
class StudyResult:
    design: Design
    records: list
    summary: dict
    tables: dict = field(default_factory=dict)   # name -> (header, rows)


def _failed(res) -> bool:
    return not res.converged or not np.isfinite(res.nll)


def _estimates(res, spec) -> list:
    if res.natural_hat is None:
        return [float("nan")] * len(natural_labels(spec))
    return np.asarray(natural_vector(res.working_hat, spec), dtype=float).tolist()


def _quantiles(v) -> dict:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return {"median": None, "q025": None, "q975": None}
    q = np.quantile(v, [0.025, 0.5, 0.975])
    return {"median": float(q[1]), "q025": float(q[0]), "q975": float(q[2])}


def _timed_fit(spec, x, init, cfg, callables):
    t0 = time.perf_counter_ns()
    res = fit(spec, x, init, cfg, callables=callables)
    return res, time.perf_counter_ns() - t0


# ---------------------------------------------------------------------------
# speed and accuracy
# ---------------------------------------------------------------------------

def _replicate(args):
    cfg, rep, seed = args
    rng = np.random.default_rng(seed)
    obs, _, redraws = simulate_visited(cfg.truth, cfg.T, rng)
    x = obs.values
    callables = nll_callables(x, cfg.spec)
    out = []
    for oc in cfg.optimizers:
        res, ns = _timed_fit(cfg.spec, x, cfg.truth, oc, callables)
        out.append(StudyRecord(rep, oc.name, int(ns), res.iterations, res.status.value,
                               float(res.nll), _estimates(res, cfg.spec)))
    return out, redraws


def _run_replications(cfg: StudyConfig):
    seeds = replication_seeds(cfg.seed, cfg.replications)
    results = parallel_map(_replicate, [(cfg, r, s) for r, s in enumerate(seeds)], cfg.workers)
    records, redraws = [], 0
    for recs, k in results:
        records.extend(recs)
        redraws += k
    return records, redraws


def run_speed_study(cfg: StudyConfig) -> StudyResult:
    """Fit every replication with every optimizer from the true values and time it.

    Replications in which any optimizer fails are discarded for all of them.
    """
    records, redraws = _run_replications(cfg)
    by_rep: dict = {}
    for r in records:
        by_rep.setdefault(r.replication, []).append(r)
    kept = []
    for rep, recs in by_rep.items():
        bad = any(r.status != Status.CONVERGED.value or not np.isfinite(r.nll) for r in recs)
        for r in recs:
            r.discarded = bad
        if not bad:
            kept.append(rep)
    if not kept:
        raise StudyDegenerateError("every replication had at least one failed optimizer")
    summary = {"requested": cfg.replications, "kept": len(kept),
               "discarded": cfg.replications - len(kept), "redraws": redraws,
               "optimizers": {}}
    for oc in cfg.optimizers:
        rs = [r for r in records if r.optimizer == oc.name and not r.discarded]
        summary["optimizers"][oc.name] = {
            "n": len(rs),
            "duration_ms": _quantiles([r.duration_ns / 1e6 for r in rs]),
            "iterations": _quantiles([r.iterations for r in rs]),
        }
    header = ["optimizer", "duration_ms_median", "duration_ms_q025", "duration_ms_q975",
              "iterations_median", "iterations_q025", "iterations_q975"]
    rows = []
    for name, s in summary["optimizers"].items():
        d, it = s["duration_ms"], s["iterations"]
        rows.append([name, d["median"], d["q025"], d["q975"],
                     it["median"], it["q025"], it["q975"]])
    return StudyResult(Design.SPEED, records, summary, {"speed_plot": (header, rows)})


def run_accuracy_study(cfg: StudyConfig) -> StudyResult:
    """Medians and 2.5/97.5% percentiles of the estimates over converged replications."""
    records, redraws = _run_replications(cfg)
    labels = natural_labels(cfg.spec) + ["nll"]
    summary = {"requested": cfg.replications, "redraws": redraws, "optimizers": {}}
    rows = []
    for oc in cfg.optimizers:
        rs = [r for r in records if r.optimizer == oc.name
              and r.status == Status.CONVERGED.value and np.isfinite(r.nll)]
        for r in records:
            if r.optimizer == oc.name and r not in rs:
                r.discarded = True
        if not rs:
            summary["optimizers"][oc.name] = {"n": 0}
            continue
        est = np.array([r.estimates + [r.nll] for r in rs])
        params = {}
        for j, lab in enumerate(labels):
            params[lab] = _quantiles(est[:, j])
            q = params[lab]
            rows.append([oc.name, lab, q["median"], q["q025"], q["q975"]])
        summary["optimizers"][oc.name] = {"n": len(rs), "parameters": params}
    if all(s.get("n", 0) == 0 for s in summary["optimizers"].values()):
        raise StudyDegenerateError("no optimizer converged in any replication")
    header = ["optimizer", "parameter", "median", "q025", "q975"]
    return StudyResult(Design.ACCURACY, records, summary, {"accuracy_plot": (header, rows)})


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------

def study_dataset(cfg: StudyConfig):
    """The single simulated series used by grid-based designs."""
    rng = np.random.default_rng(replication_seeds(cfg.seed, 2)[0])
    obs, path, _ = simulate_visited(cfg.truth, cfg.T, rng)
    return obs, path


def _grid_job(args):
    spec, x, init, optimizers, idx = args
    callables = nll_callables(x, spec)
    out = []
    for oc in optimizers:
        res, ns = _timed_fit(spec, x, init, oc, callables)
        out.append((idx, oc.name, res, ns))
    return out


def run_robustness_study(cfg: StudyConfig) -> StudyResult:
    """Failure and global-maximum rates over a grid of starting values.

    The reference nll is the median over all optimizers started at the truth;
    a converged run found the global maximum if its nll is within
    ``nll_margin`` (relative) of that reference.
    """
    obs, _ = study_dataset(cfg)
    x = obs.values
    callables = nll_callables(x, cfg.spec)
    truth_runs = [fit(cfg.spec, x, cfg.truth, oc, callables=callables) for oc in cfg.optimizers]
    finite = [r.nll for r in truth_runs if np.isfinite(r.nll)]
    if not finite:
        raise StudyDegenerateError("no optimizer produced a finite nll from the truth")
    ref = float(np.median(finite))
    margin = cfg.nll_margin * abs(ref)
    grid = build_init_grid(x, cfg.spec, cfg.grid_size,
                           np.random.default_rng(replication_seeds(cfg.seed, 2)[1]))
    jobs = [(cfg.spec, x, init, cfg.optimizers, i) for i, init in enumerate(grid.candidates)]
    results = parallel_map(_grid_job, jobs, cfg.workers)
    records = []
    for chunk in results:
        for idx, name, res, ns in chunk:
            failed = _failed(res)
            records.append(StudyRecord(
                idx, name, int(ns), res.iterations, res.status.value, float(res.nll),
                _estimates(res, cfg.spec),
                None if failed else bool(abs(res.nll - ref) <= margin)))
    summary = {"reference_nll": ref, "grid_size": len(grid), "full_grid_size": grid.full_size,
               "truth_runs": {oc.name: {"status": r.status.value, "nll": r.nll,
                                        "found_global": bool(not _failed(r)
                                                             and abs(r.nll - ref) <= margin)}
                              for oc, r in zip(cfg.optimizers, truth_runs)},
               "optimizers": {}}
    rows = []
    for oc in cfg.optimizers:
        rs = [r for r in records if r.optimizer == oc.name]
        conv = [r for r in rs if r.found_global is not None]
        n_global = sum(r.found_global for r in conv)
        s = {"n": len(rs), "failures": len(rs) - len(conv), "converged": len(conv),
             "global": n_global, "local": len(conv) - n_global,
             "failure_pct": 100.0 * (len(rs) - len(conv)) / len(rs),
             "global_pct": 100.0 * n_global / len(conv) if conv else None}
        summary["optimizers"][oc.name] = s
        rows.append([oc.name, s["n"], s["failures"], s["global"], s["local"],
                     s["failure_pct"], s["global_pct"]])
    header = ["optimizer", "n", "failures", "global", "local", "failure_pct", "global_pct"]
    return StudyResult(Design.ROBUSTNESS, records, summary, {"robustness_table": (header, rows)})


# ---------------------------------------------------------------------------
# hybrid escalation
# ---------------------------------------------------------------------------

def escalation_budgets(max_budget: int, step: int = 10) -> list:
    """``1, step, 2*step, ...`` up to ``max_budget``."""
    b = [1] + list(range(step, max_budget + 1, step))
    return sorted(set(x for x in b if x <= max_budget)) or [1]


def hybrid_escalation(spec, x, w0, budgets, callables=None, newton_cfg=None):
    """Run Nelder-Mead once, handing its incumbent to Newton at each budget.

    Returns ``(budget, FitResult, total_iterations)`` for the first budget at
    which Newton converges, or ``(None, last FitResult, total)``.
    """
    f, g, fgh = callables or nll_callables(x, spec)
    ncfg = newton_cfg or OptimizerConfig()
    prob = _Problem(f)
    if not np.isfinite(prob.f(np.asarray(w0, dtype=float))):
        return None, None, 0
    nm = NelderMeadState(prob, w0)
    last = None
    for b in budgets:
        while nm.iterations < b:
            nm.step()
        out = newton_type(f, g, fgh, nm.x_best, ncfg)
        res = _assemble(spec, np.asarray(x), out, f"hybrid_{b}", fgh)
        last = res
        if not _failed(res):
            return b, res, nm.iterations + res.iterations
    return None, last, nm.iterations + (last.iterations if last else 0)


def _hybrid_job(args):
    spec, x, init, budgets, idx = args
    callables = nll_callables(x, spec)
    ncfg = OptimizerConfig()
    t0 = time.perf_counter_ns()
    direct = fit(spec, x, init, ncfg, callables=callables)
    t1 = time.perf_counter_ns()
    budget, hres, its = hybrid_escalation(spec, x, working_from_natural(init, spec), budgets,
                                          callables, ncfg)
    t2 = time.perf_counter_ns()
    return idx, direct, t1 - t0, budget, hres, its, t2 - t1


def run_hybrid_study(cfg: StudyConfig) -> StudyResult:
    """Direct Newton versus Nelder-Mead escalation then Newton from the same inits."""
    obs, _ = study_dataset(cfg)
    x = obs.values
    grid = build_init_grid(x, cfg.spec, cfg.grid_size,
                           np.random.default_rng(replication_seeds(cfg.seed, 2)[1]))
    budgets = escalation_budgets(cfg.nm_budget_max, cfg.nm_budget_step)
    jobs = [(cfg.spec, x, init, budgets, i) for i, init in enumerate(grid.candidates)]
    results = parallel_map(_hybrid_job, jobs, cfg.workers)
    records = []
    counts = {b: {"direct_converged": 0, "direct_failed": 0} for b in budgets}
    counts["failed"] = {"direct_converged": 0, "direct_failed": 0}
    direct_fail = hybrid_fail = 0
    for idx, direct, dns, budget, hres, its, hns in results:
        dfail = _failed(direct)
        direct_fail += dfail
        hybrid_fail += budget is None
        key = budget if budget is not None else "failed"
        counts[key]["direct_failed" if dfail else "direct_converged"] += 1
        records.append(StudyRecord(idx, "newton_grhe", int(dns), direct.iterations,
                                   direct.status.value, float(direct.nll),
                                   _estimates(direct, cfg.spec), None if dfail else True))
        hstatus = Status.CONVERGED.value if budget is not None else (
            hres.status.value if hres is not None else Status.EVALUATION_FAILURE.value)
        records.append(StudyRecord(idx, "hybrid" if budget is None else f"hybrid_{budget}",
                                   int(hns), int(its), hstatus,
                                   float(hres.nll) if hres is not None else float("nan"),
                                   _estimates(hres, cfg.spec) if hres is not None
                                   else [float("nan")] * len(natural_labels(cfg.spec)),
                                   None if budget is None else True))
    n = len(results)
    rows = [[b, c["direct_converged"], c["direct_failed"]] for b, c in counts.items()]
    summary = {"n_inits": n, "full_grid_size": grid.full_size, "budgets": budgets,
               "direct_failures": direct_fail, "hybrid_failures": hybrid_fail,
               "direct_failure_pct": 100.0 * direct_fail / n,
               "hybrid_failure_pct": 100.0 * hybrid_fail / n,
               "escalation": {str(b): c for b, c in counts.items()}}
    header = ["nm_budget", "direct_converged", "direct_failed"]
    return StudyResult(Design.HYBRID, records, summary, {"hybrid_escalation": (header, rows)})


RUNNERS = {Design.SPEED: run_speed_study, Design.ACCURACY: run_accuracy_study,
           Design.ROBUSTNESS: run_robustness_study, Design.HYBRID: run_hybrid_study}


def run_study(cfg: StudyConfig) -> StudyResult:
    return RUNNERS[cfg.design](cfg)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return "" if v is None else v


def write_records(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(StudyRecord.HEADER)
        for r in records:
            wr.writerow(r.row())


def write_study_outputs(result: StudyResult, out_dir, emit_plot_data=False) -> list:
    """Write ``records.csv``, ``summary.json`` and optional plot-data CSVs; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    p = os.path.join(out_dir, "records.csv")
    write_records(result.records, p)
    paths.append(p)
    p = os.path.join(out_dir, "summary.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump({"design": result.design.value, **result.summary}, fh, indent=2)
    paths.append(p)
    if emit_plot_data:
        for name, (header, rows) in result.tables.items():
            p = os.path.join(out_dir, f"{name}.csv")
            with open(p, "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(header)
                for row in rows:
                    wr.writerow([_cell(v) for v in row])
            paths.append(p)
    return paths
