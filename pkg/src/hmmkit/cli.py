"""Command-line front end: ``hmmkit {fit,simulate,smooth,bootstrap,study,select}``.

Exit codes: 0 success, 1 input or configuration error, 2 numerical
non-convergence (outputs are still written where meaningful).  Every output
file gets a ``<name>.manifest.json`` next to it.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from hmmkit import inference as inf
from hmmkit.likelihood import ObservationSeries, check_counts
from hmmkit.optim import FitResult, OptimizerConfig, fit
from hmmkit.params import EmissionSpec, Family, NaturalParams, working_from_natural
from hmmkit.studies import (ConfigError, StudyConfig, StudyDegenerateError, run_study,
                            simulate, write_study_outputs)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


def tool_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # metadata missing in a bare checkout
        return "0.1.0"


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(semantic: dict) -> str:
    blob = json.dumps(semantic, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    tool_version: str
    command: str
    seed: int | None
    config_hash: str
    input_digests: dict
    started: str
    finished: str
    output: str
    output_digest: str

    def write(self):
        with open(self.output + ".manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)


class _Run:
    """Collects what every manifest of one invocation shares."""

    def __init__(self, args, inputs=()):
        self.command = args.command
        self.seed = getattr(args, "seed", None)
        semantic = {k: v for k, v in vars(args).items()
                    if k not in {"out", "out_dir", "json", "plot_data", "workers",
                                 "states_out", "func"}}
        self.hash = config_hash(semantic)
        self.inputs = {os.path.basename(p): file_digest(p) for p in inputs if p}
        self.started = _now()
        self.outputs = []

    def wrote(self, path):
        self.outputs.append(path)

    def finish(self):
        done = _now()
        for p in self.outputs:
            RunManifest(tool_version(), self.command, self.seed, self.hash, self.inputs,
                        self.started, done, p, file_digest(p)).write()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read_series(path, family=None, header=None) -> ObservationSeries:
    try:
        return ObservationSeries.from_csv(path, header=header, family=family)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _load_params(path) -> NaturalParams:
    d = _read_json(path)
    if "natural_hat" in d:
        d = d["natural_hat"]
    try:
        return NaturalParams.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: invalid model ({exc})") from None


def _load_fit(path, obs) -> FitResult:
    """A fitted model from a FitResult JSON, or natural parameters evaluated on ``obs``."""
    d = _read_json(path)
    if "working_hat" in d:
        try:
            res = FitResult.from_dict(d)
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}: invalid fit result ({exc})") from None
        if res.natural_hat is None:
            raise InputError(f"{path}: fit result has no estimates")
        return res
    n = _load_params(path)
    spec = n.spec
    from hmmkit.optim import nll_callables
    try:
        w = working_from_natural(n, spec)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    _, _, fgh = nll_callables(obs.values, spec)
    v, _, h = fgh(w)
    return FitResult(w, n, float(v), True, 0, "supplied", h, n_obs=len(obs))


def _check_family(obs: ObservationSeries, family: Family, path):
    if family is Family.POISSON:
        try:
            check_counts(obs.values)
        except ValueError:
            raise InputError(f"{path}: data are not counts but the model is Poisson") from None


def _optimizer(args) -> OptimizerConfig:
    if getattr(args, "optimizer_config", None):
        try:
            return OptimizerConfig.from_dict(_read_json(args.optimizer_config))
        except (ValueError, TypeError) as exc:
            raise InputError(f"optimizer config: {exc}") from None
    try:
        algo = args.opt
        hess = args.hess
        if hess is None:
            hess = "supplied" if algo in ("newton", "newton_type", "nlminb") else "none"
        return OptimizerConfig(algorithm=algo,
                               use_supplied_gradient=args.grad == "supplied",
                               use_supplied_hessian=hess == "supplied",
                               max_iterations=args.max_iter)
    except ValueError as exc:
        raise InputError(f"optimizer flags: {exc}") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return inf.fmt(v)
    return v


def _ensure_dir(d):
    if d:
        os.makedirs(d, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    spec = EmissionSpec(args.family, args.states)
    obs = _read_series(args.data, spec.family, args.header)
    cfg = _optimizer(args)
    init = _load_params(args.init) if args.init else inf.default_init(obs, spec)
    if init.spec != spec:
        raise InputError("initial values do not match --family/--states")
    inf._z(args.level)
    run = _Run(args, [args.data, args.init])
    res = fit(spec, obs, init, cfg)
    rows = []
    try:
        table = inf.parameter_table(res, args.level) if res.natural_hat is not None else []
    except np.linalg.LinAlgError as exc:
        print(f"warning: covariance unavailable: {exc}", file=sys.stderr)
        table = []
    for lab, est, se, ci in table:
        rows.append([lab, inf.fmt(est), inf.fmt(ci.lower), inf.fmt(ci.upper)])
    _ensure_dir(args.out_dir)
    fit_path = os.path.join(args.out_dir, "fit.json")
    d = res.to_dict()
    d["level"] = args.level
    d["standard_errors"] = {lab: se for lab, _, se, _ in table}
    aic, bic = inf.aic_bic(res.nll, spec.n_free, len(obs)) if np.isfinite(res.nll) else (None, None)
    d["aic"], d["bic"] = aic, bic
    with open(fit_path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2)
    run.wrote(fit_path)
    csv_path = os.path.join(args.out_dir, "params.csv")
    _write_csv(csv_path, ["param", "estimate", "lower", "upper"], rows)
    run.wrote(csv_path)
    run.finish()
    print(f"{res.status.value}: nll={res.nll!r} iterations={res.iterations}")
    return EXIT_OK if res.converged else EXIT_NUMERIC


def cmd_simulate(args) -> int:
    n = _load_params(args.model)
    if args.length < 1:
        raise InputError("--length must be >= 1")
    run = _Run(args, [args.model])
    obs, path = simulate(n, args.length, args.seed)
    _ensure_dir(os.path.dirname(args.out))
    fmt_x = (lambda v: str(int(v))) if n.family is Family.POISSON else inf.fmt
    _write_csv(args.out, ["x"], [[fmt_x(v)] for v in obs.values])
    run.wrote(args.out)
    if args.states_out:
        _write_csv(args.states_out, ["state"], [[int(s) + 1] for s in path])
        run.wrote(args.states_out)
    run.finish()
    return EXIT_OK


def cmd_smooth(args) -> int:
    obs = _read_series(args.data, None, args.header)
    model = _load_fit(args.model, obs)
    _check_family(obs, model.natural_hat.family, args.data)
    inf._z(args.level)
    run = _Run(args, [args.data, args.model])
    try:
        rep = inf.smoothing_with_uncertainty(model, obs, args.level)
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise InputError(str(exc)) from None
    sums = rep.probs.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > 1e-10:
        print("error: smoothing columns do not sum to one", file=sys.stderr)
        return EXIT_NUMERIC
    _ensure_dir(os.path.dirname(args.out))
    rep.to_csv(args.out)
    run.wrote(args.out)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(rep.to_json())
        run.wrote(args.json)
    if args.plot_data:
        _ensure_dir(args.plot_data)
        for i in range(rep.m):
            p = os.path.join(args.plot_data, f"state{i + 1}.csv")
            _write_csv(p, ["t", "x", "prob", "lower", "upper"],
                       [[t + 1, inf.fmt(obs.values[t]), inf.fmt(rep.probs[i, t]),
                         inf.fmt(rep.ci_lower[i, t]), inf.fmt(rep.ci_upper[i, t])]
                        for t in range(rep.T)])
            run.wrote(p)
    run.finish()
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    obs = _read_series(args.data, None, args.header)
    model = _load_fit(args.model, obs)
    _check_family(obs, model.natural_hat.family, args.data)
    run = _Run(args, [args.data, args.model])
    if model.optimizer_id == "supplied":
        model = fit(model.spec, obs, model.natural_hat, OptimizerConfig())
        if not model.converged:
            print("error: fit from the supplied parameters did not converge", file=sys.stderr)
            return EXIT_NUMERIC
    try:
        res = inf.parametric_bootstrap(model, args.B, args.seed, level=args.level,
                                       workers=args.workers)
    except inf.BootstrapUnreliableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _ensure_dir(os.path.dirname(args.out))
    res.to_csv(args.out)
    run.wrote(args.out)
    run.finish()
    print(f"{args.B - res.n_failed} of {args.B} refits used")
    return EXIT_OK


def cmd_study(args) -> int:
    try:
        cfg = StudyConfig.from_json(args.config)
    except OSError as exc:
        raise InputError(f"cannot read {args.config}: {exc}") from None
    except ConfigError as exc:
        raise InputError("invalid study config:\n  " + "\n  ".join(exc.errors)) from None
    if args.workers is not None:
        cfg.workers = args.workers
    args.seed = cfg.seed
    run = _Run(args, [args.config])
    try:
        result = run_study(cfg)
    except StudyDegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in write_study_outputs(result, args.out_dir, args.emit_plot_data):
        run.wrote(p)
    run.finish()
    print(f"{cfg.design.value} study: {len(result.records)} records -> {args.out_dir}")
    return EXIT_OK


def cmd_select(args) -> int:
    obs = _read_series(args.data, args.family, args.header)
    cfg = _optimizer(args)
    if not 1 <= args.m_min <= args.m_max <= 8:
        raise InputError("need 1 <= --m-min <= --m-max <= 8")
    run = _Run(args, [args.data])
    rows = inf.select_state_count(obs, args.family, args.m_min, args.m_max, cfg)
    _ensure_dir(os.path.dirname(args.out))
    _write_csv(args.out, ["m", "nll", "aic", "bic", "converged", "best_aic", "best_bic"],
               [[_cell(v) for v in (r.m, r.nll, r.aic, r.bic, r.converged,
                                    r.best_aic, r.best_bic)] for r in rows])
    run.wrote(args.out)
    run.finish()
    return EXIT_OK if any(r.converged for r in rows) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_data(p):
    p.add_argument("data", help="single-column CSV of observations")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--header", dest="header", action="store_true", default=None,
                   help="first line is a header")
    g.add_argument("--no-header", dest="header", action="store_false",
                   help="first line is data")


def _add_optimizer(p):
    p.add_argument("--opt", default="newton",
                   help="nelder_mead | bfgs | cg | newton (default newton)")
    p.add_argument("--grad", choices=["supplied", "fd"], default="supplied",
                   help="AD gradient or finite differences")
    p.add_argument("--hess", choices=["supplied", "none"], default=None,
                   help="AD Hessian (newton only; default supplied for newton)")
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--optimizer-config", help="JSON file overriding the flags above")


def _level(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hmmkit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=tool_version())
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="maximum likelihood fit with Wald CIs")
    _add_data(p)
    p.add_argument("--family", required=True, choices=[f.value for f in Family])
    p.add_argument("--states", "-m", type=int, required=True)
    p.add_argument("--init", help="JSON with initial natural parameters")
    _add_optimizer(p)
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate a series from a model")
    p.add_argument("--model", required=True, help="JSON with natural parameters")
    p.add_argument("--length", "-T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--states-out", help="also write the hidden state path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("smooth", help="smoothing probabilities with delta-method CIs")
    _add_data(p)
    p.add_argument("--model", required=True, help="fit JSON or natural parameters JSON")
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--out", required=True)
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--plot-data", help="directory for per-state plot series")
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("bootstrap", help="parametric bootstrap percentile CIs")
    _add_data(p)
    p.add_argument("--model", required=True)
    p.add_argument("-B", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("study", help="run a simulation study from a JSON config")
    p.add_argument("config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--emit-plot-data", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("select", help="AIC/BIC over a range of state counts")
    _add_data(p)
    p.add_argument("--family", required=True, choices=[f.value for f in Family])
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=4)
    _add_optimizer(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
