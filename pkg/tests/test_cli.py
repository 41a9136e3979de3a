import csv
import json
import os
import time

import numpy as np
import pytest

from hmmkit import inference as inf
from hmmkit.cli import main
from hmmkit.optim import fit
from hmmkit.params import EmissionSpec
from hmmkit.studies import simulate

from conftest import TRUTH_GAUSS, TRUTH_POISSON

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "hmmkit", "data")
COUNTS = os.path.join(DATA, "counts_2state.csv")
RETURNS = os.path.join(DATA, "returns_3state.csv")


def write_series(path, values, header="x"):
    with open(path, "w") as fh:
        fh.write(header + "\n" + "\n".join(str(v) for v in values) + "\n")
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def manifest(path):
    with open(str(path) + ".manifest.json") as fh:
        return json.load(fh)


def test_fit_writes_json_table_and_manifests(tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--out-dir", str(out)]) == 0
    d = json.loads((out / "fit.json").read_text())
    assert d["converged"] and len(d["cov_natural"]) == 8
    rows = read_csv(out / "params.csv")
    assert list(rows[0]) == ["param", "estimate", "lower", "upper"]
    assert [r["param"] for r in rows][:5] == ["gamma11", "gamma12", "gamma21", "gamma22", "lambda1"]
    for p in ("fit.json", "params.csv"):
        m = manifest(out / p)
        assert set(m) >= {"tool_version", "seed", "config_hash", "input_digests",
                          "started", "finished"}
    # printed values round-trip at full precision
    lam1 = float(rows[4]["estimate"])
    assert lam1 == d["natural_hat"]["lambda"][0]


def test_fit_single_state_closed_form(tmp_path):
    data = write_series(tmp_path / "x.csv", [2, 2, 2])
    assert main(["fit", data, "--family", "poisson", "-m", "1", "--out-dir", str(tmp_path)]) == 0
    rows = {r["param"]: r for r in read_csv(tmp_path / "params.csv")}
    lam = float(rows["lambda1"]["estimate"])
    se = (float(rows["lambda1"]["upper"]) - lam) / inf._z(0.95)
    assert lam == pytest.approx(2.0, abs=1e-8)
    assert se == pytest.approx(np.sqrt(2 / 3), rel=1e-7)


def test_fit_input_errors_leave_no_output(tmp_path, capsys):
    data = write_series(tmp_path / "x.csv", ["1", "nan", "2"])
    out = tmp_path / "o"
    assert main(["fit", data, "--family", "poisson", "-m", "2", "--out-dir", str(out)]) == 1
    assert not out.exists()
    data = write_series(tmp_path / "y.csv", ["1", "two", "2"])
    assert main(["fit", data, "--family", "poisson", "-m", "2", "--out-dir", str(out)]) == 1
    assert ":3:" in capsys.readouterr().err
    assert main(["fit", data, "--family", "poisson"]) == 1
    assert main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--opt", "bfgs",
                 "--hess", "supplied", "--out-dir", str(out)]) == 1


def test_fit_non_convergence_exit_2(tmp_path):
    out = tmp_path / "o"
    code = main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--max-iter", "1",
                 "--out-dir", str(out)])
    assert code == 2 and (out / "fit.json").exists()
    assert not json.loads((out / "fit.json").read_text())["converged"]


def test_config_hash_tracks_semantic_flags(tmp_path):
    def h(*extra, out="a"):
        d = tmp_path / out
        main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--out-dir", str(d), *extra])
        return manifest(d / "fit.json")["config_hash"]
    base = h()
    assert h(out="b") == base
    assert h("--level", "0.9") != base
    assert h("--opt", "bfgs") != base


def test_smooth_from_fit_and_bare_params(tmp_path):
    out = tmp_path / "fit"
    main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--out-dir", str(out)])
    s1 = tmp_path / "s1.csv"
    assert main(["smooth", COUNTS, "--model", str(out / "fit.json"), "--out", str(s1),
                 "--json", str(tmp_path / "s1.json"), "--plot-data", str(tmp_path / "pd")]) == 0
    rows = read_csv(s1)
    assert list(rows[0]) == ["t", "state", "prob", "se", "lower", "upper", "most_likely"]
    assert len(rows) == 2 * 87
    assert sorted(os.listdir(tmp_path / "pd"))[:2] == ["state1.csv", "state1.csv.manifest.json"]
    nat = json.loads((out / "fit.json").read_text())["natural_hat"]
    (tmp_path / "nat.json").write_text(json.dumps(nat))
    s2 = tmp_path / "s2.csv"
    assert main(["smooth", COUNTS, "--model", str(tmp_path / "nat.json"), "--out", str(s2)]) == 0
    p1 = np.array([float(r["prob"]) for r in rows])
    p2 = np.array([float(r["prob"]) for r in read_csv(s2)])
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_smooth_family_mismatch(tmp_path):
    out = tmp_path / "fit"
    main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--out-dir", str(out)])
    assert main(["smooth", RETURNS, "--model", str(out / "fit.json"),
                 "--out", str(tmp_path / "s.csv")]) == 1
    assert not (tmp_path / "s.csv").exists()


def test_smooth_single_state(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps(
        {"family": "poisson", "m": 1, "gamma": [1.0], "lambda": [2.0]}))
    data = write_series(tmp_path / "x.csv", [1, 3, 2, 2])
    assert main(["smooth", data, "--model", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_csv(tmp_path / "s.csv")
    assert all(float(r["prob"]) == 1.0 and float(r["se"]) == 0.0 for r in rows)


def test_smooth_recovers_separated_path(tmp_path):
    obs, path = simulate(TRUTH_GAUSS, 300, 21)
    data = write_series(tmp_path / "x.csv", [repr(float(v)) for v in obs.values])
    (tmp_path / "m.json").write_text(TRUTH_GAUSS.to_json())
    main(["fit", data, "--family", "gaussian", "-m", "2", "--init", str(tmp_path / "m.json"),
          "--out-dir", str(tmp_path)])
    assert main(["smooth", data, "--model", str(tmp_path / "fit.json"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_csv(tmp_path / "s.csv")
    ml = np.array([int(r["most_likely"]) for r in rows if r["state"] == "1"]) - 1
    assert np.mean(ml == path) >= 0.95


def test_simulate_and_select(tmp_path):
    (tmp_path / "m.json").write_text(TRUTH_POISSON.to_json())
    sim = tmp_path / "sim.csv"
    assert main(["simulate", "--model", str(tmp_path / "m.json"), "-T", "150", "--seed", "4",
                 "--out", str(sim), "--states-out", str(tmp_path / "st.csv")]) == 0
    assert manifest(sim)["seed"] == 4
    sel = tmp_path / "sel.csv"
    assert main(["select", str(sim), "--family", "poisson", "--m-min", "1", "--m-max", "3",
                 "--out", str(sel)]) == 0
    rows = read_csv(sel)
    assert len(rows) == 3 and sum(int(r["best_bic"]) for r in rows) == 1
    assert main(["select", str(sim), "--family", "poisson", "--m-min", "3", "--m-max", "2",
                 "--out", str(sel)]) == 1


def test_select_all_failures_exit_2(tmp_path):
    sel = tmp_path / "sel.csv"
    assert main(["select", COUNTS, "--family", "poisson", "--m-min", "2", "--m-max", "3",
                 "--max-iter", "1", "--out", str(sel)]) == 2
    assert all(r["converged"] == "0" for r in read_csv(sel))


def test_bootstrap_command(tmp_path):
    main(["fit", COUNTS, "--family", "poisson", "-m", "2", "--out-dir", str(tmp_path)])
    out = tmp_path / "b.csv"
    assert main(["bootstrap", COUNTS, "--model", str(tmp_path / "fit.json"), "-B", "10",
                 "--seed", "2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [r["param"] for r in rows][4:6] == ["lambda1", "lambda2"]
    assert all(float(r["lower"]) <= float(r["median"]) <= float(r["upper"]) for r in rows)


def study_config(tmp_path, **over):
    d = {"design": "speed", "spec": {"family": "poisson", "m": 2},
         "truth": {"gamma": [0.95, 0.05, 0.15, 0.85], "lambda": [1.0, 7.0]},
         "T": 200, "replications": 5, "optimizers": ["newton_grhe", "bfgs_gr"], "seed": 3}
    d.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_study_smoke_and_determinism(tmp_path):
    cfg = study_config(tmp_path)
    t0 = time.time()
    assert main(["study", cfg, "--out-dir", str(tmp_path / "a"), "--emit-plot-data"]) == 0
    assert time.time() - t0 < 60
    assert main(["study", cfg, "--out-dir", str(tmp_path / "b")]) == 0
    a, b = read_csv(tmp_path / "a" / "records.csv"), read_csv(tmp_path / "b" / "records.csv")
    assert len(a) == 10
    for r in a + b:
        r.pop("duration_ns")
    assert a == b
    assert (tmp_path / "a" / "speed_plot.csv").exists()
    assert manifest(tmp_path / "a" / "records.csv")["seed"] == 3


def test_study_bad_config(tmp_path, capsys):
    cfg = study_config(tmp_path, optimizers=["newtn"])
    assert main(["study", cfg, "--out-dir", str(tmp_path / "a")]) == 1
    assert "optimizers[0]" in capsys.readouterr().err
    assert main(["study", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)]) == 1


def test_wald_coverage_for_rate():
    spec = EmissionSpec("poisson", 2)
    rng = np.random.default_rng(77)
    hits = total = 0
    for _ in range(100):
        obs, _ = simulate(TRUTH_POISSON, 200, rng)
        res = fit(spec, obs, TRUTH_POISSON)
        if not res.converged:
            continue
        ci = {lab: c for lab, _, _, c in inf.parameter_table(res)}["lambda2"]
        hits += ci.lower <= 7.0 <= ci.upper
        total += 1
    assert total >= 95 and hits / total >= 0.9
