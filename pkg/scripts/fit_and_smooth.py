"""Fit the bundled 2-state count series, then smooth, bootstrap and select.

Everything goes through the CLI so the outputs carry run manifests.

    python3 scripts/fit_and_smooth.py [--out demo_out] [-B 200]
"""
import argparse
import sys
from importlib import resources
from pathlib import Path

from hmmkit.cli import main as cli


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("-B", type=int, default=200)
    args = ap.parse_args(argv)
    out = Path(args.out)
    data = str(resources.files("hmmkit") / "data" / "counts_2state.csv")
    steps = [
        ["fit", data, "--family", "poisson", "-m", "2", "--out-dir", str(out)],
        ["smooth", data, "--model", str(out / "fit.json"), "--out", str(out / "smooth.csv"),
         "--plot-data", str(out / "plot")],
        ["bootstrap", data, "--model", str(out / "fit.json"), "-B", str(args.B), "--seed", "1",
         "--out", str(out / "bootstrap.csv")],
        ["select", data, "--family", "poisson", "--m-min", "1", "--m-max", "3",
         "--out", str(out / "select.csv")],
    ]
    for cmd in steps:
        code = cli(cmd)
        print(f"{cmd[0]}: exit {code}")
        if code:
            return code
    for name in ("params.csv", "bootstrap.csv", "select.csv"):
        print(f"--- {name}")
        print((out / name).read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
