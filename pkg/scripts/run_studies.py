"""Run the bundled study configs through the CLI and print each summary.

    python3 scripts/run_studies.py                 # all four designs
    python3 scripts/run_studies.py speed accuracy  # a subset
    python3 scripts/run_studies.py --out results --plot-data
"""
import argparse
import json
import sys
import time
from pathlib import Path

from hmmkit.cli import main as cli

CONFIGS = Path(__file__).resolve().parent / "configs"
DESIGNS = ["speed", "accuracy", "robustness", "hybrid"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("designs", nargs="*", choices=DESIGNS + ["speed_smoke"], default=DESIGNS)
    ap.add_argument("--out", default="study_results")
    ap.add_argument("--plot-data", action="store_true")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args(argv)
    rc = 0
    for name in args.designs:
        out = Path(args.out) / name
        cmd = ["study", str(CONFIGS / f"{name}.json"), "--out-dir", str(out)]
        if args.plot_data:
            cmd.append("--emit-plot-data")
        if args.workers:
            cmd += ["--workers", str(args.workers)]
        t0 = time.time()
        code = cli(cmd)
        print(f"== {name}: exit {code}, {time.time() - t0:.1f}s -> {out}")
        if code == 0:
            summary = json.loads((out / "summary.json").read_text())
            print(json.dumps(summary, indent=1)[:4000])
        rc = rc or code
    return rc


if __name__ == "__main__":
    sys.exit(main())
