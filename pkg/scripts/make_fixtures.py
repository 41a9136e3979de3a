"""Regenerate the bundled fixture series in src/hmmkit/data.

Both series are simulated; they stand in for the proprietary count and
returns data sets the methods were first demonstrated on.
"""
import json
from pathlib import Path

from hmmkit.params import NaturalParams
from hmmkit.studies import simulate

DATA = Path(__file__).resolve().parents[1] / "src" / "hmmkit" / "data"

FIXTURES = {
    # 2-state Poisson counts, 87 observations
    "counts_2state": (NaturalParams(gamma=[[0.93, 0.07], [0.12, 0.88]], lam=[1.64, 5.53]), 87, 20240),
    # 3-state Gaussian "weekly returns", 300 observations
    "returns_3state": (NaturalParams(gamma=[[0.9, 0.08, 0.02], [0.05, 0.9, 0.05], [0.02, 0.08, 0.9]],
                                     mu=[-1.5, 0.1, 0.4], sigma=[4.0, 1.5, 0.8]), 300, 20241),
}


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    for name, (truth, T, seed) in FIXTURES.items():
        obs, path = simulate(truth, T, seed)
        poisson = truth.lam is not None
        with open(DATA / f"{name}.csv", "w", encoding="utf-8") as fh:
            fh.write("x\n")
            for v in obs.values:
                fh.write(f"{int(v)}\n" if poisson else f"{float(v)!r}\n")
        with open(DATA / f"{name}_truth.json", "w", encoding="utf-8") as fh:
            json.dump({**truth.to_dict(), "seed": seed, "states": [int(s) + 1 for s in path]}, fh)
        print(f"wrote {name}: T={T}")


if __name__ == "__main__":
    main()
