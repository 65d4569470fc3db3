"""Per-step controller time of the chain for growing state dimension.

    python demos/chain_scaling.py
"""
from smpc.bench.runners import chain_timing_table
from smpc.transform import QUADRATURE, UNSCENTED
from smpc.bench.scenario import Scenario


def main():
    methods = (("sr", UNSCENTED), ("mr-sampling", UNSCENTED), ("sr", QUADRATURE))
    rows = chain_timing_table(Scenario("chain"), ns=(2, 4, 6), methods=methods, steps=5, repeats=1)
    for r in rows:
        cell = "skipped: " + r["reason"] if r["skipped"] else f"{1e3 * r['mean_step_s']:8.2f} ms"
        print(f"n={r['n']} nx={r['nx']:2d} {r['representation']:>11} {r['method']:>9}  {cell}")


if __name__ == "__main__":
    main()
