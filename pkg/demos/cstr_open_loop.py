"""Open-loop CSTR with three chance-constraint approximations.

Prints the 90 % quantile of the peak c_B over Monte-Carlo rollouts against
the bound 0.14.

    python demos/cstr_open_loop.py [rollouts]
"""
import sys

from smpc import chance
from smpc.bench.runners import run
from smpc.bench.scenario import Scenario


def main(rollouts=200):
    print(f"{'approx':>10} {'q90 peak':>9} {'mean peak':>10}")
    for approx in (chance.GAUSSIAN, chance.SYMMETRIC, chance.CHEBYSHEV):
        log = run(Scenario("cstr", mode="open", approx=approx, rollouts=rollouts))
        print(f"{approx:>10} {log.stats['q90_peak']:9.4f} {log.stats['mean_peak']:10.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
