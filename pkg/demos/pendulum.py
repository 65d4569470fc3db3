"""Closed-loop cart pendulum: setpoint change of the cart to 0.6 m under a 0.65 m bound.

    python demos/pendulum.py
"""
from smpc.bench.runners import run
from smpc.bench.scenario import Scenario


def main():
    log = run(Scenario("pendulum"))
    s = log.stats
    print(f"max cart {s['max_cart']:.4f} m, final cart {s['final_cart']:.4f} m, "
          f"final angle {s['final_angle']:.2e} rad, {1e3 * s['mean_step_s']:.2f} ms/step")
    for k in range(0, log.t.size, 250):
        print(f"t={log.t[k]:5.3f}  cart={log.mu[0, k]: .4f}  u={log.u[0, k]: .3f}")


if __name__ == "__main__":
    main()
