"""Mean and variance of a nonlinear map under each propagation method.

    python demos/propagation.py
"""
import numpy as np

from smpc import Gaussian, Uniform, joint_from_marginals, propagate
from smpc import transform as tr


def psi(x):
    # Gaussian times uniform, plus a saturating term
    return np.vstack([x[0] * x[1], np.tanh(x[0]) + x[1] ** 2])


def main():
    dist = joint_from_marginals([Gaussian(0.5, 0.2), Uniform(0.5, 1.5)])
    ref_mean, ref_cov, _ = propagate(tr.Quadrature(order=12), psi, dist)

    def jac(mu):
        return np.array([[mu[1], mu[0]], [1.0 - np.tanh(mu[0]) ** 2, 2.0 * mu[1]]])

    methods = [tr.Taylor(), tr.Stirling1(), tr.Stirling2(), tr.Unscented(), tr.Quadrature(order=3),
               tr.PCExpansion(pce_order=3, order=3), tr.MonteCarlo(n_points=1000)]
    print(f"{'method':>10} {'mean[0]':>10} {'mean[1]':>10} {'var[0]':>10} {'var[1]':>10}")
    print(f"{'reference':>10} " + " ".join(f"{v:10.5f}" for v in (*ref_mean, *np.diag(ref_cov))))
    for m in methods:
        mean, cov, _ = propagate(m, psi, dist, jacobian=jac)
        print(f"{m.kind:>10} " + " ".join(f"{v:10.5f}" for v in (*mean, *np.diag(cov))))


if __name__ == "__main__":
    main()
