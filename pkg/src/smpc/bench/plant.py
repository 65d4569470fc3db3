"""Truth plant: Euler–Maruyama integration of the exact dynamics, vectorized over rollouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import IntegrationError, ParameterError


@dataclass
class TruthPlant:
    """Exact plant ``dx = f(x, u, p) dt + sigma_w dw``.

    ``f`` follows the batched convention (trailing rollout axis).  The input
    is applied as a first-order hold between ``u0`` and ``u1`` over each
    sampling interval, which is split into ``substeps`` Euler–Maruyama steps.
    """

    f: Callable
    nx: int
    sigma_w: Optional[np.ndarray] = None
    substeps: int = 20

    def __post_init__(self):
        if self.substeps < 10:
            raise ParameterError("the truth plant needs at least 10 sub-steps per sample")
        if self.sigma_w is not None:
            sw = np.atleast_2d(np.asarray(self.sigma_w, dtype=float))
            if sw.shape != (self.nx, self.nx):
                raise ParameterError("sigma_w must be nx x nx")
            self.sigma_w = None if not sw.any() else sw

    def step(self, X, u0, u1, dt, P=None, rngs: Optional[Sequence[np.random.Generator]] = None):
        """Advance states ``X (nx, R)`` by ``dt``; ``u0``/``u1`` are (nu,) or (nu, R).

        ``rngs`` holds one generator per rollout and is required when the
        plant has diffusion.
        """
        X = np.array(X, dtype=float, copy=True)
        R = X.shape[1]
        u0 = np.asarray(u0, dtype=float)
        u1 = np.asarray(u1, dtype=float)
        u0 = np.broadcast_to(u0.reshape(u0.shape[0], -1), (u0.shape[0], R))
        u1 = np.broadcast_to(u1.reshape(u1.shape[0], -1), (u1.shape[0], R))
        P = np.zeros((0, R)) if P is None else np.asarray(P, dtype=float)
        m = self.substeps
        h = dt / m
        dW = None
        if self.sigma_w is not None:
            if rngs is None or len(rngs) != R:
                raise ParameterError("one generator per rollout is required for a noisy plant")
            # rollout r consumes m * nx normals per sample, independent of R
            dW = np.stack([g.standard_normal((m, self.nx)) for g in rngs], axis=2) * np.sqrt(h)
        for j in range(m):
            s = (j + 0.5) / m
            u = u0 + s * (u1 - u0)
            X += h * self.f(X, u, P)
            if dW is not None:
                X += self.sigma_w @ dW[j]
        if not np.all(np.isfinite(X)):
            raise IntegrationError("truth plant produced a non-finite state", None)
        return X


def rollout_rngs(seed: int, n: int):
    """Independent Philox streams, one per rollout, keyed by ``(seed, rollout index)``."""
    return [np.random.Generator(np.random.Philox(key=[seed, i])) for i in range(n)]
