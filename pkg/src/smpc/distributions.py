"""Marginal and joint distributions of uncertain initial states and parameters.

Only two families are supported: Gaussian and uniform.  A joint distribution
stores its first two moments plus, optionally, one marginal per dimension.
Gaussian dimensions may be correlated among themselves; uniform dimensions are
independent of everything else.  A joint with no marginals is "moment-only"
and is sampled as a Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ParameterError, UnsupportedDistributionError

GAUSSIAN = "gaussian"
UNIFORM = "uniform"


@dataclass(frozen=True)
class MarginalDistribution:
    """Univariate marginal.

    For ``family == "gaussian"`` the parameters are ``(mean, variance)``;
    for ``family == "uniform"`` they are the bounds ``(a, b)``.
    """

    family: str
    a: float
    b: float

    def __post_init__(self):
        if self.family == GAUSSIAN:
            if not self.b >= 0.0:
                raise ParameterError(f"Gaussian variance must be >= 0, got {self.b}")
        elif self.family == UNIFORM:
            if not self.a < self.b:
                raise ParameterError(f"uniform bounds need a < b, got ({self.a}, {self.b})")
        else:
            raise UnsupportedDistributionError(f"unknown family {self.family!r}")

    def mean(self) -> float:
        if self.family == GAUSSIAN:
            return float(self.a)
        return 0.5 * (self.a + self.b)

    def variance(self) -> float:
        if self.family == GAUSSIAN:
            return float(self.b)
        return (self.b - self.a) ** 2 / 12.0


def Gaussian(mean: float, variance: float) -> MarginalDistribution:
    return MarginalDistribution(GAUSSIAN, float(mean), float(variance))


def Uniform(a: float, b: float) -> MarginalDistribution:
    return MarginalDistribution(UNIFORM, float(a), float(b))


@dataclass(frozen=True)
class JointDistribution:
    mean: np.ndarray
    cov: np.ndarray
    marginals: tuple = field(default=())

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ParameterError(f"covariance shape {cov.shape} does not match mean ({n},)")
        scale = max(np.abs(cov).max(initial=0.0), 1e-300)
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-12 * scale:
            raise ParameterError("covariance matrix is not symmetric")
        if n > 0:
            tr = max(np.trace(cov), 0.0)
            if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-10 * max(tr, 1e-300):
                raise ParameterError("covariance matrix is not positive semi-definite")
        marginals = tuple(self.marginals)
        if marginals and len(marginals) != n:
            raise ParameterError("one marginal per dimension required")
        if marginals:
            uni = np.array([m.family == UNIFORM for m in marginals])
            if uni.any():
                off = cov.copy()
                np.fill_diagonal(off, 0.0)
                if np.abs(off[uni]).max() > 0.0:
                    raise ParameterError("uniform dimensions must be uncorrelated")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "marginals", marginals)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def families(self) -> tuple:
        """Family per dimension; moment-only distributions count as Gaussian."""
        if self.marginals:
            return tuple(m.family for m in self.marginals)
        return (GAUSSIAN,) * self.dim

    @classmethod
    def gaussian(cls, mean, cov) -> "JointDistribution":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        marg = tuple(Gaussian(m, v) for m, v in zip(mean, np.diag(cov)))
        return cls(mean, cov, marg)

    @classmethod
    def from_moments(cls, mean, cov) -> "JointDistribution":
        return cls(np.atleast_1d(mean), np.atleast_2d(cov), ())

    @classmethod
    def empty(cls) -> "JointDistribution":
        return cls(np.zeros(0), np.zeros((0, 0)), ())


def joint_from_marginals(marginals: Sequence[MarginalDistribution]) -> JointDistribution:
    """Stack independent marginals into a joint distribution with diagonal covariance."""
    marginals = list(marginals)
    if not marginals:
        raise ParameterError("at least one marginal is required")
    for m in marginals:
        if not isinstance(m, MarginalDistribution):
            raise ParameterError(f"not a marginal distribution: {m!r}")
    mean = np.array([m.mean() for m in marginals])
    cov = np.diag([m.variance() for m in marginals])
    return JointDistribution(mean, cov, tuple(marginals))


def stack(*dists: JointDistribution) -> JointDistribution:
    """Joint distribution of independent blocks (block-diagonal covariance).

    Marginals are kept only if every block carries them; otherwise the
    result is moment-only.
    """
    dists = [d for d in dists if d is not None]
    mean = np.concatenate([d.mean for d in dists]) if dists else np.zeros(0)
    n = mean.shape[0]
    cov = np.zeros((n, n))
    k = 0
    for d in dists:
        cov[k:k + d.dim, k:k + d.dim] = d.cov
        k += d.dim
    if all(d.marginals or d.dim == 0 for d in dists):
        marg = tuple(m for d in dists for m in d.marginals)
    else:
        marg = ()
    return JointDistribution(mean, cov, marg)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox); integers and generators are accepted."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def sample(dist: JointDistribution, n: int, rng=0) -> np.ndarray:
    """Draw ``n`` i.i.d. columns from ``dist``; returns an array of shape (dim, n).

    Every sample consumes exactly ``dim`` uniforms from the stream, in sample
    order, so column ``i`` depends only on the seed and on ``i``.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = make_rng(rng)
    d = dist.dim
    if d == 0:
        return np.zeros((0, n))
    u = rng.random((n, d)).T
    out = np.empty((d, n))
    fam = dist.families
    gauss = np.array([f == GAUSSIAN for f in fam])
    if not all(f in (GAUSSIAN, UNIFORM) for f in fam):
        raise UnsupportedDistributionError(f"cannot sample families {fam}")
    if gauss.any():
        from .transform import cholesky_psd

        gi = np.flatnonzero(gauss)
        # guard the open interval; Philox uniforms lie in [0, 1)
        z = ndtri(np.clip(u[gi], 1e-300, None))
        S = cholesky_psd(dist.cov[np.ix_(gi, gi)])
        out[gi] = dist.mean[gi, None] + S @ z
    for i in np.flatnonzero(~gauss):
        m = dist.marginals[i]
        out[i] = m.a + (m.b - m.a) * u[i]
    return out
