"""Uncertainty propagation through nonlinear maps.

Given a random input ``xi`` with known distribution and a map ``y = psi(xi)``,
estimate ``E[y]``, ``Cov[y]`` and the cross-covariance ``Cov[y, xi]``.

Maps are vectorized over a trailing sample axis: ``psi`` receives an array of
shape ``(n_xi, S)`` and returns ``(n_y, S)``.

Every deterministic point set is an affine image ``mu + S @ D`` of a fixed
matrix of standardized offsets ``D``, where ``S`` is the (lower) Cholesky
factor of the input covariance.  Uniform dimensions use ``sqrt(3)``-scaled
Legendre nodes so that this form covers mixed Gaussian/uniform inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import polyquad
from .distributions import GAUSSIAN, UNIFORM, JointDistribution, sample
from .errors import (FamilyMismatchError, IndefiniteCovarianceError,
                     MissingDerivativeError, ParameterError, PropagationError,
                     UnsupportedBasisError)

TAYLOR1 = "taylor"
STIRLING1 = "stirling1"
STIRLING2 = "stirling2"
UNSCENTED = "ut"
QUADRATURE = "quad"
MONTECARLO = "mc"
PCE = "pce"
METHODS = (TAYLOR1, STIRLING1, STIRLING2, UNSCENTED, QUADRATURE, MONTECARLO, PCE)
SIGMA_METHODS = (STIRLING1, STIRLING2, UNSCENTED)

_FAMILY_FOR = {GAUSSIAN: polyquad.HERMITE, UNIFORM: polyquad.LEGENDRE}
_JITTERS = (0.0, 1e-12, 1e-9, 1e-6)


@dataclass(frozen=True)
class PropagationMethod:
    """Propagation method and its tuning parameters.

    ``kappa=None`` selects ``3 - n`` at point-generation time.  ``pce_order``
    is the number of polynomial degrees per dimension (``M``); the basis is
    the set of products with total degree ``<= M - 1``.
    """

    kind: str
    alpha: float = 1.0
    beta: float = 2.0
    kappa: Optional[float] = None
    h: float = math.sqrt(3.0)
    order: int = 3
    n_points: int = 1000
    seed: int = 0
    pce_order: int = 2
    families: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ParameterError(f"unknown propagation method {self.kind!r}")
        if not self.alpha > 0:
            raise ParameterError("UT alpha must be > 0")
        if not self.h > 0:
            raise ParameterError("Stirling step h must be > 0")
        if self.order < 1:
            raise ParameterError("quadrature order must be >= 1")
        if self.n_points < 2:
            raise ParameterError("Monte-Carlo needs at least 2 points")
        if self.pce_order < 1:
            raise ParameterError("PCE order must be >= 1")
        if self.kind == PCE and self.order < self.pce_order:
            raise ParameterError("PCE needs quadrature order d >= M")

    def with_seed(self, seed) -> "PropagationMethod":
        return replace(self, seed=seed)


def Taylor() -> PropagationMethod:
    return PropagationMethod(TAYLOR1)


def Stirling1(h=math.sqrt(3.0)) -> PropagationMethod:
    return PropagationMethod(STIRLING1, h=h)


def Stirling2(h=math.sqrt(3.0)) -> PropagationMethod:
    return PropagationMethod(STIRLING2, h=h)


def Unscented(alpha=1.0, beta=2.0, kappa=None) -> PropagationMethod:
    return PropagationMethod(UNSCENTED, alpha=alpha, beta=beta, kappa=kappa)


def Quadrature(order=3, families=None) -> PropagationMethod:
    return PropagationMethod(QUADRATURE, order=order, families=families)


def MonteCarlo(n_points=1000, seed=0) -> PropagationMethod:
    return PropagationMethod(MONTECARLO, n_points=n_points, seed=seed)


def PCExpansion(pce_order=2, order=3, families=None) -> PropagationMethod:
    return PropagationMethod(PCE, pce_order=pce_order, order=order, families=families)


# ---------------------------------------------------------------------------
# Cholesky with jitter and its reverse-mode derivative


def cholesky_psd(cov) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PSD matrix.

    Dimensions with exactly zero variance get zero rows and columns.  On the
    remaining block a diagonal jitter ``c * trace / n`` is added, with ``c``
    the smallest of ``0, 1e-12, 1e-9, 1e-6`` that lets the factorization
    succeed.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    diag = np.diag(cov)
    active = diag > 0.0
    out = np.zeros((n, n))
    if not active.any():
        if np.abs(cov).max() > 0 or (diag < 0).any():
            raise IndefiniteCovarianceError("covariance has no positive variance", float(diag.min()))
        return out
    # only exactly deterministic dimensions (zero row and column) are split off
    if np.any(cov[~active]):
        active = np.ones(n, dtype=bool)
    idx = np.flatnonzero(active)
    sub = cov[np.ix_(idx, idx)]
    scale = max(np.trace(sub) / len(idx), 0.0)
    for c in _JITTERS:
        try:
            L = np.linalg.cholesky(sub + c * scale * np.eye(len(idx)))
        except np.linalg.LinAlgError:
            continue
        out[np.ix_(idx, idx)] = L
        return out
    pivot = float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).min())
    raise IndefiniteCovarianceError(
        f"covariance is indefinite beyond maximum jitter (most negative eigenvalue {pivot:.3e})",
        pivot)


def cholesky_vjp(L, Lbar):
    """Pull back a cotangent on ``L = chol(A)`` to a symmetric cotangent on ``A``.

    Zero rows of ``L`` (dimensions with zero variance) receive zero gradient.
    """
    n = L.shape[0]
    active = np.abs(np.diag(L)) > 0
    Abar = np.zeros((n, n))
    if not active.any():
        return Abar
    idx = np.flatnonzero(active)
    La = L[np.ix_(idx, idx)]
    Lb = np.tril(Lbar[np.ix_(idx, idx)])
    P = La.T @ Lb
    P = np.tril(P)
    P[np.diag_indices_from(P)] *= 0.5
    Linv = np.linalg.solve(La, np.eye(len(idx)))
    G = Linv.T @ P @ Linv
    Abar[np.ix_(idx, idx)] = 0.5 * (G + G.T)
    return Abar


def _sym(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# point sets


@dataclass
class PointSet:
    """Propagation points with their weights.

    ``offsets`` holds the standardized matrix ``D`` with ``points = mean + S D``
    (``None`` for random points).  For polynomial chaos, ``projector`` maps a
    row of function values to expansion coefficients and ``basis_norms`` are
    the squared norms of the basis polynomials; moments are then computed from
    the coefficients instead of the weighted scatter.
    """

    points: np.ndarray
    mean_weights: np.ndarray
    cov_weights: np.ndarray
    offsets: Optional[np.ndarray] = None
    kind: str = ""
    h: float = 0.0
    projector: Optional[np.ndarray] = None
    basis_norms: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.mean_weights.shape[0]

    def moments(self, values):
        """Mean and variance of each row of ``values`` (shape (m, Ns))."""
        if self.projector is not None:
            a = values @ self.projector.T
            return a[:, 0], (a[:, 1:] ** 2) @ self.basis_norms[1:]
        mean = values @ self.mean_weights
        dev = values - mean[:, None]
        return mean, (dev * dev) @ self.cov_weights

    def moments_vjp(self, values, mean, mbar, vbar):
        """Cotangent on ``values`` given cotangents on the row means and variances."""
        if self.projector is not None:
            a = values @ self.projector.T
            abar = np.zeros_like(a)
            abar[:, 0] = mbar
            abar[:, 1:] = 2.0 * vbar[:, None] * a[:, 1:] * self.basis_norms[1:]
            return abar @ self.projector
        dev = values - mean[:, None]
        wdev = dev * self.cov_weights
        gv = 2.0 * vbar[:, None] * (wdev - wdev.sum(axis=1, keepdims=True) * self.mean_weights)
        return gv + mbar[:, None] * self.mean_weights


def _standard_offsets(method: PropagationMethod, dist: JointDistribution):
    """Standardized offsets, weights and (for PCE) basis data."""
    n = dist.dim
    kind = method.kind
    if kind in SIGMA_METHODS:
        if kind == UNSCENTED:
            kappa = 3.0 - n if method.kappa is None else method.kappa
            lam = method.alpha ** 2 * (n + kappa)
            if not lam > 0:
                raise ParameterError(f"UT scaling alpha^2 (n + kappa) = {lam} must be > 0")
            gamma = math.sqrt(lam)
            wm = np.full(2 * n + 1, 1.0 / (2.0 * lam))
            wc = wm.copy()
            wm[0] = 1.0 - n / lam
            wc[0] = wm[0] + (1.0 - method.alpha ** 2 + method.beta)
        else:
            gamma = method.h
            h2 = gamma * gamma
            wc = np.full(2 * n + 1, 1.0 / (2.0 * h2))
            wc[0] = 0.0
            if kind == STIRLING1:
                wm = np.zeros(2 * n + 1)
                wm[0] = 1.0
            else:
                wm = np.full(2 * n + 1, 1.0 / (2.0 * h2))
                wm[0] = (h2 - n) / h2
        D = np.zeros((n, 2 * n + 1))
        D[:, 1:n + 1] = gamma * np.eye(n)
        D[:, n + 1:] = -gamma * np.eye(n)
        return D, wm, wc, None, None

    fams = _families(method, dist)
    rule = polyquad.tensor_rule(fams, [method.order] * n)
    scale = np.array([1.0 if f == polyquad.HERMITE else math.sqrt(3.0) for f in fams])
    D = rule.points * scale[:, None]
    w = rule.weights
    if kind == QUADRATURE:
        return D, w, w, None, None
    # polynomial chaos: project onto total-degree basis
    index = polyquad.total_degree_indices(n, method.pce_order - 1)
    tables = [polyquad.poly_table(f, method.pce_order - 1, rule.points[k]) for k, f in enumerate(fams)]
    phi = np.ones((len(index), rule.points.shape[1]))
    norms = np.ones(len(index))
    for b, alpha in enumerate(index):
        for k, deg in enumerate(alpha):
            if deg:
                phi[b] *= tables[k][deg]
                norms[b] *= polyquad.norm_squared(fams[k], deg)
    projector = phi * w / norms[:, None]
    return D, w, w, projector, norms


def _families(method, dist):
    fams = tuple(_FAMILY_FOR[f] for f in dist.families)
    if method.families is not None:
        forced = tuple(method.families)
        if len(forced) == 1:
            forced = forced * dist.dim
        if forced != fams:
            raise FamilyMismatchError(f"requested families {forced} but marginals imply {fams}")
    return fams


def generate_points(method: PropagationMethod, dist: JointDistribution, rng=None) -> PointSet:
    """Propagation points for ``dist``; Taylor linearization uses none."""
    if method.kind == TAYLOR1:
        raise ParameterError("Taylor linearization does not use propagation points")
    if method.kind == MONTECARLO:
        pts = sample(dist, method.n_points, method.seed if rng is None else rng)
        w = np.full(method.n_points, 1.0 / method.n_points)
        return PointSet(pts, w, w.copy(), None, MONTECARLO)
    D, wm, wc, proj, norms = _standard_offsets(method, dist)
    S = cholesky_psd(dist.cov)
    pts = dist.mean[:, None] + S @ D
    return PointSet(pts, wm, wc, D, method.kind, method.h, proj, norms)


# ---------------------------------------------------------------------------
# propagation


def _evaluate(psi, pts):
    y = np.asarray(psi(pts), dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    bad = ~np.isfinite(y)
    if bad.any():
        col = int(np.flatnonzero(bad.any(axis=0))[0])
        raise PropagationError(f"non-finite map output at point {col}", pts[:, col].copy())
    return y


def propagate(method: PropagationMethod, psi: Callable, dist: JointDistribution,
              jacobian: Optional[Callable] = None, rng=None):
    """Estimate ``(mean, cov, cross_cov)`` of ``y = psi(xi)``.

    ``cross_cov`` is ``Cov[y, xi]`` with shape ``(n_y, n_xi)``.  Taylor
    linearization needs ``jacobian(mu) -> (n_y, n_xi)``.
    """
    mu = dist.mean
    cov = dist.cov
    if method.kind == TAYLOR1:
        if jacobian is None:
            raise MissingDerivativeError("Taylor linearization requires the Jacobian of the map")
        y0 = _evaluate(psi, mu[:, None])[:, 0]
        J = np.atleast_2d(np.asarray(jacobian(mu), dtype=float))
        return y0, _sym(J @ cov @ J.T), J @ cov

    ps = generate_points(method, dist, rng)
    Y = _evaluate(psi, ps.points)
    dxi = ps.points - mu[:, None]
    if method.kind in (STIRLING1, STIRLING2):
        n = dist.dim
        y0 = Y[:, 0]
        yp, ym = Y[:, 1:n + 1], Y[:, n + 1:]
        h2 = method.h ** 2
        diff = yp - ym
        cov_y = diff @ diff.T / (4.0 * h2)
        if method.kind == STIRLING1:
            mean = y0
        else:
            mean = (h2 - n) / h2 * y0 + (yp + ym).sum(axis=1) / (2.0 * h2)
            second = yp + ym - 2.0 * y0[:, None]
            cov_y = cov_y + (h2 - 1.0) / (4.0 * h2 * h2) * (second @ second.T)
        cross = ((Y - mean[:, None]) * ps.cov_weights) @ dxi.T
        return mean, _sym(cov_y), cross
    if method.kind == PCE:
        a = Y @ ps.projector.T
        c = ps.points @ ps.projector.T
        nb = ps.basis_norms
        mean = a[:, 0]
        cov_y = (a[:, 1:] * nb[1:]) @ a[:, 1:].T
        cross = (a[:, 1:] * nb[1:]) @ c[:, 1:].T
        return mean, _sym(cov_y), cross
    mean = Y @ ps.mean_weights
    dev = Y - mean[:, None]
    wdev = dev * ps.cov_weights
    return mean, _sym(wdev @ dev.T), wdev @ dxi.T


def pce_coefficients(psi: Callable, dist: JointDistribution, M: int, d: int):
    """Expansion coefficients of ``psi`` (shape ``(n_y, n_basis)``) and the basis multi-indices.

    The basis is the set of products of 1-D orthogonal polynomials (Hermite
    for Gaussian dimensions, Legendre for uniform ones) with total degree
    ``<= M - 1``, in standardized coordinates.  Gaussian dimensions may be
    correlated; they are standardized through the Cholesky factor.
    """
    method = PCExpansion(pce_order=M, order=d)
    fams = set(dist.families)
    if len(fams) != 1 or not fams <= {GAUSSIAN, UNIFORM}:
        raise UnsupportedBasisError(f"a single Gaussian or uniform family is required, got {dist.families}")
    ps = generate_points(method, dist)
    Y = _evaluate(psi, ps.points)
    return Y @ ps.projector.T, polyquad.total_degree_indices(dist.dim, M - 1)
