"""Orthogonal polynomials and Gaussian quadrature rules.

Two families are provided, both normalized to probability densities:

* ``"hermite"``: probabilists' Hermite polynomials, standard normal weight.
* ``"legendre"``: Legendre polynomials, uniform density 1/2 on [-1, 1].

Quadrature nodes and weights come from the Golub-Welsch construction: the
nodes are the eigenvalues of the symmetric Jacobi matrix and the weights are
the squared first components of its normalized eigenvectors.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

HERMITE = "hermite"
LEGENDRE = "legendre"
FAMILIES = (HERMITE, LEGENDRE)
MAX_ORDER = 64


def _check_family(family):
    if family not in FAMILIES:
        raise ParameterError(f"unknown polynomial family {family!r}")


def poly_eval(family: str, n: int, x):
    """Evaluate the degree-``n`` polynomial of ``family`` at ``x`` (scalar or array)."""
    _check_family(family)
    if n < 0:
        raise ParameterError("degree must be >= 0")
    x = np.asarray(x, dtype=float)
    p_prev = np.zeros_like(x)
    p = np.ones_like(x)
    for k in range(n):
        if family == HERMITE:
            p, p_prev = x * p - k * p_prev, p
        else:
            p, p_prev = ((2 * k + 1) * x * p - k * p_prev) / (k + 1), p
    return p if p.ndim else float(p)


def poly_table(family: str, max_degree: int, x) -> np.ndarray:
    """Values of degrees 0..max_degree at ``x``; shape (max_degree + 1, *x.shape)."""
    _check_family(family)
    x = np.asarray(x, dtype=float)
    out = np.empty((max_degree + 1,) + x.shape)
    out[0] = 1.0
    if max_degree >= 1:
        out[1] = x
    for k in range(1, max_degree):
        if family == HERMITE:
            out[k + 1] = x * out[k] - k * out[k - 1]
        else:
            out[k + 1] = ((2 * k + 1) * x * out[k] - k * out[k - 1]) / (k + 1)
    return out


def norm_squared(family: str, n: int) -> float:
    """Squared norm of the degree-``n`` polynomial under the normalized density."""
    _check_family(family)
    if n < 0:
        raise ParameterError("degree must be >= 0")
    if family == HERMITE:
        return float(math.factorial(n))
    return 1.0 / (2 * n + 1)


def _jacobi_matrix(family, d):
    k = np.arange(1, d, dtype=float)
    if family == HERMITE:
        off = np.sqrt(k)
    else:
        off = k / np.sqrt(4.0 * k * k - 1.0)
    return np.zeros(d), off


def tridiag_eigh(diag, off):
    """Eigen-decomposition of a symmetric tridiagonal matrix.

    Implicit QL iteration with Wilkinson-type shifts (the classic ``tqli``
    scheme).  Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as
    columns, sorted by ascending eigenvalue.
    """
    d = np.array(diag, dtype=float)
    n = d.shape[0]
    e = np.zeros(n)
    e[: n - 1] = off
    z = np.eye(n)
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= np.finfo(float).eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > 60:
                raise ArithmeticError("tridiagonal QL iteration did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                zi = z[:, i].copy()
                z[:, i] = c * zi - s * z[:, i + 1]
                z[:, i + 1] = s * zi + c * z[:, i + 1]
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    order = np.argsort(d)
    return d[order], z[:, order]


@dataclass(frozen=True)
class QuadratureRule:
    family: str
    order: int
    nodes: np.ndarray
    weights: np.ndarray


def gauss_rule(family: str, d: int) -> QuadratureRule:
    """Order-``d`` Gauss rule for the normalized weight of ``family``.

    Exact for polynomials of degree up to ``2 d - 1``.
    """
    _check_family(family)
    if not (1 <= int(d) <= MAX_ORDER) or int(d) != d:
        raise ParameterError(f"quadrature order must be in [1, {MAX_ORDER}], got {d}")
    d = int(d)
    diag, off = _jacobi_matrix(family, d)
    nodes, vecs = tridiag_eigh(diag, off)
    weights = vecs[0] ** 2
    weights = weights / weights.sum()
    # exact symmetry: both weights are even functions
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(family, d, nodes, weights)


@dataclass(frozen=True)
class TensorRule:
    rules: tuple
    points: np.ndarray   # (dim, Np), standardized coordinates
    weights: np.ndarray  # (Np,)


def tensor_rule(families, orders) -> TensorRule:
    """Full tensor grid; lexicographic ordering with the last dimension fastest."""
    families = list(families)
    orders = list(orders)
    if not families or len(families) != len(orders):
        raise ParameterError("families and orders must be non-empty lists of equal length")
    rules = tuple(gauss_rule(f, d) for f, d in zip(families, orders))
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    points = np.stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    weights = np.prod(np.stack([w.ravel() for w in wgrids]), axis=0)
    return TensorRule(rules, points, weights)


def total_degree_indices(dim: int, max_degree: int) -> list:
    """Multi-indices with total degree <= max_degree, graded then lexicographic."""
    out = [idx for idx in itertools.product(range(max_degree + 1), repeat=dim)
           if sum(idx) <= max_degree]
    out.sort(key=lambda a: (sum(a), tuple(-v for v in a)))
    return out
