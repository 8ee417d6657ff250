"""Nodal Lagrange bases, quadrature and the equilateral map on d-simplices.

The master simplex is the unit right simplex (origin plus the unit axis
points).  Nodes sit on the uniform lattice ``alpha / p`` with the d+1
vertices listed first, then the remaining lattice points in lexicographic
order of their multi-index.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial, sqrt

import numpy as np
from scipy.special import roots_jacobi

BARY_TOL = 1e-12


class DomainError(ValueError):
    """Point outside the master simplex."""


class UnsupportedQuadrature(ValueError):
    pass


def _exponents(d: int, p: int) -> np.ndarray:
    """All multi-indices of total degree <= p, graded then lexicographic."""
    out = [a for k in range(p + 1) for a in itertools.product(range(k + 1), repeat=d) if sum(a) == k]
    out.sort(key=lambda a: (sum(a), tuple(-x for x in a)))
    return np.array(out, dtype=int).reshape(-1, d)


def lattice_indices(d: int, p: int) -> np.ndarray:
    """Lattice multi-indices in node order (vertices first)."""
    verts = [tuple([0] * d)] + [tuple(p if j == i else 0 for j in range(d)) for i in range(d)]
    if p == 0:
        return np.zeros((1, d), dtype=int)
    rest = [a for a in itertools.product(range(p + 1), repeat=d) if sum(a) <= p and a not in verts]
    rest.sort()
    return np.array(verts + rest, dtype=int)


def _monomials(xi: np.ndarray, exps: np.ndarray) -> np.ndarray:
    # xi (P, d) -> (P, m)
    return np.prod(xi[:, None, :] ** exps[None, :, :], axis=2)


def _monomial_grad(xi, exps):
    P, d = xi.shape
    out = np.zeros((P, exps.shape[0], d))
    for j in range(d):
        e = exps.copy()
        c = e[:, j].astype(float)
        e[:, j] = np.maximum(e[:, j] - 1, 0)
        out[:, :, j] = c * _monomials(xi, e)
    return out


def _monomial_hess(xi, exps):
    P, d = xi.shape
    out = np.zeros((P, exps.shape[0], d, d))
    for j in range(d):
        for k in range(j, d):
            e = exps.copy()
            if j == k:
                c = (e[:, j] * (e[:, j] - 1)).astype(float)
                e[:, j] = np.maximum(e[:, j] - 2, 0)
            else:
                c = (e[:, j] * e[:, k]).astype(float)
                e[:, j] = np.maximum(e[:, j] - 1, 0)
                e[:, k] = np.maximum(e[:, k] - 1, 0)
            v = c * _monomials(xi, e)
            out[:, :, j, k] = v
            out[:, :, k, j] = v
    return out


@dataclass(frozen=True)
class SimplexBasis:
    dim: int
    degree: int
    nodes: np.ndarray = field(repr=False)  # (n, d) master coordinates
    coeffs: np.ndarray = field(repr=False)  # (m, n): N = monomials @ coeffs
    exponents: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.dim + 1


@lru_cache(maxsize=None)
def simplex_basis(dim: int, degree: int) -> SimplexBasis:
    if dim < 1 or dim > 3:
        raise ValueError(f"dimension must be 1, 2 or 3, got {dim}")
    if degree < 1 or degree > 6:
        raise ValueError(f"degree must be in 1..6, got {degree}")
    idx = lattice_indices(dim, degree)
    nodes = idx / degree
    exps = _exponents(dim, degree)
    V = _monomials(nodes, exps)
    coeffs = np.linalg.solve(V, np.eye(len(nodes)))
    for a in (nodes, coeffs, exps):
        a.setflags(write=False)
    return SimplexBasis(dim, degree, nodes, coeffs, exps)


def _as_points(basis, xi, check=True):
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    if xi.shape[1] != basis.dim:
        raise ValueError(f"expected points of dimension {basis.dim}")
    if check:
        bary_min = np.minimum(xi.min(axis=1), 1.0 - xi.sum(axis=1))
        if np.any(bary_min < -BARY_TOL):
            raise DomainError(f"point outside master simplex (barycentric {bary_min.min():.3e})")
    return xi, single


def evaluate_basis(basis: SimplexBasis, xi, check: bool = True) -> np.ndarray:
    """Basis values; ``xi`` of shape (d,) or (P, d), returns (n,) or (P, n)."""
    xi, single = _as_points(basis, xi, check)
    out = _monomials(xi, basis.exponents) @ basis.coeffs
    return out[0] if single else out


def evaluate_basis_derivatives(basis: SimplexBasis, xi, order: int = 1, check: bool = True) -> np.ndarray:
    """Gradient (.., n, d) for order 1 or Hessian (.., n, d, d) for order 2."""
    if order not in (1, 2):
        raise ValueError(f"derivative order must be 1 or 2, got {order}")
    xi, single = _as_points(basis, xi, check)
    if order == 1:
        out = np.einsum("pmj,mn->pnj", _monomial_grad(xi, basis.exponents), basis.coeffs)
    else:
        out = np.einsum("pmjk,mn->pnjk", _monomial_hess(xi, basis.exponents), basis.coeffs)
    return out[0] if single else out


def physical_map(basis: SimplexBasis, node_coords, xi, second: bool = False, check: bool = True):
    """Point, Jacobian and optionally the second derivative of x(xi).

    Jacobian J[i, j] = d x_i / d xi_j; second derivative H[i, j, k].
    """
    X = np.asarray(node_coords, dtype=float)
    xi_arr, single = _as_points(basis, xi, check)
    N = evaluate_basis(basis, xi_arr, check=False)
    dN = evaluate_basis_derivatives(basis, xi_arr, 1, check=False)
    pts = N @ X
    J = np.einsum("na,pnj->paj", X, dN)
    out = [pts, J]
    if second:
        d2N = evaluate_basis_derivatives(basis, xi_arr, 2, check=False)
        out.append(np.einsum("na,pnjk->pajk", X, d2N))
    if single:
        out = [o[0] for o in out]
    return tuple(out)


def equilateral_vertices(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[0.0], [1.0]])
    if d == 2:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.5, sqrt(3) / 2]])
    if d == 3:
        return np.array([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, sqrt(3) / 2, 0.0],
            [0.5, sqrt(3) / 6, sqrt(2.0 / 3.0)],
        ])
    raise ValueError(f"unsupported dimension {d}")


def equilateral_jacobian(d: int) -> np.ndarray:
    """Constant Jacobian of the affine map master -> unit equilateral simplex."""
    y = equilateral_vertices(d)
    return (y[1:] - y[0]).T.copy()


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)


MAX_EXACTNESS = 40


def _gauss_jacobi01(m: int, alpha: float):
    """Gauss-Jacobi on [0, 1] for the weight (1 - u)**alpha."""
    x, w = roots_jacobi(m, alpha, 0.0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1.0)


@lru_cache(maxsize=None)
def quadrature_for(dim: int, exactness: int) -> QuadratureRule:
    """Collapsed (conical product) Gauss-Jacobi rule on the master simplex."""
    if exactness < 1:
        raise ValueError("exactness must be >= 1")
    if exactness > MAX_EXACTNESS:
        raise UnsupportedQuadrature(f"exactness {exactness} above table maximum {MAX_EXACTNESS}")
    if dim < 1 or dim > 3:
        raise ValueError(f"unsupported dimension {dim}")
    m = exactness // 2 + 1
    rules = [_gauss_jacobi01(m, float(dim - 1 - k)) for k in range(dim)]
    pts, wts = [], []
    for combo in itertools.product(*[range(m)] * dim):
        u = [rules[k][0][c] for k, c in enumerate(combo)]
        w = np.prod([rules[k][1][c] for k, c in enumerate(combo)])
        xi = np.empty(dim)
        scale = 1.0
        for k in range(dim):
            xi[k] = u[k] * scale
            scale *= 1.0 - u[k]
        pts.append(xi)
        wts.append(w)
    pts = np.array(pts)
    wts = np.array(wts)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, exactness)


def monomial_integral(alpha) -> float:
    """Exact integral of prod xi_i**alpha_i over the master simplex."""
    alpha = list(alpha)
    num = np.prod([factorial(a) for a in alpha])
    return float(num) / factorial(sum(alpha) + len(alpha))


def simplex_measure(d: int) -> float:
    return 1.0 / factorial(d)


def n_nodes(d: int, p: int) -> int:
    return comb(d + p, p)
