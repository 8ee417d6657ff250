"""Metric-aware shape distortion, element quality and the mesh functional F.

Point-wise distortion of the map D = J_P W (W the inverse equilateral
Jacobian) under metric M::

    N0 = tr(D^T M D) / (d * s0^(2/d)),   s = det(D) sqrt(det M),  s0 = max(s, 0)

F integrates N0^2 over the equilateral elements.  Derivatives go through
log N0 = log tr(M J S J^T) - (2/d) log det J - (1/d) log det M + const,
with S = W W^T, as a function of (J, p) at every quadrature point, and
then through the nodal chain rule dJ/dX = e_i (x) grad N_a, dp/dX = N_a e_i.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .basis import (
    QuadratureRule,
    SimplexBasis,
    equilateral_jacobian,
    evaluate_basis,
    evaluate_basis_derivatives,
    quadrature_for,
)
from .mesh import HighOrderMesh


@dataclass(frozen=True)
class DistortionSample:
    value: float
    sigma: float
    sigma0: float
    regularized: bool

    @property
    def quality(self) -> float:
        return 0.0 if not np.isfinite(self.value) else 1.0 / self.value


def _distortion_values(D, M):
    """Vectorized N0, sigma over leading axes of D and M."""
    d = D.shape[-1]
    tr = np.einsum("...ai,...ab,...bi->...", D, M, D)
    sigma = np.linalg.det(D) * np.sqrt(np.linalg.det(M))
    sigma0 = 0.5 * (sigma + np.abs(sigma))
    with np.errstate(divide="ignore"):
        val = np.where(sigma0 > 0, tr / (d * np.where(sigma0 > 0, sigma0, 1.0) ** (2.0 / d)), np.inf)
    return val, sigma, sigma0


def pointwise_distortion(DphiE, M) -> DistortionSample:
    D = np.asarray(DphiE, dtype=float)
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    val, s, s0 = _distortion_values(D, M)
    return DistortionSample(float(val), float(s), float(s0), bool(s <= 0))


@dataclass(frozen=True)
class ElementQuality:
    eta: float
    quality: float
    min_pointwise_quality: float
    samples: np.ndarray  # N0 per quadrature point


@dataclass
class QualityReport:
    eta: np.ndarray
    quality: np.ndarray
    min_pointwise_quality: np.ndarray

    def summary(self) -> dict:
        q = self.quality
        return {"min": float(q.min()), "max": float(q.max()), "mean": float(q.mean()), "std": float(q.std())}


def default_rule(mesh: HighOrderMesh, exactness: int | None = None) -> QuadratureRule:
    return quadrature_for(mesh.dim, exactness or 2 * mesh.degree * mesh.dim)


class _ElementGeometry:
    """Per-quadrature-point basis data and Jacobians for a whole mesh."""

    def __init__(self, mesh: HighOrderMesh, rule: QuadratureRule):
        self.mesh = mesh
        self.rule = rule
        b = mesh.basis
        self.N = evaluate_basis(b, rule.points, check=False)  # (Q, n)
        self.dN = evaluate_basis_derivatives(b, rule.points, 1, check=False)  # (Q, n, d)
        Deq = equilateral_jacobian(mesh.dim)
        self.W = np.linalg.inv(Deq)
        self.S = self.W @ self.W.T
        self.weights = np.asarray(rule.weights) * np.linalg.det(Deq)
        X = mesh.element_coords()
        self.J = np.einsum("ena,qnj->eqaj", X, self.dN)
        self.points = np.einsum("qn,ena->eqa", self.N, X)


def _pointwise(geo: _ElementGeometry, metric_source, order: int):
    E, Q, d = geo.points.shape
    ev = metric_source.evaluate(geo.points.reshape(-1, d), order)
    M = ev.M.reshape(E, Q, d, d)
    D = geo.J @ geo.W
    val, sigma, sigma0 = _distortion_values(D, M)
    return ev, M, val, sigma


def element_qualities(mesh: HighOrderMesh, metric_source, rule: QuadratureRule | None = None) -> QualityReport:
    rule = rule or default_rule(mesh)
    geo = _ElementGeometry(mesh, rule)
    _, _, val, sigma = _pointwise(geo, metric_source, 0)
    w = np.asarray(rule.weights)
    eta = (val * w).sum(axis=1) / w.sum()
    bad = (sigma <= 0).any(axis=1)
    with np.errstate(divide="ignore"):
        quality = np.where(bad, 0.0, 1.0 / eta)
        pq = np.where(np.isfinite(val), 1.0 / val, 0.0)
    return QualityReport(eta, quality, pq.min(axis=1))


def element_distortion(element: int, mesh: HighOrderMesh, basis: SimplexBasis | None,
                       rule: QuadratureRule | None, metric_source) -> ElementQuality:
    rule = rule or default_rule(mesh)
    sub = HighOrderMesh(mesh.dim, mesh.degree, mesh.nodes, mesh.elements[[element]])
    geo = _ElementGeometry(sub, rule)
    _, _, val, sigma = _pointwise(geo, metric_source, 0)
    w = np.asarray(rule.weights)
    eta = float((val[0] * w).sum() / w.sum())
    bad = bool((sigma[0] <= 0).any())
    q = 0.0 if bad else 1.0 / eta
    pq = np.where(np.isfinite(val[0]), 1.0 / np.where(np.isfinite(val[0]), val[0], 1.0), 0.0)
    return ElementQuality(eta if not bad else np.inf, q, float(pq.min()), val[0])


# ---------------------------------------------------------------- functional


@dataclass
class FunctionalValue:
    value: float
    gradient: np.ndarray | None = None  # over the requested DOFs
    hessian: sp.csr_matrix | None = None
    dofs: np.ndarray | None = None

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))


def restrict(full_grad, full_hess, dofs):
    g = None if full_grad is None else full_grad[dofs]
    H = None if full_hess is None else full_hess[dofs][:, dofs].tocsr()
    return g, H


def _log_derivs(geo, M, dM, d2M, order):
    """Derivatives of l = log N0 w.r.t. z = (vec J, p), shape (E,Q,Z) and (E,Q,Z,Z)."""
    d = M.shape[-1]
    J = geo.J
    S = geo.S
    JS = J @ S
    MJS = M @ JS
    T = np.einsum("eqab,eqab->eq", J, MJS)
    Jinv = np.linalg.inv(J)
    Minv = np.linalg.inv(M)
    TJ = 2.0 * MJS
    lJ = TJ / T[..., None, None] - (2.0 / d) * np.swapaxes(Jinv, -1, -2)
    E, Q = T.shape
    Z = d * d + d
    g = np.zeros((E, Q, Z))
    g[..., : d * d] = lJ.reshape(E, Q, d * d)
    use_metric = dM is not None
    if use_metric:
        JSJ = JS @ np.swapaxes(J, -1, -2)
        Tp = np.einsum("eqkab,eqab->eqk", dM, JSJ)
        MinvdM = np.einsum("eqab,eqkbc->eqkac", Minv, dM)
        lp = Tp / T[..., None] - (1.0 / d) * np.einsum("eqkaa->eqk", MinvdM)
        g[..., d * d:] = lp
    if order < 2:
        return g, None
    H = np.zeros((E, Q, Z, Z))
    TJJ = 2.0 * np.einsum("eqik,jl->eqijkl", M, S)
    dJinvT = -np.einsum("eqjk,eqli->eqijkl", Jinv, Jinv)
    TJf = TJ.reshape(E, Q, d * d)
    HJJ = (TJJ.reshape(E, Q, d * d, d * d) / T[..., None, None]
           - np.einsum("eqa,eqb->eqab", TJf, TJf) / (T ** 2)[..., None, None]
           - (2.0 / d) * dJinvT.reshape(E, Q, d * d, d * d))
    H[..., : d * d, : d * d] = HJJ
    if use_metric:
        TJp = 2.0 * np.einsum("eqkab,eqbc->eqkac", dM, JS).reshape(E, Q, d, d * d)
        HJp = np.swapaxes(TJp, -1, -2) / T[..., None, None] - np.einsum("eqa,eqk->eqak", TJf, Tp) / (T ** 2)[..., None, None]
        H[..., : d * d, d * d:] = HJp
        H[..., d * d:, : d * d] = np.swapaxes(HJp, -1, -2)
        if d2M is not None:
            Tpp = np.einsum("eqkmab,eqab->eqkm", d2M, JSJ)
            tr2 = np.einsum("eqab,eqkmba->eqkm", Minv, d2M)
            trcross = np.einsum("eqmab,eqkba->eqkm", MinvdM, MinvdM)
            Hpp = Tpp / T[..., None, None] - np.einsum("eqk,eqm->eqkm", Tp, Tp) / (T ** 2)[..., None, None] - (tr2 - trcross) / d
            H[..., d * d:, d * d:] = Hpp
    return g, H


def _chain_matrix(geo):
    """B[q, a*d + i, z]: derivative of z = (vec J, p) w.r.t. node coordinate X[a, i]."""
    Q, n, d = geo.dN.shape
    B = np.zeros((Q, n, d, d * d + d))
    for i in range(d):
        B[:, :, i, i * d: (i + 1) * d] = geo.dN
        B[:, :, i, d * d + i] = geo.N
    return B.reshape(Q, n * d, d * d + d)


def element_dof_indices(mesh: HighOrderMesh) -> np.ndarray:
    d = mesh.dim
    return (mesh.elements[:, :, None] * d + np.arange(d)).reshape(mesh.n_elements, -1)


def assemble_sparse(mesh, rows_idx, blocks, size):
    """Sum dense per-element blocks (E, m, m) into a CSR matrix."""
    r = np.repeat(rows_idx, rows_idx.shape[1], axis=1).ravel()
    c = np.tile(rows_idx, (1, rows_idx.shape[1])).ravel()
    return sp.coo_matrix((blocks.ravel(), (r, c)), shape=(size, size)).tocsr()


def functional(mesh: HighOrderMesh, basis: SimplexBasis | None, rule: QuadratureRule | None, metric_source,
               derivative_order: int = 0, dofs=None, metric_derivatives: bool = True) -> FunctionalValue:
    """F and its derivatives restricted to ``dofs`` (default: free DOFs).

    ``metric_derivatives=False`` drops the spatial dependence of M from the
    derivatives (the quasi-Newton simplification).
    """
    rule = rule or default_rule(mesh)
    dofs = mesh.free_dofs() if dofs is None else np.asarray(dofs)
    geo = _ElementGeometry(mesh, rule)
    order = derivative_order if metric_derivatives else 0
    ev, M, val, sigma = _pointwise(geo, metric_source, order)
    if np.any(sigma <= 0):
        return FunctionalValue(np.inf, dofs=dofs)
    f = val ** 2
    F = float(np.einsum("eq,q->", f, geo.weights))
    if derivative_order == 0:
        return FunctionalValue(F, dofs=dofs)
    E, Q, d = geo.points.shape
    dM = d2M = None
    if metric_derivatives:
        dM = ev.dM.reshape(E, Q, d, d, d)
        if derivative_order >= 2:
            d2M = ev.d2M.reshape(E, Q, d, d, d, d)
    gl, Hl = _log_derivs(geo, M, dM, d2M, derivative_order)
    fw = f * geo.weights
    B = _chain_matrix(geo)
    ge = np.einsum("eq,qaz,eqz->ea", 2.0 * fw, B, gl)
    idx = element_dof_indices(mesh)
    size = mesh.n_nodes * d
    full_g = np.zeros(size)
    np.add.at(full_g, idx.ravel(), ge.ravel())
    full_H = None
    if derivative_order >= 2:
        Hf = Hl + 2.0 * np.einsum("eqa,eqb->eqab", gl, gl)
        He = np.einsum("eq,qaz,eqzy,qby->eab", 2.0 * fw, B, Hf, B)
        full_H = assemble_sparse(mesh, idx, He, size)
    g, H = restrict(full_g, full_H, dofs)
    return FunctionalValue(F, g, H, dofs)
