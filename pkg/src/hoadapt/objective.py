"""Boundary-deviation penalty G and the combined objective H = F + lam * G."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .basis import QuadratureRule, evaluate_basis, evaluate_basis_derivatives, quadrature_for, simplex_basis
from .config import PenaltyConfig
from .distortion import assemble_sparse, default_rule, functional, restrict
from .implicit import ImplicitModel
from .mesh import HighOrderMesh
from .metric import LocalizationError


@dataclass
class PenaltyValue:
    value: float
    gradient: np.ndarray | None = None  # full coordinate space
    hessian: sp.csr_matrix | None = None
    max_gamma: float = 0.0


def _area_derivs(T):
    """A = sqrt(det T^T T) with dA/dT and d2A/dT dT for T of shape (..., d, d-1)."""
    C = np.swapaxes(T, -1, -2) @ T
    Ci = np.linalg.inv(C)
    A = np.sqrt(np.linalg.det(C))
    TC = T @ Ci
    dA = A[..., None, None] * TC
    TCT = TC @ np.swapaxes(T, -1, -2)
    d, m = T.shape[-2:]
    I = np.eye(d)
    d2A = A[..., None, None, None, None] * (
        np.einsum("...kl,...ij->...ijkl", TC, TC)
        + np.einsum("ik,...lj->...ijkl", I, Ci)
        - np.einsum("...il,...kj->...ijkl", TC, TC)
        - np.einsum("...ik,...lj->...ijkl", TCT, Ci)
    )
    return A, dA, d2A


def boundary_rule(mesh: HighOrderMesh, exactness: int | None = None) -> QuadratureRule:
    return quadrature_for(mesh.dim - 1, exactness or 2 * mesh.degree + 2)


def boundary_points(mesh: HighOrderMesh, rule: QuadratureRule | None = None):
    """Physical facet quadrature points, (n_facets, Q, d)."""
    rule = rule or boundary_rule(mesh)
    fb = simplex_basis(mesh.dim - 1, mesh.degree)
    N = evaluate_basis(fb, rule.points, check=False)
    facets = np.array([b.nodes for b in mesh.boundary], dtype=int)
    return np.einsum("qn,fna->fqa", N, mesh.nodes[facets])


def boundary_deviation(mesh: HighOrderMesh, model: ImplicitModel, basis=None, rule: QuadratureRule | None = None,
                       derivative_order: int = 2, corner_penalty: bool = True) -> PenaltyValue:
    """G = sum over facets and their target entities of the integral of gamma^2,
    plus gamma^2 point terms at slide nodes targeting two or more entities."""
    d = mesh.dim
    size = mesh.n_nodes * d
    rule = rule or boundary_rule(mesh)
    fb = simplex_basis(d - 1, mesh.degree)
    Nf = evaluate_basis(fb, rule.points, check=False)  # (Q, nf)
    dNf = evaluate_basis_derivatives(fb, rule.points, 1, check=False)  # (Q, nf, d-1)
    w = np.asarray(rule.weights)
    nf = Nf.shape[1]
    m = d - 1
    # group (facet, entity) pairs by entity so each entity is evaluated once
    by_entity: dict = {}
    for k, bf in enumerate(mesh.boundary):
        for e in bf.entities:
            by_entity.setdefault(e, []).append(k)
    facets = np.array([b.nodes for b in mesh.boundary], dtype=int).reshape(len(mesh.boundary), nf)
    G = 0.0
    gmax = 0.0
    grad = np.zeros(size) if derivative_order >= 1 else None
    hess_parts = []
    Z = d + d * m
    # chain matrix: z = (x, vec T) as a function of facet node coordinates
    Bz = np.zeros((len(w), nf, d, Z))
    for i in range(d):
        Bz[:, :, i, i] = Nf
        Bz[:, :, i, d + i * m: d + (i + 1) * m] = dNf
    Bz = Bz.reshape(len(w), nf * d, Z)
    for eid in sorted(by_entity, key=lambda e: model.entity_ids.index(e) if e in model.entity_ids else -1):
        if eid not in model.entities:
            raise KeyError(f"boundary facet targets unknown entity {eid!r}")
        ks = np.array(by_entity[eid])
        X = mesh.nodes[facets[ks]]  # (F, nf, d)
        x = np.einsum("qn,fna->fqa", Nf, X)
        T = np.einsum("fna,qnj->fqaj", X, dNf)
        F, Q = x.shape[:2]
        imp = model.entity(eid, x.reshape(-1, d))
        gam = imp.value.reshape(F, Q)
        gmax = max(gmax, float(np.max(gam)))
        A, dA, d2A = _area_derivs(T)
        G += float(np.einsum("fq,fq,q->", gam ** 2, A, w))
        if derivative_order < 1:
            continue
        gg = imp.grad.reshape(F, Q, d)
        gz = np.zeros((F, Q, Z))
        gz[..., :d] = 2.0 * gam[..., None] * gg * A[..., None]
        gz[..., d:] = (gam ** 2)[..., None] * dA.reshape(F, Q, d * m)
        ge = np.einsum("q,qaz,fqz->fa", w, Bz, gz)
        idx = (facets[ks][:, :, None] * d + np.arange(d)).reshape(F, -1)
        np.add.at(grad, idx.ravel(), ge.ravel())
        if derivative_order < 2:
            continue
        gh = imp.hess.reshape(F, Q, d, d)  # gamma * hess gamma
        Hz = np.zeros((F, Q, Z, Z))
        Hz[..., :d, :d] = (2.0 * np.einsum("fqi,fqk->fqik", gg, gg) + 2.0 * gh) * A[..., None, None]
        cross = 2.0 * gam[..., None, None] * np.einsum("fqi,fqkl->fqikl", gg, dA).reshape(F, Q, d, d * m)
        Hz[..., :d, d:] = cross
        Hz[..., d:, :d] = np.swapaxes(cross, -1, -2)
        Hz[..., d:, d:] = (gam ** 2)[..., None, None] * d2A.reshape(F, Q, d * m, d * m)
        He = np.einsum("q,qaz,fqzy,qby->fab", w, Bz, Hz, Bz)
        hess_parts.append(assemble_sparse(mesh, idx, He, size))
    if corner_penalty:
        for node, ents in sorted(mesh.slide.items()):
            if len(ents) < 2:
                continue
            x = mesh.nodes[node][None]
            for eid in ents:
                imp = model.entity(eid, x)
                g0 = float(imp.value[0])
                gmax = max(gmax, g0)
                G += g0 * g0
                if derivative_order >= 1:
                    grad[node * d:(node + 1) * d] += 2.0 * g0 * imp.grad[0]
                if derivative_order >= 2:
                    blk = 2.0 * np.outer(imp.grad[0], imp.grad[0]) + 2.0 * imp.hess[0]
                    rows = np.repeat(np.arange(node * d, node * d + d), d)
                    cols = np.tile(np.arange(node * d, node * d + d), d)
                    hess_parts.append(sp.coo_matrix((blk.ravel(), (rows, cols)), shape=(size, size)).tocsr())
    hess = None
    if derivative_order >= 2:
        hess = sp.csr_matrix((size, size))
        for h in hess_parts:
            hess = hess + h
    return PenaltyValue(G, grad, hess, gmax)


@dataclass
class ObjectiveValue:
    H: float
    F: float
    G: float
    gradient: np.ndarray | None = None
    hessian: sp.csr_matrix | None = None
    reason: str = ""

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.H))


def combined_objective(mesh: HighOrderMesh, metric_source, model: ImplicitModel | None,
                       config: PenaltyConfig | None = None, derivative_order: int = 2,
                       rule: QuadratureRule | None = None, dofs=None,
                       metric_derivatives: bool = True) -> ObjectiveValue:
    """H = F + lam * G over ``dofs`` (default: the mesh's free DOFs).

    A quadrature point leaving the background mesh makes H infinite, like an
    inverted element, so the line search backs off.
    """
    config = config or PenaltyConfig()
    dofs = mesh.free_dofs() if dofs is None else np.asarray(dofs)
    rule = rule or default_rule(mesh)
    try:
        Fv = functional(mesh, None, rule, metric_source, derivative_order, dofs=dofs,
                        metric_derivatives=metric_derivatives)
    except LocalizationError as exc:
        return ObjectiveValue(np.inf, np.inf, np.nan, reason=f"localization: {exc}")
    if not Fv.finite:
        return ObjectiveValue(np.inf, np.inf, np.nan, reason="inverted element")
    if model is None or not mesh.boundary:
        return ObjectiveValue(Fv.value, Fv.value, 0.0, Fv.gradient, Fv.hessian)
    brule = boundary_rule(mesh, config.boundary_exactness)
    Gv = boundary_deviation(mesh, model, None, brule, derivative_order, config.corner_penalty)
    H = Fv.value + config.lam * Gv.value
    g, Hs = restrict(Gv.gradient, Gv.hessian, dofs)
    grad = None if g is None else Fv.gradient + config.lam * g
    hess = None if Hs is None else (Fv.hessian + config.lam * Hs).tocsr()
    return ObjectiveValue(H, Fv.value, Gv.value, grad, hess)


class MeshObjective:
    """Objective as a function of the free coordinate vector."""

    def __init__(self, mesh: HighOrderMesh, metric_source, model=None, config: PenaltyConfig | None = None,
                 rule: QuadratureRule | None = None, metric_derivatives: bool = True):
        self.mesh = mesh
        self.metric = metric_source
        self.model = model
        self.config = config or PenaltyConfig()
        self.rule = rule or default_rule(mesh)
        self.dofs = mesh.free_dofs()
        self.metric_derivatives = metric_derivatives

    def x0(self) -> np.ndarray:
        return self.mesh.nodes.ravel()[self.dofs].copy()

    def mesh_at(self, x) -> HighOrderMesh:
        flat = self.mesh.nodes.ravel().copy()
        flat[self.dofs] = x
        return self.mesh.with_nodes(flat)

    def __call__(self, x, order: int = 2) -> ObjectiveValue:
        return combined_objective(self.mesh_at(x), self.metric, self.model, self.config, order,
                                  self.rule, self.dofs, self.metric_derivatives)
