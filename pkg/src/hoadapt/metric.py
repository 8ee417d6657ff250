"""Metric fields: analytic boundary-layer metrics and log-Euclidean
interpolation of nodal metrics on a curved background mesh.

Both sources expose ``evaluate(points, order)`` returning a
:class:`MetricEvaluation` batched over points.  Derivative layout is
``dM[p, j, a, b] = d M_ab / d x_j`` and ``d2M[p, j, k, a, b]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import evaluate_basis, evaluate_basis_derivatives
from .mesh import HighOrderMesh, mesh_from_dict, load_mesh, mesh_to_dict
from .spectral import exp_with_derivatives, spd_log

RESIDUAL_TOL = 1e-10  # times background bbox diagonal
BARY_ACCEPT = -1e-8
BARY_CLAMP = -1e-6
NEWTON_ITERS = 30


class LocalizationError(RuntimeError):
    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


@dataclass
class MetricEvaluation:
    M: np.ndarray
    dM: np.ndarray | None = None
    d2M: np.ndarray | None = None
    element: np.ndarray | None = None
    xi: np.ndarray | None = None
    divided: np.ndarray | None = None  # points routed through divided differences

    def __getitem__(self, i):
        """Single-point view."""
        pick = lambda a: None if a is None else a[i]
        return MetricEvaluation(self.M[i], pick(self.dM), pick(self.d2M),
                                pick(self.element), pick(self.xi), pick(self.divided))


def sym_from_upper(vals, d: int) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    iu = np.triu_indices(d)
    M = np.zeros(vals.shape[:-1] + (d, d))
    M[..., iu[0], iu[1]] = vals
    M[..., iu[1], iu[0]] = vals
    return M


def upper_from_sym(M) -> np.ndarray:
    d = M.shape[-1]
    iu = np.triu_indices(d)
    return M[..., iu[0], iu[1]]


def anisotropic_quotient(M) -> float:
    M = np.asarray(M, dtype=float)
    lam = np.linalg.eigvalsh(M)
    if np.any(lam <= 0):
        raise ValueError("metric is not positive definite")
    d = M.shape[0]
    det = np.prod(lam)
    return float(np.max(np.sqrt(det / lam ** d)))


# ---------------------------------------------------------------- analytic metrics


@dataclass(frozen=True)
class AnalyticMetric:
    """Boundary-layer metric ``grad(phi)^T diag(1, .., 1/h(phi_d)^2) grad(phi)``.

    ``kind`` is ``boundary-layer-2d``, ``boundary-layer-3d`` or ``constant``.
    ``scale`` multiplies the whole metric (size normalization).
    """

    kind: str = "boundary-layer-2d"
    h_min: float = 0.01
    alpha: float = 2.0
    scale: float = 1.0
    matrix: tuple | None = None  # for kind == "constant"

    @property
    def dim(self) -> int:
        if self.kind == "constant":
            return len(self.matrix)
        return 2 if self.kind.endswith("2d") else 3

    def evaluate(self, points, order: int = 0) -> MetricEvaluation:
        return analytic_metric(self, points, order)


def _cos_shift(t, n):
    return np.cos(t + 0.5 * np.pi * n)


def _layer_coordinate(x, d):
    """Last deformation coordinate and its derivatives up to order three.

    Returns value (P,), grad (P,d), hess (P,d,d), third (P,d,d,d).
    """
    k = 2.0 * np.pi
    c = np.sqrt(100.0 + (4.0 if d == 2 else 8.0) * np.pi ** 2)
    P = x.shape[0]
    wav = x[:, : d - 1]  # coordinates entering the cosine product

    def wave(counts):
        out = -np.ones(P)
        for i, n in enumerate(counts):
            out = out * k ** n * _cos_shift(k * wav[:, i], n)
        return out / c

    val = wave([0] * (d - 1)) + 10.0 * x[:, d - 1] / c
    g = np.zeros((P, d))
    H = np.zeros((P, d, d))
    T = np.zeros((P, d, d, d))
    for i in range(d - 1):
        cnt = [0] * (d - 1)
        cnt[i] += 1
        g[:, i] = wave(cnt)
    g[:, d - 1] = 10.0 / c
    for i in range(d - 1):
        for j in range(d - 1):
            cnt = [0] * (d - 1)
            cnt[i] += 1
            cnt[j] += 1
            H[:, i, j] = wave(cnt)
            for m in range(d - 1):
                c3 = list(cnt)
                c3[m] += 1
                T[:, i, j, m] = wave(c3)
    return val, g, H, T


def analytic_metric(spec: AnalyticMetric, points, order: int = 0) -> MetricEvaluation:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    P = x.shape[0]
    if spec.kind == "constant":
        d = spec.dim
        M = np.broadcast_to(np.asarray(spec.matrix, dtype=float) * spec.scale, (P, d, d)).copy()
        dM = np.zeros((P, d, d, d)) if order >= 1 else None
        d2M = np.zeros((P, d, d, d, d)) if order >= 2 else None
        return MetricEvaluation(M, dM, d2M)
    if spec.kind not in ("boundary-layer-2d", "boundary-layer-3d"):
        raise ValueError(f"unknown analytic metric kind {spec.kind!r}")
    d = spec.dim
    if x.shape[1] != d:
        raise ValueError(f"expected {d}-dimensional points")
    phi, gphi, Hphi, Tphi = _layer_coordinate(x, d)
    sgn = np.sign(phi)
    h = spec.h_min + spec.alpha * np.abs(phi)
    D = 1.0 / h ** 2
    D1 = -2.0 * spec.alpha * sgn / h ** 3
    D2 = 6.0 * spec.alpha ** 2 / h ** 4
    # weights g_a and rows v_a = grad(phi_a); only the last row is curved
    eye = np.eye(d)
    M = np.einsum("ai,aj->ij", eye[: d - 1], eye[: d - 1])[None].repeat(P, axis=0)
    M = M + D[:, None, None] * np.einsum("pi,pj->pij", gphi, gphi)
    out = MetricEvaluation(spec.scale * M)
    if order >= 1:
        dg = D1[:, None] * gphi  # (P, d)
        dv = Hphi  # dv[p, i, k] = d_k v_i
        vv = np.einsum("pi,pj->pij", gphi, gphi)
        dvv = np.einsum("pik,pj->pkij", dv, gphi)
        dvv = dvv + np.swapaxes(dvv, -1, -2)
        dM = dg[:, :, None, None] * vv[:, None] + D[:, None, None, None] * dvv
        out.dM = spec.scale * dM
    if order >= 2:
        d2g = D2[:, None, None] * np.einsum("pk,pl->pkl", gphi, gphi) + D1[:, None, None] * Hphi
        d2vv = np.einsum("pikl,pj->pklij", Tphi, gphi) + np.einsum("pik,pjl->pklij", dv, dv)
        d2vv = d2vv + np.swapaxes(d2vv, -1, -2)
        d2M = (d2g[:, :, :, None, None] * vv[:, None, None]
               + dg[:, :, None, None, None] * dvv[:, None]
               + dg[:, None, :, None, None] * dvv[:, :, None]
               + D[:, None, None, None, None] * d2vv)
        out.d2M = spec.scale * d2M
    return out


# ---------------------------------------------------------------- discrete fields


class _GridIndex:
    """Uniform grid of element bounding boxes; candidates sorted by id."""

    def __init__(self, mesh: HighOrderMesh, cells_per_axis: int | None = None):
        X = mesh.element_coords()
        lo, hi = X.min(axis=1), X.max(axis=1)
        pad = 0.1 * (hi - lo).max(axis=1, keepdims=True)
        self.lo_e, self.hi_e = lo - pad, hi + pad
        self.lo = self.lo_e.min(axis=0)
        self.hi = self.hi_e.max(axis=0)
        d = mesh.dim
        E = mesh.n_elements
        n = cells_per_axis or max(1, int(round(E ** (1.0 / d))))
        self.n = n
        self.h = (self.hi - self.lo) / n
        a = np.clip(((self.lo_e - self.lo) / self.h).astype(int), 0, n - 1)
        b = np.clip(((self.hi_e - self.lo) / self.h).astype(int), 0, n - 1)
        self.cells: dict = {}
        for e in range(E):
            ranges = [range(a[e, i], b[e, i] + 1) for i in range(d)]
            for cell in np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, d):
                self.cells.setdefault(tuple(cell), []).append(e)

    def candidates(self, p) -> list[int]:
        c = tuple(np.clip(((p - self.lo) / self.h).astype(int), 0, self.n - 1))
        lst = self.cells.get(c, [])
        inside = [e for e in lst if np.all(p >= self.lo_e[e]) and np.all(p <= self.hi_e[e])]
        return sorted(inside)


def _project_to_simplex(xi):
    """Closest point of the master simplex (batched, Euclidean in xi)."""
    d = xi.shape[1]
    lam = np.concatenate([1.0 - xi.sum(axis=1, keepdims=True), xi], axis=1)
    # projection of barycentric vector onto the probability simplex
    u = -np.sort(-lam, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, d + 2)
    cond = u - css / ind > 0
    rho = d + 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(lam)), rho - 1] / rho
    lam = np.maximum(lam - theta[:, None], 0.0)
    return lam[:, 1:]


@dataclass
class MetricField:
    """Nodal metric logarithms on a background mesh."""

    mesh: HighOrderMesh
    logs: np.ndarray  # (N, d, d)
    _index: _GridIndex | None = field(default=None, repr=False)

    def __post_init__(self):
        self.logs = np.asarray(self.logs, dtype=float)
        if not np.allclose(self.logs, np.swapaxes(self.logs, -1, -2), atol=1e-12):
            raise ValueError("nodal metric logarithms must be symmetric")
        if not np.all(np.isfinite(self.logs)):
            raise ValueError("nodal metric logarithms must be finite")
        if self._index is None:
            self._index = _GridIndex(self.mesh)

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @classmethod
    def from_metrics(cls, mesh: HighOrderMesh, metrics) -> "MetricField":
        return cls(mesh, spd_log(np.asarray(metrics, dtype=float)))

    def localize(self, points):
        return localize_points(self, points)

    def evaluate(self, points, order: int = 0, method: str = "auto") -> MetricEvaluation:
        return interpolate(self, points, order, method)


def _newton_batch(field: MetricField, elems, pts):
    mesh = field.mesh
    basis = mesh.basis
    X = mesh.nodes[mesh.elements[elems]]  # (K, n, d)
    d = mesh.dim
    xi = np.full((len(elems), d), 1.0 / (d + 1))
    scale = mesh.bbox_diagonal()
    for _ in range(NEWTON_ITERS):
        N = evaluate_basis(basis, xi, check=False)
        dN = evaluate_basis_derivatives(basis, xi, 1, check=False)
        x = np.einsum("kn,kna->ka", N, X)
        J = np.einsum("kna,knj->kaj", X, dN)
        r = x - pts
        if np.all(np.linalg.norm(r, axis=1) <= 1e-2 * RESIDUAL_TOL * scale):
            break
        try:
            step = np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J.reshape(-1, d), r.reshape(-1), rcond=None)[0].reshape(-1, d)
        xi = np.clip(xi - step, -1.0, 2.0)
    N = evaluate_basis(basis, xi, check=False)
    res = np.linalg.norm(np.einsum("kn,kna->ka", N, X) - pts, axis=1)
    bary = np.minimum(xi.min(axis=1), 1.0 - xi.sum(axis=1))
    return xi, res, bary


def localize_points(field: MetricField, points):
    """Background element ids and master coordinates for a batch of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    P = len(pts)
    scale = field.mesh.bbox_diagonal()
    cands = [field._index.candidates(p) for p in pts]
    elem = np.full(P, -1, dtype=int)
    xi_out = np.zeros_like(pts)
    best = np.full(P, -np.inf)  # best barycentric margin among converged near-misses
    best_elem = np.full(P, -1, dtype=int)
    best_xi = np.zeros_like(pts)
    best_res = np.full(P, np.inf)
    rnd = 0
    while True:
        todo = [i for i in range(P) if elem[i] < 0 and rnd < len(cands[i])]
        if not todo:
            break
        todo = np.array(todo)
        es = np.array([cands[i][rnd] for i in todo])
        xi, res, bary = _newton_batch(field, es, pts[todo])
        conv = res <= RESIDUAL_TOL * scale
        ok = conv & (bary >= BARY_ACCEPT)
        elem[todo[ok]] = es[ok]
        xi_out[todo[ok]] = xi[ok]
        near = conv & ~ok & (bary > best[todo])
        best[todo[near]] = bary[near]
        best_elem[todo[near]] = es[near]
        best_xi[todo[near]] = xi[near]
        best_res[todo] = np.minimum(best_res[todo], res)
        rnd += 1
    missing = np.flatnonzero(elem < 0)
    for i in missing:
        if best_elem[i] >= 0 and best[i] >= BARY_CLAMP:
            elem[i] = best_elem[i]
            xi_out[i] = _project_to_simplex(best_xi[i][None])[0]
        else:
            raise LocalizationError(
                f"point {pts[i].tolist()} not located in the background mesh "
                f"(nearest residual {best_res[i]:.3e}, barycentric margin {best[i]:.3e})",
                point=pts[i], residual=best_res[i])
    return elem, xi_out


def localize(field: MetricField, point):
    e, xi = localize_points(field, np.asarray(point, dtype=float)[None])
    return int(e[0]), xi[0]


def interpolate(field: MetricField, points, order: int = 0, method: str = "auto") -> MetricEvaluation:
    """Log-Euclidean interpolation with physical derivatives up to ``order``."""
    if order not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = field.mesh
    basis = mesh.basis
    elem, xi = localize_points(field, pts)
    conn = mesh.elements[elem]  # (P, n)
    logs = field.logs[conn]  # (P, n, d, d)
    N = evaluate_basis(basis, xi, check=False)
    L = np.einsum("pn,pnab->pab", N, logs)
    if order == 0:
        M, _, _, _ = exp_with_derivatives(L)
        return MetricEvaluation(M, element=elem, xi=xi, divided=np.zeros(len(pts), dtype=bool))
    X = mesh.nodes[conn]
    dN = evaluate_basis_derivatives(basis, xi, 1, check=False)  # (P, n, d)
    Jb = np.einsum("pna,pnj->paj", X, dN)
    G = np.linalg.inv(Jb)  # d xi / d x
    dNx = np.einsum("pna,paj->pnj", dN, G)
    dL = np.einsum("pnj,pnab->pjab", dNx, logs)
    d2L = None
    if order == 2:
        d2N = evaluate_basis_derivatives(basis, xi, 2, check=False)
        Hb = np.einsum("pni,pnab->piab", X, d2N)
        d2xi = -np.einsum("pmi,piab,paj,pbk->pmjk", G, Hb, G, G)
        d2Nx = np.einsum("pnab,paj,pbk->pnjk", d2N, G, G) + np.einsum("pnm,pmjk->pnjk", dN, d2xi)
        d2L = np.einsum("pnjk,pnab->pjkab", d2Nx, logs)
    M, dM, d2M, used = exp_with_derivatives(L, dL, d2L, method)
    return MetricEvaluation(M, dM, d2M, elem, xi, used)


def sample_field(mesh: HighOrderMesh, source) -> MetricField:
    """Discrete field holding ``source`` sampled at every background node."""
    return MetricField.from_metrics(mesh, source.evaluate(mesh.nodes, 0).M)


# ---------------------------------------------------------------- files


def metric_to_dict(source, mesh_ref=None) -> dict:
    if isinstance(source, AnalyticMetric):
        doc = {"kind": source.kind, "h_min": source.h_min, "alpha": source.alpha, "scale": source.scale}
        if source.matrix is not None:
            doc["matrix"] = [list(r) for r in source.matrix]
        return {"analytic": doc}
    from .spectral import spd_exp
    M = spd_exp(source.logs)
    return {
        "background_mesh": mesh_ref if mesh_ref is not None else mesh_to_dict(source.mesh),
        "node_metrics": upper_from_sym(M).tolist(),
    }


def save_metric(source, path, mesh_ref=None) -> None:
    Path(path).write_text(json.dumps(metric_to_dict(source, mesh_ref)))


def metric_from_dict(doc: dict, base_dir=None):
    if "analytic" in doc:
        a = doc["analytic"]
        mat = a.get("matrix")
        return AnalyticMetric(a.get("kind", "boundary-layer-2d"), float(a.get("h_min", 0.01)),
                              float(a.get("alpha", 2.0)), float(a.get("scale", 1.0)),
                              None if mat is None else tuple(tuple(float(v) for v in r) for r in mat))
    if "background_mesh" not in doc or "node_metrics" not in doc:
        raise ValueError("metric file needs 'background_mesh' and 'node_metrics' (or 'analytic')")
    bg = doc["background_mesh"]
    if isinstance(bg, str):
        p = Path(bg)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        mesh = load_mesh(p)
    else:
        mesh = mesh_from_dict(bg)
    vals = np.asarray(doc["node_metrics"], dtype=float)
    if vals.shape != (mesh.n_nodes, mesh.dim * (mesh.dim + 1) // 2):
        raise ValueError(f"node_metrics must have {mesh.n_nodes} rows of {mesh.dim * (mesh.dim + 1) // 2} entries")
    return MetricField.from_metrics(mesh, sym_from_upper(vals, mesh.dim))


def load_metric(path):
    path = Path(path)
    return metric_from_dict(json.loads(path.read_text()), base_dir=path.parent)
