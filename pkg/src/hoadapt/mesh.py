"""High-order simplicial meshes: data model, JSON I/O, validity and generators."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import (
    QuadratureRule,
    SimplexBasis,
    evaluate_basis_derivatives,
    lattice_indices,
    quadrature_for,
    simplex_basis,
)


class MeshFormatError(ValueError):
    """Malformed mesh document."""


class MeshValidationError(ValueError):
    """Mesh payload violates a structural invariant."""


@dataclass(frozen=True)
class BoundaryFacet:
    nodes: tuple[int, ...]
    entities: tuple[str, ...]


@dataclass(frozen=True)
class HighOrderMesh:
    dim: int
    degree: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary: tuple[BoundaryFacet, ...] = ()
    fixed: tuple[int, ...] = ()
    slide: dict = field(default_factory=dict)  # node -> tuple of entity ids

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def basis(self) -> SimplexBasis:
        return simplex_basis(self.dim, self.degree)

    def with_nodes(self, nodes) -> "HighOrderMesh":
        return replace(self, nodes=np.asarray(nodes, dtype=float).reshape(self.nodes.shape))

    def with_dofs(self, fixed=(), slide=None) -> "HighOrderMesh":
        return replace(self, fixed=tuple(sorted(int(i) for i in fixed)), slide=dict(slide or {}))

    def free_dofs(self) -> np.ndarray:
        """Flat coordinate indices (node * d + axis) of all non-fixed nodes."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[list(self.fixed)] = False
        free_nodes = np.flatnonzero(mask)
        return (free_nodes[:, None] * self.dim + np.arange(self.dim)).ravel()

    def element_coords(self) -> np.ndarray:
        return self.nodes[self.elements]

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.nodes.max(axis=0) - self.nodes.min(axis=0)))


# ---------------------------------------------------------------- topology


def _bary_index_map(d: int, p: int) -> dict:
    """Map full barycentric multi-index (d+1 ints) to local node index."""
    out = {}
    for k, a in enumerate(lattice_indices(d, p)):
        out[(p - int(a.sum()),) + tuple(int(x) for x in a)] = k
    return out


def facet_local_nodes(d: int, p: int, face_vertices) -> np.ndarray:
    """Local node indices of the face spanned by the given element vertices.

    Ordered as the (d-1)-simplex lattice with face_vertices[0] as its origin.
    """
    bmap = _bary_index_map(d, p)
    face_vertices = list(face_vertices)
    out = []
    for beta in lattice_indices(d - 1, p):
        lam = [0] * (d + 1)
        lam[face_vertices[0]] = p - int(beta.sum())
        for i, b in enumerate(beta):
            lam[face_vertices[i + 1]] = int(b)
        out.append(bmap[tuple(lam)])
    return np.array(out, dtype=int)


def element_faces(d: int):
    """Vertex tuples of each face, face i opposite vertex i."""
    return [tuple(v for v in range(d + 1) if v != i) for i in range(d + 1)]


def _face_lookup(mesh: HighOrderMesh) -> dict:
    d = mesh.dim
    table: dict = {}
    for e, conn in enumerate(mesh.elements):
        for fv in element_faces(d):
            key = tuple(sorted(int(conn[v]) for v in fv))
            table.setdefault(key, []).append((e, fv))
    return table


def boundary_faces(mesh: HighOrderMesh) -> list[tuple[int, tuple[int, ...]]]:
    """(element, face-vertex tuple) pairs that belong to exactly one element."""
    out = []
    for key, owners in sorted(_face_lookup(mesh).items()):
        if len(owners) == 1:
            out.append(owners[0])
    return out


def facet_from_face(mesh: HighOrderMesh, element: int, face_vertices) -> np.ndarray:
    loc = facet_local_nodes(mesh.dim, mesh.degree, face_vertices)
    return mesh.elements[element][loc]


# ---------------------------------------------------------------- validation


def validate_mesh(mesh: HighOrderMesh) -> None:
    d, p = mesh.dim, mesh.degree
    if d not in (2, 3):
        raise MeshValidationError(f"dimension must be 2 or 3, got {d}")
    if p < 1:
        raise MeshValidationError(f"degree must be >= 1, got {p}")
    n = simplex_basis(d, p).n
    N = mesh.n_nodes
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != d:
        raise MeshValidationError(f"nodes must be an N x {d} array")
    if mesh.elements.ndim != 2 or mesh.elements.shape[1] != n:
        raise MeshValidationError(f"elements must list {n} nodes each for d={d}, p={p}")
    for e, conn in enumerate(mesh.elements):
        if conn.min() < 0 or conn.max() >= N:
            raise MeshValidationError(f"element {e} references node index out of range [0, {N})")
    used = np.zeros(N, dtype=bool)
    used[mesh.elements.ravel()] = True
    if not used.all():
        raise MeshValidationError(f"orphan node {int(np.flatnonzero(~used)[0])}")
    faces = _face_lookup(mesh)
    nf = simplex_basis(d - 1, p).n
    on_boundary = set()
    for k, bf in enumerate(mesh.boundary):
        if len(bf.nodes) != nf:
            raise MeshValidationError(f"boundary facet {k} must list {nf} nodes")
        if min(bf.nodes) < 0 or max(bf.nodes) >= N:
            raise MeshValidationError(f"boundary facet {k} references node index out of range")
        key = tuple(sorted(bf.nodes[: d]))
        owners = faces.get(key, [])
        if len(owners) != 1:
            raise MeshValidationError(f"boundary facet {k} is a face of {len(owners)} elements, expected 1")
        e, fv = owners[0]
        if set(bf.nodes) != set(mesh.elements[e][facet_local_nodes(d, p, fv)].tolist()):
            raise MeshValidationError(f"boundary facet {k} nodes do not match element {e}")
        on_boundary.update(bf.nodes)
    for i in mesh.fixed:
        if not 0 <= i < N:
            raise MeshValidationError(f"fixed node {i} out of range")
    for i in mesh.slide:
        if i not in on_boundary:
            raise MeshValidationError(f"slide node {i} is not on any boundary facet")


# ---------------------------------------------------------------- validity


@dataclass(frozen=True)
class ValidityReport:
    min_det: np.ndarray  # per element
    valid: bool
    invalid_elements: tuple[int, ...]


def jacobians_at(mesh: HighOrderMesh, points: np.ndarray) -> np.ndarray:
    """Physical Jacobians (E, P, d, d) at master points."""
    dN = evaluate_basis_derivatives(mesh.basis, points, 1, check=False)
    return np.einsum("enk,qnj->eqkj", mesh.element_coords(), dN)


def check_validity(mesh: HighOrderMesh, basis: SimplexBasis | None = None,
                   rule: QuadratureRule | None = None) -> ValidityReport:
    if rule is None:
        rule = quadrature_for(mesh.dim, 2 * mesh.degree * mesh.dim)
    dets = np.linalg.det(jacobians_at(mesh, np.asarray(rule.points)))
    mins = dets.min(axis=1)
    bad = tuple(int(e) for e in np.flatnonzero(~(mins > 0)))
    return ValidityReport(mins, not bad, bad)


# ---------------------------------------------------------------- I/O


def mesh_to_dict(mesh: HighOrderMesh) -> dict:
    return {
        "dimension": mesh.dim,
        "degree": mesh.degree,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "boundary": [{"facet": list(b.nodes), "entities": list(b.entities)} for b in mesh.boundary],
        "dof": {
            "fixed": list(mesh.fixed),
            "slide": [{"node": int(k), "entities": list(v)} for k, v in sorted(mesh.slide.items())],
        },
    }


def _field(doc, key, where="mesh"):
    if key not in doc:
        raise MeshFormatError(f"{where}: missing field '{key}'")
    return doc[key]


def mesh_from_dict(doc: dict, validate: bool = True) -> HighOrderMesh:
    if not isinstance(doc, dict):
        raise MeshFormatError("mesh document must be a JSON object")
    try:
        d = int(_field(doc, "dimension"))
        p = int(_field(doc, "degree"))
        nodes = np.array(_field(doc, "nodes"), dtype=float).reshape(-1, d)
        elems = np.array(_field(doc, "elements"), dtype=np.int64)
        if elems.ndim != 2:
            raise MeshFormatError("field 'elements': rows must have equal length")
        boundary = []
        for k, b in enumerate(doc.get("boundary", [])):
            boundary.append(BoundaryFacet(
                tuple(int(i) for i in _field(b, "facet", f"boundary[{k}]")),
                tuple(str(s) for s in _field(b, "entities", f"boundary[{k}]")),
            ))
        dof = doc.get("dof", {})
        fixed = tuple(sorted(int(i) for i in dof.get("fixed", [])))
        slide = {}
        for k, s in enumerate(dof.get("slide", [])):
            slide[int(_field(s, "node", f"dof.slide[{k}]"))] = tuple(
                str(x) for x in _field(s, "entities", f"dof.slide[{k}]"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"mesh: bad field value ({exc})") from exc
    mesh = HighOrderMesh(d, p, nodes, elems, tuple(boundary), fixed, slide)
    if validate:
        validate_mesh(mesh)
    return mesh


def _read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_mesh(path) -> HighOrderMesh:
    return mesh_from_dict(_read_json(path))


def save_mesh(mesh: HighOrderMesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


# ---------------------------------------------------------------- generators

BOX_FACE_NAMES = {2: ("xmin", "xmax", "ymin", "ymax"), 3: ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")}


def _simplex_split(d: int):
    """Vertex offset lists (in the unit cell) of the simplices tiling a cell."""
    if d == 2:
        return [[(0, 0), (1, 0), (1, 1)], [(0, 0), (1, 1), (0, 1)]]
    out = []
    for perm in itertools.permutations(range(d)):
        v = [0] * d
        verts = [tuple(v)]
        for ax in perm:
            v[ax] = 1
            verts.append(tuple(v))
        out.append(verts)
    return out


def structured_mesh(d: int, divisions, degree: int, box=None, axes=None) -> HighOrderMesh:
    """Simplicial subdivision of a box with a uniform degree-p lattice per simplex.

    ``axes`` optionally gives the cell-vertex coordinates along each axis
    (overriding ``divisions`` and ``box``) for tensor-graded grids; every
    simplex stays affine. Boundary facets are tagged with the box face they
    lie on (``xmin``, ``xmax``, ...); no DOFs are fixed.
    """
    p = degree
    if axes is not None:
        cuts = [np.asarray(a, dtype=float) for a in axes]
        if len(cuts) != d or any(len(c) < 2 or np.any(np.diff(c) <= 0) for c in cuts):
            raise ValueError("axes must be d increasing coordinate arrays")
        div = np.array([len(c) - 1 for c in cuts])
        box = np.array([[c[0] for c in cuts], [c[-1] for c in cuts]])
    else:
        div = np.broadcast_to(np.asarray(divisions, dtype=int), (d,)).copy()
        if np.any(div < 1):
            raise ValueError("divisions must be >= 1")
        box = np.array(box if box is not None else [[0.0] * d, [1.0] * d], dtype=float)
        cuts = [np.linspace(box[0, i], box[1, i], div[i] + 1) for i in range(d)]
    res = div * p
    grid_shape = tuple(res + 1)
    # p lattice nodes per cell, evenly spaced between the cell's vertices
    t = np.arange(p) / p
    axes = [np.append((c[:-1, None] + t * np.diff(c)[:, None]).ravel(), c[-1]) for c in cuts]
    mesh_axes = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh_axes], axis=1)

    def gid(ix):
        return int(np.ravel_multi_index(tuple(ix), grid_shape))

    lat = lattice_indices(d, p)
    elements = []
    for cell in itertools.product(*[range(n) for n in div]):
        base = np.array(cell) * p
        for verts in _simplex_split(d):
            V = np.array(verts)
            if np.linalg.det((V[1:] - V[0]).T.astype(float)) < 0:
                V[[1, 2]] = V[[2, 1]]
            conn = [gid(base + p * V[0] + a @ (V[1:] - V[0])) for a in lat]
            elements.append(conn)
    elements = np.array(elements, dtype=np.int64)
    mesh = HighOrderMesh(d, p, nodes, elements)
    names = BOX_FACE_NAMES[d]
    boundary = []
    tol = 1e-12 * float(np.max(box[1] - box[0]))
    for e, fv in boundary_faces(mesh):
        fn = facet_from_face(mesh, e, fv)
        X = nodes[fn]
        tags = []
        for ax in range(d):
            if np.all(np.abs(X[:, ax] - box[0, ax]) <= tol):
                tags.append(names[2 * ax])
            if np.all(np.abs(X[:, ax] - box[1, ax]) <= tol):
                tags.append(names[2 * ax + 1])
        boundary.append(BoundaryFacet(tuple(int(i) for i in fn), tuple(tags)))
    return replace(mesh, boundary=tuple(boundary))


def boundary_node_entities(mesh: HighOrderMesh) -> dict:
    """Union of facet entity tags per boundary node."""
    out: dict = {}
    for bf in mesh.boundary:
        for i in bf.nodes:
            out.setdefault(i, set()).update(bf.entities)
    return {k: tuple(sorted(v)) for k, v in out.items()}
