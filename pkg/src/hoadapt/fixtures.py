"""Deterministic test assets: box and hole meshes, sampled background metrics, CAD models.

Everything here is built from closed-form constructions, so files written by
``generate_fixtures`` are bit-identical across runs.
"""
from __future__ import annotations

import json
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .basis import lattice_indices
from .config import RunConfig, save_config
from .implicit import BezierPatch, ImplicitModel, implicitize_model, model_to_dict
from .mesh import (
    BoundaryFacet,
    HighOrderMesh,
    boundary_faces,
    boundary_node_entities,
    facet_from_face,
    mesh_to_dict,
    structured_mesh,
)
from .metric import AnalyticMetric, MetricField, metric_to_dict, sample_field

UNIT_BOX_2D = [[-0.5, -0.5], [0.5, 0.5]]
UNIT_BOX_3D = [[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]]
# Backgrounds extend past the unit box: with a penalty instead of hard
# constraints, boundary edges bulge slightly outward during adaption.
BACKGROUND_HALF_WIDTH = 0.72
SQUARE_DIVISIONS = {1: 8, 2: 4, 4: 2}
CUBE_DIVISIONS = {1: 4, 2: 2}
BACKGROUND_DIVISIONS_2D = {1: 72, 2: 36, 4: 18}  # along x: node spacing 0.02
# Across the layer, 2D background nodes are equally spaced in log h, where
# h = h_min + alpha |phi| and phi is the layer coordinate of the 2D metric;
# linear interpolation of log M then errs by about step^2 / 8.
LAYER_INTERVALS_2D = 32  # per side of phi = 0; divisible by every degree
LAYER_HALF_WIDTH_2D = 0.7  # phi range covering [-0.72, 0.72]^2
BACKGROUND_DIVISIONS_3D = 20  # degree 1, 21^3 = 9261 nodes
HOLE_RADIUS = 0.18
CYLINDER_RADIUS = 0.25
SIDES_2D = ("ymin", "xmax", "ymax", "xmin")


def boundary_layer_metric(dim: int, scale: float = 1.0) -> AnalyticMetric:
    h_min = 0.01 if dim == 2 else 0.02
    return AnalyticMetric(f"boundary-layer-{dim}d", h_min, 2.0, scale)


def _slide_all_but_corners(mesh: HighOrderMesh) -> HighOrderMesh:
    ents = boundary_node_entities(mesh)
    d = mesh.dim
    fixed = sorted(i for i, e in ents.items() if len(e) >= d)
    slide = {i: e for i, e in ents.items() if len(e) < d}
    return mesh.with_dofs(fixed, slide)


def square_mesh(degree: int) -> HighOrderMesh:
    """Structured [-0.5, 0.5]^2 mesh: corners fixed, other boundary nodes slide."""
    return _slide_all_but_corners(structured_mesh(2, SQUARE_DIVISIONS[degree], degree, UNIT_BOX_2D))


def cube_mesh(degree: int) -> HighOrderMesh:
    """Kuhn-split [-0.5, 0.5]^3 mesh: vertices of the cube fixed, other boundary nodes slide."""
    return _slide_all_but_corners(structured_mesh(3, CUBE_DIVISIONS[degree], degree, UNIT_BOX_3D))


def layer_nodes_2d(h_min: float = 0.01, alpha: float = 2.0) -> np.ndarray:
    """Layer-coordinate values of the background nodes, log-uniform in h on each side."""
    h = np.geomspace(h_min, h_min + alpha * LAYER_HALF_WIDTH_2D, LAYER_INTERVALS_2D + 1)
    half = (h - h_min) / alpha
    half[-1] = LAYER_HALF_WIDTH_2D
    return np.concatenate([-half[:0:-1], half])


def _layer_to_physical(nodes: np.ndarray) -> np.ndarray:
    """(x, phi) -> (x, y) inverting phi = (10 y - cos(2 pi x)) / sqrt(100 + 4 pi^2)."""
    x, phi = nodes[:, 0], nodes[:, 1]
    c = np.sqrt(100.0 + 4.0 * np.pi ** 2)
    return np.stack([x, (c * phi + np.cos(2.0 * np.pi * x)) / 10.0], axis=1)


def background_mesh(dim: int, degree: int) -> HighOrderMesh:
    """Background for the sampled metric.

    3D: uniform Kuhn grid of [-w, w]^3. 2D: a grid in (x, layer coordinate),
    graded toward the layer and mapped to physical space, so elements follow
    the curved layer (curved for degree >= 2).
    """
    w = BACKGROUND_HALF_WIDTH
    if dim == 3:
        return structured_mesh(3, BACKGROUND_DIVISIONS_3D, degree, [[-w] * 3, [w] * 3])
    xs = np.linspace(-w, w, BACKGROUND_DIVISIONS_2D[degree] + 1)
    grid = structured_mesh(2, None, degree, axes=[xs, layer_nodes_2d()[::degree]])
    return replace(grid, nodes=_layer_to_physical(grid.nodes), boundary=())


@lru_cache(maxsize=8)
def background_field(dim: int, degree: int, scale: float = 1.0) -> MetricField:
    """Boundary-layer metric sampled at the background nodes."""
    return sample_field(background_mesh(dim, degree), boundary_layer_metric(dim, scale))


# ---------------------------------------------------------------- models


def _segment(a, b, eid) -> BezierPatch:
    return BezierPatch(np.array([a, b], float), np.ones(2), (1,), eid)


def square_patches() -> dict:
    c = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    return {eid: [_segment(c[k], c[(k + 1) % 4], eid)] for k, eid in enumerate(SIDES_2D)}


def circle_patches(radius: float = HOLE_RADIUS, eid: str = "circle") -> list:
    """Four rational quadratic quarter arcs, counter-clockwise from angle 0."""
    w = np.sqrt(0.5)
    out = []
    for k in range(4):
        c, s = np.cos(k * np.pi / 2), np.sin(k * np.pi / 2)
        R = np.array([[c, -s], [s, c]])
        P = np.array([[radius, 0.0], [radius, radius], [0.0, radius]]) @ R.T
        out.append(BezierPatch(P, np.array([1.0, w, 1.0]), (2,), eid))
    return out


def hole_patches(radius: float = HOLE_RADIUS) -> dict:
    ents = square_patches()
    ents["circle"] = circle_patches(radius)
    return ents


def _bilinear(corners, eid) -> BezierPatch:
    """Planar patch with control points ordered (s0,t0), (s0,t1), (s1,t0), (s1,t1)."""
    return BezierPatch(np.array(corners, float), np.ones(4), (1, 1), eid)


def cube_patches() -> dict:
    lo, hi = -0.5, 0.5
    ents = {}
    for ax, names in enumerate((("xmin", "xmax"), ("ymin", "ymax"), ("zmin", "zmax"))):
        u, v = [a for a in range(3) if a != ax]
        for val, eid in zip((lo, hi), names):
            pts = []
            for s in (lo, hi):
                for t in (lo, hi):
                    p = [0.0] * 3
                    p[ax], p[u], p[v] = val, s, t
                    pts.append(p)
            ents[eid] = [_bilinear(pts, eid)]
    return ents


def _arc(t0: float, t1: float, radius: float):
    """Rational quadratic arc control points and middle weight."""
    tm, h = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
    P = np.array([[np.cos(t0), np.sin(t0)], [np.cos(tm) / np.cos(h), np.sin(tm) / np.cos(h)],
                  [np.cos(t1), np.sin(t1)]]) * radius
    return P, np.cos(h)


def cylinder_patches(radius: float = CYLINDER_RADIUS) -> dict:
    """Box [-0.5, 0]^2 x [-0.25, 0.25] with the corner at the origin cut by a z-aligned cylinder."""
    z0, z1 = -0.25, 0.25

    def face(fixed_ax, val, a0, a1, eid):
        pts = []
        for s in (a0, a1):
            for z in (z0, z1):
                p = [0.0, 0.0, z]
                p[fixed_ax] = val
                p[1 - fixed_ax] = s
                pts.append(p)
        return _bilinear(pts, eid)

    ents = {
        "xmin": [face(0, -0.5, -0.5, 0.0, "xmin")],
        "ymin": [face(1, -0.5, -0.5, 0.0, "ymin")],
        "xcut": [face(0, 0.0, -0.5, -radius, "xcut")],
        "ycut": [face(1, 0.0, -0.5, -radius, "ycut")],
    }
    A, w = _arc(np.pi, 1.5 * np.pi, radius)
    pts, W = [], []
    for i in range(3):
        for z in (z0, z1):
            pts.append([*A[i], z])
            W.append((1.0, w, 1.0)[i])
    ents["cylinder"] = [BezierPatch(np.array(pts), np.array(W), (2, 1), "cylinder")]
    # caps: two ruled patches each, between a quarter of the arc and the box outline
    halves = ((np.pi, 1.25 * np.pi, (-0.5, 0.0), (-0.5, -0.5)),
              (1.25 * np.pi, 1.5 * np.pi, (-0.5, -0.5), (0.0, -0.5)))
    for z, eid in ((z0, "zmin"), (z1, "zmax")):
        caps = []
        for t0, t1, l0, l1 in halves:
            A, w = _arc(t0, t1, radius)
            L = np.array([l0, 0.5 * (np.array(l0) + np.array(l1)), l1])
            pts, W = [], []
            for i in range(3):
                for row in (A, L):
                    pts.append([*row[i], z])
                    W.append((1.0, w, 1.0)[i])
            caps.append(BezierPatch(np.array(pts), np.array(W), (2, 1), eid))
        ents[eid] = caps
    return ents


@lru_cache(maxsize=None)
def _model(name: str) -> ImplicitModel:
    return implicitize_model(MODEL_BUILDERS[name]())


def model(name: str) -> ImplicitModel:
    """Implicitized fixture model: ``square``, ``hole``, ``cube`` or ``cylinder``."""
    return _model(name)


MODEL_BUILDERS = {"square": square_patches, "hole": hole_patches, "cube": cube_patches, "cylinder": cylinder_patches}


# ---------------------------------------------------------------- hole O-grid


def hole_mesh(degree: int = 2, sectors: int = 16, layers: int = 3, radius: float = HOLE_RADIUS,
              grading: float = 1.0) -> HighOrderMesh:
    """Straight-sided O-grid between the circle and the square; every node free.

    Vertices lie on rays at equal angles, blended linearly from the circle to
    the square outline, so inner boundary edges are chords of the circle.
    """
    if sectors % 8:
        raise ValueError("sectors must be a multiple of 8 so the square corners are vertices")
    th = 2.0 * np.pi * np.arange(sectors) / sectors
    ray = np.c_[np.cos(th), np.sin(th)]
    inner = radius * ray
    outer = 0.5 * ray / np.abs(ray).max(axis=1)[:, None]
    # layer k sits at fraction (g^k - 1) / (g^layers - 1) of the ray; g = 1 is uniform
    k = np.arange(layers + 1, dtype=float)
    t = k / layers if grading == 1.0 else (grading ** k - 1.0) / (grading ** layers - 1.0)
    V = (1 - t)[:, None, None] * inner[None] + t[:, None, None] * outer[None]  # (layers+1, sectors, 2)

    def vid(i, k):
        return i * sectors + k % sectors

    tris = []
    for i in range(layers):
        for k in range(sectors):
            a, b, c, e = vid(i, k), vid(i, k + 1), vid(i + 1, k + 1), vid(i + 1, k)
            tris += [(a, c, b), (a, e, c)]
    verts = V.reshape(-1, 2)
    lat = lattice_indices(2, degree)
    key_to_id: dict = {}
    nodes = []

    def node_id(key, x):
        if key not in key_to_id:
            key_to_id[key] = len(nodes)
            nodes.append(x)
        return key_to_id[key]

    elements = []
    for tri in tris:
        conn = []
        for a in lat:
            bary = np.array([degree - a.sum(), *a])
            key = tuple(sorted((int(tri[j]), int(bary[j])) for j in range(3) if bary[j] > 0))
            x = (bary[:, None] * verts[list(tri)]).sum(axis=0) / degree
            conn.append(node_id(key, x))
        elements.append(conn)
    mesh = HighOrderMesh(2, degree, np.array(nodes), np.array(elements, dtype=np.int64))
    boundary = []
    for e, fv in boundary_faces(mesh):
        fn = facet_from_face(mesh, e, fv)
        ends = mesh.nodes[fn[:2]]
        if np.allclose(np.linalg.norm(ends, axis=1), radius, rtol=0, atol=1e-12):
            tags = ("circle",)
        else:
            tags = (_side_of(ends.mean(axis=0)),)
        boundary.append(BoundaryFacet(tuple(int(i) for i in fn), tags))
    mesh = HighOrderMesh(2, degree, mesh.nodes, mesh.elements, tuple(boundary))
    return mesh.with_dofs((), boundary_node_entities(mesh))


def _side_of(x) -> str:
    if abs(x[1] + 0.5) < 1e-12:
        return "ymin"
    if abs(x[0] - 0.5) < 1e-12:
        return "xmax"
    if abs(x[1] - 0.5) < 1e-12:
        return "ymax"
    return "xmin"


# ---------------------------------------------------------------- files


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=None, sort_keys=True))


def generate_fixtures(out_dir, scale: float = 1.0) -> dict:
    """Write every fixture file into ``out_dir`` and return the manifest.

    ``scale`` is the metric size-normalization factor applied to every
    metric file; it does not change element qualities.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"meshes": {}, "metrics": {}, "models": {}, "configs": {}}

    def put_mesh(name, mesh):
        _dump(mesh_to_dict(mesh), out / f"{name}.json")
        files["meshes"][name] = {"file": f"{name}.json", "nodes": mesh.n_nodes, "elements": mesh.n_elements,
                                 "degree": mesh.degree, "dim": mesh.dim}

    for p in SQUARE_DIVISIONS:
        put_mesh(f"square_p{p}", square_mesh(p))
        put_mesh(f"background_2d_p{p}", background_mesh(2, p))
        field = background_field(2, p, scale)
        _dump(metric_to_dict(field, f"background_2d_p{p}.json"), out / f"metric_2d_p{p}.json")
        files["metrics"][f"metric_2d_p{p}"] = {"file": f"metric_2d_p{p}.json", "background": f"background_2d_p{p}"}
    for p in CUBE_DIVISIONS:
        put_mesh(f"cube_p{p}", cube_mesh(p))
    put_mesh("background_3d_p1", background_mesh(3, 1))
    _dump(metric_to_dict(background_field(3, 1, scale), "background_3d_p1.json"), out / "metric_3d_p1.json")
    files["metrics"]["metric_3d_p1"] = {"file": "metric_3d_p1.json", "background": "background_3d_p1"}
    for d in (2, 3):
        _dump(metric_to_dict(boundary_layer_metric(d, scale)), out / f"metric_{d}d_analytic.json")
        files["metrics"][f"metric_{d}d_analytic"] = {"file": f"metric_{d}d_analytic.json"}
    put_mesh("hole_p2", hole_mesh(2))
    for name, build in MODEL_BUILDERS.items():
        _dump(model_to_dict(build()), out / f"model_{name}.json")
        files["models"][name] = {"file": f"model_{name}.json"}
    save_config(RunConfig(), out / "config.json")
    files["configs"]["default"] = {"file": "config.json"}
    compare = []
    for p in SQUARE_DIVISIONS:
        compare.append({"mesh": f"square_p{p}.json", "model": "model_square.json", "config": "config.json",
                        "analytic": "metric_2d_analytic.json", "discrete": f"metric_2d_p{p}.json"})
    manifest = {"files": files, "compare": compare, "metric_scale": scale}
    _dump(manifest, out / "manifest.json")
    return manifest
