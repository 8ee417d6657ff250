"""Central finite-difference checks of every analytic derivative in the pipeline.

Each suite draws random admissible points from a seeded generator and reports
the worst relative error of the gradient and of the Hessian.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fixtures
from .basis import evaluate_basis
from .config import PenaltyConfig
from .distortion import default_rule, functional
from .implicit import ImplicitModel, load_model
from .mesh import HighOrderMesh, check_validity, load_mesh
from .metric import load_metric
from .objective import combined_objective

GRADIENT_TOL = 1e-5
HESSIAN_TOL = 1e-3
SUITES = ("metric", "implicit-hole", "implicit-cylinder", "distortion", "objective")


@dataclass(frozen=True)
class CheckResult:
    name: str
    points: int
    gradient_error: float
    hessian_error: float

    @property
    def passed(self) -> bool:
        return self.gradient_error <= GRADIENT_TOL and self.hessian_error <= HESSIAN_TOL

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<18} points={self.points:<4d} grad_rel_err={self.gradient_error:.3e} "
                f"hess_rel_err={self.hessian_error:.3e} {status}")


def _rel(analytic, fd, floor=1e-12) -> float:
    """Worst per-point error relative to the point's largest FD entry."""
    analytic = np.asarray(analytic).reshape(len(fd), -1)
    fd = np.asarray(fd).reshape(len(fd), -1)
    scale = np.maximum(np.abs(fd).max(axis=1), floor)
    return float((np.abs(analytic - fd).max(axis=1) / scale).max())


def _corrupt(g, on: bool):
    if not on:
        return g
    return np.asarray(g, dtype=float) * (1.0 + 1e-3)


def check_metric(field, n_points: int, rng, h: float = 1e-6, corrupt: bool = False) -> CheckResult:
    """dM and d2M of a metric source against differences of M and dM."""
    bg = getattr(field, "mesh", None)
    d = field.dim
    pts = []
    while len(pts) < n_points:
        if bg is None:
            x = rng.uniform(-0.45, 0.45, size=(n_points, d))
        else:
            # forward-map points well inside random background elements
            bary = 0.02 + 0.98 * rng.dirichlet(np.ones(d + 1), size=n_points)
            bary /= bary.sum(axis=1, keepdims=True)
            N = evaluate_basis(bg.basis, bary[:, 1:], check=False)
            el = rng.integers(bg.n_elements, size=n_points)
            x = np.einsum("pn,pnd->pd", N, bg.nodes[bg.elements[el]])
        stencil = x[:, None, :] + h * np.concatenate([np.eye(d), -np.eye(d)])[None]
        ev = field.evaluate(np.vstack([x, stencil.reshape(-1, d)]), 0)
        if ev.element is None:
            pts.extend(x)
            continue
        el = ev.element
        same = (el[len(x):].reshape(len(x), 2 * d) == el[: len(x), None]).all(axis=1)
        pts.extend(x[same])
    x = np.array(pts[:n_points])
    ev = field.evaluate(x, 2)
    dM = _corrupt(ev.dM, corrupt)
    fd1 = np.zeros_like(ev.dM)
    fd2 = np.zeros_like(ev.d2M)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        p = field.evaluate(x + e, 1)
        m = field.evaluate(x - e, 1)
        fd1[:, j] = (p.M - m.M) / (2 * h)
        fd2[:, j] = (p.dM - m.dM) / (2 * h)
    return CheckResult("metric", len(x), _rel(dM, fd1), _rel(ev.d2M, fd2))


def check_implicit(model: ImplicitModel, n_points: int, rng, name: str, h: float = 1e-6,
                   min_value: float = 1e-2, corrupt: bool = False) -> CheckResult:
    """Model gradient and Hessian away from the zero set."""
    pts = np.vstack([tp.patch.points for lst in model.entities.values() for tp in lst])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    d = model.dim
    keep = []
    while len(keep) < n_points:
        x = rng.uniform(lo, hi, size=(4 * n_points, d))
        v = model.evaluate(x).value
        keep.extend(x[np.isfinite(v) & (v > min_value)])
    x = np.array(keep[:n_points])
    r = model.evaluate(x)
    grad = _corrupt(r.grad, corrupt)
    hess = r.hess / r.value[:, None, None]
    fd1 = np.zeros_like(r.grad)
    fd2 = np.zeros_like(hess)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        p = model.evaluate(x + e)
        m = model.evaluate(x - e)
        fd1[:, j] = (p.value - m.value) / (2 * h)
        fd2[:, :, j] = (p.grad - m.grad) / (2 * h)
    return CheckResult(name, len(x), _rel(grad, fd1), _rel(hess, fd2))


def _perturbed(mesh: HighOrderMesh, rng, amplitude: float) -> HighOrderMesh:
    for _ in range(20):
        cand = mesh.with_nodes(mesh.nodes + rng.uniform(-amplitude, amplitude, mesh.nodes.shape))
        if check_validity(cand).valid:
            return cand
        amplitude *= 0.5
    return mesh


def _mesh_fd(evaluate, x0, dofs_to_check, h):
    """Central differences of value and gradient along the selected coordinates."""
    g_fd, H_fd = [], []
    for k in dofs_to_check:
        e = np.zeros_like(x0)
        e[k] = h
        p = evaluate(x0 + e)
        m = evaluate(x0 - e)
        g_fd.append((p[0] - m[0]) / (2 * h))
        H_fd.append((p[1] - m[1]) / (2 * h))
    return np.array(g_fd), np.array(H_fd)


def check_functional(mesh, field, n_dofs: int, rng, model=None, lam: float = 1e4, h: float = 1e-6,
                     corrupt: bool = False, name: str = "distortion") -> CheckResult:
    """Gradient and Hessian of F (or H = F + lam G with a model) over free DOFs."""
    mesh = _perturbed(mesh, rng, 0.02 * mesh.bbox_diagonal() / max(1, mesh.n_elements ** (1 / mesh.dim)))
    dofs = mesh.free_dofs()
    rule = default_rule(mesh)
    flat0 = mesh.nodes.ravel().copy()

    def value(x, order):
        flat = flat0.copy()
        flat[dofs] = x
        m = mesh.with_nodes(flat)
        if model is None:
            v = functional(m, None, rule, field, order, dofs=dofs)
            return v.value, v.gradient, v.hessian
        v = combined_objective(m, field, model, PenaltyConfig(lam), order, rule, dofs)
        return v.H, v.gradient, v.hessian

    x0 = flat0[dofs]
    _, g, H = value(x0, 2)
    g = _corrupt(g, corrupt)
    pick = np.sort(rng.choice(len(dofs), size=min(n_dofs, len(dofs)), replace=False))
    g_fd, H_fd = _mesh_fd(lambda x: value(x, 1)[:2], x0, pick, h)
    gerr = float(np.abs(g[pick] - g_fd).max() / max(np.abs(g_fd).max(), 1e-12))
    Hd = H.toarray()[pick]
    herr = float(np.abs(Hd - H_fd).max() / max(np.abs(H_fd).max(), 1e-12))
    return CheckResult(name, len(pick), gerr, herr)


@dataclass
class CheckInputs:
    square: HighOrderMesh
    field: object
    hole_mesh: HighOrderMesh
    hole_model: ImplicitModel
    cylinder_model: ImplicitModel


def inputs_from_dir(fixtures_dir=None) -> CheckInputs:
    """Load the fixture files, or build them in memory when no directory is given."""
    if fixtures_dir is None:
        return CheckInputs(fixtures.square_mesh(2), fixtures.background_field(2, 2), fixtures.hole_mesh(2),
                           fixtures.model("hole"), fixtures.model("cylinder"))
    d = Path(fixtures_dir)
    return CheckInputs(load_mesh(d / "square_p2.json"), load_metric(d / "metric_2d_p2.json"),
                       load_mesh(d / "hole_p2.json"), load_model(d / "model_hole.json"),
                       load_model(d / "model_cylinder.json"))


def run_checks(inputs: CheckInputs, seed: int = 0, n_points: int = 100, n_dofs: int = 24,
               corrupt: str | None = None) -> list[CheckResult]:
    if corrupt is not None and corrupt not in SUITES:
        raise ValueError(f"unknown suite {corrupt!r}; choose from {SUITES}")
    rng = np.random.default_rng(seed)
    return [
        check_metric(inputs.field, n_points, rng, corrupt=corrupt == "metric"),
        check_implicit(inputs.hole_model, n_points, rng, "implicit-hole", corrupt=corrupt == "implicit-hole"),
        check_implicit(inputs.cylinder_model, n_points, rng, "implicit-cylinder",
                       corrupt=corrupt == "implicit-cylinder"),
        check_functional(inputs.square, inputs.field, n_dofs, rng, corrupt=corrupt == "distortion"),
        check_functional(inputs.hole_mesh, inputs.field, n_dofs, rng, model=inputs.hole_model,
                         corrupt=corrupt == "objective", name="objective"),
    ]
