"""Newton minimization with truncated preconditioned CG and a halving line search.

Every accepted iterate has a finite objective, which is how mesh validity
is preserved: inverted elements evaluate to +inf.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SolverConfig


class SolverPreconditionError(ValueError):
    pass


@dataclass
class IterationRecord:
    iter: int
    H: float
    F: float
    G: float
    rms_residual: float
    step: float
    cg_iters: int
    halvings: int


@dataclass
class SolverReport:
    records: list = field(default_factory=list)
    reason: str = ""

    @property
    def converged(self) -> bool:
        return self.reason in ("residual", "step-length")

    def H_values(self) -> np.ndarray:
        return np.array([r.H for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "H", "F", "G", "rms_residual", "step", "cg_iters", "halvings"])
            for r in self.records:
                w.writerow([r.iter, repr(r.H), repr(r.F), repr(r.G), repr(r.rms_residual), repr(r.step),
                            r.cg_iters, r.halvings])


def _preconditioner(H, kind: str):
    if kind == "ilu":
        try:
            ilu = spla.spilu(sp.csc_matrix(H), drop_tol=1e-5, fill_factor=10)
            return ilu.solve
        except RuntimeError:
            pass
    diag = np.abs(H.diagonal()) if sp.issparse(H) else np.abs(np.diag(H))
    inv = 1.0 / np.maximum(diag, 1e-12)
    return lambda r: inv * r


def newton_step(gradient, hessian, preconditioner=None, config: SolverConfig | None = None):
    """Approximate solution of hessian @ s = -gradient by truncated PCG.

    Stops at negative curvature; falls back to preconditioned steepest
    descent if that happens on the first direction.  Returns (s, cg_iters).
    """
    config = config or SolverConfig()
    g = np.asarray(gradient, dtype=float)
    gnorm = np.linalg.norm(g)
    if gnorm == 0:
        return np.zeros_like(g), 0
    Minv = preconditioner or _preconditioner(hessian, config.preconditioner)
    matvec = (lambda v: hessian @ v)
    s = np.zeros_like(g)
    r = -g
    z = Minv(r)
    p = z.copy()
    rz = r @ z
    k = 0
    for k in range(1, config.cg_max_iter + 1):
        Hp = matvec(p)
        curv = p @ Hp
        if curv <= 0:
            if k == 1:
                s = z.copy()
            break
        a = rz / curv
        s += a * p
        r -= a * Hp
        if np.linalg.norm(r) <= config.cg_rtol * gnorm:
            break
        z = Minv(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not s @ g < 0:
        s = -g
    return s, k


def line_search(evaluate: Callable, x, s, H0: float, g0, config: SolverConfig | None = None):
    """Halve alpha from 1 until H(x + alpha s) is finite and decreases enough.

    Returns (alpha, value, halvings); alpha is None when halvings ran out.
    """
    config = config or SolverConfig()
    slope = float(np.dot(s, g0))
    if not slope < 0:
        raise SolverPreconditionError("search direction is not a descent direction")
    alpha = 1.0
    for halvings in range(config.max_halvings + 1):
        val = evaluate(x + alpha * s)
        ok = val.finite
        if ok and config.sufficient_decrease:
            ok = val.H <= H0 + config.armijo * alpha * slope
        elif ok:
            ok = val.H < H0
        if ok:
            return alpha, val, halvings
        alpha *= 0.5
    return None, None, config.max_halvings


def minimize(objective: Callable, x0, config: SolverConfig | None = None, callback=None):
    """Minimize ``objective(x, order)`` from ``x0``.

    ``objective`` returns an object with H, F, G, gradient, hessian and a
    ``finite`` flag.  Returns (x, SolverReport).
    """
    config = config or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    cur = objective(x, 2)
    if not cur.finite:
        raise SolverPreconditionError("initial objective is infinite (invalid starting mesh)")
    n = max(len(x), 1)
    report = SolverReport()
    rms = float(np.linalg.norm(cur.gradient) / np.sqrt(n)) if len(x) else 0.0
    report.records.append(IterationRecord(0, cur.H, cur.F, cur.G, rms, 0.0, 0, 0))
    if callback:
        callback(x, cur)
    if rms <= config.tolerance:
        report.reason = "residual"
        return x, report
    for it in range(1, config.max_iterations + 1):
        Minv = _preconditioner(cur.hessian, config.preconditioner)
        s, cg_iters = newton_step(cur.gradient, cur.hessian, Minv, config)
        alpha, trial, halvings = line_search(lambda y: objective(y, 0), x, s, cur.H, cur.gradient, config)
        if alpha is None:
            report.reason = "stalled"
            break
        x = x + alpha * s
        step = float(alpha * np.linalg.norm(s))
        cur = objective(x, 2)
        rms = float(np.linalg.norm(cur.gradient) / np.sqrt(n))
        report.records.append(IterationRecord(it, cur.H, cur.F, cur.G, rms, step, cg_iters, halvings))
        if callback:
            callback(x, cur)
        if rms <= config.tolerance:
            report.reason = "residual"
            break
        if step <= config.step_tolerance:
            report.reason = "step-length"
            break
    else:
        report.reason = "max-iter"
    return x, report
