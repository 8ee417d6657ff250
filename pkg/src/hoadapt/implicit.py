"""Implicit representations of rational Bezier patches and boundary models.

Pipeline per patch:

1. moving-hyperplane matrix representation ``Mrep``: ``gamma(x) = det(M(x) M(x)^T)``
   vanishes on the patch;
2. normalization ``gamma / |grad gamma|`` (about half the distance near the patch);
3. trimming with the normalized convex hull of the control points;
4. r-conjunction folds over patches, entities and the model.

Patch-side derivative stacks are *scaled*: ``(v, grad v, v * hess v)``, so
nothing blows up where ``v`` vanishes.  The hull side keeps plain Hessians.
All evaluators are batched over a leading point axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import ConvexHull, QhullError

NULL_CUTOFF = 1e-10
RANK_DROP_TOL = 1e-8
DEGENERATE_RATIO = 1e-9
EXTRUDE_FRACTION = 1e-2
CURVE_MAX_DEGREE = {2: 4, 3: 3}
SURFACE_MAX_DEGREE = (2, 2)


class ImplicitizationError(RuntimeError):
    pass


class GeometryError(RuntimeError):
    pass


class NormalizationError(ArithmeticError):
    pass


# ---------------------------------------------------------------- patches


def bernstein(n: int, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)[..., None]
    k = np.arange(n + 1)
    c = np.array([comb(n, i) for i in k], dtype=float)
    return c * u ** k * (1.0 - u) ** (n - k)


@dataclass(frozen=True)
class BezierPatch:
    """Rational Bezier curve (degree p) or tensor surface (degree (m, n)).

    Surface control points are listed row-major: index i * (n + 1) + j.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: tuple
    entity: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        deg = tuple(int(x) for x in np.atleast_1d(self.degree))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "degree", deg)
        if np.any(w <= 0):
            raise ValueError("patch weights must be positive")
        need = int(np.prod([d + 1 for d in deg]))
        if len(pts) != need or len(w) != need:
            raise ValueError(f"degree {deg} needs {need} control points and weights, got {len(pts)}/{len(w)}")
        if pts.shape[1] not in (2, 3):
            raise ValueError("embedding dimension must be 2 or 3")
        if len(deg) > pts.shape[1] - 1:
            raise ValueError("parametric dimension must be below the embedding dimension")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def param_dim(self) -> int:
        return len(self.degree)

    def homogeneous(self) -> np.ndarray:
        return np.hstack([self.points * self.weights[:, None], self.weights[:, None]])

    def evaluate(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.param_dim == 1:
            B = bernstein(self.degree[0], u.reshape(-1))
        else:
            u = u.reshape(-1, 2)
            B1 = bernstein(self.degree[0], u[:, 0])
            B2 = bernstein(self.degree[1], u[:, 1])
            B = np.einsum("pi,pj->pij", B1, B2).reshape(len(u), -1)
        h = B @ self.homogeneous()
        return h[:, :-1] / h[:, -1:]

    def sample_parameters(self, count: int, rng=None) -> np.ndarray:
        if rng is None:
            if self.param_dim == 1:
                return np.linspace(0.0, 1.0, count)
            k = int(np.ceil(np.sqrt(count)))
            g = np.linspace(0.0, 1.0, k)
            return np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)[:count]
        return rng.uniform(0.0, 1.0, (count, self.param_dim)).squeeze(-1 if self.param_dim == 1 else ())

    def split(self, u: float) -> tuple["BezierPatch", "BezierPatch"]:
        """De Casteljau subdivision of a curve at parameter u."""
        if self.param_dim != 1:
            raise ValueError("only curves can be split")
        c = self.homogeneous()
        left, right = [c[0]], [c[-1]]
        while len(c) > 1:
            c = (1.0 - u) * c[:-1] + u * c[1:]
            left.append(c[0])
            right.append(c[-1])
        out = []
        for h in (np.array(left), np.array(right[::-1])):
            out.append(BezierPatch(h[:, :-1] / h[:, -1:], h[:, -1], self.degree, self.entity))
        return out[0], out[1]

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


# ---------------------------------------------------------------- matrix representation


@dataclass(frozen=True)
class Mrep:
    """Matrix family with M(x)[k, r] = sum_c tensor[k, r, c] * (x, 1)[c]."""

    tensor: np.ndarray  # (K, R, D + 1)
    nu: tuple

    @property
    def rows(self) -> int:
        return self.tensor.shape[0]

    def matrix(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xh = np.hstack([x, np.ones((len(x), 1))])
        return np.einsum("krc,pc->pkr", self.tensor, xh)

    def gamma(self, x) -> np.ndarray:
        M = self.matrix(x)
        return np.linalg.det(M @ np.swapaxes(M, -1, -2))


def _collocation(c: np.ndarray, degree, nu) -> np.ndarray:
    """Matrix mapping moving-hyperplane coefficients to the Bernstein
    coefficients of L(u) . P(u) (homogeneous control coefficients c)."""
    Dh = c.shape[1]
    if len(degree) == 1:
        p, v = degree[0], nu[0]
        S = np.zeros((v + p + 1, (v + 1) * Dh))
        for k in range(v + 1):
            for i in range(p + 1):
                coef = comb(v, k) * comb(p, i) / comb(v + p, k + i)
                S[k + i, k * Dh:(k + 1) * Dh] += coef * c[i]
        return S
    (m, n), (v1, v2) = degree, nu
    rows2 = v2 + n + 1
    S = np.zeros(((v1 + m + 1) * rows2, (v1 + 1) * (v2 + 1) * Dh))
    for k1 in range(v1 + 1):
        for k2 in range(v2 + 1):
            col = (k1 * (v2 + 1) + k2) * Dh
            for i1 in range(m + 1):
                c1 = comb(v1, k1) * comb(m, i1) / comb(v1 + m, k1 + i1)
                for i2 in range(n + 1):
                    c2 = comb(v2, k2) * comb(n, i2) / comb(v2 + n, k2 + i2)
                    S[(k1 + i1) * rows2 + k2 + i2, col:col + Dh] += c1 * c2 * c[i1 * (n + 1) + i2]
    return S


def _null_space(S: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(S, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > NULL_CUTOFF * smax)) if smax > 0 else 0
    return Vt[rank:]


def _rank_drop_ok(mrep: Mrep, patch: BezierPatch) -> bool:
    u = patch.sample_parameters(50)
    on = np.linalg.svd(mrep.matrix(patch.evaluate(u)), compute_uv=False)
    if np.any(on[:, -1] > RANK_DROP_TOL * on[:, 0]):
        return False
    rng = np.random.default_rng(12345)
    x = patch.evaluate(patch.sample_parameters(12, rng))
    diag = max(patch.bbox_diagonal(), 1e-12)
    dirs = rng.normal(size=x.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    off = np.linalg.svd(mrep.matrix(x + 0.1 * diag * dirs), compute_uv=False)
    return bool(np.all(off[:, -1] > 1e-6 * off[:, 0]))


def _nu_candidates(patch: BezierPatch):
    if patch.param_dim == 1:
        p = patch.degree[0]
        return [(v,) for v in range(max(p - 1, 0), 2 * p + 1)]
    m, n = patch.degree
    cands = [(a, b) for a in range(2 * m + 2) for b in range(2 * n + 2)]
    cands.sort(key=lambda v: ((v[0] + 1) * (v[1] + 1), v[0] + v[1], v))
    return cands


def implicitize_patch(patch: BezierPatch) -> Mrep:
    """Moving-hyperplane representation whose rank drops on the patch."""
    if patch.param_dim == 1:
        if patch.degree[0] > CURVE_MAX_DEGREE[patch.dim]:
            raise ImplicitizationError(f"curve degree {patch.degree[0]} unsupported in {patch.dim}D")
    elif any(a > b for a, b in zip(patch.degree, SURFACE_MAX_DEGREE)):
        raise ImplicitizationError(f"surface bidegree {patch.degree} unsupported")
    # work in centred, scaled coordinates for conditioning
    centre = 0.5 * (patch.points.max(axis=0) + patch.points.min(axis=0))
    scale = max(patch.bbox_diagonal(), 1e-300)
    local = BezierPatch((patch.points - centre) / scale, patch.weights, patch.degree)
    c = local.homogeneous()
    D = patch.dim
    for nu in _nu_candidates(patch):
        S = _collocation(c, patch.degree, nu)
        null = _null_space(S)
        K = int(np.prod([v + 1 for v in nu]))
        if null.shape[0] < K:
            continue
        T = null.reshape(-1, K, D + 1).transpose(1, 0, 2)  # (K, R, D+1)
        # back to physical coordinates: a . ((x - c)/s, 1)
        phys = np.empty_like(T)
        phys[..., :D] = T[..., :D] / scale
        phys[..., D] = T[..., D] - T[..., :D] @ centre / scale
        mrep = Mrep(phys, nu)
        if _rank_drop_ok(mrep, patch):
            return mrep
    raise ImplicitizationError(f"no moving-hyperplane degree passed the rank-drop check for patch {patch.entity!r}")


# ---------------------------------------------------------------- determinant layer


@dataclass
class ImplicitDerivatives:
    """Value, gradient and scaled Hessian (value * Hessian) at a batch of points.

    ``third`` holds the doubly-scaled third derivative when available.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray | None = None

    def __getitem__(self, i):
        return ImplicitDerivatives(self.value[i], self.grad[i], self.hess[i],
                                   None if self.third is None else self.third[i])


def _excluded_products(lam):
    K = lam.shape[1]
    out = np.empty_like(lam)
    for i in range(K):
        out[:, i] = np.prod(np.delete(lam, i, axis=1), axis=1)
    return out


@dataclass
class _DetLayer:
    gamma: np.ndarray
    grad: np.ndarray
    hess: np.ndarray  # gamma * hess gamma
    third: np.ndarray  # gamma^2 * third gamma
    sing: np.ndarray  # singular values, descending
    degenerate: np.ndarray  # points treated as on the zero set
    normal: np.ndarray  # limit unit normal at degenerate points (zeros elsewhere)
    multiplicity: np.ndarray
    hess_trace: np.ndarray  # trace of the limit Hessian using the smallest singular value


def _det_layer(mrep: Mrep, x) -> _DetLayer:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P, D = x.shape
    T = mrep.tensor
    K = T.shape[0]
    Mx = mrep.matrix(x)  # (P, K, R)
    U, s, Vt = np.linalg.svd(Mx, full_matrices=False)  # U (P,K,K), Vt (P,K,R)
    lam = s ** 2
    a = _excluded_products(lam)
    gamma = np.prod(lam, axis=1)
    Mj = T[..., :D]  # (K, R, D)
    G = np.einsum("pik,irj->pjkr", U, Mj)  # U^T M_j  (P, D, K, R)
    Ej = np.einsum("pjkr,pmr,pm->pjkm", G, Vt, s)
    Ej = Ej + np.swapaxes(Ej, -1, -2)
    Ejk = np.einsum("pjkr,plmr->pjlkm", G, G)
    Ejk = Ejk + np.swapaxes(Ejk, 1, 2)
    diagE = np.diagonal(Ej, axis1=-2, axis2=-1)  # (P, D, K)
    grad = np.einsum("pk,pjk->pj", a, diagE)
    # B_k = gamma d_k adj, in the eigenbasis
    sum_a_diag = np.einsum("pm,pjm->pj", a, diagE)
    B = -np.einsum("pi,pjil,pl->pjil", a, Ej, a)
    idx = np.arange(K)
    B[:, :, idx, idx] = a[:, None, :] * (sum_a_diag[:, :, None] - a[:, None, :] * diagE)
    gA = gamma[:, None] * a  # gamma * adj eigenvalues
    hess = np.einsum("pkil,pjli->pjk", B, Ej) + np.einsum("pi,pjkii->pjk", gA, Ejk)
    # gamma^2 d_kl adj
    A = a
    BE = np.einsum("plim,pkmn->pklin", B, Ej)  # B_l E_k
    BEA = BE * A[:, None, None, None, :]
    AEB = np.einsum("pi,pkim,plmn->pklin", A, Ej, B)
    AEklA = A[:, None, None, :, None] * Ejk * A[:, None, None, None, :]
    g2A = (hess[:, :, :, None, None] * np.eye(K)[None, None, None] * A[:, None, None, None, :]
           + grad[:, :, None, None, None] * B[:, None, :, :, :]
           - grad[:, None, :, None, None] * B[:, :, None, :, :]
           - BEA - AEB - gamma[:, None, None, None, None] * AEklA)
    third = (np.einsum("pklin,pjni->pjkl", g2A, Ej)
             + gamma[:, None, None, None] * np.einsum("pkin,pjlni->pjkl", B, Ejk)
             + gamma[:, None, None, None] * np.einsum("plin,pjkni->pjkl", B, Ejk))
    third = (third + third.transpose(0, 2, 1, 3) + third.transpose(0, 3, 2, 1)) / 3.0

    # limit data from the smallest singular triple
    smax = np.maximum(s[:, 0], 1e-300)
    ratio = s[:, -1] / smax
    degenerate = ratio < DEGENERATE_RATIO
    mult = np.maximum(1, np.sum(s < 1e-6 * smax[:, None], axis=1))
    v = U[:, :, -1]  # left null vector
    Rdim = Vt.shape[2]
    W_rows = Vt[:, :-1, :]  # right singular vectors of nonzero singular values
    Pperp = np.eye(Rdim)[None] - np.einsum("pir,pis->prs", W_rows, W_rows)
    W = np.einsum("prs,ksj,pk->prj", Pperp, Mj, v)  # (P, R, D)
    Q = np.einsum("prj,prk->pjk", W, W)
    pi_rest = np.prod(lam[:, :-1], axis=1)
    hess_trace = 2.0 * pi_rest * np.trace(Q, axis1=1, axis2=2)
    w_eig, v_eig = np.linalg.eigh(Q)
    normal = v_eig[:, :, -1]
    first = np.argmax(np.abs(normal) > 1e-12, axis=1)
    sign = np.sign(normal[np.arange(P), first])
    normal = normal * np.where(sign == 0, 1.0, sign)[:, None]
    normal = np.where(degenerate[:, None], normal, 0.0)
    return _DetLayer(gamma, grad, hess, third, s, degenerate, normal, mult, hess_trace)


def determinant_layer(mrep: Mrep, x) -> ImplicitDerivatives:
    """gamma = det(M M^T) with gradient, gamma * Hessian and gamma^2 * third derivative."""
    L = _det_layer(mrep, x)
    return ImplicitDerivatives(L.gamma, L.grad, L.hess, L.third)


# ---------------------------------------------------------------- normalization


def normalize(gamma, grad, hess_scaled, third_scaled, raise_on_zero: bool = False):
    """Scaled normalization: returns (g, grad g, g * hess g) for g = gamma / |grad gamma|.

    Inputs are gamma, grad gamma, gamma * hess gamma and gamma^2 * third gamma.
    Points with vanishing gradient and gamma > 0 map to +inf.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    grad = np.atleast_2d(np.asarray(grad, dtype=float))
    hs = np.asarray(hess_scaled, dtype=float).reshape(len(gamma), grad.shape[1], grad.shape[1])
    ts = np.asarray(third_scaled, dtype=float).reshape(len(gamma), *(grad.shape[1],) * 3)
    m = np.linalg.norm(grad, axis=1)
    zero = m <= 0
    if raise_on_zero and np.any(zero):
        raise NormalizationError("gradient vanishes; normalization undefined")
    ms = np.where(zero, 1.0, m)
    val = gamma / ms
    gm = np.einsum("pjk,pk->pj", hs, grad) / ms[:, None] ** 2  # ghat * grad m
    gv = (grad - gm) / ms[:, None]
    ghH = hs / ms[:, None, None]  # ghat * hess gamma
    g2T = ts / ms[:, None, None, None] ** 2  # ghat^2 * third gamma
    g2m = (np.einsum("pjkl,pl->pjk", g2T, grad) + np.einsum("pjl,plk->pjk", ghH, ghH)
           - np.einsum("pj,pk->pjk", gm, gm)) / ms[:, None, None]
    sym = np.einsum("pj,pk->pjk", gv, gm)
    hv = (ghH - g2m - sym - np.swapaxes(sym, -1, -2)) / ms[:, None, None]
    crit = zero & (gamma > 0)
    val = np.where(crit, np.inf, np.where(zero, 0.0, val))
    gv = np.where(zero[:, None], 0.0, gv)
    hv = np.where(zero[:, None, None], 0.0, hv)
    return val, gv, hv


def normalize_plain(gamma, grad, hess, third):
    """Unscaled normalization with plain Hessian output (hull side)."""
    m = np.linalg.norm(grad, axis=1)
    zero = m <= 0
    ms = np.where(zero, 1.0, m)
    val = gamma / ms
    dm = np.einsum("pjk,pk->pj", hess, grad) / ms[:, None]
    d2m = (np.einsum("pjkl,pl->pjk", third, grad) + np.einsum("pjl,plk->pjk", hess, hess)
           - np.einsum("pj,pk->pjk", dm, dm)) / ms[:, None, None]
    gv = (grad - val[:, None] * dm) / ms[:, None]
    sym = np.einsum("pj,pk->pjk", gv, dm)
    hv = (hess - sym - np.swapaxes(sym, -1, -2) - val[:, None, None] * d2m) / ms[:, None, None]
    val = np.where(zero, np.where(gamma > 0, np.inf, np.where(gamma < 0, gamma, 0.0)), val)
    gv = np.where(zero[:, None], 0.0, gv)
    hv = np.where(zero[:, None, None], 0.0, hv)
    return val, gv, hv


# ---------------------------------------------------------------- r-conjunction and trimming


def r_conjunction(f, gf, hf, g, gg, hg):
    """Scaled r-conjunction of nonnegative operands.

    Inputs and outputs are (value, grad, value * Hessian).  +inf operands act
    as the identity.  At a joint zero the gradient of sqrt(f^2 + g^2) is 0.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    finf, ginf = np.isinf(f), np.isinf(g)
    fz = np.where(finf, 0.0, f)
    gz = np.where(ginf, 0.0, g)
    s = np.hypot(fz, gz)
    den = fz + gz + s
    pos = den > 0
    dsafe = np.where(pos, den, 1.0)
    ssafe = np.where(s > 0, s, 1.0)
    c = np.where(pos, 2.0 * fz * gz / dsafe, 0.0)
    ds = np.where((s > 0)[:, None], (fz[:, None] * gf + gz[:, None] * gg) / ssafe[:, None], 0.0)
    dc = gf + gg - ds
    cf = np.where(pos, 2.0 * gz / dsafe, 0.0)
    cg = np.where(pos, 2.0 * fz / dsafe, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):  # subnormal operands underflow the product
        cs = np.where(pos & (s > 0), 2.0 * fz * gz / (ssafe * dsafe), 0.0)
    outer = lambda a: np.einsum("pj,pk->pjk", a, a)
    sHs = outer(gf) + hf + outer(gg) + hg - outer(ds)
    hc = cf[:, None, None] * hf + cg[:, None, None] * hg - cs[:, None, None] * sHs
    # infinite operands
    c = np.where(finf, g, np.where(ginf, f, c))
    dc = np.where(finf[:, None], gg, np.where(ginf[:, None], gf, dc))
    hc = np.where(finf[:, None, None], hg, np.where(ginf[:, None, None], hf, hc))
    return c, dc, hc


def r_conjunction_plain(f, gf, hf, tf, g, gg, hg, tg):
    """General-sign r-conjunction with plain derivatives up to third order."""
    q = f * f + g * g
    qj = 2.0 * (f[:, None] * gf + g[:, None] * gg)
    qjk = 2.0 * (np.einsum("pj,pk->pjk", gf, gf) + f[:, None, None] * hf
                 + np.einsum("pj,pk->pjk", gg, gg) + g[:, None, None] * hg)

    def sq3(v, dv, hv, tv):
        t = np.einsum("pjk,pl->pjkl", hv, dv)
        return 2.0 * (t + t.transpose(0, 1, 3, 2) + t.transpose(0, 3, 2, 1)) + 2.0 * v[:, None, None, None] * tv

    qjkl = sq3(f, gf, hf, tf) + sq3(g, gg, hg, tg)
    pos = q > 0
    qs = np.where(pos, q, 1.0)
    rt = np.sqrt(qs)
    p1 = np.where(pos, 0.5 / rt, 0.0)
    p2 = np.where(pos, -0.25 / (rt * qs), 0.0)
    p3 = np.where(pos, 0.375 / (rt * qs * qs), 0.0)
    s = np.sqrt(q)
    ds = p1[:, None] * qj
    qq = np.einsum("pj,pk->pjk", qj, qj)
    hs = p2[:, None, None] * qq + p1[:, None, None] * qjk
    t = np.einsum("pjk,pl->pjkl", qjk, qj)
    ts = (p3[:, None, None, None] * np.einsum("pjk,pl->pjkl", qq, qj)
          + p2[:, None, None, None] * (t + t.transpose(0, 1, 3, 2) + t.transpose(0, 3, 2, 1))
          + p1[:, None, None, None] * qjkl)
    return f + g - s, gf + gg - ds, hf + hg - hs, tf + tg - ts


def trim(f, gf, hf, h, gh, hh):
    """Trimmed value sqrt(h^2 + g^2) with g = (sqrt(h^4 + f^2) - f) / 2.

    ``f`` is the hull function with a plain Hessian ``hf``; ``h`` the
    normalized patch function with scaled Hessian ``hh`` (h * hess h).
    Returns (t, grad t, t * hess t).  f = +inf (deep inside the hull) gives t = h.
    """
    f = np.asarray(f, dtype=float)
    h = np.asarray(h, dtype=float)
    finf = np.isposinf(f)
    fz = np.where(finf, 1.0, f)
    h2 = h * h
    q = np.hypot(h2, fz)
    qpos = q > 0
    qs = np.where(qpos, q, 1.0)
    g = np.where(fz > 0, h2 * h2 / (2.0 * np.where(fz > 0, q + fz, 1.0)), 0.5 * (q - fz))
    g = np.where(finf, 0.0, g)
    h3 = h2 * h
    dg = np.where(qpos[:, None], (h3[:, None] * gh - g[:, None] * gf) / qs[:, None], 0.0)
    dq = np.where(qpos[:, None], (2.0 * h3[:, None] * gh + fz[:, None] * gf) / qs[:, None], 0.0)
    outer = lambda a, b: np.einsum("pj,pk->pjk", a, b)
    q2 = qs * qs
    # grad f grad f^T - grad q grad q^T without cancellation
    cross = outer(gh, gf) + outer(gf, gh)
    ff_qq = ((h2 * h2)[:, None, None] * outer(gf, gf) - (2.0 * h3 * fz)[:, None, None] * cross
             - (4.0 * h3 * h3)[:, None, None] * outer(gh, gh)) / q2[:, None, None]
    ghg = (g / (2.0 * qs))[:, None, None] * (6.0 * h2[:, None, None] * outer(gh, gh)
                                           + 2.0 * h2[:, None, None] * hh + ff_qq) \
        - (g * g / qs)[:, None, None] * hf
    ghg = np.where((qpos & ~finf)[:, None, None], ghg, 0.0)
    dg = np.where(finf[:, None], 0.0, dg)
    t = np.hypot(h, g)
    tpos = t > 0
    ts = np.where(tpos, t, 1.0)
    dt = np.where(tpos[:, None], (h[:, None] * gh + g[:, None] * dg) / ts[:, None], gh)
    ht = outer(gh, gh) + hh + outer(dg, dg) + ghg - outer(dt, dt)
    return t, dt, ht


# ---------------------------------------------------------------- hull


@dataclass(frozen=True)
class HullRep:
    normals: np.ndarray  # (F, D) unit, interior-positive: n . x + b >= 0 inside
    offsets: np.ndarray  # (F,)

    def evaluate(self, x):
        """Normalized hull function with gradient and plain Hessian."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P, D = x.shape
        v = x @ self.normals[0] + self.offsets[0]
        g = np.broadcast_to(self.normals[0], (P, D)).copy()
        H = np.zeros((P, D, D))
        T = np.zeros((P, D, D, D))
        for n, b in zip(self.normals[1:], self.offsets[1:]):
            fv = x @ n + b
            fg = np.broadcast_to(n, (P, D))
            v, g, H, T = r_conjunction_plain(v, g, H, T, fv, fg, np.zeros((P, D, D)), np.zeros((P, D, D, D)))
        return normalize_plain(v, g, H, T)

    def raw(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x @ self.normals.T + self.offsets


def extruded_points(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    D = pts.shape[1]
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag <= 0:
        raise GeometryError("control points coincide")
    hw = EXTRUDE_FRACTION * diag
    centred = pts - pts.mean(axis=0)
    _, _, Vt = np.linalg.svd(centred, full_matrices=True)
    out = pts
    for v in Vt:
        proj = pts @ v
        if proj.max() - proj.min() < 2.0 * hw:
            out = np.vstack([out + hw * v, out - hw * v])
    return out


def convex_hull_rep(patch_or_points) -> HullRep:
    pts = patch_or_points.points if isinstance(patch_or_points, BezierPatch) else np.asarray(patch_or_points, float)
    ext = extruded_points(pts)
    try:
        hull = ConvexHull(ext)
    except QhullError as exc:
        raise GeometryError(f"convex hull construction failed: {exc}") from exc
    eq = hull.equations
    normals = -eq[:, :-1]
    offsets = -eq[:, -1]
    # merge coplanar facets (Qhull triangulates in 3D)
    keep = []
    for i in range(len(normals)):
        if not any(np.allclose(normals[i], normals[j], atol=1e-10) and abs(offsets[i] - offsets[j]) < 1e-10
                   for j in keep):
            keep.append(i)
    return HullRep(normals[keep], offsets[keep])


# ---------------------------------------------------------------- trimmed patches and models


@dataclass(frozen=True)
class TrimmedPatch:
    patch: BezierPatch
    mrep: Mrep
    hull: HullRep

    def patch_function(self, x):
        """Normalized untrimmed patch function (value, grad, scaled Hessian)."""
        L = _det_layer(self.mrep, x)
        v, g, h = normalize(L.gamma, L.grad, L.hess, L.third)
        deg = L.degenerate
        if np.any(deg):
            v = np.where(deg, 0.0, v)
            g = np.where(deg[:, None], L.normal / (2.0 * L.multiplicity[:, None]), g)
            h = np.where(deg[:, None, None], 0.0, h)
        return v, g, h

    def evaluate(self, x) -> ImplicitDerivatives:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        hv, hg, hh = self.patch_function(x)
        fv, fg, fh = self.hull.evaluate(x)
        # a pole of the patch function (e.g. a circle's centre) stays a pole
        pole = np.isinf(hv)
        hv0 = np.where(pole, 0.0, hv)
        t, dt, ht = trim(fv, fg, fh, hv0, hg, hh)
        t = np.where(pole, np.inf, t)
        return ImplicitDerivatives(t, dt, ht)


def trimmed_patch(patch: BezierPatch) -> TrimmedPatch:
    return TrimmedPatch(patch, implicitize_patch(patch), convex_hull_rep(patch))


def fold(results: list[ImplicitDerivatives]) -> ImplicitDerivatives:
    acc = results[0]
    v, g, h = acc.value, acc.grad, acc.hess
    for r in results[1:]:
        v, g, h = r_conjunction(v, g, h, r.value, r.grad, r.hess)
    return ImplicitDerivatives(v, g, h)


@dataclass
class ImplicitModel:
    entity_ids: list
    entities: dict  # id -> list[TrimmedPatch]
    kinds: dict = field(default_factory=dict)
    associations: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.entities[self.entity_ids[0]][0].patch.dim

    def entity(self, eid: str, x) -> ImplicitDerivatives:
        if eid not in self.entities:
            raise KeyError(f"unknown model entity {eid!r}")
        return fold([tp.evaluate(x) for tp in self.entities[eid]])

    def evaluate(self, x, entity_ids=None) -> ImplicitDerivatives:
        ids = self.entity_ids if entity_ids is None else list(entity_ids)
        if not ids:
            raise ValueError("empty entity set")
        for e in ids:
            if e not in self.entities:
                raise KeyError(f"unknown model entity {e!r}")
        return fold([self.entity(e, x) for e in ids])

    def bbox_diagonal(self) -> float:
        pts = np.vstack([tp.patch.points for lst in self.entities.values() for tp in lst])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def implicitize_model(entities, kinds=None, associations=None) -> ImplicitModel:
    """Implicitize ``{entity_id: [BezierPatch, ...]}`` in input order.

    Curves of degree >= 3 are first split at self-intersections.
    """
    ids = list(entities)
    if not ids:
        raise ValueError("model has no entities")
    out = {}
    for eid in ids:
        tps = []
        for k, patch in enumerate(entities[eid]):
            pieces = split_autointersections(patch) if patch.param_dim == 1 and patch.degree[0] >= 3 else [patch]
            for piece in pieces:
                try:
                    tps.append(trimmed_patch(piece))
                except (ImplicitizationError, GeometryError) as exc:
                    raise type(exc)(f"entity {eid!r} patch {k}: {exc}") from exc
        out[eid] = tps
    return ImplicitModel(ids, out, dict(kinds or {}), dict(associations or {}))


def evaluate_model(model: ImplicitModel, entity_ids, x, derivative_order: int = 2) -> ImplicitDerivatives:
    return model.evaluate(x, entity_ids)


# ---------------------------------------------------------------- self-intersections


def _double_point_measure(mrep: Mrep, patch: BezierPatch, u) -> np.ndarray:
    L = _det_layer(mrep, patch.evaluate(np.atleast_1d(u)))
    return L.hess_trace


def split_autointersections(patch: BezierPatch, _depth: int = 0) -> list:
    """Split a curve of degree >= 3 at parameters where it crosses itself.

    Along the curve the limit Hessian trace of gamma vanishes only where
    the matrix loses rank twice, i.e. at a double point.
    """
    if patch.param_dim != 1 or patch.degree[0] < 3 or _depth > 3:
        return [patch]
    mrep = implicitize_patch(patch)
    u = np.linspace(0.0, 1.0, 401)
    tau = _double_point_measure(mrep, patch, u)
    ref = tau.max()
    if ref <= 0:
        return [patch]
    rel = tau / ref
    found = []
    for i in range(1, len(u) - 1):
        if rel[i] <= rel[i - 1] and rel[i] <= rel[i + 1] and rel[i] < 1e-2:
            res = minimize_scalar(lambda t: float(_double_point_measure(mrep, patch, t)[0]) / ref,
                                  bounds=(u[i - 1], u[i + 1]), method="bounded",
                                  options={"xatol": 1e-12})
            if res.fun < 1e-6 and 1e-6 < res.x < 1.0 - 1e-6:
                found.append(float(res.x))
    if not found:
        return [patch]
    found = sorted(set(round(v, 10) for v in found))
    pieces = []
    rest = patch
    start = 0.0
    for v in found:
        local = (v - start) / (1.0 - start)
        left, rest = rest.split(local)
        pieces.append(left)
        start = v
    pieces.append(rest)
    out = []
    for piece in pieces:
        out.extend(split_autointersections(piece, _depth + 1))
    return out


# ---------------------------------------------------------------- model files


def _patch_from_dict(doc, eid) -> BezierPatch:
    deg = doc["degree"]
    return BezierPatch(np.array(doc["points"], float), np.array(doc.get("weights") or [1.0] * len(doc["points"])),
                       tuple(np.atleast_1d(deg)), eid)


def model_patches_from_dict(doc: dict):
    if not isinstance(doc, dict) or "entities" not in doc:
        raise ValueError("model document needs an 'entities' list")
    ents, kinds = {}, {}
    for e in doc["entities"]:
        eid = str(e["id"])
        kinds[eid] = e.get("type", "curve")
        ents[eid] = [_patch_from_dict(p, eid) for p in e["patches"]]
    return ents, kinds, doc.get("associations", {})


def model_from_dict(doc: dict) -> ImplicitModel:
    ents, kinds, assoc = model_patches_from_dict(doc)
    return implicitize_model(ents, kinds, assoc)


def load_model(path) -> ImplicitModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def model_to_dict(entities, kinds=None, associations=None) -> dict:
    out = []
    for eid, patches in entities.items():
        out.append({
            "id": eid,
            "type": (kinds or {}).get(eid, "curve" if patches[0].param_dim == 1 else "surface"),
            "patches": [{"degree": list(p.degree) if p.param_dim > 1 else p.degree[0],
                         "points": p.points.tolist(), "weights": p.weights.tolist()} for p in patches],
        })
    return {"entities": out, "associations": associations or {}}
