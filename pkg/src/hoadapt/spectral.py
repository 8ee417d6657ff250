"""Symmetric eigen-derivatives and derivatives of the SPD matrix exponential.

Everything here is batched over a leading point axis P.  Derivative
arrays carry J spatial directions: ``dL`` is (P, J, n, n) and ``d2L`` is
(P, J, J, n, n).

Two routes give the derivatives of ``exp(L)``:

* ``eigen``: differentiate eigenvalues and eigenvectors and apply the
  product rule to ``U exp(D) U^T``.  Error grows like eps / gap**2, so it is
  only used when the spectrum is well separated.
* ``divided``: Daleckii-Krein divided differences of ``exp`` in the
  eigenbasis.  Exact for any spectrum, including repeated eigenvalues.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

# Spectra whose relative gap falls below this use divided differences.
SWITCH_GAP = 1e-3
_SERIES_TERMS = 32
_INV_FACT = np.array([1.0 / factorial(k + 2) for k in range(_SERIES_TERMS)])


class DegenerateSpectrumError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EigenDerivatives:
    """Eigenpairs and their derivatives; eigenvectors are columns."""

    lam: np.ndarray  # (n,)
    U: np.ndarray  # (n, n)
    dlam: np.ndarray  # (J, n)
    dU: np.ndarray  # (J, n, n)
    d2lam: np.ndarray  # (J, J, n)
    d2U: np.ndarray  # (J, J, n, n)


def _eigen_coords(lam, Lj, Ljk):
    """Eigen-derivatives expressed in the eigenbasis.

    Lj = U^T dL U (P, J, n, n), Ljk likewise (P, J, J, n, n).  Returns
    dlam (P,J,n), C (P,J,n,n), d2lam (P,J,J,n), C2 (P,J,J,n,n) where column l
    of C[j] holds the eigenbasis coordinates of d_j u_l.
    """
    n = lam.shape[-1]
    gap = lam[:, None, :] - lam[:, :, None]  # [p, m, l] = lam_l - lam_m
    off = ~np.eye(n, dtype=bool)
    inv = np.zeros_like(gap)
    inv[:, off] = 1.0 / gap[:, off]  # 1/(lam_l - lam_m), i.e. -1/(lam_m - lam_l)
    dlam = np.diagonal(Lj, axis1=-2, axis2=-1)
    C = Lj * inv[:, None]
    if Ljk is None:
        return dlam, C, None, None
    # w[p, j, k, :, l] = Ljk[:, l] + (Lj - dlam_j,l) C_k[:, l] + (Lk - dlam_k,l) C_j[:, l]
    LjCk = np.einsum("pjam,pkml->pjkal", Lj, C)
    w = Ljk + LjCk + np.swapaxes(LjCk, 1, 2)
    w -= dlam[:, :, None, None, :] * C[:, None, :, :, :]
    w -= dlam[:, None, :, None, :] * C[:, :, None, :, :]
    d2lam = np.diagonal(w, axis1=-2, axis2=-1)
    C2 = w * inv[:, None, None]
    norm_term = np.einsum("pjml,pkml->pjkl", C, C)
    diag_idx = np.arange(n)
    C2[..., diag_idx, diag_idx] = -norm_term
    return dlam, C, d2lam, C2


def eig_derivatives(L, dL=None, d2L=None, gap_tol: float | None = None) -> EigenDerivatives:
    """First and second derivatives of all eigenpairs of a symmetric matrix.

    Raises DegenerateSpectrumError when two eigenvalues are closer than
    ``gap_tol`` (default 1e-8 * ||L||_F, floored at 1e-300).
    """
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if not np.allclose(L, L.T, atol=1e-12 * max(1.0, np.abs(L).max())):
        raise ValueError("L must be symmetric")
    dL = np.zeros((0, n, n)) if dL is None else np.asarray(dL, dtype=float)
    J = dL.shape[0]
    lam, U = np.linalg.eigh(L)
    tol = gap_tol if gap_tol is not None else max(1e-8 * np.linalg.norm(L), 1e-300)
    if n > 1 and np.min(np.diff(lam)) < tol:
        raise DegenerateSpectrumError(f"eigenvalue gap {np.min(np.diff(lam)):.3e} below {tol:.3e}")
    Lj = np.einsum("am,jab,bl->jml", U, dL, U)[None]
    Ljk = None
    if d2L is not None:
        Ljk = np.einsum("am,jkab,bl->jkml", U, np.asarray(d2L, dtype=float), U)[None]
    dlam, C, d2lam, C2 = _eigen_coords(lam[None], Lj, Ljk)
    dU = np.einsum("am,jml->jal", U, C[0])
    if d2L is None:
        d2lam_out = np.zeros((J, J, n))
        d2U = np.zeros((J, J, n, n))
    else:
        d2lam_out = d2lam[0]
        d2U = np.einsum("am,jkml->jkal", U, C2[0])
    return EigenDerivatives(lam, U, dlam[0], dU, d2lam_out, d2U)


# ---------------------------------------------------------------- divided differences of exp


def exp_dd1(a, b):
    """First divided difference of exp, exact at a == b."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    lo = np.minimum(a, b)
    h = np.abs(a - b)
    safe = np.where(h > 0, h, 1.0)
    ratio = np.where(h > 0, np.expm1(h) / safe, 1.0)
    return np.exp(lo) * ratio


def exp_dd2(a, b, c):
    """Second divided difference of exp, symmetric in its arguments."""
    a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, b, c)))
    s = np.stack([a, b, c])
    hi, lo = s.max(axis=0), s.min(axis=0)
    mid = s.sum(axis=0) - hi - lo
    spread = hi - lo
    # series about the midpoint of the range: sum_k h_k(delta) / (k+2)!
    centre = 0.5 * (hi + lo)
    d = s - centre
    H = np.zeros((_SERIES_TERMS,) + a.shape)
    H[0] = 1.0
    for k in range(1, _SERIES_TERMS):
        H[k] = H[k - 1] * d[0]
    for v in (d[1], d[2]):
        for k in range(1, _SERIES_TERMS):
            H[k] = H[k] + v * H[k - 1]
    series = np.exp(centre) * np.tensordot(_INV_FACT, H, axes=1)
    denom = np.where(spread > 0, spread, 1.0)
    recursive = (exp_dd1(hi, mid) - exp_dd1(mid, lo)) / denom
    return np.where(spread <= 1.0, series, recursive)


def _dk_coords(lam, Lj, Ljk):
    """Daleckii-Krein derivatives of exp in the eigenbasis."""
    F1 = exp_dd1(lam[:, :, None], lam[:, None, :])
    dM = F1[:, None] * Lj
    if Ljk is None:
        return dM, None
    F2 = exp_dd2(lam[:, :, None, None], lam[:, None, :, None], lam[:, None, None, :])  # [a, c, b]
    t = np.einsum("pacb,pjac,pkcb->pjkab", F2, Lj, Lj)
    d2M = t + np.swapaxes(t, 1, 2) + F1[:, None, None] * Ljk
    return dM, d2M


def _eigen_route_coords(lam, Lj, Ljk):
    E = np.exp(lam)
    dlam, C, d2lam, C2 = _eigen_coords(lam, Lj, Ljk)
    n = lam.shape[-1]
    idx = np.arange(n)
    B = C * E[:, None, None, :]
    dM = B + np.swapaxes(B, -1, -2)
    dM[..., idx, idx] += E[:, None, :] * dlam
    if Ljk is None:
        return dM, None
    # terms that are rank-one in e_l e_l^T
    diag = E[:, None, None, :] * (dlam[:, :, None, :] * dlam[:, None, :, :] + d2lam)
    Bj = C[:, :, None] * (E[:, None, None, None, :] * dlam[:, None, :, None, :])  # C_j scaled by dlam_k
    Bk = C[:, None, :] * (E[:, None, None, None, :] * dlam[:, :, None, None, :])
    B2 = C2 * E[:, None, None, None, :]
    cross = np.einsum("pjal,pl,pkbl->pjkab", C, E, C)
    S = Bj + Bk + B2
    d2M = S + np.swapaxes(S, -1, -2) + cross + np.swapaxes(cross, 1, 2)
    d2M[..., idx, idx] += diag
    return dM, d2M


def spd_exp(L) -> np.ndarray:
    lam, U = np.linalg.eigh(L)
    return np.einsum("...am,...m,...bm->...ab", U, np.exp(lam), U)


def spd_log(M) -> np.ndarray:
    lam, U = np.linalg.eigh(M)
    if np.any(lam <= 0):
        raise ValueError("matrix is not positive definite")
    return np.einsum("...am,...m,...bm->...ab", U, np.log(lam), U)


def exp_with_derivatives(L, dL=None, d2L=None, method: str = "auto"):
    """exp(L) and its first/second derivatives for a batch of symmetric L.

    Returns (M, dM, d2M, used_divided) where used_divided flags points that
    took the divided-difference route.
    """
    L = np.asarray(L, dtype=float)
    P, n, _ = L.shape
    lam, U = np.linalg.eigh(L)
    M = np.einsum("pam,pm,pbm->pab", U, np.exp(lam), U)
    if dL is None:
        return M, None, None, np.zeros(P, dtype=bool)
    Lj = np.einsum("pam,pjab,pbl->pjml", U, dL, U)
    Ljk = None if d2L is None else np.einsum("pam,pjkab,pbl->pjkml", U, d2L, U)
    if method == "divided":
        use_dk = np.ones(P, dtype=bool)
    elif method == "eigen":
        use_dk = np.zeros(P, dtype=bool)
    elif method == "auto":
        gaps = np.diff(lam, axis=1).min(axis=1) if n > 1 else np.full(P, np.inf)
        scale = np.maximum(1.0, np.linalg.norm(L, axis=(1, 2)))
        use_dk = gaps < SWITCH_GAP * scale
    else:
        raise ValueError(f"unknown method {method!r}")
    dMc = np.empty_like(Lj)
    d2Mc = None if Ljk is None else np.empty_like(Ljk)
    for mask, route in ((use_dk, _dk_coords), (~use_dk, _eigen_route_coords)):
        if not mask.any():
            continue
        a, b = route(lam[mask], Lj[mask], None if Ljk is None else Ljk[mask])
        dMc[mask] = a
        if b is not None:
            d2Mc[mask] = b
    dM = np.einsum("pam,pjml,pbl->pjab", U, dMc, U)
    d2M = None if d2Mc is None else np.einsum("pam,pjkml,pbl->pjkab", U, d2Mc, U)
    return M, dM, d2M, use_dk
