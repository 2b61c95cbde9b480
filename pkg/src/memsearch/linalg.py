"""Small dense linear-algebra routines."""

from __future__ import annotations

import numpy as np

from .errors import DecompositionError


def _round_robin(n: int):
    """Yield rounds of disjoint column pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    order = list(range(m))
    for _ in range(m - 1):
        left = order[: m // 2]
        right = order[m // 2:][::-1]
        pairs = [(p, q) if p < q else (q, p) for p, q in zip(left, right) if p < n and q < n]
        if pairs:
            yield np.array(pairs, dtype=np.intp)
        order = [order[0]] + [order[-1]] + order[1:-1]


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60, block: int = -1):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``u (m, r), s (r,), vt (r, n)`` with ``r = min(m, n)``, singular
    values non-negative and descending. Raises DecompositionError (tagged with
    ``block``) if the off-diagonal mass has not vanished after ``max_sweeps``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd(a.T, tol, max_sweeps, block)
        return vt.T, s, u.T

    work = a.copy()
    v = np.eye(n)
    rounds = list(_round_robin(n))
    # columns whose squared norm falls below this are numerically zero and never rotated
    floor = (np.finfo(float).eps * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            cp, cq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", cp, cp)
            beta = np.einsum("ij,ij->j", cq, cq)
            gamma = np.einsum("ij,ij->j", cp, cq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            work[:, p], work[:, q] = c * cp - s * cq, s * cp + c * cq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise DecompositionError(block)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    u = np.zeros((m, n))
    tiny = sigma.max(initial=0.0) * max(m, n) * np.finfo(float).eps
    nz = sigma > tiny
    u[:, nz] = work[:, nz] / sigma[nz]
    if not np.all(nz):
        u = _complete_basis(u, nz)
        sigma = np.where(nz, sigma, 0.0)
    return u, sigma, v.T


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace the unfilled columns of ``u`` with an orthonormal completion."""
    m, n = u.shape
    basis = [u[:, j] for j in range(n) if filled[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(n):
        if filled[j]:
            continue
        for e in candidates:
            w = e - sum((b @ e) * b for b in basis)
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                out[:, j] = w / norm
                basis.append(out[:, j])
                break
    return out
