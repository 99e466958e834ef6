"""One-sided Jacobi SVD and rank truncation.

The factorization runs in float64 with a round-robin pairing so each step
rotates a set of disjoint column pairs at once.  Factors are cast to the
requested dtype (float32 by default) only at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 30
ROTATION_TOL = 1e-12
# pairs already orthogonal to working precision are left alone
SKIP_TOL = 1e-15


class SvdError(ArithmeticError):
    pass


@dataclass
class SvdResult:
    """``w ~= u @ diag(sigma) @ v`` with ``u: n x r``, ``v: r x h``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.sigma)

    def reconstruct(self, dtype=np.float64) -> np.ndarray:
        u = self.u.astype(np.float64)
        v = self.v.astype(np.float64)
        return ((u * self.sigma.astype(np.float64)) @ v).astype(dtype)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint pair sets covering every (p, q) once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of ``a`` (m x n, m >= n) as ``(u, sigma, vt)``, unsorted."""
    work = a.copy()
    n = work.shape[1]
    vmat = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    residual = 0.0
    for _ in range(MAX_SWEEPS):
        largest = 0.0
        for p, q in rounds:
            if not len(p):
                continue
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > SKIP_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            largest = max(largest, float(np.max(np.abs(c * s))))
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = vmat[:, p], vmat[:, q]
            vmat[:, p] = c * vp - s * vq
            vmat[:, q] = s * vp + c * vq
        residual = largest
        if largest < ROTATION_TOL:
            break
    else:
        raise SvdError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (max |cos*sin| = {residual:.3e})")

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, vmat = sigma[order], work[:, order], vmat[:, order]
    m = work.shape[0]
    tiny = (sigma[0] if n else 0.0) * max(m, n) * np.finfo(np.float64).eps
    u = np.zeros_like(work)
    for j in range(n):
        if sigma[j] > tiny and sigma[j] > 0:
            u[:, j] = work[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            u[:, j] = _orthogonal_complement_vector(u[:, :j], m)
    return u, sigma, vmat.T


def _orthogonal_complement_vector(basis: np.ndarray, m: int) -> np.ndarray:
    """A unit vector orthogonal to the columns of ``basis``."""
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        for _ in range(2):
            e -= basis @ (basis.T @ e)
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            return e / norm
    raise SvdError("could not complete orthonormal basis")


def svd(w: np.ndarray, dtype=np.float32) -> SvdResult:
    """Thin SVD of an ``n x h`` matrix, rank ``r = min(n, h)``.

    Singular values are sorted descending.  Each column of ``u`` is signed so
    its largest-magnitude entry is non-negative, which makes the result
    deterministic.
    """
    w = np.asarray(w)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValueError(f"svd expects a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd: input has non-finite entries")
    a = w.astype(np.float64)
    if a.shape[0] >= a.shape[1]:
        u, sigma, vt = _jacobi_tall(a)
    else:
        ut, sigma, vtt = _jacobi_tall(a.T)
        u, vt = vtt.T, ut.T
    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1
    vt[flip, :] *= -1
    return SvdResult(u.astype(dtype), sigma.astype(dtype), vt.astype(dtype))


def truncate(s: SvdResult, rank: int) -> SvdResult:
    """Keep the leading ``rank`` singular triplets."""
    if not 1 <= rank <= s.rank:
        raise ValueError(f"rank must be in [1, {s.rank}], got {rank}")
    return SvdResult(s.u[:, :rank].copy(), s.sigma[:rank].copy(), s.v[:rank, :].copy())


def reconstruction_error(w: np.ndarray, rank: int) -> float:
    """Relative Frobenius error of the best rank-``rank`` approximation."""
    w64 = np.asarray(w, dtype=np.float64)
    full = svd(w64, dtype=np.float64)
    approx = truncate(full, rank).reconstruct()
    norm = np.linalg.norm(w64)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(w64 - approx) / norm)
