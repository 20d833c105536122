"""Dense linear algebra on float64 numpy arrays.

The SVD is a one-sided (Hestenes) Jacobi method using a round-robin pair
ordering, so each sweep touches every column pair exactly once and the
``n/2`` disjoint rotations of a round can be applied as one vectorized update.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import RankError, ShapeError, SvdConvergenceError, ZeroNormError

MAX_SWEEPS = 60
JACOBI_TOL = 1e-12


class SvdResult(NamedTuple):
    u: np.ndarray  # m x k, orthonormal columns
    s: np.ndarray  # k, descending
    vt: np.ndarray  # k x n, orthonormal rows


class LowRankPair(NamedTuple):
    a: np.ndarray  # m x r
    b: np.ndarray  # r x n

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def product(self) -> np.ndarray:
        return self.a @ self.b


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed per-element summation order.

    Uses numpy's non-BLAS einsum loop, so the result does not depend on the
    BLAS thread count.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def frobenius_norm(m) -> float:
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))


def cosine_distance(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"vector lengths differ: {x.size} vs {y.size}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ZeroNormError("cosine distance is undefined for a zero-norm vector")
    return float(np.clip(1.0 - np.dot(x, y) / (nx * ny), 0.0, 2.0))


def rowwise_cosine_distance(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine distance between matching rows.

    Returns ``(distances, valid)``; rows where either side has zero norm are
    marked invalid and their distance is set to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    nx = np.sqrt(np.sum(x * x, axis=-1))
    ny = np.sqrt(np.sum(y * y, axis=-1))
    valid = (nx > 0.0) & (ny > 0.0)
    denom = np.where(valid, nx * ny, 1.0)
    dist = np.clip(1.0 - np.sum(x * y, axis=-1) / denom, 0.0, 2.0)
    return np.where(valid, dist, 0.0), valid


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method; odd n gets a dummy slot that is dropped from each round
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array(idx[: m // 2])
        q = np.array(idx[m // 2 :][::-1])
        keep = (p < n) & (q < n)
        lo = np.minimum(p, q)[keep]
        hi = np.maximum(p, q)[keep]
        rounds.append((lo, hi))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of a tall matrix. Returns (A V, V)."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return a, v
    scale = np.sum(a * a)
    # couplings between columns that are pure rounding noise are ignored
    tiny = (np.finfo(np.float64).eps ** 2) * scale * n
    rounds = _round_robin(n)
    coupling = np.inf
    for _ in range(MAX_SWEEPS):
        coupling = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.sum(ap * ap, axis=0)
            beta = np.sum(aq * aq, axis=0)
            gamma = np.sum(ap * aq, axis=0)
            denom = np.sqrt(alpha * beta)
            rel = np.where(denom > 0.0, np.abs(gamma) / np.where(denom > 0.0, denom, 1.0), 0.0)
            active = (rel > JACOBI_TOL) & (np.abs(gamma) > tiny)
            if not np.any(active):
                continue
            coupling = max(coupling, float(np.max(rel[active])))
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            vp, vq = v[:, p], v[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if coupling == 0.0:
            return a, v
    raise SvdConvergenceError(coupling, MAX_SWEEPS)


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # replace columns with zero singular value by an orthonormal completion
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    candidates = iter(np.eye(m))
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= np.dot(b, w) * b
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                u[:, j] = w / nw
                basis.append(u[:, j])
                break
    return u


def svd(w) -> SvdResult:
    """Thin SVD ``w = u @ diag(s) @ vt`` with k = min(m, n)."""
    w = as_matrix(w, "w")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd input contains non-finite entries")
    transposed = w.shape[0] < w.shape[1]
    a = w.T if transposed else w
    # exact power-of-two rescale keeps column products away from under/overflow
    peak = np.max(np.abs(a)) if a.size else 0.0
    unit = np.ldexp(1.0, -int(np.frexp(peak)[1])) if peak > 0.0 else 1.0
    av, v = _jacobi_tall(a * unit)
    s = np.sqrt(np.sum(av * av, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    av = av[:, order]
    v = v[:, order]
    cutoff = s[0] * a.shape[0] * np.finfo(np.float64).eps if s.size else 0.0
    filled = s > cutoff
    u = np.zeros_like(av)
    u[:, filled] = av[:, filled] / s[filled]
    s = np.where(filled, s / unit, 0.0)
    u = _complete_basis(u, filled)
    if transposed:
        u, v = v, u
    # sign convention: largest-magnitude entry of each left vector is positive
    pivots = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])]
    signs = np.where(pivots < 0.0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return SvdResult(u=u, s=s, vt=np.ascontiguousarray(v.T))


def truncate(result: SvdResult, r: int) -> LowRankPair:
    """Rank-r factors ``a = U_r sqrt(S_r)``, ``b = sqrt(S_r) Vt_r``."""
    k = len(result.s)
    if not isinstance(r, (int, np.integer)) or r < 1 or r > k:
        raise RankError(f"rank must be in [1, {k}], got {r}")
    root = np.sqrt(result.s[:r])
    a = result.u[:, :r] * root
    b = root[:, None] * result.vt[:r, :]
    return LowRankPair(a=np.ascontiguousarray(a), b=np.ascontiguousarray(b))


def low_rank_approx(w, r: int) -> LowRankPair:
    return truncate(svd(w), r)
