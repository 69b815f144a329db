"""Dense linear-algebra kernels.

Matrices are plain 2-D ``float64`` numpy arrays. The public functions
validate shapes and raise :class:`~abba.errors.ShapeError` with both shapes
in the message, so callers get a readable error instead of a broadcasting
surprise deep inside numpy.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError

Matrix = np.ndarray

_EPS = np.finfo(np.float64).eps


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Coerce ``x`` to a 2-D float64 array without copying when possible."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hadamard product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def khatri_rao_rows(u: Matrix, v: Matrix) -> Matrix:
    """Row-wise Khatri-Rao product.

    Row ``i`` of the result is ``[u[i,0]*v[i], u[i,1]*v[i], ...]``, so an
    ``m x r1`` and an ``m x r2`` input give an ``m x (r1*r2)`` output. Widths
    may differ.
    """
    u = as_matrix(u, "u")
    v = as_matrix(v, "v")
    if u.shape[0] != v.shape[0]:
        raise ShapeError(f"row-wise Khatri-Rao needs equal row counts, got {u.shape} and {v.shape}")
    m = u.shape[0]
    return (u[:, :, None] * v[:, None, :]).reshape(m, u.shape[1] * v.shape[1])


def frobenius_norm(m: Matrix) -> float:
    m = as_matrix(m)
    # scaled to avoid overflow for huge entries
    peak = np.max(np.abs(m)) if m.size else 0.0
    if peak == 0.0 or not np.isfinite(peak):
        return float(peak)
    return float(peak * np.sqrt(np.sum((m / peak) ** 2)))


@dataclass(frozen=True)
class SvdResult:
    u: Matrix
    sigma: np.ndarray
    vt: Matrix

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.vt

    def sqrt_factors(self) -> tuple[Matrix, Matrix]:
        """Split as ``(U sqrt(S), sqrt(S) Vt)``."""
        root = np.sqrt(self.sigma)
        return self.u * root, root[:, None] * self.vt


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every column pair meets exactly once per sweep,
    # and pairs within a round are disjoint so they can be rotated together.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal_columns(x: Matrix, good: np.ndarray) -> Matrix:
    """Replace columns not flagged ``good`` by an orthonormal completion."""
    rows = x.shape[0]
    basis = [x[:, j] for j in np.flatnonzero(good)]
    out = x.copy()
    candidates = iter(range(rows))
    for j in np.flatnonzero(~good):
        while True:
            i = next(candidates)
            e = np.zeros(rows)
            e[i] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 0.5:
                e /= norm
                break
        basis.append(e)
        out[:, j] = e
    return out


def _apply_sign_convention(u: Matrix, vt: Matrix) -> tuple[Matrix, Matrix]:
    # argmax returns the first index on ties, which is the lowest-index rule.
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, vt * signs[:, None]


def _jacobi_tall(a: Matrix, tol: float, max_sweeps: int) -> tuple[Matrix, np.ndarray, Matrix]:
    m, n = a.shape
    x = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            xp, xq = x[:, p], x[:, q]
            alpha = np.einsum("ij,ij->j", xp, xp)
            beta = np.einsum("ij,ij->j", xq, xq)
            gamma = np.einsum("ij,ij->j", xp, xq)
            need = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not need.any():
                continue
            rotated = True
            g = np.where(need, gamma, 1.0)
            # a huge zeta means a negligible rotation; t correctly underflows to 0
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(need, c, 1.0)
            s = np.where(need, s, 0.0)
            x[:, p], x[:, q] = c * xp - s * xq, s * xp + c * xq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", x, x))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    x = x[:, order]
    v = v[:, order]
    good = sigma > 0
    u = np.zeros_like(x)
    u[:, good] = x[:, good] / sigma[good]
    if not good.all():
        u = _complete_orthonormal_columns(u, good)
    return u, sigma, v.T


def jacobi_svd(a: Matrix, tol: float = 4 * _EPS, max_sweeps: int = 80) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``min(m, n)`` singular triplets in non-increasing order with the
    package sign convention applied. Intended for small and moderate
    matrices; cost is roughly ``sweeps * min(m,n)^2 * max(m,n)``.
    """
    a = as_matrix(a)
    if a.shape[0] >= a.shape[1]:
        u, sigma, vt = _jacobi_tall(a, tol, max_sweeps)
    else:
        v, sigma, ut = _jacobi_tall(a.T, tol, max_sweeps)
        u, vt = ut.T, v.T
    u, vt = _apply_sign_convention(u, vt)
    return SvdResult(u=u, sigma=sigma, vt=vt)


def singular_values(m: Matrix) -> np.ndarray:
    return jacobi_svd(m).sigma


def truncated_svd(
    m: Matrix,
    k: int,
    seed: int = 0,
    oversample: int = 8,
    power_iters: int = 2,
    tol: float = 1e-11,
    max_iter: int = 2000,
    check_every: int = 8,
) -> SvdResult:
    """Top-``k`` singular triplets by randomized subspace iteration.

    A Gaussian sketch of width ``k + oversample`` is refined by at least
    ``power_iters`` rounds of subspace iteration, then iterated further until
    every kept triplet satisfies ``||A v - s u|| <= tol * s_max``. The
    projected matrix is decomposed with :func:`jacobi_svd`. When the sketch
    would cover the whole column space the matrix is decomposed directly.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    full = min(rows, cols)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= full:
        raise ParameterError(f"k must be an integer in [1, {full}] for a {a.shape} matrix, got {k!r}")
    width = min(k + oversample, full)
    if width == full:
        res = jacobi_svd(a)
        return SvdResult(u=res.u[:, :k].copy(), sigma=res.sigma[:k].copy(), vt=res.vt[:k].copy())

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(a @ rng.standard_normal((cols, width)))
    it = 0
    while True:
        if it >= power_iters and ((it - power_iters) % check_every == 0 or it >= max_iter):
            small = jacobi_svd(q.T @ a)
            u = q @ small.u[:, :k]
            sigma, vt = small.sigma[:k], small.vt[:k]
            residual = a @ vt.T - u * sigma
            worst = np.sqrt(np.max(np.einsum("ij,ij->j", residual, residual)))
            if worst <= tol * max(sigma[0], np.finfo(float).tiny) or it >= max_iter:
                break
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
        it += 1
    u, vt = _apply_sign_convention(u, vt)
    return SvdResult(u=u, sigma=sigma.copy(), vt=vt.copy())


def numerical_rank(m: Matrix, rel_tol: float = 1e-10) -> int:
    if rel_tol <= 0:
        raise ParameterError(f"rel_tol must be positive, got {rel_tol}")
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def format_matrix_csv(m: Matrix) -> str:
    m = as_matrix(m)
    buf = io.StringIO()
    for row in m:
        buf.write(",".join(repr(float(x)) for x in row))
        buf.write("\n")
    return buf.getvalue()


def parse_matrix_csv(text: str) -> Matrix:
    rows = [line.split(",") for line in text.split("\n") if line]
    if not rows:
        raise ShapeError("empty matrix CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError("ragged matrix CSV: rows have different lengths")
    return np.array([[float(x) for x in r] for r in rows], dtype=np.float64)


def write_matrix_csv(path, m: Matrix) -> None:
    Path(path).write_text(format_matrix_csv(m), encoding="utf-8", newline="")


def read_matrix_csv(path) -> Matrix:
    return parse_matrix_csv(Path(path).read_text(encoding="utf-8"))
