"""Dense linear algebra, seeded randomness and exact small-scale oracles.

Everything here works on plain float64 numpy arrays. The stochastic
estimators are validated against `cholesky_logdet` and `sym_eig`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class NotSymmetricError(ValueError):
    pass


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class Rng:
    """Immutable (seed, stream-id) pair.

    Every draw builds a fresh generator from the pair, so the same `Rng`
    always yields the same numbers. Use `split` to get independent streams.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise ValueError("seed and stream must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(index + 1)))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator().uniform(low, high, shape)


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def matvec(a, v) -> np.ndarray:
    a, v = as_matrix(a), as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} matrix by length-{v.shape[0]} vector")
    return a @ v


def rademacher(rng: Rng, shape) -> np.ndarray:
    """Entries drawn uniformly from {-1, +1}."""
    if np.prod(shape) <= 0:
        raise ValueError("rademacher needs a positive size")
    bits = rng.generator().integers(0, 2, size=shape, dtype=np.int8)
    return 2.0 * bits.astype(np.float64) - 1.0


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; accepts a stack of matrices (..., n, n)."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise DimensionError(f"cholesky needs square matrices, got {a.shape}")
    L = np.zeros_like(a)
    # Pivots at rounding level relative to the diagonal count as zero.
    tol = n * np.finfo(np.float64).eps * np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1)), axis=-1)
    for j in range(n):
        row = L[..., j, :j]
        d = a[..., j, j] - np.einsum("...k,...k->...", row, row)
        if np.any(~(d > tol)):
            raise NotPositiveDefiniteError(f"matrix is not positive definite (pivot {j})")
        ljj = np.sqrt(d)
        L[..., j, j] = ljj
        if j + 1 < n:
            below = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", L[..., j + 1:, :j], row)
            L[..., j + 1:, j] = below / ljj[..., None]
    return L


def cholesky_logdet(a) -> float | np.ndarray:
    """ln det of a symmetric positive definite matrix (or stack of them)."""
    L = cholesky(a)
    out = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def check_symmetric(a: np.ndarray, rtol: float = 1e-8) -> None:
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > rtol * scale:
        raise NotSymmetricError("matrix is not symmetric")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of n/2 disjoint (p, q) pairs covering all pairs.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            P, Q = zip(*pairs)
            rounds.append((np.array(P), np.array(Q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs that are rotated together. Iterates until the off-diagonal
    Frobenius norm drops below ``tol * ||a||_F``.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError("sym_eig needs a square matrix")
    check_symmetric(a)
    A = 0.5 * (a + a.T)
    V = np.eye(n)
    norm = np.linalg.norm(A)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * norm:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            app = A[P, P]
            aqq = A[Q, Q]
            d = aqq - app
            sgn = np.where(d < 0.0, -1.0, 1.0)
            den = np.abs(d) + np.sqrt(d * d + 4.0 * apq * apq)
            t = np.where(den > 0.0, sgn * 2.0 * apq / np.where(den > 0.0, den, 1.0), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            colP, colQ = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = c * colP - s * colQ
            A[:, Q] = s * colP + c * colQ
            rowP, rowQ = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * rowP - s[:, None] * rowQ
            A[Q, :] = s[:, None] * rowP + c[:, None] * rowQ
            vP, vQ = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = c * vP - s * vQ
            V[:, Q] = s * vP + c * vQ
    else:
        raise np.linalg.LinAlgError("Jacobi iteration did not converge")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def random_spd(rng: Rng, n: int, kappa: float, lam_min: float = 1.0,
               spread: str = "loguniform") -> tuple[np.ndarray, np.ndarray]:
    """Random SPD matrix with condition number exactly ``kappa``.

    The spectrum has ``lam_min`` and ``lam_min * kappa`` as its extremes and the
    remaining eigenvalues spread between them. Returns (matrix, eigenvalues).
    """
    if kappa < 1.0 or n < 1:
        raise ValueError("need kappa >= 1 and n >= 1")
    g = rng.generator()
    Q, R = np.linalg.qr(g.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    if spread == "loguniform":
        lam = lam_min * np.exp(g.uniform(0.0, np.log(kappa), n))
    elif spread == "uniform":
        lam = lam_min * g.uniform(1.0, kappa, n)
    else:
        raise ValueError(f"unknown spread {spread!r}")
    lam[0] = lam_min
    if n > 1:
        lam[1] = lam_min * kappa
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T), np.sort(lam)[::-1]
