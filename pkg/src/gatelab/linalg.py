"""Dense real-matrix kernel: singular values, power iteration, clipped OLS.

Matrices are plain 2-D ``float64`` numpy arrays. Anything exposing ``shape``,
``matvec`` and ``rmatvec`` can stand in for a matrix in
:func:`spectral_norm_power`, which lets Jacobian products be applied factor by
factor without ever being formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels

# Rayleigh quotients below this mean the start vector sits in the null space.
_RAYLEIGH_FLOOR = 1e-300


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int


class MatrixMap:
    """Adapter giving a dense array the ``matvec``/``rmatvec`` interface."""

    def __init__(self, m):
        self.m = m
        self.shape = m.shape

    def matvec(self, v):
        return self.m @ v

    def rmatvec(self, v):
        return self.m.T @ v


def _check_finite(m):
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite input")
    return m


def as_linear_map(m):
    if hasattr(m, "matvec") and hasattr(m, "rmatvec"):
        return m
    m = _check_finite(m)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return MatrixMap(m)


def spectral_norm_power(m, iters: int = 5, seed: int = 0) -> float:
    """Estimate the largest singular value by power iteration on ``m^T m``.

    Starts from the normalized all-ones vector, so repeated calls give
    identical results. Only if that start lies in the null space is a random
    start drawn from ``seed``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    op = as_linear_map(m)
    n = op.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    for attempt in range(2):
        for _ in range(iters):
            w = op.matvec(v)
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite input")
            if w @ w < _RAYLEIGH_FLOOR:
                break
            z = op.rmatvec(w)
            v = z / np.linalg.norm(z)
        else:
            return float(np.linalg.norm(op.matvec(v)))
        if attempt == 0:
            v = np.random.default_rng(seed).standard_normal(n)
            v /= np.linalg.norm(v)
    return 0.0


def chain_power_norms(jac, ks, ts, iters: int = 5):
    """Power-iteration norms of many Jacobian-chain products at once.

    ``jac`` has shape ``(B, T, N, N)`` with ``jac[:, j-1]`` holding J_j. For
    each pair ``(k, t)`` the operand is ``J_t ... J_{k+1}``; the result has
    shape ``(B, len(ks))``. The iteration is the same as in
    :func:`spectral_norm_power`, but every pair and batch element advances
    together, one Jacobian index at a time. Entries whose iterate collapsed
    are recomputed through :func:`spectral_norm_power`.
    """
    jac = np.asarray(jac, dtype=np.float64)
    ks = np.asarray(ks, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    batch, steps, n, _ = jac.shape
    if np.any(ks >= ts) or np.any(ks < 0) or np.any(ts > steps):
        raise IndexError("pair indices out of range")
    npairs = len(ks)
    jac_t = np.swapaxes(jac, 2, 3)
    # active[j] selects pairs whose product contains J_{j+1}
    active = [np.nonzero((ks <= j) & (ts > j))[0] for j in range(steps)]

    def forward(v):
        v = v.copy()
        for j in range(steps):
            idx = active[j]
            if len(idx):
                v[:, idx] = v[:, idx] @ jac_t[:, j]
        return v

    def backward(w):
        w = w.copy()
        for j in range(steps - 1, -1, -1):
            idx = active[j]
            if len(idx):
                w[:, idx] = w[:, idx] @ jac[:, j]
        return w

    v = np.full((batch, npairs, n), 1.0 / np.sqrt(n))
    collapsed = np.zeros((batch, npairs), dtype=bool)
    for _ in range(iters):
        w = forward(v)
        rq = np.einsum("bpn,bpn->bp", w, w)
        collapsed |= rq < _RAYLEIGH_FLOOR
        z = backward(w)
        norms = np.linalg.norm(z, axis=2, keepdims=True)
        v = z / np.where(norms > 0, norms, 1.0)
    out = np.linalg.norm(forward(v), axis=2)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite input")
    for b, p in zip(*np.nonzero(collapsed)):
        op = JacobianChain(jac[b], int(ks[p]), int(ts[p]))
        out[b, p] = spectral_norm_power(op, iters)
    return out


class JacobianChain:
    """Lazy ``J_t ... J_{k+1}`` over a stack ``jac[j-1] = J_j``."""

    def __init__(self, jac, k: int, t: int):
        if not 0 <= k <= t <= len(jac):
            raise IndexError(f"need 0 <= k <= t <= {len(jac)}, got k={k}, t={t}")
        self.jac = jac
        self.k = k
        self.t = t
        n = jac.shape[-1]
        self.shape = (n, n)

    def matvec(self, v):
        for j in range(self.k, self.t):
            v = self.jac[j] @ v
        return v

    def rmatvec(self, v):
        for j in range(self.t - 1, self.k - 1, -1):
            v = self.jac[j].T @ v
        return v

    def todense(self):
        out = np.eye(self.shape[0])
        for j in range(self.k, self.t):
            out = self.jac[j] @ out
        return out


def _precondition(m):
    # Long vectors only slow the rotations down; R from a QR of the long side
    # has the same singular values.
    rows, cols = m.shape
    if max(rows, cols) > 2 * min(rows, cols):
        tall = m if rows > cols else m.T
        return np.linalg.qr(tall, mode="r")
    return m


def svd_values(m):
    """Singular values in descending order, via one-sided Jacobi."""
    m = _check_finite(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if min(m.shape) == 0:
        return np.zeros(0)
    return kernels.singular_values(np.ascontiguousarray(_precondition(m)))


def svd_values_batch(stack):
    """Singular values for a stack of equally shaped matrices ``(B, r, c)``."""
    stack = _check_finite(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected a 3-D stack, got shape {stack.shape}")
    return kernels.singular_values_batch(np.ascontiguousarray(stack))


def spectral_norm(m) -> float:
    sv = svd_values(m)
    return float(sv[0]) if len(sv) else 0.0


def _ols(x, y):
    xm = x.mean()
    ym = y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 0.0:
        raise DegenerateFitError("zero variance in x")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - intercept - slope * x) ** 2)
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def linfit_clipped(x, y, q_lo: float = 0.01, q_hi: float = 0.99) -> FitResult:
    """OLS of ``y`` on ``x`` over points whose ``x`` lies in the central quantile band."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if not (0.0 <= q_lo <= q_hi <= 1.0):
        raise ValueError("need 0 <= q_lo <= q_hi <= 1")
    if len(x) < 3:
        raise DegenerateFitError("degenerate fit")
    lo, hi = np.quantile(x, [q_lo, q_hi])
    keep = (x >= lo) & (x <= hi)
    if keep.sum() < 3:
        raise DegenerateFitError("degenerate fit")
    slope, intercept, r2 = _ols(x[keep], y[keep])
    return FitResult(slope, intercept, r2, int(keep.sum()))
