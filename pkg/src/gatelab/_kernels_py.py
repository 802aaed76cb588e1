"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Rotations are applied to disjoint pairs in round-robin order so that each
round is a single vectorized update.
"""
import numpy as np

EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 80


def _round_robin(n):
    # circle method; n even
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[::-1][:half])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_rows(u):
    """Orthogonalize the rows of ``u`` (shape ``(batch, k, L)``) in place."""
    batch, k, length = u.shape
    if k < 2:
        return u
    if k % 2:
        u = np.concatenate([u, np.zeros((batch, 1, length))], axis=1)
    tol = max(length, 1) * EPS
    schedule = _round_robin(u.shape[1])
    for _ in range(MAX_SWEEPS):
        rotated = False
        for left, right in schedule:
            ui = u[:, left, :]
            uj = u[:, right, :]
            alpha = np.einsum("bpl,bpl->bp", ui, ui)
            beta = np.einsum("bpl,bpl->bp", uj, uj)
            gamma = np.einsum("bpl,bpl->bp", ui, uj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[..., None]
            s = np.where(active, s, 0.0)[..., None]
            u[:, left, :] = c * ui - s * uj
            u[:, right, :] = s * ui + c * uj
        if not rotated:
            break
    return u[:, :k, :]


def singular_values_batch(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    batch, rows, cols = a.shape
    k = min(rows, cols)
    if k == 0:
        return np.zeros((batch, 0))
    u = a.copy() if rows <= cols else np.ascontiguousarray(np.swapaxes(a, 1, 2))
    u = _jacobi_rows(u)
    sv = np.sqrt(np.einsum("bkl,bkl->bk", u, u))
    return -np.sort(-sv, axis=1)


def singular_values(a):
    return singular_values_batch(np.asarray(a, dtype=np.float64)[None])[0]
