"""Measurement pipelines on a fixed probe batch.

Lag profiles: sensitivities S_{t,k} = ||J_t ... J_{k+1}||_2 (short power
iteration) against gate-product predictors P_{t,k}, lag-binned and
normalized at unit lag, with a log-log slope fit.

Anisotropy: singular-value summaries (AI_r, CE_r) of explicit Jacobian
products per lag, and of the normalized per-sample gradient matrix.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bptt import Batch, per_sample_grad_matrix
from .linalg import FitResult, DegenerateFitError, chain_power_norms, linfit_clipped, svd_values, svd_values_batch
from .models import ModelKind, Params, Trajectory, forward_batch, jacobian_stack

MAX_PAIRS_PER_LAG = 64


class RankDeficientError(ValueError):
    pass


@dataclass
class SensitivityTable:
    seq: np.ndarray
    t: np.ndarray
    k: np.ndarray
    lag: np.ndarray
    S: np.ndarray
    P: np.ndarray
    checkpoint: int = 0

    def __len__(self):
        return len(self.S)

    def rows(self):
        for i in range(len(self)):
            yield self.checkpoint, int(self.t[i]), int(self.k[i]), int(self.lag[i]), float(self.S[i]), float(self.P[i])

    @classmethod
    def from_arrays(cls, t, k, S, P, checkpoint=0, seq=None):
        t = np.asarray(t, dtype=np.int64)
        k = np.asarray(k, dtype=np.int64)
        seq = np.zeros_like(t) if seq is None else np.asarray(seq, dtype=np.int64)
        return cls(seq, t, k, t - k, np.asarray(S, dtype=np.float64), np.asarray(P, dtype=np.float64), checkpoint)


@dataclass
class EffectiveLrProfile:
    lags: np.ndarray
    mu_eff: np.ndarray
    mu_pred0: np.ndarray
    mu_predfit: np.ndarray
    fit: FitResult | None


@dataclass
class SpectrumSummary:
    sigma: np.ndarray
    ai_r: float
    ce_r: float
    r: int
    flags: list = field(default_factory=list)


def default_pairs(steps: int, lags, seed: int = 0):
    """All (k, t) pairs per lag when T <= 64, else up to 64 sampled ones."""
    rng = np.random.Generator(np.random.Philox(seed))
    ks, ts = [], []
    for h in lags:
        if not 1 <= h <= steps:
            raise ValueError(f"lag {h} outside 1..{steps}")
        k_all = np.arange(0, steps - h + 1)
        if steps > 64 and len(k_all) > MAX_PAIRS_PER_LAG:
            k_all = np.sort(rng.choice(k_all, MAX_PAIRS_PER_LAG, replace=False))
        ks.extend(k_all.tolist())
        ts.extend((k_all + h).tolist())
    return np.asarray(ks, dtype=np.int64), np.asarray(ts, dtype=np.int64)


def gate_product_predictor(kind: ModelKind, traj: Trajectory, k: int, t: int) -> float:
    """Attenuation implied by the gates alone over steps k+1..t."""
    if not k < t:
        raise ValueError("need k < t")
    if kind.name == "plain":
        return 1.0
    if kind.name == "leaky":
        return kind.alpha ** (t - k)
    gates = traj.gates[k:t]
    prod = np.prod(gates, axis=0)
    return float(prod[0]) if kind.name == "scalar_gate" else float(np.mean(prod))


def gate_products(kind: ModelKind, traj: Trajectory, ks, ts):
    """Vectorized :func:`gate_product_predictor`; shape ``(B, len(ks))``."""
    batch = traj.gates.shape[0]
    lags = ts - ks
    if kind.name == "plain":
        return np.ones((batch, len(ks)))
    if kind.name == "leaky":
        return np.broadcast_to(kind.alpha ** lags.astype(np.float64), (batch, len(ks))).copy()
    logs = np.concatenate([np.zeros((batch, 1, traj.gates.shape[2])), np.cumsum(np.log(traj.gates), axis=1)], axis=1)
    prods = np.exp(logs[:, ts] - logs[:, ks])
    return prods[..., 0] if kind.name == "scalar_gate" else prods.mean(axis=2)


def sensitivity_table(kind: ModelKind, p: Params, probe: Batch, lag_set=None, pair_sampler=None,
                      iters: int = 5, checkpoint: int = 0) -> SensitivityTable:
    traj = forward_batch(kind, p, probe.inputs)
    steps = traj.steps
    lag_set = range(1, steps) if lag_set is None else lag_set
    ks, ts = (pair_sampler or default_pairs)(steps, list(lag_set))
    jac = jacobian_stack(kind, p, traj).full
    S = chain_power_norms(jac, ks, ts, iters)
    P = gate_products(kind, traj, ks, ts)
    batch = probe.size
    seq = np.repeat(np.arange(batch), len(ks))
    order = np.lexsort((seq, np.tile(ts - ks, batch)))
    return SensitivityTable(seq[order], np.tile(ts, batch)[order], np.tile(ks, batch)[order],
                            np.tile(ts - ks, batch)[order], S.ravel()[order], P.ravel()[order], checkpoint)


def fit_slope(table: SensitivityTable, q_lo: float = 0.01, q_hi: float = 0.99) -> FitResult:
    """Regress log S on log P over the central predictor band."""
    keep = (table.S > 0) & (table.P > 0)
    return linfit_clipped(np.log(table.P[keep]), np.log(table.S[keep]), q_lo, q_hi)


def effective_lr_profile(table: SensitivityTable, fit: FitResult | None = None) -> EffectiveLrProfile:
    lags = np.unique(table.lag)
    if 1 not in lags:
        raise ValueError("sensitivity table has no unit-lag entries")
    med_s = np.array([np.median(table.S[table.lag == h]) for h in lags])
    med_p = np.array([np.median(table.P[table.lag == h]) for h in lags])
    mu_eff = med_s / med_s[0]
    mu_pred0 = med_p / med_p[0]
    if fit is None:
        try:
            fit = fit_slope(table)
        except DegenerateFitError:
            fit = None
    mu_predfit = mu_pred0 ** fit.slope if fit is not None else mu_pred0.copy()
    return EffectiveLrProfile(lags, mu_eff, mu_pred0, mu_predfit, fit)


def spectrum_metrics(sigma, r: int) -> SpectrumSummary:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or len(sigma) == 0:
        raise ValueError("need a non-empty 1-D spectrum")
    if np.any(np.diff(sigma) > 1e-12 * max(sigma[0], 1e-300)):
        raise ValueError("spectrum must be sorted in descending order")
    if not 1 <= r <= len(sigma):
        raise ValueError(f"r={r} outside 1..{len(sigma)}")
    if sigma[r - 1] <= 0:
        raise RankDeficientError(f"rank-deficient at r={r}")
    energy = sigma ** 2
    return SpectrumSummary(sigma, float(sigma[0] / sigma[r - 1]), float(energy[:r].sum() / energy.sum()), r)


def _metrics_or_flag(sigma, r):
    try:
        return spectrum_metrics(sigma, r)
    except RankDeficientError:
        energy = sigma ** 2
        total = energy.sum()
        ce = float(energy[:r].sum() / total) if total > 0 else float("nan")
        return SpectrumSummary(sigma, float("inf"), ce, r, ["rank-deficient"])


@dataclass
class LagAnisotropy:
    lag: int
    ai_r: float
    ce_r: float
    r: int
    n_pairs: int


def product_stack(jac, ks, ts):
    """Explicit J_t ... J_{k+1} for each pair; ``jac`` is ``(B, T, N, N)``."""
    batch, _, n, _ = jac.shape
    out = np.empty((batch, len(ks), n, n))
    by_start = {}
    for idx, (k, t) in enumerate(zip(ks, ts)):
        by_start.setdefault(int(k), []).append((int(t), idx))
    for k, ends in by_start.items():
        ends.sort()
        m = np.broadcast_to(np.eye(n), (batch, n, n)).copy()
        j = k
        for t, idx in ends:
            while j < t:
                m = jac[:, j] @ m
                j += 1
            out[:, idx] = m
    return out


def jacobian_anisotropy_vs_lag(kind: ModelKind, p: Params, probe: Batch, lags, r: int,
                               pair_sampler=None) -> list[LagAnisotropy]:
    """Per-lag medians of AI_r and CE_r of explicit Jacobian products."""
    traj = forward_batch(kind, p, probe.inputs)
    if r > p.n_rec:
        raise ValueError(f"r={r} exceeds the state size {p.n_rec}")
    ks, ts = (pair_sampler or default_pairs)(traj.steps, list(lags))
    jac = jacobian_stack(kind, p, traj).full
    prods = product_stack(jac, ks, ts)
    n = p.n_rec
    sigma = svd_values_batch(prods.reshape(-1, n, n)).reshape(probe.size, len(ks), n)
    out = []
    lag_of = ts - ks
    for h in lags:
        cols = np.nonzero(lag_of == h)[0]
        summaries = [_metrics_or_flag(sigma[b, c], r) for b in range(probe.size) for c in cols]
        out.append(LagAnisotropy(int(h), float(np.median([s.ai_r for s in summaries])),
                                 float(np.median([s.ce_r for s in summaries])), r, len(summaries)))
    return out


@dataclass
class UpdateAnisotropy:
    summary: SpectrumSummary
    m: int
    p: int
    dropped_cols: int
    dropped_rows: int
    degenerate: bool

    @property
    def ai_r(self):
        return self.summary.ai_r

    @property
    def ce_r(self):
        return self.summary.ce_r


def gradient_spectrum(grads, r: int, tau_col: float = 1e-12, kappa: float = 1e-10, seed: int = 0) -> UpdateAnisotropy:
    """Normalize rows, center and prune columns, jitter, then summarize the spectrum."""
    g = np.asarray(grads, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    nonzero = norms > 0
    dropped_rows = int((~nonzero).sum())
    if dropped_rows == g.shape[0]:
        raise ValueError("all gradient rows are zero")
    if dropped_rows:
        warnings.warn(f"dropped {dropped_rows} zero gradient rows", RuntimeWarning, stacklevel=2)
    x = g[nonzero] / norms[nonzero, None]
    scale = np.linalg.norm(x)
    x = x - x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = std.max() <= 1e-14
    if degenerate:
        keep = np.ones(x.shape[1], dtype=bool)
    else:
        keep = std >= tau_col * std.max()
    x = x[:, keep]
    m, p = x.shape
    rng = np.random.Generator(np.random.Philox(seed))
    x = x + rng.standard_normal((m, p)) * (kappa * scale / np.sqrt(m * p))
    sigma = svd_values(x)
    r_eff = min(r, len(sigma))
    summary = _metrics_or_flag(sigma, r_eff)
    if degenerate:
        summary.flags.append("degenerate")
    return UpdateAnisotropy(summary, m, p, int((~keep).sum()), dropped_rows, bool(degenerate))


def update_anisotropy(kind: ModelKind, p: Params, probe: Batch, r: int = 10, tau_col: float = 1e-12,
                      kappa: float = 1e-10, seed: int = 0) -> UpdateAnisotropy:
    if probe.size < r:
        raise ValueError(f"need at least r={r} probe sequences, got {probe.size}")
    return gradient_spectrum(per_sample_grad_matrix(kind, p, probe), r, tau_col, kappa, seed)
