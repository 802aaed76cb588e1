"""First-order expansion of structured matrix products and its diagnostics.

For F(eps) = (A_1 + eps B_1)(A_2 + eps B_2)...(A_n + eps B_n), with factor 1
leftmost, the first-order term is

    L = sum_i (A_1 ... A_{i-1}) B_i (A_{i+1} ... A_n)

and T_1(eps) = F(0) + eps L. The diagnostics check that ||F - T_1|| shrinks
like eps^2 and that ||B_j|| stays small next to ||A_j||.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .linalg import DegenerateFitError, FitResult, linfit_clipped, spectral_norm
from .models import ModelKind, Params, Trajectory, jacobian_stack


@dataclass
class FactorSequence:
    a_list: list
    b_list: list

    def __post_init__(self):
        self.a_list = [np.asarray(a, dtype=np.float64) for a in self.a_list]
        self.b_list = [np.asarray(b, dtype=np.float64) for b in self.b_list]
        if len(self.a_list) != len(self.b_list) or not self.a_list:
            raise ValueError("need equally many (>= 1) A and B factors")
        shape = self.a_list[0].shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError("factors must be square")
        for a, b in zip(self.a_list, self.b_list):
            if a.shape != shape or b.shape != shape:
                raise ValueError("all factors must share one shape")

    def __len__(self):
        return len(self.a_list)

    @property
    def dim(self) -> int:
        return self.a_list[0].shape[0]


def exact_product(fs: FactorSequence, eps: float):
    out = np.eye(fs.dim)
    for a, b in zip(fs.a_list, fs.b_list):
        out = out @ (a + eps * b)
    return out


def first_order_term(fs: FactorSequence):
    """Return ``(F(0), L)`` using prefix and suffix products of the A factors."""
    n = len(fs)
    eye = np.eye(fs.dim)
    prefix = [eye]
    for a in fs.a_list:
        prefix.append(prefix[-1] @ a)
    suffix = [eye] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = fs.a_list[i] @ suffix[i + 1]
    # prefix[i] = A_1..A_i, suffix[i] = A_{i+1}..A_n (0-based factor i is slot i+1)
    term = np.zeros((fs.dim, fs.dim))
    for i, b in enumerate(fs.b_list):
        term += prefix[i] @ b @ suffix[i + 1]
    return prefix[n], term


def truncated_product(fs: FactorSequence, eps: float):
    f0, term = first_order_term(fs)
    return f0 + eps * term


def decompose_model_jacobians(kind: ModelKind, traj: Trajectory, params: Params,
                              k: int = 0, t: int | None = None) -> FactorSequence:
    """Dominant (A) and gate-correction (B) parts of J_{k+1}..J_t.

    Factors are ordered so that factor 1 is J_t: then ``exact_product(fs, 1)``
    reproduces the transport J_t ... J_{k+1}.
    """
    if traj.batched:
        raise ValueError("pass a single-sequence trajectory")
    t = traj.steps if t is None else t
    if not 0 <= k < t <= traj.steps:
        raise IndexError(f"need 0 <= k < t <= {traj.steps}, got k={k}, t={t}")
    dec = jacobian_stack(kind, params, traj)
    steps = range(t - 1, k - 1, -1)
    return FactorSequence([dec.dominant[j] for j in steps], [dec.correction[j] for j in steps])


@dataclass
class ExpansionReport:
    eps_grid: np.ndarray
    errors: np.ndarray
    c2_values: np.ndarray
    fit: FitResult | None
    status: str
    ratios: np.ndarray
    ratio_median: float
    ratio_max: float
    fit_range: tuple

    @property
    def slope(self):
        return None if self.fit is None else self.fit.slope

    def c2_spread(self) -> float:
        """Relative spread of C_2 over the two smallest eps."""
        order = np.argsort(self.eps_grid)[:2]
        c = self.c2_values[order]
        top = max(abs(c[0]), abs(c[1]))
        return 0.0 if top == 0.0 else float(abs(c[0] - c[1]) / top)

    def summary(self):
        fit = None if self.fit is None else {
            "slope": self.fit.slope, "intercept": self.fit.intercept,
            "r2": self.fit.r_squared, "n": self.fit.n_points,
        }
        return {
            "status": self.status,
            "fit": fit,
            "fit_range": list(self.fit_range),
            "c2_spread_smallest_two": self.c2_spread(),
            "ratio_median": self.ratio_median,
            "ratio_max": self.ratio_max,
            "ratios": self.ratios.tolist(),
            "n_factors": int(len(self.ratios)),
        }

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "error", "c2"])
            for e, err, c2 in zip(self.eps_grid, self.errors, self.c2_values):
                w.writerow([repr(float(e)), repr(float(err)), repr(float(c2))])
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def default_eps_grid():
    return np.logspace(-4, 0, 12)


def run_diagnostics(fs: FactorSequence, eps_grid=None, fit_range=None, n_fit: int = 6) -> ExpansionReport:
    """Truncation errors, C_2 values, log-log slope and per-step norm ratios.

    The slope is fitted over ``fit_range = (lo, hi)`` when given, otherwise
    over the ``n_fit`` smallest eps values.
    """
    eps_grid = default_eps_grid() if eps_grid is None else np.asarray(eps_grid, dtype=np.float64)
    if len(eps_grid) < 5 or np.any(eps_grid <= 0) or np.any(eps_grid > 1):
        raise ValueError("eps grid needs >= 5 points in (0, 1]")
    eps_grid = np.sort(eps_grid)
    f0, term = first_order_term(fs)
    errors = np.array([spectral_norm(exact_product(fs, e) - (f0 + e * term)) for e in eps_grid])
    c2 = errors / eps_grid ** 2
    if fit_range is None:
        sel = np.arange(min(n_fit, len(eps_grid)))
        fit_range = (float(eps_grid[sel[0]]), float(eps_grid[sel[-1]]))
    else:
        lo, hi = fit_range
        sel = np.nonzero((eps_grid >= lo * (1 - 1e-12)) & (eps_grid <= hi * (1 + 1e-12)))[0]
    scale = max(spectral_norm(f0), spectral_norm(term), 1e-300)
    fit = None
    if np.all(errors[sel] <= 1e-14 * scale):
        status = "exact"
    else:
        try:
            fit = linfit_clipped(np.log(eps_grid[sel]), np.log(np.maximum(errors[sel], 1e-300)), 0.0, 1.0)
            status = "fitted"
        except DegenerateFitError:
            status = "degenerate"
    ratios = []
    for a, b in zip(fs.a_list, fs.b_list):
        na = spectral_norm(a)
        ratios.append(spectral_norm(b) / na if na > 0 else np.inf)
    ratios = np.asarray(ratios)
    return ExpansionReport(eps_grid, errors, c2, fit, status, ratios,
                           float(np.median(ratios)), float(np.max(ratios)), tuple(fit_range))
