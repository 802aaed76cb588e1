"""Masked MSE loss, exact BPTT gradients and a finite-difference oracle.

Flattening order everywhere: w_rec, w_in, w_out, w_rec_gate, w_in_gate,
each row-major, omitting absent gate matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ACTIVATIONS, PARAM_FIELDS, ModelKind, Params, forward_batch, readout


@dataclass
class Batch:
    inputs: np.ndarray   # (m, T, N_i)
    targets: np.ndarray  # (m, T, N_o); targets[:, t-1] pairs with z_t
    mask: np.ndarray     # (m, T) bool

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        m, steps = self.inputs.shape[:2]
        if m < 1:
            raise ValueError("batch needs at least one sequence")
        if self.targets.shape[:2] != (m, steps) or self.mask.shape != (m, steps):
            raise ValueError("inputs, targets and mask disagree on (m, T)")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx):
        idx = np.atleast_1d(idx)
        return Batch(self.inputs[idx], self.targets[idx], self.mask[idx])


@dataclass
class GradientSet:
    grads: dict

    def __getitem__(self, name):
        return self.grads[name]

    def names(self):
        return [n for n in PARAM_FIELDS if n in self.grads]

    @property
    def flat(self):
        return np.concatenate([self.grads[n].ravel() for n in self.names()])

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.flat)))


def mse_loss(z, target, mask) -> float:
    """Mean squared error over masked steps and output dims.

    With a leading batch axis the per-sequence losses are averaged.
    """
    z = np.asarray(z, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if z.ndim == 2:
        z, target, mask = z[None], target[None], mask[None]
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("empty mask")
    sq = ((z - target) ** 2).sum(axis=2) * mask
    per_seq = sq.sum(axis=1) / (counts * z.shape[2])
    return float(per_seq.mean())


def batch_loss(kind: ModelKind, p: Params, batch: Batch) -> float:
    traj = forward_batch(kind, p, batch.inputs)
    return mse_loss(readout(p, traj), batch.targets, batch.mask)


def _backward(kind: ModelKind, p: Params, batch: Batch, per_sample: bool):
    traj = forward_batch(kind, p, batch.inputs)
    phi, phi_prime = ACTIVATIONS[p.activation]
    z = readout(p, traj)
    m, steps, n_out = z.shape
    counts = batch.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("empty mask")
    scale = 1.0 / (counts * n_out)
    # d loss_i / d z_t, per sequence (not yet averaged over the batch)
    dz = 2.0 * (z - batch.targets) * batch.mask[..., None] * scale[:, None, None]
    if not per_sample:
        dz = dz / m

    def outer(a, b):
        return np.einsum("bi,bj->bij", a, b) if per_sample else a.T @ b

    shape_of = {name: getattr(p, name).shape for name in p.names()}
    lead = (m,) if per_sample else ()
    grads = {name: np.zeros(lead + shape) for name, shape in shape_of.items()}
    xs = traj.states
    grads["w_out"] = (np.einsum("bto,btn->bon", dz, xs[:, 1:]) if per_sample
                      else np.einsum("bto,btn->on", dz, xs[:, 1:]))
    delta = np.zeros((m, p.n_rec))
    for t in range(steps, 0, -1):
        delta = delta + dz[:, t - 1] @ p.w_out
        a = traj.preacts[:, t - 1]
        g = traj.gates[:, t - 1]
        x_prev = xs[:, t - 1]
        u_prev = batch.inputs[:, t - 1]
        delta_a = delta * g * phi_prime(a)
        grads["w_rec"] += outer(delta_a, x_prev)
        grads["w_in"] += outer(delta_a, u_prev)
        delta_prev = delta * (1.0 - g) + delta_a @ p.w_rec
        if kind.gated:
            d = phi(a) - x_prev
            delta_g = delta * d
            if kind.name == "scalar_gate":
                delta_g = delta_g.sum(axis=1, keepdims=True)
            delta_ag = delta_g * g * (1.0 - g)
            grads["w_rec_gate"] += outer(delta_ag, x_prev)
            grads["w_in_gate"] += outer(delta_ag, u_prev)
            delta_prev = delta_prev + delta_ag @ p.w_rec_gate
        delta = delta_prev
    return grads


def bptt_grad(kind: ModelKind, p: Params, batch: Batch) -> GradientSet:
    """Gradient of the batch-mean loss by reverse accumulation."""
    return GradientSet(_backward(kind, p, batch, per_sample=False))


def per_sample_grads(kind: ModelKind, p: Params, batch: Batch) -> dict:
    return _backward(kind, p, batch, per_sample=True)


def per_sample_grad_matrix(kind: ModelKind, p: Params, probe: Batch):
    """m x p matrix whose row i is the flattened gradient of sequence i alone."""
    if probe.size < 2:
        raise ValueError("need at least two probe sequences")
    g = per_sample_grads(kind, p, probe)
    return np.concatenate([g[n].reshape(probe.size, -1) for n in p.names()], axis=1)


def fd_grad(kind: ModelKind, p: Params, batch: Batch, h: float = 1e-5) -> GradientSet:
    """Central differences of :func:`batch_loss`, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = p.flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        out[i] = (batch_loss(kind, p.with_flat(up), batch)
                  - batch_loss(kind, p.with_flat(down), batch)) / (2.0 * h)
    shaped = p.with_flat(out)
    return GradientSet({n: getattr(shaped, n) for n in p.names()})
