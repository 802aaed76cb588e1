"""Seeded generators for the five synthetic sequence tasks.

Every sequence draws from its own Philox (counter-based, 64-bit) stream keyed
by ``(seed, sequence index[, retry])`` through ``numpy.random.SeedSequence``,
so a sequence's content does not depend on how many others are generated or
in which order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bptt import Batch

TASKS = ("adding", "ar2", "delay_sum", "moving_average", "narma10")

DEFAULTS = {
    "adding": {},
    "ar2": {"a": 0.6, "b": -0.2, "noise_std": 0.5},
    "delay_sum": {"d1": 3, "d2": 10},
    "moving_average": {"window": 8},
    "narma10": {"divergence_bound": 1e3, "max_retries": 10},
}

NARMA_ORDER = 10


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int = 60
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise TaskError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.seq_len < 2:
            raise TaskError("seq_len must be at least 2")

    def param(self, name):
        return self.params.get(name, DEFAULTS[self.kind][name])

    def __hash__(self):
        return hash((self.kind, self.seq_len, tuple(sorted(self.params.items())), self.seed))


def input_dim(kind: str) -> int:
    return 2 if kind == "adding" else 1


def sequence_rng(seed: int, index: int, retry: int = 0) -> np.random.Generator:
    key = (index,) if retry == 0 else (index, retry)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def adding_sequence(rng, steps):
    u = np.zeros((steps, 2))
    u[:, 0] = rng.uniform(0.0, 1.0, steps)
    marks = rng.choice(steps, size=2, replace=False)
    u[marks, 1] = 1.0
    target = np.zeros((steps, 1))
    target[-1, 0] = u[marks, 0].sum()
    mask = np.zeros(steps, dtype=bool)
    mask[-1] = True
    return u, target, mask


def ar2_filter(noise, a, b):
    y = np.zeros(len(noise))
    for t in range(len(noise)):
        y1 = y[t - 1] if t >= 1 else 0.0
        y2 = y[t - 2] if t >= 2 else 0.0
        y[t] = a * y1 + b * y2 + noise[t]
    return y


def ar2_sequence(rng, steps, a, b, noise_std):
    if not (abs(b) < 1 and a + b < 1 and b - a < 1):
        raise TaskError(f"AR(2) coefficients ({a}, {b}) lie outside the stability triangle")
    u = rng.normal(0.0, noise_std, steps)
    y = ar2_filter(u, a, b)
    return u[:, None], y[:, None], np.ones(steps, dtype=bool)


def delay_sum_sequence(rng, steps, d1, d2):
    if max(d1, d2) >= steps:
        raise TaskError(f"delays ({d1}, {d2}) must be shorter than the sequence ({steps})")
    u = rng.uniform(-1.0, 1.0, steps)
    padded = np.concatenate([np.zeros(max(d1, d2)), u])
    off = max(d1, d2)
    t = np.arange(steps)
    y = padded[off + t - d1] + padded[off + t - d2]
    mask = t >= max(d1, d2)
    return u[:, None], y[:, None], mask


def moving_average_sequence(rng, steps, window):
    if window >= steps:
        raise TaskError(f"window {window} must be shorter than the sequence ({steps})")
    u = rng.uniform(-1.0, 1.0, steps)
    csum = np.concatenate([[0.0], np.cumsum(u)])
    t = np.arange(steps)
    lo = np.maximum(t - window + 1, 0)
    # zero-padded history: always divide by the full window
    y = (csum[t + 1] - csum[lo]) / window
    return u[:, None], y[:, None], t >= window


def narma10_series(u):
    """y[t] for t = 0..T, with y[0] = 0 and zero history; target at step t is y[t+1]."""
    steps = len(u)
    y = np.zeros(steps + 1)
    for t in range(steps):
        hist = sum(y[t - i] for i in range(NARMA_ORDER) if t - i >= 0)
        u_lag = u[t - NARMA_ORDER + 1] if t - NARMA_ORDER + 1 >= 0 else 0.0
        y[t + 1] = 0.3 * y[t] + 0.05 * y[t] * hist + 1.5 * u_lag * u[t] + 0.1
    return y


def narma10_sequence(seed, index, steps, bound, retries):
    if NARMA_ORDER >= steps:
        raise TaskError("NARMA10 needs more than 10 steps")
    for retry in range(retries + 1):
        rng = sequence_rng(seed, index, retry)
        u = rng.uniform(0.0, 0.5, steps)
        y = narma10_series(u)
        if np.all(np.isfinite(y)) and np.max(np.abs(y)) <= bound:
            return u[:, None], y[1:, None], np.arange(steps) >= NARMA_ORDER
    raise TaskError(f"NARMA10 sequence {index} diverged after {retries} retries")


def generate(spec: TaskSpec, n: int, start: int = 0) -> Batch:
    """Sequences ``start .. start+n-1`` of the task's stream."""
    if n < 1:
        raise TaskError("n must be >= 1")
    steps = spec.seq_len
    us, ys, masks = [], [], []
    for index in range(start, start + n):
        rng = sequence_rng(spec.seed, index)
        if spec.kind == "adding":
            u, y, mask = adding_sequence(rng, steps)
        elif spec.kind == "ar2":
            u, y, mask = ar2_sequence(rng, steps, spec.param("a"), spec.param("b"), spec.param("noise_std"))
        elif spec.kind == "delay_sum":
            u, y, mask = delay_sum_sequence(rng, steps, int(spec.param("d1")), int(spec.param("d2")))
        elif spec.kind == "moving_average":
            u, y, mask = moving_average_sequence(rng, steps, int(spec.param("window")))
        else:
            u, y, mask = narma10_sequence(spec.seed, index, steps, spec.param("divergence_bound"),
                                          int(spec.param("max_retries")))
        us.append(u)
        ys.append(y)
        masks.append(mask)
    return Batch(np.stack(us), np.stack(ys), np.stack(masks))


def write_batch_csv(batch: Batch, path):
    n_in = batch.inputs.shape[2]
    n_out = batch.targets.shape[2]
    header = ["seq_id", "t"] + [f"u{i}" for i in range(n_in)]
    header += ["target"] if n_out == 1 else [f"target{i}" for i in range(n_out)]
    header.append("mask")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in range(batch.size):
            for t in range(batch.inputs.shape[1]):
                row = [s, t] + [repr(float(v)) for v in batch.inputs[s, t]]
                row += [repr(float(v)) for v in batch.targets[s, t]]
                row.append(int(batch.mask[s, t]))
                w.writerow(row)
