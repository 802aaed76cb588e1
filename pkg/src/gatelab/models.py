"""Discrete-time recurrent models and their exact one-step Jacobians.

All four kinds share the update

    x_{t+1} = x_t + g_t * (phi(W_rec x_t + W_in u_t) - x_t)

with ``g_t = 1`` (plain), ``g_t = alpha`` (leaky), a scalar sigmoid gate, or a
per-unit sigmoid gate driven by ``W_rec_gate x_t + W_in_gate u_t``. No biases
anywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import spectral_norm

KINDS = ("plain", "leaky", "scalar_gate", "multi_gate")
PARAM_FIELDS = ("w_rec", "w_in", "w_out", "w_rec_gate", "w_in_gate")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


@dataclass(frozen=True)
class ModelKind:
    name: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown model kind {self.name!r}; expected one of {KINDS}")
        if self.name == "leaky" and not (0.0 <= self.alpha <= 1.0):
            raise ValueError("leaky alpha must lie in [0, 1]")

    @classmethod
    def plain(cls):
        return cls("plain")

    @classmethod
    def leaky(cls, alpha: float):
        return cls("leaky", float(alpha))

    @classmethod
    def scalar_gate(cls):
        return cls("scalar_gate")

    @classmethod
    def multi_gate(cls):
        return cls("multi_gate")

    @property
    def gated(self) -> bool:
        return self.name in ("scalar_gate", "multi_gate")


def _tanh_prime(a):
    return 1.0 - np.tanh(a) ** 2


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_prime),
    "identity": (lambda a: a, np.ones_like),
}


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class Params:
    w_rec: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    w_rec_gate: np.ndarray | None = None
    w_in_gate: np.ndarray | None = None
    activation: str = "tanh"

    @property
    def n_rec(self) -> int:
        return self.w_rec.shape[0]

    def names(self):
        return [n for n in PARAM_FIELDS if getattr(self, n) is not None]

    def arrays(self):
        return [getattr(self, n) for n in self.names()]

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        out = {}
        pos = 0
        for name in self.names():
            a = getattr(self, name)
            out[name] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return replace(self, **out)

    def copy(self):
        return replace(self, **{n: getattr(self, n).copy() for n in self.names()})

    def to_dict(self):
        d = {"activation": self.activation}
        for name in self.names():
            a = getattr(self, name)
            d[name] = {"shape": list(a.shape), "data": a.ravel().tolist()}
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {"activation": d.get("activation", "tanh")}
        for name in PARAM_FIELDS:
            if name in d:
                entry = d[name]
                kw[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


def check_params(kind: ModelKind, p: Params, n_in: int | None = None):
    n = p.w_rec.shape[0]
    if p.w_rec.shape != (n, n):
        raise ValueError(f"w_rec must be square, got {p.w_rec.shape}")
    if p.w_in.shape[0] != n:
        raise ValueError(f"w_in must have {n} rows, got {p.w_in.shape}")
    if n_in is not None and p.w_in.shape[1] != n_in:
        raise ValueError(f"input has {n_in} channels but w_in is {p.w_in.shape}")
    if p.w_out.ndim != 2 or p.w_out.shape[1] != n:
        raise ValueError(f"w_out must be N_o x {n}, got {p.w_out.shape}")
    if p.activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {p.activation!r}")
    if kind.gated:
        rows = 1 if kind.name == "scalar_gate" else n
        if p.w_rec_gate is None or p.w_in_gate is None:
            raise ValueError(f"{kind.name} needs gate weights")
        if p.w_rec_gate.shape != (rows, n):
            raise ValueError(f"w_rec_gate must be {rows}x{n}, got {p.w_rec_gate.shape}")
        if p.w_in_gate.shape != (rows, p.w_in.shape[1]):
            raise ValueError(f"w_in_gate must be {rows}x{p.w_in.shape[1]}, got {p.w_in_gate.shape}")


def init_params(kind: ModelKind, n_rec: int, n_in: int, n_out: int, seed: int = 0,
                activation: str = "tanh", rec_norm: float = 0.9) -> Params:
    """Gaussian init; recurrent weights rescaled to spectral norm ``rec_norm``."""
    rng = np.random.Generator(np.random.Philox(seed))
    w_rec = rng.standard_normal((n_rec, n_rec))
    w_rec *= rec_norm / spectral_norm(w_rec)
    w_in = rng.standard_normal((n_rec, n_in)) / np.sqrt(n_in)
    w_out = rng.standard_normal((n_out, n_rec)) / np.sqrt(n_rec)
    p = Params(w_rec, w_in, w_out, activation=activation)
    if kind.gated:
        rows = 1 if kind.name == "scalar_gate" else n_rec
        p.w_rec_gate = rng.standard_normal((rows, n_rec)) / np.sqrt(n_rec)
        p.w_in_gate = rng.standard_normal((rows, n_in)) / np.sqrt(n_in)
    return p


@dataclass
class Trajectory:
    """States and intermediates of a forward pass.

    Arrays may carry a leading batch axis. ``states`` has one more time step
    than the others: ``states[t]`` is x_t for t = 0..T, while ``preacts[t]``,
    ``gates[t]`` etc. belong to the step x_t -> x_{t+1}. ``gates`` holds the
    effective update rate for every kind (constant for plain/leaky).
    """

    states: np.ndarray
    preacts: np.ndarray
    inputs: np.ndarray
    gates: np.ndarray
    gate_preacts: np.ndarray | None = None
    kind: ModelKind = field(default_factory=ModelKind.plain)

    @property
    def steps(self) -> int:
        return self.preacts.shape[-2]

    @property
    def batched(self) -> bool:
        return self.states.ndim == 3

    def sequence(self, i: int) -> Trajectory:
        if not self.batched:
            raise ValueError("trajectory is not batched")
        return Trajectory(
            self.states[i], self.preacts[i], self.inputs[i], self.gates[i],
            None if self.gate_preacts is None else self.gate_preacts[i], self.kind,
        )


def forward_batch(kind: ModelKind, p: Params, inputs, x0=None) -> Trajectory:
    """Run ``inputs`` of shape ``(B, T, N_i)`` from ``x0`` (zeros by default)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ValueError(f"inputs must be (B, T, N_i), got {inputs.shape}")
    check_params(kind, p, inputs.shape[2])
    batch, steps, _ = inputs.shape
    n = p.n_rec
    phi, _ = ACTIVATIONS[p.activation]
    x = np.zeros((batch, n)) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=np.float64), (batch, n)).copy()
    if not np.all(np.isfinite(x)):
        raise DivergenceError(0, "non-finite initial state")
    gate_width = {"plain": 1, "leaky": 1, "scalar_gate": 1, "multi_gate": n}[kind.name]
    states = np.empty((batch, steps + 1, n))
    preacts = np.empty((batch, steps, n))
    gates = np.empty((batch, steps, gate_width))
    gate_preacts = np.empty((batch, steps, gate_width)) if kind.gated else None
    states[:, 0] = x
    # input drives are independent of the state; precompute them
    drive = inputs @ p.w_in.T
    if kind.gated:
        gate_drive = inputs @ p.w_in_gate.T
    for t in range(steps):
        a = x @ p.w_rec.T + drive[:, t]
        if kind.gated:
            ag = x @ p.w_rec_gate.T + gate_drive[:, t]
            g = sigmoid(ag)
            gate_preacts[:, t] = ag
        elif kind.name == "leaky":
            g = np.full((batch, 1), kind.alpha)
        else:
            g = np.ones((batch, 1))
        x = x + g * (phi(a) - x)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t + 1)
        preacts[:, t] = a
        gates[:, t] = g
        states[:, t + 1] = x
    return Trajectory(states, preacts, inputs, gates, gate_preacts, kind)


def forward(kind: ModelKind, p: Params, u, x0=None) -> Trajectory:
    """Single-sequence forward pass; ``u`` has shape ``(T, N_i)``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"u must be (T, N_i), got {u.shape}")
    x0b = None if x0 is None else np.asarray(x0, dtype=np.float64)[None]
    return forward_batch(kind, p, u[None], x0b).sequence(0)


def readout(p: Params, traj: Trajectory):
    """Outputs z_t = W_out x_t for t = 1..T (leading batch axis kept)."""
    if p.w_out.shape[1] != traj.states.shape[-1]:
        raise ValueError("w_out does not match the state size")
    return traj.states[..., 1:, :] @ p.w_out.T


@dataclass
class JacobianDecomposition:
    full: np.ndarray
    dominant: np.ndarray
    correction: np.ndarray


def jacobian_stack(kind: ModelKind, p: Params, traj: Trajectory) -> JacobianDecomposition:
    """All step Jacobians J_1..J_T at once; index ``j-1`` holds J_j."""
    _, phi_prime = ACTIVATIONS[p.activation]
    phi, _ = ACTIVATIONS[p.activation]
    n = p.n_rec
    a = traj.preacts
    x = traj.states[..., :-1, :]
    g = traj.gates
    eye = np.eye(n)
    dw = phi_prime(a)[..., :, None] * p.w_rec
    dominant = g[..., :, None] * dw + (1.0 - g)[..., :, None] * eye
    if kind.gated:
        d = phi(a) - x
        ag = traj.gate_preacts
        sp = sigmoid(ag) * (1.0 - sigmoid(ag))
        if kind.name == "scalar_gate":
            row = sp[..., :, None] * p.w_rec_gate[0]
            correction = d[..., :, None] * row
        else:
            correction = (d * sp)[..., :, None] * p.w_rec_gate
    else:
        correction = np.zeros_like(dominant)
    return JacobianDecomposition(dominant + correction, dominant, correction)


def step_jacobian(kind: ModelKind, p: Params, traj: Trajectory, j: int) -> JacobianDecomposition:
    """J_j = d x_j / d x_{j-1} for 1 <= j <= T, split into dominant and gate parts."""
    if traj.batched:
        raise ValueError("pass a single-sequence trajectory")
    if not 1 <= j <= traj.steps:
        raise IndexError(f"step {j} outside 1..{traj.steps}")
    sl = slice(j - 1, j)
    sub = Trajectory(traj.states[j - 1:j + 1], traj.preacts[sl], traj.inputs[sl], traj.gates[sl],
                     None if traj.gate_preacts is None else traj.gate_preacts[sl], kind)
    dec = jacobian_stack(kind, p, sub)
    return JacobianDecomposition(dec.full[0], dec.dominant[0], dec.correction[0])


class JacobianProduct:
    """prod_{j=k+1}^{t} J_j, applied right to left (J_{k+1} first)."""

    def __init__(self, full_stack, k: int, t: int):
        from .linalg import JacobianChain

        self._chain = JacobianChain(full_stack, k, t)
        self.shape = self._chain.shape
        self.k = k
        self.t = t

    def matvec(self, v):
        return self._chain.matvec(v)

    def rmatvec(self, v):
        return self._chain.rmatvec(v)

    def todense(self):
        return self._chain.todense()


def jacobian_product(decomps, k: int, t: int) -> JacobianProduct:
    """Lazy product over steps k+1..t.

    ``decomps`` is either a :class:`JacobianDecomposition` stack from
    :func:`jacobian_stack`, a list of per-step decompositions (index ``j-1``
    for J_j), or a raw ``(T, N, N)`` array.
    """
    if isinstance(decomps, JacobianDecomposition):
        full = decomps.full
    elif isinstance(decomps, (list, tuple)):
        full = np.stack([d.full if isinstance(d, JacobianDecomposition) else d for d in decomps])
    else:
        full = np.asarray(decomps)
    if full.ndim != 3:
        raise ValueError("expected one sequence of step Jacobians")
    if not 0 <= k <= t <= len(full):
        raise IndexError(f"need 0 <= k <= t <= {len(full)}, got k={k}, t={t}")
    return JacobianProduct(full, k, t)
