"""Training runs, checkpoints and the probe / expansion / report steps.

A run directory looks like::

    <out>/config.json                   resolved config, every default filled in
    <out>/loss.csv                      iter,train_loss
    <out>/checkpoints/checkpoint_<l>.json
    <out>/probe/checkpoint_<l>/*.csv    sensitivity, eff_lr, slope, jac_aniso, upd_aniso
    <out>/expansion/checkpoint_<l>/     expansion.csv, expansion.json
    <out>/summary.json                  written by report()
"""
from __future__ import annotations

import csv
import io
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis, expansion
from .bptt import Batch, _backward, mse_loss
from .linalg import DegenerateFitError
from .models import DivergenceError, ModelKind, Params, forward, forward_batch, init_params, readout
from .optim import AdamState, adam_step, sgd_step
from .tasks import TASKS, TaskSpec, generate, input_dim

SCHEMAS = {
    "sensitivity": ["checkpoint", "t", "k", "lag", "S", "P"],
    "eff_lr": ["checkpoint", "lag", "mu_eff", "mu_pred0", "mu_predfit"],
    "slope": ["checkpoint", "slope", "intercept", "r2", "n"],
    "jac_aniso": ["checkpoint", "lag", "ai_r", "ce_r", "r"],
    "upd_aniso": ["checkpoint", "ai_r", "ce_r", "r", "m", "p", "dropped_cols", "dropped_rows"],
}

MODEL_ALIASES = {"scalar": "scalar_gate", "multi": "multi_gate", "multigate": "multi_gate", "gru-like": "multi_gate"}


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing inputs: " + ", ".join(self.missing))


@dataclass
class ExperimentConfig:
    model: str = "scalar_gate"
    alpha: float = 0.5
    task: str = "adding"
    seq_len: int = 60
    task_params: dict = field(default_factory=dict)
    n_rec: int = 32
    n_out: int = 1
    activation: str = "tanh"
    rec_norm: float = 0.9
    optimizer: str = "sgd"
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    iterations: int = 1200
    checkpoint_every: int = 200
    probe_size: int = 32
    grad_probe_size: int = 256
    jac_probe_size: int = 16
    lags: list | None = None
    aniso_lags: list | None = None
    r: int = 10
    power_iters: int = 5
    fit_q_lo: float = 0.01
    fit_q_hi: float = 0.99
    tau_col: float = 1e-12
    kappa: float = 1e-10
    expansion_window: int = 10
    eps_grid: list | None = None
    expansion_fit_range: list | None = None
    seed: int = 0
    init_seed: int | None = None
    data_seed: int | None = None
    probe_seed: int | None = None
    out: str | None = None

    def __post_init__(self):
        self.model = MODEL_ALIASES.get(self.model, self.model)
        try:
            self.kind
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr is None:
            self.lr = 0.01 if self.optimizer == "sgd" else 1e-3
        for name in ("n_rec", "n_out", "batch_size", "checkpoint_every", "probe_size",
                     "grad_probe_size", "jac_probe_size", "r", "power_iters", "seq_len", "expansion_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.expansion_window > self.seq_len:
            raise ConfigError("expansion_window exceeds seq_len")
        if self.init_seed is None:
            self.init_seed = self.seed
        if self.data_seed is None:
            self.data_seed = self.seed + 1000
        if self.probe_seed is None:
            self.probe_seed = self.seed + 2000
        if self.lags is None:
            self.lags = list(range(1, self.seq_len))
        if self.aniso_lags is None:
            self.aniso_lags = [h for h in (1, 2, 4, 8, 16, 32, 48) if h < self.seq_len]
        if self.out is None:
            self.out = f"runs/{self.model}_{self.task}"

    @property
    def kind(self) -> ModelKind:
        return ModelKind(self.model, self.alpha if self.model == "leaky" else 1.0)

    def task_spec(self, seed: int) -> TaskSpec:
        return TaskSpec(self.task, self.seq_len, dict(self.task_params), seed)

    @property
    def n_in(self) -> int:
        return input_dim(self.task)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path=None, **overrides) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    if overrides.get("seed") is not None:
        for key in ("init_seed", "data_seed", "probe_seed"):
            d.pop(key, None)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, name, rows):
    _atomic_write(Path(path), _csv_text(SCHEMAS[name], rows))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- checkpoints -----------------------------------------------------------

def checkpoint_path(out, iteration: int) -> Path:
    return Path(out) / "checkpoints" / f"checkpoint_{iteration}.json"


def save_checkpoint(out, iteration, cfg: ExperimentConfig, params: Params, opt_state):
    payload = {
        "iteration": iteration,
        "model": cfg.model,
        "alpha": cfg.kind.alpha,
        "params": params.to_dict(),
        "optimizer": {"name": cfg.optimizer, "state": None if opt_state is None else opt_state.to_dict()},
    }
    _atomic_write(checkpoint_path(out, iteration), json.dumps(payload))


def load_checkpoint(out, iteration: int):
    path = checkpoint_path(out, iteration)
    if not path.exists():
        raise MissingInputError([str(path)])
    payload = json.loads(path.read_text())
    state = payload["optimizer"]["state"]
    return Params.from_dict(payload["params"]), (None if state is None else AdamState.from_dict(state))


def list_checkpoints(out):
    out = Path(out) / "checkpoints"
    found = []
    for p in out.glob("checkpoint_*.json"):
        m = re.fullmatch(r"checkpoint_(\d+)\.json", p.name)
        if m:
            found.append(int(m.group(1)))
    return sorted(found)


# --- training ----------------------------------------------------------------

def initial_params(cfg: ExperimentConfig) -> Params:
    return init_params(cfg.kind, cfg.n_rec, cfg.n_in, cfg.n_out, cfg.init_seed, cfg.activation, cfg.rec_norm)


def loss_and_grad(kind, params, batch: Batch):
    traj = forward_batch(kind, params, batch.inputs)
    loss = mse_loss(readout(params, traj), batch.targets, batch.mask)
    grads = _backward(kind, params, batch, per_sample=False)
    return loss, np.concatenate([grads[n].ravel() for n in params.names()])


@dataclass
class TrainResult:
    params: Params
    losses: list
    checkpoints: list
    diverged_at: int | None = None


def train(cfg: ExperimentConfig, out=None, write=True, resume=False) -> TrainResult:
    """SGD/Adam on freshly generated minibatches; batch l holds sequences l*b..(l+1)*b-1."""
    out = Path(out or cfg.out)
    kind = cfg.kind
    params = initial_params(cfg)
    opt_state = AdamState.zeros(params.flat().size) if cfg.optimizer == "adam" else None
    losses = []
    start = 0
    if resume and list_checkpoints(out):
        start = list_checkpoints(out)[-1]
        params, opt_state = load_checkpoint(out, start)
        if (out / "loss.csv").exists():
            losses = [(int(r["iter"]), float(r["train_loss"])) for r in read_csv(out / "loss.csv")][:start]
    if write:
        _atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    saved = []
    if write and start == 0:
        save_checkpoint(out, 0, cfg, params, opt_state)
    saved.append(start)
    spec = cfg.task_spec(cfg.data_seed)

    def flush_losses():
        if write:
            _atomic_write(out / "loss.csv", "iter,train_loss\n" + "".join(f"{i},{v!r}\n" for i, v in losses))

    for it in range(start, cfg.iterations):
        batch = generate(spec, cfg.batch_size, start=it * cfg.batch_size)
        try:
            loss, grad = loss_and_grad(kind, params, batch)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(it, f"non-finite loss or gradient at iteration {it}")
        except DivergenceError as exc:
            if write:
                save_checkpoint(out, it, cfg, params, opt_state)
            flush_losses()
            raise DivergenceError(it, f"diverged at iteration {it} ({exc}); last good checkpoint {it} saved") from exc
        losses.append((it, float(loss)))
        if cfg.optimizer == "sgd":
            params = sgd_step(params, grad, cfg.lr)
        else:
            params, opt_state = adam_step(params, grad, opt_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        done = it + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
            if write:
                save_checkpoint(out, done, cfg, params, opt_state)
            saved.append(done)
    flush_losses()
    return TrainResult(params, losses, saved)


# --- probing -----------------------------------------------------------------

def probe_batch(cfg: ExperimentConfig, n: int) -> Batch:
    return generate(cfg.task_spec(cfg.probe_seed), n)


@dataclass
class ProbeResult:
    table: analysis.SensitivityTable
    profile: analysis.EffectiveLrProfile
    fit: object
    jac_aniso: list | None = None
    upd_aniso: analysis.UpdateAnisotropy | None = None


def probe(cfg: ExperimentConfig, params: Params, checkpoint: int, anisotropy=False, out_dir=None) -> ProbeResult:
    kind = cfg.kind
    batch = probe_batch(cfg, max(cfg.probe_size, cfg.grad_probe_size if anisotropy else 0,
                                 cfg.jac_probe_size if anisotropy else 0))
    lag_probe = batch.subset(np.arange(cfg.probe_size))
    table = analysis.sensitivity_table(kind, params, lag_probe, cfg.lags, iters=cfg.power_iters,
                                       checkpoint=checkpoint)
    try:
        fit = analysis.fit_slope(table, cfg.fit_q_lo, cfg.fit_q_hi)
    except DegenerateFitError:
        fit = None
    profile = analysis.effective_lr_profile(table, fit)
    result = ProbeResult(table, profile, fit)
    if anisotropy:
        result.jac_aniso = analysis.jacobian_anisotropy_vs_lag(
            kind, params, batch.subset(np.arange(cfg.jac_probe_size)), cfg.aniso_lags, cfg.r)
        result.upd_aniso = analysis.update_anisotropy(
            kind, params, batch.subset(np.arange(cfg.grad_probe_size)), cfg.r, cfg.tau_col, cfg.kappa,
            seed=cfg.probe_seed)
    if out_dir is not None:
        write_probe(result, Path(out_dir), checkpoint)
    return result


def write_probe(result: ProbeResult, out_dir: Path, checkpoint: int):
    write_csv(out_dir / "sensitivity.csv", "sensitivity", result.table.rows())
    prof = result.profile
    write_csv(out_dir / "eff_lr.csv", "eff_lr",
              [(checkpoint, int(h), a, b, c) for h, a, b, c in zip(prof.lags, prof.mu_eff, prof.mu_pred0, prof.mu_predfit)])
    fit = result.fit
    row = (checkpoint, fit.slope, fit.intercept, fit.r_squared, fit.n_points) if fit else (checkpoint, np.nan, np.nan, np.nan, 0)
    write_csv(out_dir / "slope.csv", "slope", [row])
    if result.jac_aniso is not None:
        write_csv(out_dir / "jac_aniso.csv", "jac_aniso",
                  [(checkpoint, a.lag, a.ai_r, a.ce_r, a.r) for a in result.jac_aniso])
    if result.upd_aniso is not None:
        u = result.upd_aniso
        write_csv(out_dir / "upd_aniso.csv", "upd_aniso",
                  [(checkpoint, u.ai_r, u.ce_r, u.summary.r, u.m, u.p, u.dropped_cols, u.dropped_rows)])


def probe_run(out, checkpoint: int | None = None, anisotropy=False):
    out = Path(out)
    cfg = load_run_config(out)
    which = list_checkpoints(out) if checkpoint is None else [checkpoint]
    if not which:
        raise MissingInputError([str(out / "checkpoints")])
    results = {}
    for ck in which:
        params, _ = load_checkpoint(out, ck)
        results[ck] = probe(cfg, params, ck, anisotropy, out / "probe" / f"checkpoint_{ck}")
    return results


def load_run_config(out) -> ExperimentConfig:
    path = Path(out) / "config.json"
    if not path.exists():
        raise MissingInputError([str(path)])
    return ExperimentConfig.from_dict(json.loads(path.read_text()))


# --- expansion ---------------------------------------------------------------

def expansion_check(cfg: ExperimentConfig, params: Params, checkpoint: int, out_dir=None, seq_index: int = 0):
    kind = cfg.kind
    if not kind.gated:
        raise ConfigError(f"{kind.name} model has no correction terms")
    batch = probe_batch(cfg, seq_index + 1)
    traj = forward(kind, params, batch.inputs[seq_index])
    t = traj.steps
    fs = expansion.decompose_model_jacobians(kind, traj, params, t - cfg.expansion_window, t)
    report = expansion.run_diagnostics(fs, cfg.eps_grid, cfg.expansion_fit_range)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write(out_dir / "expansion.csv", out_dir / "expansion.json")
    return report


def expansion_run(out, checkpoint: int | None = None):
    out = Path(out)
    cfg = load_run_config(out)
    if not cfg.kind.gated:
        raise ConfigError(f"{cfg.kind.name} model has no correction terms")
    cks = list_checkpoints(out)
    if not cks:
        raise MissingInputError([str(out / "checkpoints")])
    ck = cks[-1] if checkpoint is None else checkpoint
    params, _ = load_checkpoint(out, ck)
    return expansion_check(cfg, params, ck, out / "expansion" / f"checkpoint_{ck}")


# --- report ------------------------------------------------------------------

def find_runs(run_dir):
    run_dir = Path(run_dir)
    if (run_dir / "config.json").exists():
        return [run_dir]
    return sorted(p.parent for p in run_dir.glob("**/config.json"))


def _svg_polyline(points, title):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    w, h, pad = 320, 200, 30
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
    coords = " ".join(f"{pad + (x - x0) / (x1 - x0) * (w - 2 * pad):.1f},"
                      f"{h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad):.1f}" for x, y in points)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
            f'<text x="{pad}" y="15" font-size="11">{title}</text>'
            f'<polyline fill="none" stroke="black" points="{coords}"/></svg>\n')


def _num(v):
    """Parse a CSV number; non-finite values become None so the JSON stays strict."""
    x = float(v)
    return x if np.isfinite(x) else None


def report(run_dir, svg=False):
    runs = find_runs(run_dir)
    if not runs:
        raise MissingInputError([str(Path(run_dir) / "config.json")])
    missing = []
    summary = {"runs": [], "comparison": []}
    for run in runs:
        cfg = load_run_config(run)
        cks = list_checkpoints(run)
        if not (run / "loss.csv").exists():
            missing.append(str(run / "loss.csv"))
        slopes = []
        for ck in cks:
            path = run / "probe" / f"checkpoint_{ck}" / "slope.csv"
            if not path.exists():
                missing.append(str(path))
                continue
            row = read_csv(path)[0]
            slopes.append({k: (int(v) if k in ("checkpoint", "n") else _num(v)) for k, v in row.items()})
        entry = {"dir": str(run), "model": cfg.model, "task": cfg.task, "optimizer": cfg.optimizer,
                 "config": cfg.to_dict(), "slopes": slopes}
        if cks:
            final = run / "probe" / f"checkpoint_{cks[-1]}"
            if (final / "upd_aniso.csv").exists():
                u = read_csv(final / "upd_aniso.csv")[0]
                entry["update_anisotropy"] = {k: _num(v) for k, v in u.items()}
            if (final / "jac_aniso.csv").exists():
                entry["jacobian_anisotropy"] = [{k: _num(v) for k, v in r.items()} for r in read_csv(final / "jac_aniso.csv")]
        summary["runs"].append(entry)
        if "update_anisotropy" in entry:
            u = entry["update_anisotropy"]
            summary["comparison"].append({"model": cfg.model, "task": cfg.task, "optimizer": cfg.optimizer,
                                          "checkpoint": int(u["checkpoint"]), "ai_r": u["ai_r"], "ce_r": u["ce_r"]})
        if svg and len(slopes) >= 2:
            pts = [(s["checkpoint"], s["slope"]) for s in slopes if s["slope"] is not None]
            if len(pts) >= 2:
                _atomic_write(run / "slope.svg", _svg_polyline(pts, f"slope s vs iteration: {cfg.model}/{cfg.task}"))
    if missing:
        raise MissingInputError(missing)
    target = Path(run_dir) / "summary.json"
    _atomic_write(target, json.dumps(summary, indent=2, sort_keys=True, allow_nan=False))
    return summary
