"""Meta-training of model parameters on random regression prompts.

Each step: draw (or reuse) the current batch, evaluate the mean squared
query error, clip every parameter's gradient to Frobenius norm
``clip_norm``, apply one ADAM update. Batches are resampled every
``resample_every`` steps from the run's fixed covariance; ``0`` keeps the
first batch for the whole run.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from ._runtime import tune_allocator
from .io import atomic_write_text, write_rows_csv
from .tasks import (COVARIANCE, EVAL, INIT, DEFAULT_SPECTRUM, TRAIN, CovarianceSpec, TaskBatch, build_prompts,
                    sample_batch, sample_covariance, stream)

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e12
# losses are floored here before taking logs; an exact fit would otherwise give -inf
LOSS_FLOOR = float(np.finfo(np.float64).tiny)


def log_loss(x) -> np.ndarray:
    """Natural log of a loss (or array of losses), floored at :data:`LOSS_FLOOR`."""
    return np.log(np.maximum(np.asarray(x, dtype=np.float64), LOSS_FLOOR))


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    isotropic: bool = False
    spectrum: tuple = DEFAULT_SPECTRUM
    batch_size: int = 1000
    resample_every: int = 100
    clip_norm: float = 0.01
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 10000
    n_runs: int = 5
    seed: int = 0
    init_std: float = 0.1
    eval_batch_size: int = 1000
    # evaluate on the (fixed) training batch instead of a fresh one
    eval_on_train: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig(**self.model)
        self.spectrum = tuple(float(x) for x in self.spectrum)
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.resample_every < 0:
            raise ValueError("resample_every must be non-negative")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")

    def covariance_spec(self) -> CovarianceSpec:
        return CovarianceSpec(d=self.model.d, diag=self.spectrum, isotropic=self.isotropic)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["spectrum"] = list(self.spectrum)
        return out

    def replace(self, **kw) -> "TrainConfig":
        model_keys = {f.name for f in fields(M.ModelConfig)}
        mkw = {k: v for k, v in kw.items() if k in model_keys}
        tkw = {k: v for k, v in kw.items() if k not in model_keys}
        base = self.to_dict()
        base["model"] = {**base["model"], **mkw}
        base.update(tkw)
        return TrainConfig(**base)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        return cls().replace(**flat)


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in s:
        return tuple(float(x) for x in s.split(",") if x.strip())
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def load_config(path) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments) or a flat JSON object."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        flat = json.loads(text)
        flat.update(flat.pop("model", {}) or {})
    else:
        flat = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            flat[k.strip()] = _parse_value(v)
    known = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(M.ModelConfig)}
    unknown = set(flat) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig.from_flat(flat)


# ----------------------------------------------------------------------
# optimizer pieces

def clip_matrix(g, max_norm: float = 0.01) -> np.ndarray:
    """Rescale ``g`` to Frobenius norm ``max_norm`` if it is larger."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.sqrt(np.sum(g * g)))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected ADAM update. Returns new ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k} at step {state.t + 1}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}, parameter has {np.shape(params[k])}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
            continue
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return new_p, AdamState(new_m, new_v, t)


# ----------------------------------------------------------------------
# data streams of a run

def run_covariance(cfg: TrainConfig, run: int) -> np.ndarray:
    return sample_covariance(cfg.covariance_spec(), stream(cfg.seed, run, COVARIANCE))


def train_batch(cfg: TrainConfig, run: int, block: int, Sigma=None) -> TaskBatch:
    Sigma = run_covariance(cfg, run) if Sigma is None else Sigma
    return sample_batch(Sigma, cfg.model.n, cfg.batch_size, stream(cfg.seed, run, TRAIN, block))


def eval_batch(cfg: TrainConfig, run: int, Sigma=None) -> TaskBatch:
    """The batch a run is evaluated on: the fixed training batch or a fresh draw."""
    Sigma = run_covariance(cfg, run) if Sigma is None else Sigma
    if cfg.eval_on_train:
        if cfg.resample_every:
            last_block = max(cfg.total_steps - 1, 0) // cfg.resample_every
        else:
            last_block = 0
        return train_batch(cfg, run, last_block, Sigma)
    return sample_batch(Sigma, cfg.model.n, cfg.eval_batch_size, stream(cfg.seed, run, EVAL))


# ----------------------------------------------------------------------
# records

@dataclass(eq=False)
class RunRecord:
    run: int
    seed: int
    config: dict
    train_loss: list
    init_layer_loss: list
    eval_layer_loss: list
    model: Optional[M.Model] = None
    status: str = "ok"
    wall_clock: float = 0.0

    @property
    def eval_log_loss(self) -> np.ndarray:
        return log_loss(self.eval_layer_loss)

    def identical(self, other: "RunRecord") -> bool:
        """Bit-for-bit equality of everything except wall-clock time."""
        if (self.run, self.seed, self.config, self.status) != (other.run, other.seed, other.config, other.status):
            return False
        for a, b in ((self.train_loss, other.train_loss), (self.init_layer_loss, other.init_layer_loss),
                     (self.eval_layer_loss, other.eval_layer_loss)):
            if not np.array_equal(np.asarray(a), np.asarray(b)):
                return False
        if (self.model is None) != (other.model is None):
            return False
        if self.model is not None:
            pa, pb = self.model.named_parameters(), other.model.named_parameters()
            if pa.keys() != pb.keys() or any(not np.array_equal(pa[k], pb[k]) for k in pa):
                return False
        return True

    def metadata(self) -> dict:
        from . import kernels

        return {
            "run": self.run,
            "seed": self.seed,
            "status": self.status,
            "wall_clock_seconds": self.wall_clock,
            "kernel_backend": kernels.BACKEND,
            "config": self.config,
            "init_layer_loss": [float(x) for x in self.init_layer_loss],
            "eval_layer_loss": [float(x) for x in self.eval_layer_loss],
        }

    def write(self, out_dir, stem: str = "run") -> None:
        """``<stem>_train.csv``, ``<stem>_eval.csv``, ``<stem>.json`` and a checkpoint."""
        out = Path(out_dir)
        write_rows_csv(out / f"{stem}_train.csv", ("step", "loss"), [(i, float(x)) for i, x in enumerate(self.train_loss)])
        write_rows_csv(out / f"{stem}_eval.csv", ("layer", "loss", "log_loss"),
                       [(i, float(x), float(log_loss(x))) for i, x in enumerate(self.eval_layer_loss)])
        atomic_write_text(out / f"{stem}.json", json.dumps(self.metadata(), indent=1, sort_keys=True))
        if self.model is not None:
            M.save_checkpoint(self.model, out / f"{stem}_checkpoint.json")


def train(cfg: TrainConfig, run: int = 0, log_every: int = 0, callback=None) -> RunRecord:
    """Train one run. Divergence or a non-finite gradient ends the run early with a status.

    ``callback(step, model)`` is called after every update when given.
    """
    tune_allocator()
    start = time.perf_counter()
    Sigma = run_covariance(cfg, run)
    model = M.init_model(cfg.model, stream(cfg.seed, run, INIT), cfg.init_std)
    evalb = eval_batch(cfg, run, Sigma)
    init_losses = M.layer_losses(model, evalb)
    names = model.trainable_names()
    params = {k: v for k, v in model.named_parameters().items() if k in names}
    state = AdamState.zeros(params)
    train_loss = []
    status = "ok"
    block, batch, Z0 = None, None, None
    for step in range(cfg.total_steps):
        b = step // cfg.resample_every if cfg.resample_every else 0
        if b != block:
            block = b
            batch = train_batch(cfg, run, block, Sigma)
            Z0 = build_prompts(batch)
        loss, grads = M.loss_and_grads(model, Z0, batch.y_query)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            status = f"diverged at step {step} (loss {loss:.3e})"
            log.warning("run %d %s", run, status)
            break
        grads = {k: clip_matrix(g, cfg.clip_norm) for k, g in grads.items()}
        try:
            params, state = adam_step(params, grads, state, cfg)
        except NonFiniteGradient as exc:
            status = f"aborted: {exc}"
            log.warning("run %d %s", run, status)
            break
        model.set_parameters(params)
        train_loss.append(loss)
        if callback is not None:
            callback(step + 1, model)
        if log_every and (step + 1) % log_every == 0:
            log.info("run %d step %d loss %.6g", run, step + 1, loss)
    eval_losses = M.layer_losses(model, evalb)
    return RunRecord(
        run=run,
        seed=cfg.seed,
        config=cfg.to_dict(),
        train_loss=train_loss,
        init_layer_loss=list(map(float, init_losses)),
        eval_layer_loss=list(map(float, eval_losses)),
        model=model,
        status=status,
        wall_clock=time.perf_counter() - start,
    )


def train_runs(cfg: TrainConfig, log_every: int = 0) -> list:
    return [train(cfg, run, log_every=log_every) for run in range(cfg.n_runs)]


def average_runs(curves):
    """Pointwise mean and standard error of per-layer log-losses across runs.

    Accepts :class:`RunRecord` objects (their eval log-loss) or plain sequences.
    """
    arrs = [r.eval_log_loss if isinstance(r, RunRecord) else np.asarray(r, dtype=np.float64) for r in curves]
    if not arrs:
        raise ValueError("need at least one curve")
    if len({a.shape for a in arrs}) != 1:
        raise ValueError(f"curves have mismatched lengths: {[a.shape for a in arrs]}")
    stack = np.stack(arrs)
    mean = stack.mean(axis=0)
    if len(arrs) > 1:
        err = stack.std(axis=0, ddof=1) / np.sqrt(len(arrs))
    else:
        err = np.zeros_like(mean)
    return mean, err
