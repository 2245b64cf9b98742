"""Figure presets: which models to train, which baselines to run, where to write.

Every model curve and every baseline curve of a figure is evaluated on the
same per-run batches (same seed, same run index), so the curves are directly
comparable. Curves are per-layer mean natural-log losses across runs, with
the standard error across runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer as TR
from .baselines import batch_curve
from .io import atomic_write_text, write_curves_csv, write_svg

NON_ISOTROPIC = "non-isotropic"
ISOTROPIC = "isotropic"


@dataclass
class ExperimentSpec:
    figure_id: str
    description: str
    # (curve name, TrainConfig/ModelConfig overrides)
    models: tuple
    # (curve name, baseline method, keyword arguments)
    baselines: tuple = (("CGD", "cgd", {}),)
    isotropic: bool = False
    overrides: dict = field(default_factory=dict)

    @property
    def regime(self) -> str:
        return ISOTROPIC if self.isotropic else NON_ISOTROPIC


_TF = ("Linear Transformer", {"variant": "linear_tf"})
_LFOM = ("Memformer LFOM", {"variant": "memformer_lfom"})
_SCALAR = {"variant": "memformer_lfom", "scalar_gamma": True}
_SMALL_BATCH = {"resample_every": 0, "eval_on_train": True}

PRESETS = {
    s.figure_id: s
    for s in (
        ExperimentSpec("fig1a", "CGD-like memformer (A = I, trained step and deflection) vs linear TF and CGD",
                       (_TF, ("Memformer CGD-like", {"variant": "memformer_cgd", "identity_preconditioner": True}))),
        ExperimentSpec("fig1b", "memformer with dynamic memory and matrix preconditioners vs linear TF and CGD",
                       (_TF, ("Memformer (preconditioned)", {"variant": "memformer_cgd"}))),
        ExperimentSpec("fig2a", "LFOM memformer with matrix gates, non-isotropic data", (_TF, _LFOM)),
        ExperimentSpec("fig2b", "LFOM memformer with matrix gates, isotropic data", (_TF, _LFOM), isotropic=True),
        ExperimentSpec("fig3a", "LFOM memformer with GD++ covariate blocks, non-isotropic data",
                       (_TF, ("Memformer LFOM GD++", {"variant": "memformer_lfom_gdpp"})),
                       baselines=(("CGD", "cgd", {}), ("GD++", "gdpp", {}))),
        ExperimentSpec("fig3b", "LFOM memformer with GD++ covariate blocks, isotropic data",
                       (_TF, ("Memformer LFOM GD++", {"variant": "memformer_lfom_gdpp"})),
                       baselines=(("CGD", "cgd", {}), ("GD++", "gdpp", {})), isotropic=True),
        ExperimentSpec("fig4a", "scalar-gated memformer vs CGD on its own training batch, B = 1",
                       (("Memformer (scalar gates)", _SCALAR),), overrides={"batch_size": 1, **_SMALL_BATCH}),
        ExperimentSpec("fig4b", "scalar-gated memformer vs CGD on its own training batch, B = 10",
                       (("Memformer (scalar gates)", _SCALAR),), overrides={"batch_size": 10, **_SMALL_BATCH}),
        ExperimentSpec("fig5a", "scalar-gated memformer, 1 attention head, vs CGD",
                       (("Memformer 1 head", {**_SCALAR, "n_heads": 1}),)),
        ExperimentSpec("fig5b", "scalar-gated memformer, 5 attention heads, vs CGD",
                       (("Memformer 5 heads", {**_SCALAR, "n_heads": 5}),)),
        ExperimentSpec("fig6a", "LFOM memformer vs Nesterov accelerated gradient, non-isotropic data",
                       (_LFOM,), baselines=(("NAG", "nag", {}),)),
        ExperimentSpec("fig6b", "LFOM memformer vs momentum GD, non-isotropic data",
                       (_LFOM,), baselines=(("MGD", "mgd", {}),)),
    )
}


def get_preset(figure_id: str) -> ExperimentSpec:
    try:
        return PRESETS[figure_id]
    except KeyError:
        raise KeyError(f"unknown figure {figure_id!r}; known: {', '.join(PRESETS)}") from None


def resolve(spec: ExperimentSpec, **overrides) -> list:
    """``[(curve name, TrainConfig), ...]`` for the model curves.

    ``overrides`` (e.g. ``seed``, ``total_steps``, ``n_runs``, ``n_heads``)
    apply on top of the preset to every model curve; ``None`` values are ignored.
    """
    user = {k: v for k, v in overrides.items() if v is not None}
    base = TR.TrainConfig(isotropic=spec.isotropic)
    return [(name, base.replace(**{**spec.overrides, **mkw, **user})) for name, mkw in spec.models]


# trained runs shared between figures within one process
_RUN_CACHE: dict = {}


def _key(cfg: TR.TrainConfig, run: int) -> str:
    return json.dumps([cfg.to_dict(), run], sort_keys=True)


def train_cached(cfg: TR.TrainConfig, run: int) -> TR.RunRecord:
    k = _key(cfg, run)
    if k not in _RUN_CACHE:
        _RUN_CACHE[k] = TR.train(cfg, run)
    return _RUN_CACHE[k]


def clear_cache() -> None:
    _RUN_CACHE.clear()


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    configs: list
    curves: list  # (name, mean, stderr)
    runs: dict = field(default_factory=dict)  # model curve name -> [RunRecord]
    per_run: dict = field(default_factory=dict)  # curve name -> array (runs, L+1) of log-losses

    def curve(self, name: str):
        for n, m, e in self.curves:
            if n == name:
                return np.asarray(m), np.asarray(e)
        raise KeyError(name)

    def metadata(self) -> dict:
        return {
            "figure_id": self.spec.figure_id,
            "description": self.spec.description,
            "regime": self.spec.regime,
            "baselines": [{"curve": n, "method": m, "kwargs": kw} for n, m, kw in self.spec.baselines],
            "models": [{"curve": n, "config": c.to_dict()} for n, c in self.configs],
            "runs": {n: [r.metadata() for r in rs] for n, rs in self.runs.items()},
        }


def run_experiment(spec: ExperimentSpec, out_dir=None, cache: bool = True, **overrides) -> ExperimentResult:
    """Train the figure's models, run its baselines, and write ``<id>.csv``, ``<id>.svg``, ``<id>.json``."""
    configs = resolve(spec, **overrides)
    fit = train_cached if cache else (lambda c, r: TR.train(c, r))
    curves, runs, per_run = [], {}, {}
    for name, cfg in configs:
        recs = [fit(cfg, r) for r in range(cfg.n_runs)]
        runs[name] = recs
        per_run[name] = np.stack([r.eval_log_loss for r in recs])
        curves.append((name, *TR.average_runs(recs)))
    # baselines share the eval batches of the first model curve
    ref = configs[0][1]
    L = ref.model.L
    for name, method, kw in spec.baselines:
        logs = [TR.log_loss(batch_curve(method, TR.eval_batch(ref, r), L, **kw)) for r in range(ref.n_runs)]
        per_run[name] = np.stack(logs)
        curves.append((name, *TR.average_runs(logs)))
    result = ExperimentResult(spec, configs, curves, runs, per_run)
    if out_dir is not None:
        write_result(result, out_dir)
    return result


def write_result(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    fid = result.spec.figure_id
    write_curves_csv(out / f"{fid}.csv", result.curves)
    title = f"{fid}: {result.spec.regime}"
    write_svg(out / f"{fid}.svg", result.curves, title=title)
    meta = result.metadata()
    for rs in meta["runs"].values():
        for r in rs:
            r.pop("wall_clock_seconds", None)
    atomic_write_text(out / f"{fid}.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
