"""Executable equivalence checks between model forward passes and w-space methods.

Conventions pinned here:

* The model prediction is ``-Z_l[d, n]``. When ``B = 0`` it equals
  ``+<x_query, w_l>`` for a w-space iterate ``w_l`` started at zero.
* Attention as written, ``P Z M (Z^T Q Z)`` with ``Q = -[[A, 0], [0, 0]]``,
  sends the label row through ``x_j^T A x_query``. The matching w-space
  preconditioner is therefore ``A^T``, which matters for non-symmetric ``A``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ad
from . import model as M
from .baselines import cgd_trace
from .tasks import CovarianceSpec, TaskInstance, build_prompt, sample_covariance, sample_task, stream


@dataclass
class EquivalenceReport:
    name: str
    max_abs_deviation: float
    per_layer: list
    tolerance: float
    instance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_deviation < self.tolerance)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _report(name, model_preds, oracle_preds, tol, **instance):
    dev = np.abs(np.asarray(model_preds, dtype=np.float64) - np.asarray(oracle_preds, dtype=np.float64))
    return EquivalenceReport(name, float(dev.max()), [float(x) for x in dev], tol, instance)


# ----------------------------------------------------------------------
# preconditioned GD

def lemma1_oracle(task: TaskInstance, A_list) -> list:
    """Predictions ``-<theta_l, x_query>`` for ``l = 0..L`` from the theta recursion.

    ``theta_0 = 0``; ``theta_{k+1} = theta_k - (1/n) A_k^T X X^T (theta_k + w*)``.
    """
    X, n = task.X, task.n
    XXt = X @ X.T
    theta = np.zeros(task.d)
    preds = [0.0]
    for A in A_list:
        theta = theta - np.asarray(A, dtype=np.float64).T @ (XXt @ (theta + task.w_star)) / n
        preds.append(float(-theta @ task.x_query))
    return preds


def lemma1_check(task: TaskInstance, A_list, tol: float = 1e-10) -> EquivalenceReport:
    model = M.model_from_preconditioners(A_list, n=task.n)
    preds = M.forward(model, build_prompt(task)).predictions
    return _report("preconditioned_gd", preds, lemma1_oracle(task, A_list), tol, L=len(A_list), d=task.d, n=task.n)


# ----------------------------------------------------------------------
# dynamic memory reproduces conjugate gradient

def cgd_layers(task: TaskInstance, L: int) -> list:
    """Layers with ``A = I`` and this task's CG step sizes and deflections."""
    tr = cgd_trace(task, L)
    d = task.d
    return [M.LayerParams(heads=[(np.eye(d), np.zeros((d, d)))], alpha=a, gamma=g) for a, g in zip(tr.alphas, tr.gammas)]


def prop1_check(task: TaskInstance, L: int, tol: float = 1e-8) -> EquivalenceReport:
    tr = cgd_trace(task, L)
    layers = cgd_layers(task, L)
    model = M.Model(M.ModelConfig(d=task.d, n=task.n, L=L, variant="memformer_cgd"), layers)
    preds = M.forward(model, build_prompt(task)).predictions
    cg_preds = [float(task.x_query @ w) for w in tr.iterates]
    return _report("cgd_memory", preds, cg_preds, tol, L=L, d=task.d, n=task.n)


def cgd_termination_check(task: TaskInstance, tol_ratio: float = 1e-12, tol_conj: float = 1e-6) -> EquivalenceReport:
    """``R(w_d) / R(w_0)`` and the worst relative H-inner product between CG directions.

    ``per_layer`` holds ``[ratio, conjugacy]``; the report passes when both are
    below their thresholds, expressed as a deviation normalised by each one.
    """
    from .tasks import empirical_loss

    tr = cgd_trace(task, task.d)
    H = task.hessian
    ratio = empirical_loss(tr.iterates[-1], task) / empirical_loss(tr.iterates[0], task)
    worst = 0.0
    S = [s for s in tr.directions if np.any(s)]
    for i in range(len(S)):
        for j in range(i):
            num = abs(S[i] @ H @ S[j])
            den = np.sqrt((S[i] @ H @ S[i]) * (S[j] @ H @ S[j]))
            worst = max(worst, float(num / den))
    dev = max(ratio / tol_ratio, worst / tol_conj)
    return EquivalenceReport("cgd_termination", dev, [float(ratio), worst], 1.0, {"d": task.d, "n": task.n})


# ----------------------------------------------------------------------
# gated memory with scalar gates is an LFOM

def _gate_table(c, L, tied):
    """``table[l][j]`` = scalar gate applied to register ``j`` in layer ``l``."""
    if tied:
        c = [float(x) for x in c]
        return [[c[j] for j in range(l + 1)] for l in range(L)]
    return [[float(c[l][j]) for j in range(l + 1)] for l in range(L)]


def induced_lambdas(c, a, tied: bool = True) -> list:
    """Scalar weights ``Lambda[k][i]`` with ``w_{k+1} = w_0 + sum_i Lambda[k][i] grad R(w_i)``.

    Layer ``l`` adds ``sum_{j<=l} c_j^l (-a_j grad R(w_j))``, so summing the
    layers up to ``k`` gives ``Lambda_i^k = -a_i sum_{l=i..k} c_i^l``.
    """
    L = len(a)
    table = _gate_table(c, L, tied)
    return [[-float(a[i]) * sum(table[l][i] for l in range(i, k + 1)) for i in range(k + 1)] for k in range(L)]


def lfom_w_space(task: TaskInstance, lambdas) -> list:
    """Cumulative LFOM ``w_{k+1} = w_0 + sum_{i<=k} Lambda_i^k grad R(w_i)`` from ``w_0 = 0``."""
    H = task.hessian
    ws = [np.zeros(task.d)]
    grads = []
    for lam_k in lambdas:
        grads.append(H @ (ws[-1] - task.w_star))
        w = ws[0].copy()
        for lam, g in zip(lam_k, grads):
            w = w + lam * g
        ws.append(w)
    return ws


def scalar_lfom_model(task: TaskInstance, c, a, tied: bool = True) -> M.Model:
    L, d = len(a), task.d
    cfg = M.ModelConfig(d=d, n=task.n, L=L, variant="memformer_lfom", tie_gamma_across_layers=tied, scalar_gamma=True)
    table = None if tied else _gate_table(c, L, tied)
    layers = []
    for l in range(L):
        gates = [np.array(float(c[l]))] if tied else [np.array(x) for x in table[l]]
        layers.append(M.LayerParams(heads=[(float(a[l]) * np.eye(d), np.zeros((d, d)))], Gamma=gates))
    return M.Model(cfg, layers)


def prop2_check(task: TaskInstance, c, a, tied: bool = True, tol: float = 1e-10) -> EquivalenceReport:
    model = scalar_lfom_model(task, c, a, tied)
    preds = M.forward(model, build_prompt(task)).predictions
    ws = lfom_w_space(task, induced_lambdas(c, a, tied))
    return _report("scalar_lfom", preds, [float(task.x_query @ w) for w in ws], tol, L=len(a), d=task.d, n=task.n, tied=tied)


# ----------------------------------------------------------------------
# gradient checks on the full objective

def random_model(variant: str, d: int = 2, n: int = 3, L: int = 2, rng=None, n_heads: int = 1, **kw) -> M.Model:
    """Model with every parameter random and non-degenerate (``B != 0`` for GD++)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = M.ModelConfig(d=d, n=n, L=L, n_heads=n_heads, variant=variant, **kw)
    model = M.init_model(cfg, rng, init_std=0.5)
    for layer in model.layers:
        if variant == "memformer_lfom_gdpp":
            layer.heads = [(A, 0.3 * rng.standard_normal((d, d))) for A, _ in layer.heads]
        layer.alpha = float(rng.uniform(0.5, 1.5))
        layer.gamma = float(rng.uniform(-0.5, 0.5))
    return model


def grad_check_full(variant: str, d: int = 2, n: int = 3, L: int = 2, seed: int = 0, step: float = 1e-6,
                    tol: float = 1e-5, **kw) -> EquivalenceReport:
    """Tape gradient vs central differences of the single-task loss, all trainable entries.

    Deviation is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = stream(seed, 0, 7)
    model = random_model(variant, d, n, L, rng, **kw)
    Sigma = sample_covariance(CovarianceSpec(d=d, diag=tuple(np.linspace(1.0, 0.5, d))), rng)
    task = sample_task(Sigma, n, rng)
    Z0 = build_prompt(task)
    _, grads = M.loss_and_grads(model, Z0, task.y_query)
    names = model.trainable_names()

    def f(flat):
        m = model.copy()
        m.set_parameters({k: flat[k] for k in names})
        pred = M.forward(m, Z0).prediction
        return float((pred - task.y_query) ** 2)

    numeric = ad.numeric_grad(f, {k: model.named_parameters()[k] for k in names}, step=step)
    worst, per = 0.0, []
    for k in names:
        dev = np.abs(grads[k] - numeric[k]) / np.maximum(1.0, np.abs(numeric[k]))
        per.append(float(dev.max()) if dev.size else 0.0)
        worst = max(worst, per[-1])
    return EquivalenceReport(f"grad_check[{variant}]", worst, per, tol, {"d": d, "n": n, "L": L, "seed": seed, "params": names})


# ----------------------------------------------------------------------
# suite

def _random_task(seed, d, n, isotropic=False):
    rng = stream(seed, 0, 5)
    Sigma = sample_covariance(CovarianceSpec(d=d, isotropic=isotropic), rng)
    return sample_task(Sigma, n, rng), rng


def run_suite(seeds: int = 100, gd_instances: int = 1000, d: int = 5, n: int = 20, L: int = 3) -> list:
    """Every equivalence claim over many random instances; one aggregated report each."""
    reports = []

    def aggregate(name, items, tol):
        worst = max(items, key=lambda r: r.max_abs_deviation)
        per = np.max([r.per_layer for r in items], axis=0).tolist()
        reports.append(EquivalenceReport(name, worst.max_abs_deviation, per, tol,
                                         {"instances": len(items), **worst.instance}))

    items = []
    for s in range(gd_instances):
        task, rng = _random_task(s, d, n)
        A_list = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(L)]
        items.append(lemma1_check(task, A_list))
    aggregate("preconditioned_gd", items, 1e-10)

    items = [prop1_check(_random_task(10_000 + s, d, n)[0], L) for s in range(seeds)]
    aggregate("cgd_memory", items, 1e-8)

    items = [cgd_termination_check(_random_task(30_000 + s, d, n)[0]) for s in range(seeds)]
    aggregate("cgd_termination", items, 1.0)

    for tied in (True, False):
        items = []
        for s in range(seeds):
            task, rng = _random_task(20_000 + s, d, n)
            a = rng.uniform(0.2, 1.0, L)
            c = rng.uniform(-1.0, 1.0, L) if tied else [rng.uniform(-1.0, 1.0, l + 1) for l in range(L)]
            items.append(prop2_check(task, c, a, tied=tied))
        aggregate("scalar_lfom" + ("" if tied else "_untied"), items, 1e-10)

    for variant, extra in (("linear_tf", {}), ("memformer_cgd", {}), ("memformer_lfom", {}),
                           ("memformer_lfom", {"tie_gamma_across_layers": False}),
                           ("memformer_lfom", {"scalar_gamma": True}),
                           ("memformer_lfom_gdpp", {}), ("memformer_lfom", {"n_heads": 2})):
        rep = grad_check_full(variant, **extra)
        if extra:
            rep.name = rep.name[:-1] + "," + ",".join(f"{k}={v}" for k, v in extra.items()) + "]"
        reports.append(rep)
    return reports
