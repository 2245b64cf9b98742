"""Classical first-order methods run per task on ``R(w) = (1/2n)|X^T (w - w*)|^2``.

All methods start from ``w_0 = 0`` and return ``steps + 1`` iterates
(``w_0`` included) so that curves line up with model depth.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tasks import TaskBatch, TaskInstance, empirical_grad, empirical_loss

GRAD_TOL = 1e-14

NAG_LR, NAG_MOMENTUM = 0.03, 0.9
MGD_LR, MGD_MOMENTUM = 0.005, 0.9


def precond_gd_step(w, A, task: TaskInstance) -> np.ndarray:
    """``w - A grad R(w)``."""
    return np.asarray(w, dtype=np.float64) - np.asarray(A, dtype=np.float64) @ empirical_grad(w, task)


def precond_gd_run(task: TaskInstance, A_list) -> list:
    ws = [np.zeros(task.d)]
    for A in A_list:
        ws.append(precond_gd_step(ws[-1], A, task))
    return ws


def gd_run(task: TaskInstance, steps: int, lr: float) -> list:
    return precond_gd_run(task, [lr * np.eye(task.d)] * steps)


@dataclass
class CGTrace:
    """Iterates and coefficients of one conjugate-gradient run.

    ``alphas[k]`` and ``gammas[k]`` are the step and deflection used to go
    from ``iterates[k]`` to ``iterates[k+1]`` (``gammas[0] = 0``).
    ``directions[k]`` is the search direction of that step. After early
    termination the last iterate is repeated with zero coefficients.
    """

    iterates: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    terminated_at: int | None = None


def cgd_trace(task: TaskInstance, steps: int) -> CGTrace:
    """Fletcher-Reeves conjugate gradient with exact line search on the quadratic."""
    H = task.hessian
    w = np.zeros(task.d)
    g = empirical_grad(w, task)
    s = -g
    tr = CGTrace(iterates=[w.copy()])
    g_prev_sq = None
    for k in range(steps):
        g_sq = float(g @ g)
        if tr.terminated_at is None:
            if np.sqrt(g_sq) < GRAD_TOL:
                tr.terminated_at = k
            else:
                gamma = 0.0 if g_prev_sq is None else g_sq / g_prev_sq
                s = -g + gamma * s if k > 0 else -g
                curv = float(s @ H @ s)
                if curv <= 0.0:
                    tr.terminated_at = k
                else:
                    alpha = -float(g @ s) / curv
                    w = w + alpha * s
                    tr.alphas.append(alpha)
                    tr.gammas.append(gamma)
                    tr.directions.append(s.copy())
                    tr.iterates.append(w.copy())
                    g_prev_sq = g_sq
                    g = empirical_grad(w, task)
                    continue
        tr.alphas.append(0.0)
        tr.gammas.append(0.0)
        tr.directions.append(np.zeros(task.d))
        tr.iterates.append(w.copy())
    return tr


def cgd_run(task: TaskInstance, steps: int) -> list:
    return cgd_trace(task, steps).iterates


def momentum_gd_run(task: TaskInstance, steps: int, lr: float = MGD_LR, beta: float = MGD_MOMENTUM) -> list:
    """Heavy ball: ``v <- beta v - lr grad(w)``; ``w <- w + v``."""
    w = np.zeros(task.d)
    v = np.zeros(task.d)
    ws = [w.copy()]
    for _ in range(steps):
        v = beta * v - lr * empirical_grad(w, task)
        w = w + v
        ws.append(w.copy())
    return ws


def nag_run(task: TaskInstance, steps: int, lr: float = NAG_LR, beta: float = NAG_MOMENTUM) -> list:
    """Nesterov: ``v <- w + beta (w - w_prev)``; ``w <- v - lr grad(v)``; ``w_prev = w_0``."""
    w = np.zeros(task.d)
    w_prev = w.copy()
    ws = [w.copy()]
    for _ in range(steps):
        v = w + beta * (w - w_prev)
        w_prev = w
        w = v - lr * empirical_grad(v, task)
        ws.append(w.copy())
    return ws


def gdpp_run(task: TaskInstance, steps: int, gammas, A_list=None) -> list:
    """GD++ in data space: returns query predictions ``0..steps``.

    Each step applies a preconditioned gradient step to the label row and
    transforms every covariate column by ``(I - gamma_l H_l)`` where
    ``H_l = (1/n) X_l X_l^T`` over the in-context columns. Both updates read
    the covariates from before the step. With all ``gamma_l = 0`` this is
    preconditioned GD with the preconditioners ``A_l^T``.
    """
    d, n = task.d, task.n
    gammas = list(gammas)
    if len(gammas) != steps:
        raise ValueError("need one gamma per step")
    A_list = [np.eye(d)] * steps if A_list is None else [np.asarray(A, dtype=np.float64) for A in A_list]
    X = np.concatenate([task.X, task.x_query[:, None]], axis=1)
    Y = np.concatenate([task.y, [0.0]])
    preds = [0.0]
    for l in range(steps):
        Xc = X[:, :n]
        H = Xc @ Xc.T / n
        Y = Y - (Y[:n] @ Xc.T) @ A_list[l] @ X / n
        X = X - gammas[l] * H @ X
        preds.append(float(-Y[n]))
    return preds


def transformed_hessian(task: TaskInstance, gamma: float) -> np.ndarray:
    """Hessian of the in-context covariates after one GD++ covariate transform."""
    H = task.hessian
    Xt = (np.eye(task.d) - gamma * H) @ task.X
    return Xt @ Xt.T / task.n


# ----------------------------------------------------------------------
# batch curves

def _predictions(task, ws):
    return [float(task.x_query @ w) for w in ws]


def method_predictions(method: str, task: TaskInstance, steps: int, **kw) -> list:
    """Query predictions ``<x_query, w_k>`` (or GD++ corner readout) for ``k = 0..steps``."""
    if method == "cgd":
        return _predictions(task, cgd_run(task, steps))
    if method == "nag":
        return _predictions(task, nag_run(task, steps, **kw))
    if method == "mgd":
        return _predictions(task, momentum_gd_run(task, steps, **kw))
    if method == "gd":
        return _predictions(task, gd_run(task, steps, kw.get("lr", 1.0)))
    if method == "gdpp":
        gamma = kw.get("gamma", 0.1)
        step = kw.get("step", 0.5)
        return gdpp_run(task, steps, [gamma] * steps, [step * np.eye(task.d)] * steps)
    raise ValueError(f"unknown baseline {method!r}")


BASELINES = ("cgd", "nag", "mgd", "gd", "gdpp")


def batch_losses(method: str, batch: TaskBatch, steps: int, **kw) -> np.ndarray:
    """Per-task squared query error, shape ``(len(batch), steps + 1)``."""
    out = np.empty((len(batch), steps + 1))
    for i, task in enumerate(batch):
        out[i] = (np.array(method_predictions(method, task, steps, **kw)) - task.y_query) ** 2
    return out


def batch_curve(method: str, batch: TaskBatch, steps: int, **kw) -> np.ndarray:
    """Batch-mean squared query error per step."""
    return batch_losses(method, batch, steps, **kw).mean(axis=0)


def trajectory_rows(task: TaskInstance, ws) -> list:
    """``(step, R(w_k), log R(w_k))`` rows for CSV export."""
    rows = []
    for k, w in enumerate(ws):
        r = empirical_loss(w, task)
        rows.append((k, r, float(np.log(r)) if r > 0 else float("-inf")))
    return rows
