"""Random linear-regression tasks and their prompt matrices.

Indexing is 0-based throughout: the prompt ``Z`` has ``d + 1`` rows and
``n + 1`` columns, the label row is ``Z[d]`` and the query slot is
``Z[d, n]`` (row ``d+1``, column ``n+1`` in 1-based notation).

Covariates are stored as columns, ``X`` is ``d x n``.

Random streams
--------------
Every draw comes from a ``numpy.random.Generator`` (PCG64) seeded through
:func:`stream`, which keys a ``SeedSequence`` by ``(seed, run, purpose,
block)``. The trainer uses purposes :data:`COVARIANCE`, :data:`INIT`,
:data:`TRAIN` (block = resample index) and :data:`EVAL`, so each batch can be
regenerated on its own without replaying the run.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_SPECTRUM = (1.0, 1.0, 0.5, 0.25, 1.0)

COVARIANCE, INIT, TRAIN, EVAL = 0, 1, 2, 3


def stream(seed: int, run: int = 0, purpose: int = 0, block: int = 0) -> np.random.Generator:
    """Independent generator for one ``(seed, run, purpose, block)`` key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run), int(purpose), int(block)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class CovarianceSpec:
    d: int = 5
    diag: tuple = DEFAULT_SPECTRUM
    isotropic: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if not self.isotropic:
            if len(self.diag) != self.d:
                raise ValueError(f"spectrum has {len(self.diag)} entries, expected {self.d}")
            if any(not v > 0 for v in self.diag):
                raise ValueError("spectrum entries must be positive")


def haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random orthogonal matrix (QR of a Gaussian, sign-corrected)."""
    G = rng.standard_normal((d, d))
    Qm, R = np.linalg.qr(G)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Qm * signs


def sample_covariance(spec: CovarianceSpec, rng: np.random.Generator) -> np.ndarray:
    """``U^T D U`` with Haar-random ``U``; the identity when isotropic."""
    if spec.isotropic:
        return np.eye(spec.d)
    U = haar_orthogonal(spec.d, rng)
    S = U.T @ np.diag(np.asarray(spec.diag, dtype=np.float64)) @ U
    return 0.5 * (S + S.T)


def _sym_powers(Sigma):
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError(f"Sigma must be square, got {Sigma.shape}")
    if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Sigma).max())):
        raise ValueError("Sigma is not symmetric")
    lam, V = np.linalg.eigh(Sigma)
    if lam.min() <= 1e-12:
        raise ValueError(f"Sigma is not positive definite (smallest eigenvalue {lam.min():.3e})")
    root = (V * np.sqrt(lam)) @ V.T
    inv_root = (V / np.sqrt(lam)) @ V.T
    return root, inv_root


@dataclass
class TaskInstance:
    X: np.ndarray         # d x n, columns are the in-context covariates
    y: np.ndarray         # n labels
    w_star: np.ndarray    # d
    x_query: np.ndarray   # d
    y_query: float
    Sigma: np.ndarray

    @property
    def d(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def hessian(self):
        return self.X @ self.X.T / self.n


@dataclass
class TaskBatch:
    """``size`` tasks sharing one covariance, stored as stacked arrays."""

    X: np.ndarray         # (size, d, n)
    y: np.ndarray         # (size, n)
    w_star: np.ndarray    # (size, d)
    x_query: np.ndarray   # (size, d)
    y_query: np.ndarray   # (size,)
    Sigma: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> TaskInstance:
        return TaskInstance(self.X[i], self.y[i], self.w_star[i], self.x_query[i], float(self.y_query[i]), self.Sigma)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def n(self):
        return self.X.shape[2]

    @classmethod
    def from_instances(cls, tasks: Sequence[TaskInstance]) -> "TaskBatch":
        tasks = list(tasks)
        if not tasks:
            raise ValueError("empty task list")
        return cls(
            np.stack([t.X for t in tasks]),
            np.stack([t.y for t in tasks]),
            np.stack([t.w_star for t in tasks]),
            np.stack([t.x_query for t in tasks]),
            np.array([t.y_query for t in tasks]),
            tasks[0].Sigma,
        )


def labels(X, w) -> np.ndarray:
    """``y_j = <x_j, w>`` summed over the feature axis in order; works batched."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return np.sum(X * w[..., :, None], axis=-2)


def sample_batch(Sigma, n: int, size: int, rng: np.random.Generator) -> TaskBatch:
    """Draw ``size`` tasks: ``x ~ N(0, Sigma)``, ``w* ~ N(0, Sigma^-1)``.

    Draw order: all covariates ``(size, d, n+1)`` first, then ``(size, d)``
    weight vectors, both standard normal and mapped by symmetric square roots.
    The last covariate column of each task is its query.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if size < 1:
        raise ValueError("batch size must be at least 1")
    root, inv_root = _sym_powers(Sigma)
    d = root.shape[0]
    cov = root @ rng.standard_normal((size, d, n + 1))
    w = rng.standard_normal((size, d)) @ inv_root.T
    X = np.ascontiguousarray(cov[:, :, :n])
    xq = np.ascontiguousarray(cov[:, :, n])
    y = labels(X, w)
    yq = labels(xq[..., None], w)[..., 0]
    return TaskBatch(X, y, w, xq, yq, np.array(Sigma, dtype=np.float64))


def sample_task(Sigma, n: int, rng: np.random.Generator) -> TaskInstance:
    return sample_batch(Sigma, n, 1, rng)[0]


def make_task(X, w_star, x_query, Sigma=None) -> TaskInstance:
    """Task from explicit covariates and weights; labels are computed."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    w_star = np.asarray(w_star, dtype=np.float64).reshape(-1)
    x_query = np.asarray(x_query, dtype=np.float64).reshape(-1)
    if Sigma is None:
        Sigma = np.eye(X.shape[0])
    yq = float(labels(x_query[:, None], w_star)[0])
    return TaskInstance(X, labels(X, w_star), w_star, x_query, yq, np.asarray(Sigma, dtype=np.float64))


def build_prompt(task: TaskInstance) -> np.ndarray:
    """``[[X, x_query], [y, 0]]`` as a ``(d+1, n+1)`` matrix."""
    d, n = task.X.shape
    Z = np.zeros((d + 1, n + 1))
    Z[:d, :n] = task.X
    Z[:d, n] = task.x_query
    Z[d, :n] = task.y
    return Z


def build_prompts(batch: TaskBatch) -> np.ndarray:
    size, d, n = batch.X.shape
    Z = np.zeros((size, d + 1, n + 1))
    Z[:, :d, :n] = batch.X
    Z[:, :d, n] = batch.x_query
    Z[:, d, :n] = batch.y
    return Z


def split_prompt(Z: np.ndarray):
    """Inverse of :func:`build_prompt`: returns ``(X, y, x_query)``."""
    d = Z.shape[-2] - 1
    n = Z.shape[-1] - 1
    return Z[..., :d, :n].copy(), Z[..., d, :n].copy(), Z[..., :d, n].copy()


def empirical_loss(w, task: TaskInstance) -> float:
    """``(1/2n) (w - w*)^T X X^T (w - w*)``."""
    r = task.X.T @ (np.asarray(w, dtype=np.float64) - task.w_star)
    return float(r @ r) / (2.0 * task.n)


def empirical_grad(w, task: TaskInstance) -> np.ndarray:
    return task.X @ (task.X.T @ (np.asarray(w, dtype=np.float64) - task.w_star)) / task.n


def query_losses(predictions, y_query) -> np.ndarray:
    """Per-instance squared query error ``(prediction - y_query)^2``."""
    return (np.asarray(predictions) - np.asarray(y_query)) ** 2


def save_batch_csv(path, batch: TaskBatch) -> None:
    """Columnar dump for debugging: one row per task, flattened fields."""
    size, d, n = batch.X.shape
    header = ["task"]
    header += [f"X_{i}_{j}" for i in range(d) for j in range(n)]
    header += [f"y_{j}" for j in range(n)]
    header += [f"w_{i}" for i in range(d)] + [f"xq_{i}" for i in range(d)] + ["y_query"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for b in range(size):
            vals = [*batch.X[b].ravel(), *batch.y[b], *batch.w_star[b], *batch.x_query[b], batch.y_query[b]]
            row = [b, *(repr(float(v)) for v in vals)]
            w.writerow(row)


def load_batch_csv(path, Sigma=None) -> TaskBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("w_"))
    n = sum(1 for h in header if h.startswith("y_") and h != "y_query")
    data = np.array([[float(v) for v in r[1:]] for r in body])
    o = 0
    X = data[:, o:o + d * n].reshape(-1, d, n); o += d * n
    y = data[:, o:o + n]; o += n
    w = data[:, o:o + d]; o += d
    xq = data[:, o:o + d]; o += d
    yq = data[:, o]
    return TaskBatch(X, y, w, xq, yq, np.eye(d) if Sigma is None else np.asarray(Sigma))
