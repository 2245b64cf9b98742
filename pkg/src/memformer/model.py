"""Linear transformers and memory-augmented variants on prompt matrices.

Every variant shares the masked linear attention ``P Z M (Z^T Q Z)`` with

    P = [[B, 0], [0, 1]],    Q = -[[A, 0], [0, 0]]

and differs in how attention outputs reach the residual stream:

``linear_tf``
    ``Z <- Z + attn(Z) / n``
``memformer_cgd``
    ``R <- attn(Z) + gamma * R_prev``; ``Z <- Z + alpha * R / n``
``memformer_lfom`` / ``memformer_lfom_gdpp``
    ``R_l <- attn(Z)``; ``Z <- Z + (1/n) sum_{j<=l} Gamma_j^l * R_j`` (entrywise)

The readout is ``-Z[d, n]`` at every depth. ``B`` is held at zero except in
the GD++ variant.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ad
from .tasks import TaskBatch, build_prompts

VARIANTS = ("linear_tf", "memformer_cgd", "memformer_lfom", "memformer_lfom_gdpp")


@dataclass
class ModelConfig:
    d: int = 5
    n: int = 20
    L: int = 3
    n_heads: int = 1
    variant: str = "linear_tf"
    tie_gamma_across_layers: bool = True
    scalar_gamma: bool = False
    # A_l fixed to the identity and not trained (CGD-like runs without preconditioning)
    identity_preconditioner: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.L < 0:
            raise ValueError("L must be non-negative")
        if self.n_heads < 1:
            raise ValueError("n_heads must be at least 1")
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be positive")

    @property
    def uses_memory_gates(self):
        return self.variant in ("memformer_lfom", "memformer_lfom_gdpp")


@dataclass
class LayerParams:
    """Parameters of one layer.

    ``heads`` holds ``(A, B)`` pairs. ``Gamma`` holds the gates this layer
    owns: ``[Gamma_l]`` when gates are tied across layers, otherwise
    ``[Gamma_0^l, ..., Gamma_l^l]``. A scalar gate is a 0-d array ``c`` and
    acts like ``c`` times the all-ones matrix.
    """

    heads: list
    alpha: float = 1.0
    gamma: float = 0.0
    Gamma: list = field(default_factory=list)


@dataclass
class Model:
    config: ModelConfig
    layers: list

    # ------------------------------------------------------------------
    # parameter access

    def named_parameters(self) -> dict:
        """All parameters keyed by name, as arrays (scalars are 0-d)."""
        out = {}
        for l, layer in enumerate(self.layers):
            for h, (A, B) in enumerate(layer.heads):
                out[f"L{l}.h{h}.A"] = np.asarray(A, dtype=np.float64)
                out[f"L{l}.h{h}.B"] = np.asarray(B, dtype=np.float64)
            if self.config.variant == "memformer_cgd":
                out[f"L{l}.alpha"] = np.asarray(layer.alpha, dtype=np.float64)
                out[f"L{l}.gamma"] = np.asarray(layer.gamma, dtype=np.float64)
            if self.config.uses_memory_gates:
                for j, G in enumerate(layer.Gamma):
                    key = f"L{l}.Gamma" if self.config.tie_gamma_across_layers else f"L{l}.Gamma.{j}"
                    out[key] = np.asarray(G, dtype=np.float64)
        return out

    def trainable_names(self) -> list:
        cfg = self.config
        names = []
        for name in self.named_parameters():
            kind = name.split(".")[-1] if not name.split(".")[-1].isdigit() else name.split(".")[-2]
            if kind == "A" and not cfg.identity_preconditioner:
                names.append(name)
            elif kind == "B" and cfg.variant == "memformer_lfom_gdpp":
                names.append(name)
            elif kind in ("alpha", "gamma", "Gamma"):
                names.append(name)
        return names

    def set_parameters(self, flat: dict) -> None:
        for name, value in flat.items():
            parts = name.split(".")
            layer = self.layers[int(parts[0][1:])]
            if parts[1].startswith("h"):
                h = int(parts[1][1:])
                A, B = layer.heads[h]
                layer.heads[h] = (np.array(value), B) if parts[2] == "A" else (A, np.array(value))
            elif parts[1] == "alpha":
                layer.alpha = float(value)
            elif parts[1] == "gamma":
                layer.gamma = float(value)
            elif parts[1] == "Gamma":
                j = int(parts[2]) if len(parts) > 2 else 0
                layer.Gamma[j] = np.array(value)
            else:
                raise KeyError(name)

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def gate_shape(config: ModelConfig):
    return () if config.scalar_gamma else (config.d + 1, config.n + 1)


def init_model(config: ModelConfig, rng: Optional[np.random.Generator] = None, init_std: float = 0.1) -> Model:
    """Gaussian init for ``A`` and gates; ``B = 0``, ``alpha = 1``, ``gamma = 0``.

    Draw order per layer: ``A`` of each head, then the layer's gates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    d = config.d
    layers = []
    for l in range(config.L):
        heads = []
        for _ in range(config.n_heads):
            A = np.eye(d) if config.identity_preconditioner else init_std * rng.standard_normal((d, d))
            heads.append((A, np.zeros((d, d))))
        gates = []
        if config.uses_memory_gates:
            count = 1 if config.tie_gamma_across_layers else l + 1
            gates = [init_std * rng.standard_normal(gate_shape(config)) for _ in range(count)]
        layers.append(LayerParams(heads=heads, alpha=1.0, gamma=0.0, Gamma=gates))
    return Model(config, layers)


def model_from_preconditioners(A_list, variant="linear_tf", n=20, **kw) -> Model:
    """Single-head model with the given ``A_l`` and every other parameter neutral.

    Gates default to passing only the current register (``Gamma_l^l = 1``).
    """
    A_list = [np.asarray(A, dtype=np.float64) for A in A_list]
    d = A_list[0].shape[0] if A_list else kw.pop("d", 5)
    cfg = ModelConfig(d=d, n=n, L=len(A_list), variant=variant, **kw)
    layers = []
    for l, A in enumerate(A_list):
        gates = []
        if cfg.uses_memory_gates:
            shape = gate_shape(cfg)
            if cfg.tie_gamma_across_layers:
                gates = [np.ones(shape)]
            else:
                gates = [np.zeros(shape) for _ in range(l)] + [np.ones(shape)]
        layers.append(LayerParams(heads=[(A, np.zeros((d, d)))], Gamma=gates))
    return Model(cfg, layers)


def gdpp_enable(model: Model) -> Model:
    """Switch to the GD++ variant: the ``B`` blocks become trainable.

    Returns a copy; ``B`` keeps its current value (zero from :func:`init_model`),
    so the output is unchanged until training moves it.
    """
    if not model.config.uses_memory_gates:
        raise ValueError("GD++ builds on the memory-gated variant")
    out = model.copy()
    out.config = ModelConfig(**{**asdict(model.config), "variant": "memformer_lfom_gdpp"})
    return out


# ----------------------------------------------------------------------
# forward passes on a tape

def _selector(d):
    J = np.zeros((d, d + 1))
    J[:, :d] = np.eye(d)
    return J


def assemble_PQ(tape, A, B, d):
    """``P = J^T B J + e e^T`` and ``Q = -(J^T A J)`` with ``J = [I_d, 0]``."""
    J = tape.constant(_selector(d))
    Jt = ad.transpose(J)
    corner = np.zeros((d + 1, d + 1))
    corner[d, d] = 1.0
    P = ad.add(ad.matmul(ad.matmul(Jt, B), J), corner)
    Q = ad.scale(-1.0, ad.matmul(ad.matmul(Jt, A), J))
    return P, Q


def attention_var(Z, heads, n_ctx, fused=True):
    """Sum over heads of ``P_h Z M (Z^T Q_h Z)``; ``heads`` is a list of ``(A, B)`` Vars."""
    tape = Z.tape
    d = Z.shape[-2] - 1
    out = None
    for A, B in heads:
        P, Q = assemble_PQ(tape, A, B, d)
        if fused:
            term = ad.linear_attention(Z, P, Q, n_ctx)
        else:
            N = Z.shape[-1]
            M = np.zeros((N, N))
            M[:n_ctx, :n_ctx] = np.eye(n_ctx)
            left = ad.matmul(ad.matmul(P, Z), M)
            right = ad.matmul(ad.matmul(ad.transpose(Z), Q), Z)
            term = ad.matmul(left, right)
        out = term if out is None else ad.add(out, term)
    return out


@dataclass
class Trace:
    tape: ad.Tape
    params: dict          # name -> Var
    Zs: list              # Var per depth, Zs[0] is the prompt
    predictions: list     # Var per depth, -Z[d, n]


def bind(tape: ad.Tape, model: Model) -> dict:
    trainable = set(model.trainable_names())
    return {k: tape.leaf(v, name=k, requires_grad=k in trainable) for k, v in model.named_parameters().items()}


def trace(model: Model, Z0, tape: Optional[ad.Tape] = None, fused: bool = True) -> Trace:
    """Run ``model`` on prompts ``Z0`` (``(d+1, n+1)`` or batched), recording on ``tape``."""
    cfg = model.config
    tape = tape if tape is not None else ad.Tape()
    pv = bind(tape, model)
    Z0 = np.asarray(Z0, dtype=np.float64)
    if Z0.shape[-2:] != (cfg.d + 1, cfg.n + 1):
        raise ad.ShapeError("forward", Z0.shape, (cfg.d + 1, cfg.n + 1))
    d, n = cfg.d, cfg.n
    Z = tape.constant(Z0, name="Z0")
    Zs = [Z]
    R_prev = None
    registers = []
    for l in range(cfg.L):
        heads = [(pv[f"L{l}.h{h}.A"], pv[f"L{l}.h{h}.B"]) for h in range(len(model.layers[l].heads))]
        att = attention_var(Z, heads, n, fused=fused)
        if cfg.variant == "linear_tf":
            Z = ad.add(Z, ad.scale(1.0 / n, att))
        elif cfg.variant == "memformer_cgd":
            R = att if R_prev is None else ad.add(att, ad.scale(pv[f"L{l}.gamma"], R_prev))
            Z = ad.add(Z, ad.scale(pv[f"L{l}.alpha"], ad.scale(1.0 / n, R)))
            R_prev = R
        else:
            registers.append(att)
            total = None
            for j, Rj in enumerate(registers):
                key = f"L{j}.Gamma" if cfg.tie_gamma_across_layers else f"L{l}.Gamma.{j}"
                G = pv[key]
                gated = ad.scale(G, Rj) if G.shape == () else ad.hadamard(G, Rj)
                total = gated if total is None else ad.add(total, gated)
            Z = ad.add(Z, ad.scale(1.0 / n, total))
        Zs.append(Z)
    preds = [ad.scale(-1.0, ad.entry(Zl, d, n)) for Zl in Zs]
    return Trace(tape, pv, Zs, preds)


@dataclass
class ForwardResult:
    predictions: list     # arrays per depth, 0..L
    Zs: list              # arrays per depth

    @property
    def prediction(self):
        return self.predictions[-1]


def forward(model: Model, Z0, fused: bool = True) -> ForwardResult:
    tr = trace(model, Z0, fused=fused)
    return ForwardResult([p.value.copy() for p in tr.predictions], [Z.value.copy() for Z in tr.Zs])


def _model_for(layers, variant, Z0, **kw):
    Z0 = np.asarray(Z0)
    d, n = Z0.shape[-2] - 1, Z0.shape[-1] - 1
    cfg = ModelConfig(d=d, n=n, L=len(layers), n_heads=max([len(p.heads) for p in layers], default=1), variant=variant, **kw)
    return Model(cfg, [copy.deepcopy(p) for p in layers])


def tf_forward(Z0, layers):
    """Plain linear transformer. Returns ``(prediction, per-layer Z)``."""
    res = forward(_model_for(layers, "linear_tf", Z0), Z0)
    return res.prediction, res.Zs


def memformer_cgd_forward(Z0, layers):
    """Dynamic-memory recursion with per-layer ``alpha`` and ``gamma``."""
    res = forward(_model_for(layers, "memformer_cgd", Z0), Z0)
    return res.prediction, res.Zs


def memformer_lfom_forward(Z0, layers, tie_gamma=True, gdpp=False):
    """Cumulative gated-memory recursion; see :class:`LayerParams` for gate layout."""
    first = next((g for p in layers for g in p.Gamma), None)
    scalar = first is not None and np.ndim(first) == 0
    variant = "memformer_lfom_gdpp" if gdpp else "memformer_lfom"
    res = forward(_model_for(layers, variant, Z0, tie_gamma_across_layers=tie_gamma, scalar_gamma=scalar), Z0)
    return res.prediction, res.Zs


def attention(Z, layer: LayerParams, fused: bool = True) -> np.ndarray:
    """Attention output for one layer on a numpy prompt (summed over heads)."""
    tape = ad.Tape()
    Zv = tape.constant(Z)
    heads = [(tape.constant(A), tape.constant(B)) for A, B in layer.heads]
    return attention_var(Zv, heads, Zv.shape[-1] - 1, fused=fused).value.copy()


# ----------------------------------------------------------------------
# objective

def loss_var(tr: Trace, y_query, depth: Optional[int] = None):
    """Mean squared query error ``(prediction - y_query)^2`` at ``depth`` (default: last)."""
    pred = tr.predictions[-1 if depth is None else depth]
    err = ad.sub(pred, np.asarray(y_query, dtype=np.float64).reshape(pred.shape))
    sq = ad.square(err)
    return ad.mean(sq) if sq.shape else sq


def loss_and_grads(model: Model, Z0, y_query, fused: bool = True):
    """Batch objective and its gradient for every trainable parameter."""
    tr = trace(model, Z0, fused=fused)
    root = loss_var(tr, y_query)
    grads = ad.backward(tr.tape, root)
    return float(root.value), {k: grads[k] for k in model.trainable_names()}


def icl_objective(model: Model, batch: TaskBatch) -> float:
    """Monte Carlo estimate of the in-context objective over ``batch``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    res = forward(model, build_prompts(batch))
    return float(np.mean((res.prediction - batch.y_query) ** 2))


def layer_losses(model: Model, batch: TaskBatch) -> np.ndarray:
    """Batch-mean squared query error at every depth ``0..L``."""
    res = forward(model, build_prompts(batch))
    return np.array([np.mean((p - batch.y_query) ** 2) for p in res.predictions])


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "memformer-checkpoint/1"


def to_checkpoint(model: Model) -> dict:
    """JSON-ready dict: config plus shape-tagged row-major parameter arrays."""
    params = {
        k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
        for k, v in model.named_parameters().items()
    }
    return {"format": CHECKPOINT_FORMAT, "config": asdict(model.config), "params": params}


def from_checkpoint(blob: dict) -> Model:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
    cfg = ModelConfig(**blob["config"])
    model = init_model(cfg, np.random.default_rng(0))
    flat = {}
    for k, spec in blob["params"].items():
        arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"checkpoint parameter {k} has non-finite entries")
        flat[k] = arr
    missing = set(model.named_parameters()) - set(flat)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    model.set_parameters(flat)
    return model


def save_checkpoint(model: Model, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(to_checkpoint(model), indent=1))


def load_checkpoint(path) -> Model:
    with open(path) as fh:
        return from_checkpoint(json.load(fh))
