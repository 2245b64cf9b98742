"""Numpy implementation of the batched masked linear-attention kernel.

Used when the compiled extension is unavailable, and as the reference the
compiled kernel is tested against.
"""
import numpy as np


def attention_forward(Z, P, Q, n_ctx):
    """Return ``(out, S, T)`` with ``S = Z M Z^T``, ``T = P S Q``, ``out = T Z``.

    ``Z`` is ``(batch, D, N)``; ``M`` keeps the first ``n_ctx`` columns.
    ``S`` and ``T`` are cached for :func:`attention_backward`.
    """
    if P.shape != (Z.shape[1], Z.shape[1]) or Q.shape != P.shape:
        raise ValueError(f"attention_forward: P {P.shape} and Q {Q.shape} must be square of size {Z.shape[1]}")
    if not 0 <= n_ctx <= Z.shape[2]:
        raise ValueError("attention_forward: n_ctx out of range")
    Zc = Z[:, :, :n_ctx]
    S = Zc @ Zc.transpose(0, 2, 1)
    T = P @ S @ Q
    return T @ Z, S, T


def attention_backward(Z, P, Q, S, T, G, n_ctx):
    """Vector-Jacobian product of :func:`attention_forward` for upstream ``G``.

    Gradients of the shared ``P`` and ``Q`` are summed over the batch axis.
    """
    dT = G @ Z.transpose(0, 2, 1)
    dZ = T.transpose(0, 2, 1) @ G
    dP = np.einsum("bij,bkj->ik", dT, S @ Q)
    dQ = np.einsum("bji,bjk->ik", P @ S, dT)
    dS = P.T @ dT @ Q.T
    dZ[:, :, :n_ctx] += (dS + dS.transpose(0, 2, 1)) @ Z[:, :, :n_ctx]
    return dZ, dP, dQ
