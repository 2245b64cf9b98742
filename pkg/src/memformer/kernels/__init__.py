"""Hot kernels, with the compiled extension selected at import when present.

Set ``MEMFORMER_KERNELS=python`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _attention_py

python_backend = _attention_py

compiled_backend = None
if os.environ.get("MEMFORMER_KERNELS", "").lower() != "python":
    try:
        from . import _attention as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _impl is compiled_backend else "python"


def attention_forward(Z, P, Q, n_ctx):
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    return _impl.attention_forward(Z, P, Q, n_ctx)


def attention_backward(Z, P, Q, S, T, G, n_ctx):
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (Z, P, Q, S, T, G)]
    return _impl.attention_backward(*args, n_ctx)
