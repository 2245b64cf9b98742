import numpy as np
import pytest

from memformer import kernels
from memformer.kernels import _attention_py as ref

needs_ext = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled extension not built")


def _inputs(seed, batch=7, D=4, N=6, zero_b=False):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((batch, D, N))
    P = rng.standard_normal((D, D))
    Q = rng.standard_normal((D, D))
    if zero_b:
        P[:-1, :] = 0.0
        P[:, :-1] = 0.0
        Q[-1, :] = 0.0
        Q[:, -1] = 0.0
    G = rng.standard_normal((batch, D, N))
    return Z, P, Q, G


def test_reference_forward_matches_definition():
    Z, P, Q, _ = _inputs(0)
    n_ctx = 5
    out, _, _ = ref.attention_forward(Z, P, Q, n_ctx)
    M = np.diag([1.0] * n_ctx + [0.0])
    expect = P @ Z @ M @ (np.swapaxes(Z, 1, 2) @ Q @ Z)
    assert np.allclose(out, expect, rtol=1e-13, atol=1e-13)


def test_reference_backward_matches_fd():
    Z, P, Q, G = _inputs(1, batch=2, D=3, N=4)
    n_ctx = 3
    out, S, T = ref.attention_forward(Z, P, Q, n_ctx)
    dZ, dP, dQ = ref.attention_backward(Z, P, Q, S, T, G, n_ctx)
    h = 1e-6

    def f(Z, P, Q):
        return float(np.sum(ref.attention_forward(Z, P, Q, n_ctx)[0] * G))

    for arr, grad, which in ((Z, dZ, 0), (P, dP, 1), (Q, dQ, 2)):
        for idx in list(np.ndindex(arr.shape))[:12]:
            args = [Z.copy(), P.copy(), Q.copy()]
            args[which][idx] += h
            up = f(*args)
            args[which][idx] -= 2 * h
            down = f(*args)
            assert abs((up - down) / (2 * h) - grad[idx]) < 1e-6 * max(1.0, abs(grad[idx]))


@needs_ext
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("zero_b", [False, True])
def test_backends_agree(seed, zero_b):
    Z, P, Q, G = _inputs(seed, zero_b=zero_b)
    n_ctx = 5
    a = ref.attention_forward(Z, P, Q, n_ctx)
    b = kernels.compiled_backend.attention_forward(Z, P, Q, n_ctx)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)
    ga = ref.attention_backward(Z, P, Q, *a[1:], G, n_ctx)
    gb = kernels.compiled_backend.attention_backward(Z, P, Q, *b[1:], G, n_ctx)
    for x, y in zip(ga, gb):
        assert np.allclose(x, y, rtol=1e-11, atol=1e-11)


@needs_ext
def test_compiled_backend_is_deterministic():
    Z, P, Q, G = _inputs(3, batch=50)
    c = kernels.compiled_backend
    r1 = c.attention_backward(Z, P, Q, *c.attention_forward(Z, P, Q, 5)[1:], G, 5)
    r2 = c.attention_backward(Z, P, Q, *c.attention_forward(Z, P, Q, 5)[1:], G, 5)
    assert all(np.array_equal(x, y) for x, y in zip(r1, r2))


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")


def test_python_fallback_selected_by_env():
    import os
    import subprocess
    import sys

    env = {**os.environ, "MEMFORMER_KERNELS": "python"}
    out = subprocess.run([sys.executable, "-c", "from memformer import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_wrappers_accept_noncontiguous():
    Z, P, Q, _ = _inputs(4)
    Zt = np.swapaxes(np.swapaxes(Z, 1, 2).copy(), 1, 2)
    assert not Zt.flags.c_contiguous
    a = kernels.attention_forward(Zt, P, Q, 5)[0]
    b = ref.attention_forward(Z, P, Q, 5)[0]
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
