import json

import numpy as np
import pytest

from memformer import model as M
from memformer import tasks as T
from memformer import verify as V


def _task(seed, d=5, n=20):
    rng = T.stream(seed, 0, 5)
    return T.sample_task(T.sample_covariance(T.CovarianceSpec(d=d, diag=tuple(np.linspace(1, 0.25, d))), rng), n, rng), rng


def test_report_serializes():
    r = V.EquivalenceReport("x", 1e-12, [0.0, 1e-12], 1e-10, {"d": 2})
    blob = json.loads(json.dumps(r.to_dict()))
    assert blob["passed"] is True and blob["per_layer"] == [0.0, 1e-12]
    assert not V.EquivalenceReport("x", 1.0, [1.0], 1e-10).passed


@pytest.mark.parametrize("seed", range(100))
def test_linear_tf_matches_preconditioned_gd(seed):
    task, rng = _task(seed)
    A_list = [rng.standard_normal((5, 5)) for _ in range(3)]
    assert V.lemma1_check(task, A_list).passed


def test_preconditioned_gd_needs_transpose_for_nonsymmetric():
    # the oracle with A instead of A^T is a different method when A is not symmetric
    task, rng = _task(0)
    A = rng.standard_normal((5, 5))
    model_pred = M.forward(M.model_from_preconditioners([A], n=20), T.build_prompt(task)).prediction
    wrong = task.x_query @ (A @ task.X @ task.X.T @ task.w_star) / task.n
    assert abs(model_pred - wrong) > 1e-3
    assert abs(model_pred - V.lemma1_oracle(task, [A])[1]) < 1e-12


@pytest.mark.parametrize("seed", range(100))
def test_cgd_memformer_matches_cgd(seed):
    assert V.prop1_check(_task(seed)[0], 3).passed


def test_cgd_memformer_single_layer_is_steepest_descent():
    task, _ = _task(1)
    r = V.prop1_check(task, 1)
    assert r.passed
    r0 = V.cgd_layers(task, 1)
    assert r0[0].gamma == 0.0


def test_cgd_memformer_two_dim_exact():
    task, _ = _task(2, d=2, n=5)
    assert V.prop1_check(task, 2, tol=1e-10).passed


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("tied", [True, False])
def test_scalar_lfom_matches_w_space(seed, tied):
    task, rng = _task(seed)
    a = rng.uniform(0.2, 1.0, 3)
    c = rng.uniform(-1, 1, 3) if tied else [rng.uniform(-1, 1, l + 1) for l in range(3)]
    assert V.prop2_check(task, c, a, tied=tied).passed


def test_scalar_lfom_zero_gates():
    task, _ = _task(3)
    r = V.prop2_check(task, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    assert r.passed and r.per_layer == [0.0] * 4
    m = V.scalar_lfom_model(task, [0.0] * 3, [1.0] * 3)
    assert M.forward(m, T.build_prompt(task)).prediction == 0.0


def test_scalar_lfom_single_gate_mapping():
    # c_0 = -1, a_0 = 1 gives Lambda = +1: w_1 = grad R(0), i.e. an ascent step of unit size;
    # c_0 = 1 gives the descent step w_1 = -grad R(0)
    task, _ = _task(4)
    for c0, sign in ((-1.0, 1.0), (1.0, -1.0)):
        assert V.induced_lambdas([c0], [1.0]) == [[sign]]
        r = V.prop2_check(task, [c0], [1.0])
        assert r.passed
        w1 = sign * T.empirical_grad(np.zeros(5), task)
        pred = M.forward(V.scalar_lfom_model(task, [c0], [1.0]), T.build_prompt(task)).prediction
        assert abs(pred - task.x_query @ w1) < 1e-12


def test_cgd_termination_check():
    for s in range(100):
        assert V.cgd_termination_check(_task(s)[0]).passed


@pytest.mark.parametrize("variant,kw", [
    ("linear_tf", {}),
    ("memformer_cgd", {}),
    ("memformer_lfom", {}),
    ("memformer_lfom", {"tie_gamma_across_layers": False}),
    ("memformer_lfom", {"scalar_gamma": True}),
    ("memformer_lfom_gdpp", {}),
    ("memformer_lfom", {"n_heads": 3}),
])
@pytest.mark.parametrize("seed", range(3))
def test_grad_check_full(variant, kw, seed):
    r = V.grad_check_full(variant, seed=seed, **kw)
    assert r.passed, r.to_dict()


def test_gdpp_grad_check_covers_b():
    r = V.grad_check_full("memformer_lfom_gdpp")
    assert any(p.endswith(".B") for p in r.instance["params"])


def test_suite_all_pass():
    reports = V.run_suite(seeds=100, gd_instances=1000)
    assert len(reports) >= 10
    for r in reports:
        assert r.passed, r.to_dict()
