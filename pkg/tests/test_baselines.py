import numpy as np
import pytest

from memformer import baselines as BL
from memformer import tasks as T


def _paper_task(seed, isotropic=False, d=5, n=20):
    rng = T.stream(seed, 0, 9)
    Sigma = T.sample_covariance(T.CovarianceSpec(d=d, isotropic=isotropic), rng)
    return T.sample_task(Sigma, n, rng)


def test_precond_step_cases():
    t = T.sample_task(np.eye(3), 5, np.random.default_rng(0))
    assert np.array_equal(BL.precond_gd_step(t.w_star, np.eye(3), t), t.w_star)
    h = T.make_task([[2.0]], [1.0], [1.0])
    assert BL.precond_gd_step([0.0], [[1.0]], h) == pytest.approx([4.0])


def test_cgd_whitened_one_step():
    # X X^T / n = I: steepest descent with exact line search lands on w*
    d, n = 3, 6
    Qm, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((n, d)))
    X = np.sqrt(n) * Qm.T
    t = T.make_task(X, [1.0, -2.0, 0.5], np.ones(d))
    assert np.allclose(t.hessian, np.eye(d))
    ws = BL.cgd_run(t, 1)
    assert np.linalg.norm(ws[1] - t.w_star) < 1e-12


def test_cgd_two_dim_terminates():
    t = T.make_task([[2.0, 0.0, 1.0], [0.0, 1.0, 1.0]], [1.5, -0.5], [1.0, 1.0])
    ws = BL.cgd_run(t, 2)
    assert np.linalg.norm(ws[2] - t.w_star) < 1e-10


@pytest.mark.parametrize("seed", range(100))
def test_cgd_finite_termination_and_conjugacy(seed):
    t = _paper_task(seed)
    tr = BL.cgd_trace(t, 5)
    assert T.empirical_loss(tr.iterates[5], t) / T.empirical_loss(tr.iterates[0], t) < 1e-12
    H = t.hessian
    S = tr.directions
    for i in range(5):
        for j in range(i):
            rel = abs(S[i] @ H @ S[j]) / np.sqrt((S[i] @ H @ S[i]) * (S[j] @ H @ S[j]))
            assert rel < 1e-6


def test_cgd_first_step_is_exact_steepest_descent():
    t = _paper_task(3)
    g = T.empirical_grad(np.zeros(5), t)
    alpha = (g @ g) / (g @ t.hessian @ g)
    assert np.allclose(BL.cgd_run(t, 1)[1], -alpha * g, rtol=1e-14, atol=1e-15)


def test_cgd_freezes_after_termination():
    t = T.make_task([[1.0, 0.0], [0.0, 2.0]], [1.0, 1.0], [1.0, 0.0])
    tr = BL.cgd_trace(t, 6)
    assert len(tr.iterates) == 7 and len(tr.alphas) == 6
    assert tr.terminated_at is not None and tr.terminated_at <= 2
    assert all(np.array_equal(w, tr.iterates[-1]) for w in tr.iterates[tr.terminated_at:])


def test_cgd_rank_deficient_stops():
    # two covariates in three dimensions
    t = T.make_task([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    ws = BL.cgd_run(t, 3)
    assert len(ws) == 4 and np.all(np.isfinite(ws[-1]))
    assert T.empirical_loss(ws[-1], t) < 1e-20


@pytest.mark.parametrize("run", [BL.momentum_gd_run, BL.nag_run])
def test_zero_momentum_is_gd(run):
    t = _paper_task(4)
    a = run(t, 6, lr=0.05, beta=0.0)
    b = BL.gd_run(t, 6, 0.05)
    assert all(np.allclose(x, y, rtol=1e-14, atol=1e-15) for x, y in zip(a, b))


@pytest.mark.parametrize("method", ["cgd", "nag", "mgd", "gd"])
def test_stationary_at_optimum(method):
    # w* = 0 so the start point already has zero gradient
    t = T.make_task(np.eye(3), np.zeros(3), np.ones(3))
    preds = BL.method_predictions(method, t, 4)
    assert preds == [0.0] * 5


def test_nag_first_step_is_gd():
    t = _paper_task(5)
    assert np.array_equal(BL.nag_run(t, 1)[1], BL.gd_run(t, 1, BL.NAG_LR)[1])


def test_mgd_monotone_on_paper_distribution():
    ok = 0
    for s in range(100):
        t = _paper_task(1000 + s)
        losses = [T.empirical_loss(w, t) for w in BL.momentum_gd_run(t, 10)]
        ok += all(b < a for a, b in zip(losses, losses[1:]))
    assert ok >= 95


def test_nag_beats_gd_after_three_steps():
    nag, gd = [], []
    for s in range(100):
        t = _paper_task(2000 + s)
        nag.append(T.empirical_loss(BL.nag_run(t, 3)[3], t))
        gd.append(T.empirical_loss(BL.gd_run(t, 3, BL.NAG_LR)[3], t))
    assert np.mean(nag) < np.mean(gd)


def test_gdpp_without_transform_is_preconditioned_gd():
    t = _paper_task(6)
    rng = np.random.default_rng(0)
    A_list = [rng.standard_normal((5, 5)) / 3 for _ in range(3)]
    from memformer.verify import lemma1_oracle

    assert np.allclose(BL.gdpp_run(t, 3, [0.0] * 3, A_list), lemma1_oracle(t, A_list), rtol=0, atol=1e-12)
    sym = [A + A.T for A in A_list]
    ws = BL.precond_gd_run(t, sym)
    assert np.allclose(BL.gdpp_run(t, 3, [0.0] * 3, sym), [t.x_query @ w for w in ws], rtol=0, atol=1e-12)


def test_gdpp_whitened_full_transform_kills_covariates():
    d, n = 3, 6
    Qm, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((n, d)))
    t = T.make_task(np.sqrt(n) * Qm.T, np.ones(d), np.ones(d))
    H = t.hessian
    assert np.allclose((np.eye(d) - 1.0 * H) @ t.X, 0.0, atol=1e-12)


def test_gdpp_transform_improves_conditioning():
    for s in range(20):
        t = _paper_task(3000 + s)
        lam = np.linalg.eigvalsh(t.hessian)
        gamma = 1.0 / (3.0 * lam[-1])
        mu = np.linalg.eigvalsh(BL.transformed_hessian(t, gamma))
        assert mu[-1] / mu[0] < lam[-1] / lam[0]


def test_gdpp_needs_gamma_per_step():
    with pytest.raises(ValueError):
        BL.gdpp_run(_paper_task(0), 3, [0.1])


def test_batch_curve_matches_loop():
    b = T.sample_batch(np.eye(3), 6, 7, np.random.default_rng(3))
    curve = BL.batch_curve("cgd", b, 3)
    loop = np.mean([[(p - t.y_query) ** 2 for p in BL.method_predictions("cgd", t, 3)] for t in b], axis=0)
    assert np.allclose(curve, loop, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        BL.batch_curve("adam", b, 3)


def test_trajectory_rows():
    t = _paper_task(7)
    rows = BL.trajectory_rows(t, BL.cgd_run(t, 2))
    assert [r[0] for r in rows] == [0, 1, 2] and rows[0][1] > rows[2][1]
