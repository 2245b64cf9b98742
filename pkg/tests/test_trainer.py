import json

import numpy as np
import pytest

from memformer import model as M
from memformer import trainer as TR


def small(**kw):
    base = dict(d=2, n=4, L=2, spectrum=(1.0, 0.5), batch_size=16, eval_batch_size=32, total_steps=30, n_runs=2, resample_every=10)
    base.update(kw)
    return TR.TrainConfig().replace(**base)


def test_clip_matrix():
    g = np.full((3, 3), 1.0)
    c = TR.clip_matrix(g, 0.01)
    assert np.linalg.norm(c) <= 0.01 + 1e-15
    assert np.allclose(c / np.linalg.norm(c), g / np.linalg.norm(g))
    tiny = np.full((2, 2), 1e-4)
    assert np.array_equal(TR.clip_matrix(tiny, 0.01), tiny)


def test_adam_first_step():
    cfg = TR.TrainConfig()
    g = np.array([[0.3, -2e-3], [0.0, 1e-9]])
    p, _ = TR.adam_step({"x": np.zeros((2, 2))}, {"x": g}, TR.AdamState.zeros({"x": g}), cfg)
    assert np.allclose(p["x"], -cfg.lr * g / (np.abs(g) + cfg.eps), rtol=1e-12, atol=1e-18)


def test_adam_constant_gradient_tends_to_sign():
    cfg = TR.TrainConfig()
    g = np.array([0.5, -0.02, 3.0])
    params = {"x": np.zeros(3)}
    state = TR.AdamState.zeros(params)
    for _ in range(2000):
        prev = params["x"]
        params, state = TR.adam_step(params, {"x": g}, state, cfg)
    assert np.allclose(params["x"] - prev, -cfg.lr * np.sign(g), rtol=1e-6)


def test_adam_rejects_nonfinite():
    with pytest.raises(TR.NonFiniteGradient):
        TR.adam_step({"x": np.zeros(1)}, {"x": np.array([np.nan])}, TR.AdamState.zeros({"x": np.zeros(1)}), TR.TrainConfig())


def test_config_validation():
    for bad in ({"clip_norm": 0.0}, {"batch_size": 0}, {"total_steps": -1}, {"n_runs": 0}):
        with pytest.raises(ValueError):
            TR.TrainConfig(**bad)


def test_config_replace_routes_model_keys():
    cfg = TR.TrainConfig().replace(variant="memformer_cgd", n_heads=3, lr=0.01)
    assert cfg.model.variant == "memformer_cgd" and cfg.model.n_heads == 3 and cfg.lr == 0.01


def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# demo\nvariant = memformer_lfom\nscalar_gamma = true\nlr = 0.002\nspectrum = 1,1,0.5,0.25,1\n")
    cfg = TR.load_config(p)
    assert cfg.model.variant == "memformer_lfom" and cfg.model.scalar_gamma and cfg.lr == 0.002
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"total_steps": 7, "model": {"L": 2}}))
    cfg = TR.load_config(j)
    assert cfg.total_steps == 7 and cfg.model.L == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    with pytest.raises(ValueError):
        TR.load_config(bad)


def test_zero_steps_returns_init_losses():
    rec = TR.train(small(total_steps=0))
    assert rec.train_loss == [] and rec.init_layer_loss == rec.eval_layer_loss
    assert len(rec.init_layer_loss) == 3


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_equal_seeds_give_identical_records(variant):
    cfg = small(variant=variant)
    a, b = TR.train(cfg, 1), TR.train(cfg, 1)
    assert a.identical(b)
    c = TR.train(cfg.replace(seed=5), 1)
    assert not a.identical(c)


def test_record_lengths_and_clipping_bound():
    cfg = small(total_steps=25)
    grads_seen = []

    def cb(step, model):
        grads_seen.append(step)

    rec = TR.train(cfg, callback=cb)
    assert len(rec.train_loss) == 25 and grads_seen == list(range(1, 26))
    assert len(rec.eval_layer_loss) == cfg.model.L + 1


def test_clipped_gradients_bounded_every_step(monkeypatch):
    seen = []
    orig = TR.adam_step

    def spy(params, grads, state, cfg):
        seen.extend(float(np.linalg.norm(g)) for g in grads.values())
        return orig(params, grads, state, cfg)

    monkeypatch.setattr(TR, "adam_step", spy)
    TR.train(small(total_steps=20, variant="memformer_lfom_gdpp"))
    assert seen and max(seen) <= 0.01 + 1e-15


def test_resampling_blocks():
    cfg = small()
    a = TR.train_batch(cfg, 0, 0)
    b = TR.train_batch(cfg, 0, 1)
    assert not np.array_equal(a.X, b.X)
    assert np.array_equal(a.Sigma, b.Sigma)
    assert not np.array_equal(TR.run_covariance(cfg, 0), TR.run_covariance(cfg, 1))


def test_fixed_batch_eval_on_train():
    cfg = small(resample_every=0, eval_on_train=True, batch_size=3)
    assert np.array_equal(TR.eval_batch(cfg, 0).X, TR.train_batch(cfg, 0, 0).X)


def test_divergence_is_recorded():
    rec = TR.train(small(total_steps=20, init_std=1e4))
    assert rec.status.startswith("diverged") and rec.train_loss == []


def test_average_runs():
    mean, err = TR.average_runs([[1.0, 2.0]])
    assert np.array_equal(mean, [1.0, 2.0]) and np.array_equal(err, [0.0, 0.0])
    mean, _ = TR.average_runs([[1.0, 1.0], [3.0, 3.0]])
    assert np.array_equal(mean, [2.0, 2.0])
    with pytest.raises(ValueError):
        TR.average_runs([[1.0], [1.0, 2.0]])
    with pytest.raises(ValueError):
        TR.average_runs([])


def test_record_write(tmp_path):
    rec = TR.train(small(total_steps=5))
    rec.write(tmp_path, "r")
    meta = json.loads((tmp_path / "r.json").read_text())
    assert meta["config"]["seed"] == 0 and len(meta["eval_layer_loss"]) == 3
    assert M.load_checkpoint(tmp_path / "r_checkpoint.json").config.L == 2
    assert (tmp_path / "r_train.csv").read_text().startswith("step,loss")


ISO_TF = dict(variant="linear_tf", isotropic=True, total_steps=2000, lr=1e-3)


def _iso_reductions():
    cfg = TR.TrainConfig().replace(**ISO_TF)
    return [np.log(r.init_layer_loss[-1]) - np.log(r.eval_layer_loss[-1]) for r in (TR.train(cfg, s) for s in range(5))]


@pytest.fixture(scope="module")
def iso_reductions():
    return _iso_reductions()


@pytest.mark.slow
def test_linear_tf_isotropic_learns(iso_reductions):
    # at least one order of magnitude on every seed
    assert min(iso_reductions) > np.log(10.0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="a shared 3-step polynomial in the sample covariance cannot reach a 100x "
                                       "reduction at d=5, n=20 (least-squares optimum is about 37x)")
def test_linear_tf_isotropic_two_orders(iso_reductions):
    assert min(iso_reductions) >= np.log(100.0)
