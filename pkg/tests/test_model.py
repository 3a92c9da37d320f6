"""Noise schedule, forward diffusion, causality, training determinism."""

import numpy as np
import pytest
from scipy.stats import chi2

import planarpilot.tensorlib as tl
from planarpilot import features
from planarpilot import model as M
from planarpilot.rng import make_rng


def tiny_model(token_dim=21, window=8, seed=0):
    cfg = M.ModelConfig(layers=1, width=32, heads=2, window=window, steps=10, batch=8, seed=seed)
    rows = make_rng(99).standard_normal((64, token_dim))
    return M.BehaviorModel.init(cfg, token_dim, features.Normalizer.fit(rows))


def test_schedule_invariants():
    sched = M.NoiseSchedule()
    assert sched.abar[0] == 1.0
    assert np.all(np.diff(sched.abar) < 0)
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert sched.abar[sched.k_max] < 0.01  # top level is near-pure noise


def test_forward_diffuse_level_zero_is_identity():
    sched = M.NoiseSchedule()
    rng = make_rng(0)
    x = rng.standard_normal((2, 4, 3))
    eps = rng.standard_normal((2, 4, 3))
    out = M.forward_diffuse(x, np.zeros((2, 4), dtype=int), eps, sched)
    assert out.tobytes() == x.tobytes()


def test_forward_diffuse_top_level_zero_data():
    sched = M.NoiseSchedule()
    rng = make_rng(1)
    eps = rng.standard_normal((1, 4, 3))
    k = np.full((1, 4), sched.k_max)
    out = M.forward_diffuse(np.zeros((1, 4, 3)), k, eps, sched)
    np.testing.assert_allclose(out, np.sqrt(1 - sched.abar[sched.k_max]) * eps, rtol=1e-12)


def test_forward_diffuse_variance_montecarlo():
    sched = M.NoiseSchedule()
    rng = make_rng(2)
    n = 10_000
    x0 = rng.standard_normal(n) * 1.7  # Var = 2.89
    for k in (5, 20, 40):
        eps = rng.standard_normal(n)
        xk = M.forward_diffuse(x0[:, None, None], np.full((n, 1), k), eps[:, None, None], sched)
        var = float(np.var(xk))
        expect = sched.abar[k] * float(np.var(x0)) + (1 - sched.abar[k])
        assert abs(var - expect) / expect < 0.05


def test_forward_diffuse_rejects_bad_level():
    sched = M.NoiseSchedule()
    with pytest.raises(ValueError, match="range"):
        M.forward_diffuse(np.zeros((1, 2, 3)), np.array([[0, 51]]), np.zeros((1, 2, 3)), sched)


def test_sampled_levels_uniform_and_independent():
    model = tiny_model()
    rng = make_rng(3)
    draws = np.concatenate([model.sample_levels(rng, 64, 8) for _ in range(400)])  # (25600, 8)
    kmax = model.cfg.k_max
    # per-frame marginals: chi-square against uniform on {0..K}
    for t in range(8):
        counts = np.bincount(draws[:, t], minlength=kmax + 1)
        expected = len(draws) / (kmax + 1)
        stat = float(((counts - expected) ** 2 / expected).sum())
        assert stat < chi2.ppf(0.999, kmax)
    # cross-frame sample correlation small
    c = np.corrcoef(draws.T)
    off = c[~np.eye(8, dtype=bool)]
    assert np.max(np.abs(off)) < 0.05


def test_model_forward_causality_bit_exact():
    model = tiny_model()
    rng = make_rng(4)
    x = rng.standard_normal((1, 8, 21)).astype(np.float32)
    k = np.full((1, 8), 3)
    c = np.array([M.NULL_COND])
    base = model.predict(x, k, c)
    x2 = x.copy()
    x2[0, 5:, :] += 7.0
    out = model.predict(x2, k, c)
    assert base[0, :5].tobytes() == out[0, :5].tobytes()
    assert not np.array_equal(base[0, 5:], out[0, 5:])


def test_model_forward_rejects_out_of_range():
    model = tiny_model()
    x = np.zeros((1, 8, 21), dtype=np.float32)
    with pytest.raises(tl.TensorError):
        model.predict(x, np.full((1, 8), 99), np.array([0]))
    with pytest.raises(tl.TensorError):
        model.predict(x, np.zeros((1, 8), dtype=int), np.array([50]))


def test_model_forward_deterministic():
    model = tiny_model()
    rng = make_rng(5)
    x = rng.standard_normal((2, 8, 21)).astype(np.float32)
    k = rng.integers(0, 51, size=(2, 8))
    c = np.array([0, M.NULL_COND])
    a = model.predict(x, k, c)
    b = model.predict(x, k, c)
    assert a.tobytes() == b.tobytes()


def test_condition_embedding_changes_output():
    model = tiny_model()
    x = make_rng(6).standard_normal((1, 8, 21)).astype(np.float32)
    k = np.full((1, 8), 10)
    a = model.predict(x, k, np.array([M.cond_id("walk-forward")]))
    b = model.predict(x, k, np.array([M.NULL_COND]))
    assert np.mean(np.abs(a - b)) > 0


def test_train_loss_trajectory_deterministic():
    rng = make_rng(7)
    windows = rng.standard_normal((64, 8, 21)).astype(np.float64)
    labels = rng.integers(0, 7, size=64)

    def run():
        cfg = M.ModelConfig(layers=1, width=32, heads=2, window=8, steps=6, batch=8, seed=3)
        _, rep = M.train_model(windows, labels, cfg)
        return rep["running_loss_tail"], rep["final_loss"]

    assert run() == run()


def test_checkpoint_roundtrip_identical_predictions(tmp_path):
    model = tiny_model()
    model.save(tmp_path / "m", extra={"note": 1})
    back = M.BehaviorModel.load(tmp_path / "m")
    x = make_rng(8).standard_normal((1, 8, 21)).astype(np.float32)
    k = np.full((1, 8), 7)
    c = np.array([2])
    assert model.predict(x, k, c).tobytes() == back.predict(x, k, c).tobytes()
