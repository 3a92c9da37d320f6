"""Denoise matrices, stabilization, CFG algebra, DDIM, guided correction."""

import numpy as np
import pytest

import planarpilot.tensorlib as tl
from planarpilot import sampler
from planarpilot.model import NoiseSchedule
from planarpilot.rng import make_rng

SCHED = NoiseSchedule()
K = SCHED.k_max


# ---------------------------------------------------------------------------
# denoise matrices


def test_full_sequence_matrix_example():
    # H=2, M_d=2, K=50: call levels {50, 25}; the final state (all zeros)
    # is the post-loop ddim target, not a row.
    m = sampler.build_denoise_matrix("full-sequence", 2, 0, 2, 2, 50)
    assert m.shape == (2, 2)
    np.testing.assert_array_equal(m[1], [50, 50])  # processed first
    np.testing.assert_array_equal(m[0], [25, 25])  # processed last


def test_autoregressive_matrix_waits_at_k():
    m = sampler.build_denoise_matrix("autoregressive", 2, 0, 2, 2, 50)
    assert m.shape == (4, 2)
    # frame 2 stays at K in every row where frame 1 is still descending
    descending_rows = [i for i in range(4) if 0 < m[i, 0] < 50 or m[i, 0] == 50]
    for i in descending_rows:
        if m[i, 0] != 0:
            assert m[i, 1] == 50


def test_gradual_rows_nondecreasing_along_frames():
    for h in (0, 2, 4):
        for horizon in (3, 4, 8):
            for m_d in (2, 5):
                m = sampler.build_denoise_matrix("gradual", h + horizon, h, horizon, m_d, K)
                fut = m[:, h:]
                assert np.all(np.diff(fut, axis=1) >= 0)


@pytest.mark.parametrize("kind", sampler.SCHEDULE_KINDS)
@pytest.mark.parametrize("h", [2, 4])
@pytest.mark.parametrize("horizon", [4, 8, 28])
@pytest.mark.parametrize("m_d", [2, 5])
def test_matrix_invariants_grid(kind, h, horizon, m_d):
    t = h + horizon
    m = sampler.build_denoise_matrix(kind, t, h, horizon, m_d, K)
    assert m.min() >= 0 and m.max() <= K
    # history columns all zero before stabilization substitution
    assert np.all(m[:, :h] == 0)
    # per column, entries non-increasing from row M-1 down to row 0
    for j in range(t):
        col = m[::-1, j]  # processing order
        assert np.all(np.diff(col) <= 0)
    # frames whose descent completes before the last row show zeros there
    last = m[0, h:]
    ladder_end = sampler.ddim_levels(K, m_d)[-1]
    assert np.all((last == 0) | (last == ladder_end) | (last == K))
    # every frame eventually leaves K and reaches its terminal ladder level
    for j in range(horizon):
        col = m[::-1, h + j]
        assert col[0] == K
        assert col[-1] in (0, ladder_end)


def test_matrix_tail_columns_stay_at_k():
    m = sampler.build_denoise_matrix("full-sequence", 12, 2, 4, 3, K)
    assert np.all(m[:, 6:] == K)


# ---------------------------------------------------------------------------
# stabilization


def test_stabilize_row_examples():
    np.testing.assert_array_equal(sampler.stabilize_row(np.array([0, 0, 5]), 3), [3, 3, 5])
    row = np.array([0, 2, 0])
    np.testing.assert_array_equal(sampler.stabilize_row(row, 0), row)
    row2 = np.array([4, 5, 6])
    np.testing.assert_array_equal(sampler.stabilize_row(row2, 3), row2)


def test_stabilize_never_mutates_inputs():
    row = np.array([0, 0, 7])
    row_bytes = row.tobytes()
    data = make_rng(0).standard_normal((3, 5)).astype(np.float32)
    data_bytes = data.tobytes()
    sampler.stabilize_row(row, 3)
    assert row.tobytes() == row_bytes
    assert data.tobytes() == data_bytes


# ---------------------------------------------------------------------------
# CFG


def test_cfg_identities_exact():
    rng = make_rng(1)
    u = rng.standard_normal((2, 4, 3)).astype(np.float32)
    c = rng.standard_normal((2, 4, 3)).astype(np.float32)
    assert sampler.cfg_combine(u, c, 1.0).tobytes() == c.tobytes()
    assert sampler.cfg_combine(u, c, 0.0).tobytes() == u.tobytes()
    np.testing.assert_allclose(sampler.cfg_combine(np.zeros_like(c), c, 2.0), 2.0 * c, rtol=1e-6)


# ---------------------------------------------------------------------------
# DDIM


def test_ddim_to_zero_returns_prediction():
    rng = make_rng(2)
    x = rng.standard_normal((1, 3, 4))
    x0 = rng.standard_normal((1, 3, 4))
    k_from = np.full((1, 3), 30)
    out = sampler.ddim_update(x, x0, k_from, np.zeros_like(k_from), SCHED)
    np.testing.assert_allclose(out, x0, atol=1e-12)


def test_ddim_same_level_is_identity():
    rng = make_rng(3)
    x = rng.standard_normal((1, 3, 4))
    x0 = rng.standard_normal((1, 3, 4))
    k = np.array([[0, 20, 50]])
    out = sampler.ddim_update(x, x0, k, k, SCHED)
    assert out.tobytes() == x.tobytes()


def test_ddim_raising_level_rejected():
    x = np.zeros((1, 2, 3))
    with pytest.raises(ValueError, match="raise"):
        sampler.ddim_update(x, x, np.array([[5, 5]]), np.array([[6, 5]]), SCHED)


def test_ddim_ladder_with_perfect_oracle_recovers_x0():
    # Linear-Gaussian toy: the oracle knows the true clean window, so the
    # preserved noise direction is eliminated exactly at level 0.
    rng = make_rng(4)
    x0 = rng.standard_normal((1, 2, 3))
    eps = rng.standard_normal((1, 2, 3))
    k = np.full((1, 2), K)
    x = np.sqrt(SCHED.abar[K]) * x0 + np.sqrt(1 - SCHED.abar[K]) * eps
    ladder = sampler.ddim_levels(K, 5)
    levels = list(ladder[1:]) + [0]
    for k_to in levels:
        x = sampler.ddim_update(x, x0, k, np.full_like(k, k_to), SCHED)
        k = np.full_like(k, k_to)
    np.testing.assert_allclose(x, x0, atol=1e-5)


def test_ddim_per_frame_independence():
    # Two frames with independent ladders == each frame run alone.
    rng = make_rng(5)
    x0 = rng.standard_normal((1, 2, 3))
    x = rng.standard_normal((1, 2, 3))
    path_a = [(50, 30), (30, 10), (10, 0)]
    path_b = [(50, 25), (25, 0)]

    def run_joint():
        xa = x.copy()
        ka = np.array([[50, 50]])
        moves = [((a, b), 0) for a, b in path_a] + [((a, b), 1) for a, b in path_b]
        # interleave: frame 0 then frame 1 alternately (order must not matter)
        seq = [(path_a[0], 0), (path_b[0], 1), (path_a[1], 0), (path_b[1], 1), (path_a[2], 0)]
        for (kf, kt), j in seq:
            k_from = ka.copy()
            k_to = ka.copy()
            k_to[0, j] = kt
            xa = sampler.ddim_update(xa, x0, k_from, k_to, SCHED)
            ka = k_to
        return xa

    def run_single(j, path):
        xx = x.copy()
        k = np.array([[50, 50]])
        for kf, kt in path:
            k_to = k.copy()
            k_to[0, j] = kt
            xx = sampler.ddim_update(xx, x0, k, k_to, SCHED)
            k = k_to
        return xx[0, j]

    joint = run_joint()
    np.testing.assert_array_equal(joint[0, 0], run_single(0, path_a))
    np.testing.assert_array_equal(joint[0, 1], run_single(1, path_b))


# ---------------------------------------------------------------------------
# guided correction


def test_guided_correction_lambda_zero_unchanged():
    x0 = make_rng(6).standard_normal((2, 3, 4)).astype(np.float32)
    out = sampler.guided_correction(x0, lambda t: tl.tsum(t), 0.0, 3, None)
    assert out.tobytes() == x0.tobytes()


def test_guided_correction_identical_draws_equal_single():
    rng = make_rng(7)
    x0 = rng.standard_normal((2, 3, 4)).astype(np.float32)
    fixed_pred = rng.standard_normal((2, 3, 4)).astype(np.float32)

    def loss_graph(t):
        return tl.tsum(tl.mul(t, t))

    def stub(x0_in, need_graph):
        return fixed_pred

    out_n5 = sampler.guided_correction(x0, loss_graph, 0.3, 5, stub)
    out_n1 = sampler.guided_correction(x0, loss_graph, 0.3, 1, stub)
    np.testing.assert_allclose(out_n5, out_n1, atol=1e-6)


def test_guided_correction_nonfinite_gradient_skips():
    x0 = np.ones((1, 2, 3), dtype=np.float32)

    def loss_graph(t):
        with tl.finite_checks(False):
            return tl.tsum(tl.log(t - 1.0))  # log(0) -> -inf, grad inf

    def stub(x0_in, need_graph):
        return x0.copy()

    with np.errstate(divide="ignore"):
        out = sampler.guided_correction(x0, loss_graph, 0.5, 2, stub)
    assert out.tobytes() == x0.tobytes()
