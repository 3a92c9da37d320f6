"""Gradient checks (finite-difference oracle), op semantics, Adam, checkpoints."""

import time

import numpy as np
import pytest

import planarpilot.tensorlib as tl
from planarpilot.rng import make_rng

FD_STEP = 1e-5
FD_TOL = 1e-4
N_POINTS = 10


def fd_grad(f, args, wrt, step=FD_STEP):
    """Central finite differences of scalar f w.r.t. args[wrt] (64-bit)."""
    x = args[wrt]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(*args)
        flat[i] = orig - step
        lo = f(*args)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def check_op(build, arg_shapes, seed, wrt_all=True, positive=False):
    """Compare analytic grads of sum(build(*tensors)) against FD for each arg."""
    rng = make_rng(seed)
    args = []
    for sh in arg_shapes:
        a = rng.standard_normal(sh)
        if positive:
            a = np.abs(a) + 0.5
        args.append(a)

    def scalar(*vals):
        ts = [tl.Tensor(v, requires_grad=False) for v in vals]
        return float(tl.tsum(build(*ts)).data)

    ts = [tl.Tensor(v.copy(), requires_grad=True) for v in args]
    out = tl.tsum(build(*ts))
    tl.backward(out)
    for i, t in enumerate(ts):
        if not wrt_all and i > 0:
            break
        num = fd_grad(scalar, [a.copy() for a in args], i)
        ana = t.grad
        denom = np.maximum(np.abs(num), 1.0)
        rel = np.max(np.abs(ana - num) / denom)
        assert rel < FD_TOL, f"grad mismatch (arg {i}): rel err {rel:.2e}"


OPS = {
    "add": (lambda a, b: tl.add(a, b), [(3, 4), (3, 4)], False),
    "sub": (lambda a, b: tl.sub(a, b), [(3, 4), (3, 4)], False),
    "mul": (lambda a, b: tl.mul(a, b), [(3, 4), (3, 4)], False),
    "div": (lambda a, b: tl.div(a, b), [(3, 4), (3, 4)], True),
    "neg": (lambda a: tl.neg(a), [(5,)], False),
    "scale": (lambda a: tl.scale(a, -1.7), [(4, 2)], False),
    "add_const": (lambda a: tl.add_const(a, 2.5), [(4,)], False),
    "add_bias": (lambda x, b: tl.add_bias(x, b), [(2, 3, 4), (4,)], False),
    "matmul": (lambda a, b: tl.matmul(a, b), [(3, 4), (4, 2)], False),
    "matmul_batched": (lambda a, b: tl.matmul(a, b), [(2, 3, 4), (2, 4, 2)], False),
    "matmul_weight": (lambda a, b: tl.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    "sum_all": (lambda a: tl.tsum(a), [(3, 4)], False),
    "sum_axis": (lambda a: tl.tsum(a, axis=1), [(3, 4)], False),
    "mean": (lambda a: tl.tmean(a, axis=-1), [(3, 4)], False),
    "sqrt": (lambda a: tl.sqrt(a), [(3, 4)], True),
    "exp": (lambda a: tl.exp(a), [(3, 4)], False),
    "log": (lambda a: tl.log(a), [(3, 4)], True),
    "tanh": (lambda a: tl.tanh(a), [(3, 4)], False),
    "gelu": (lambda a: tl.gelu(a), [(3, 4)], False),
    "softplus": (lambda a: tl.softplus(a), [(3, 4)], False),
    "softmax": (lambda a: tl.softmax(a), [(3, 5)], False),
    "softmax_masked": (
        lambda a: tl.softmax(a, additive_mask=tl.causal_mask(5, np.float64)),
        [(2, 5, 5)],
        False,
    ),
    "layernorm": (
        lambda x, g, b: tl.layernorm(x, g, b),
        [(3, 6), (6,), (6,)],
        False,
    ),
    "concat": (lambda a, b: tl.concat([a, b], axis=-1), [(3, 2), (3, 4)], False),
    "split": (lambda a: tl.split(a, [2, 3], axis=-1)[1], [(3, 5)], False),
    "narrow": (lambda a: tl.narrow(a, 1, 1, 2), [(3, 5)], False),
    "reshape": (lambda a: tl.mul(tl.reshape(a, (6, 2)), tl.reshape(a, (6, 2))), [(3, 4)], False),
    "transpose": (lambda a: tl.exp(tl.transpose(a, (1, 0))), [(3, 4)], False),
    "embedding": (
        lambda t: tl.embedding(t, np.array([[0, 2], [2, 1]])),
        [(4, 3)],
        False,
    ),
    "attention": (
        lambda q, k, v: tl.attention(q, k, v, n_heads=2),
        [(1, 4, 6), (1, 4, 6), (1, 4, 6)],
        False,
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_primitives(name):
    build, shapes, positive = OPS[name]
    with tl.dtype(np.float64):
        for seed in range(N_POINTS):
            check_op(build, shapes, seed=1000 + seed, positive=positive)


def test_gradcheck_suite_runtime_budget():
    t0 = time.perf_counter()
    with tl.dtype(np.float64):
        for name, (build, shapes, positive) in OPS.items():
            for seed in range(N_POINTS):
                check_op(build, shapes, seed=1000 + seed, positive=positive)
    assert time.perf_counter() - t0 < 120.0


def test_softmax_uniform_on_constant_row():
    out = tl.softmax(tl.Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)


def test_matmul_identity():
    rng = make_rng(7)
    a = rng.standard_normal((3, 5)).astype(np.float32)
    out = tl.matmul(tl.Tensor(np.eye(3, dtype=np.float32)), tl.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_layernorm_constant_row_maps_to_zero():
    x = tl.Tensor(np.full((2, 8), 3.25, dtype=np.float32))
    g = tl.Tensor(np.ones(8, dtype=np.float32))
    b = tl.Tensor(np.zeros(8, dtype=np.float32))
    out = tl.layernorm(x, g, b)
    np.testing.assert_array_equal(out.data, np.zeros((2, 8), dtype=np.float32))


def test_backward_sum_is_ones():
    x = tl.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tl.backward(tl.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=x.data.dtype))


def test_backward_dot_is_bilinear():
    x = tl.Tensor([1.0, 2.0], requires_grad=True)
    y = tl.Tensor([3.0, 4.0], requires_grad=True)
    tl.backward(tl.tsum(tl.mul(x, y)))
    np.testing.assert_allclose(x.grad, [3.0, 4.0])
    np.testing.assert_allclose(y.grad, [1.0, 2.0])


def test_backward_before_forward_raises():
    x = tl.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(tl.TensorError):
        tl.backward(tl.Tensor([1.0]))  # no recorded graph
    # leaf itself has no tape either
    y = x  # noqa: F841


def test_shape_mismatch_error_names_op():
    a = tl.Tensor(np.zeros((2, 3)))
    b = tl.Tensor(np.zeros((3, 2)))
    with pytest.raises(tl.TensorError, match="add"):
        tl.add(a, b)


def test_nonfinite_output_is_error():
    a = tl.Tensor([1.0, 0.0])
    with np.errstate(divide="ignore"), pytest.raises(tl.TensorError, match="log"):
        tl.log(a)


def test_unused_parameter_gets_no_grad_but_zero_on_request():
    x = tl.Tensor([1.0, 2.0], requires_grad=True)
    unused = tl.Tensor([5.0], requires_grad=True)
    tl.backward(tl.tsum(tl.mul(x, x)))
    assert unused.grad is None  # treated as zero by the optimizer


def test_forward_determinism_bit_identical():
    def run():
        rng = make_rng(42)
        x = tl.Tensor(rng.standard_normal((4, 8)).astype(np.float32), requires_grad=True)
        w = tl.Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        out = tl.tsum(tl.gelu(tl.matmul(x, w)))
        tl.backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    o1, gx1, gw1 = run()
    o2, gx2, gw2 = run()
    assert o1.tobytes() == o2.tobytes()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_attention_causality_exact():
    rng = make_rng(3)
    b, t, d = 1, 6, 8
    base = rng.standard_normal((b, t, d)).astype(np.float32)
    perturbed = base.copy()
    perturbed[0, 4:, :] += 10.0  # only positions > 3 change

    def out_of(x):
        xt = tl.Tensor(x)
        return tl.attention(xt, xt, xt, n_heads=2).data

    a, bb = out_of(base), out_of(perturbed)
    assert a[0, :4].tobytes() == bb[0, :4].tobytes()
    assert not np.array_equal(a[0, 4:], bb[0, 4:])


def test_no_grad_skips_tape():
    x = tl.Tensor([1.0, 2.0], requires_grad=True)
    with tl.no_grad():
        y = tl.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_keeps_params():
    p = tl.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = tl.Adam({"p": p}, lr=0.1, warmup_steps=0, decay_steps=0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_warmup_lr_zero_at_step0():
    p = tl.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = tl.Adam({"p": p}, lr=0.1, warmup_steps=10, decay_steps=100)
    assert opt.lr_at(0) == 0.0
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])  # first step applies lr 0


def test_adam_constant_gradient_monotone_decrease():
    # Independent scalar simulation of the same update rule.
    def scalar_adam(steps, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
        x, m, v = 1.0, 0.0, 0.0
        xs = [x]
        for t in range(1, steps + 1):
            g = 1.0
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            xs.append(x)
        return xs

    with tl.dtype(np.float64):
        p = tl.Tensor(np.array([1.0]), requires_grad=True)
        opt = tl.Adam({"p": p}, lr=0.01, warmup_steps=0, decay_steps=0)
        traj = [float(p.data[0])]
        for _ in range(1000):
            p.grad = np.array([1.0])
            opt.step()
            traj.append(float(p.data[0]))
    assert all(b < a for a, b in zip(traj, traj[1:])), "not strictly decreasing"
    ref = scalar_adam(1000)
    np.testing.assert_allclose(traj, ref, rtol=1e-10)


def test_adam_nonfinite_gradient_skips_update():
    p = tl.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = tl.Adam({"p": p}, lr=0.1, warmup_steps=0, decay_steps=0)
    p.grad = np.array([np.nan], dtype=np.float32)
    ok = opt.step()
    assert not ok
    np.testing.assert_array_equal(p.data, [1.0])
    assert opt.step_count == 0


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    rng = make_rng(11)
    tensors = {
        "enc.w0": rng.standard_normal((4, 3)).astype(np.float32),
        "enc.b0": rng.standard_normal(3).astype(np.float32),
    }
    hyper = {"d_z": 8, "width": 128}
    tl.save_checkpoint(tmp_path / "ck", tensors, hyper)
    loaded, h = tl.load_checkpoint(tmp_path / "ck")
    assert h == hyper
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_rejects_bad_version(tmp_path):
    tl.save_checkpoint(tmp_path / "ck", {"a": np.zeros(2, np.float32)}, {})
    mf = tmp_path / "ck" / "manifest.json"
    mf.write_text(mf.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError, match="format_version"):
        tl.load_checkpoint(tmp_path / "ck")
