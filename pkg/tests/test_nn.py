"""Autodiff kernel: op gradients, optimizers, schedules, checkpoints.

Every differentiable op is checked against central finite differences on
float64 inputs (step 1e-4, relative tolerance 1e-4) across many seeds; a
fixed random projection turns each op output into a scalar loss so output
gradients are generic rather than all-ones.
"""

import math

import numpy as np
import pytest

from satlayer.nn import (
    SGD,
    Adam,
    Conv2d,
    Dense,
    Tensor,
    WarmupCosine,
    add,
    bce_with_logits,
    concat,
    conv2d,
    flatten,
    kaiming_uniform,
    load_checkpoint,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    tsum,
)

EPS = 1e-4
TOL = 1e-4


def _loss_of(build, arrays, proj):
    tensors = [Tensor(a) for a in arrays]
    out = build(*tensors)
    return tensors, tsum(mul(out, Tensor(proj)))


def _gradcheck(build, arrays, rng):
    """Analytic vs central-difference gradients for every input array."""
    probe = build(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=probe.data.shape)
    tensors, loss = _loss_of(build, arrays, proj)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        _, l = _loss_of(build, arrays, proj)
        return float(l.data)

    for k, a in enumerate(arrays):
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + EPS
            hi = f()
            a[idx] = orig - EPS
            lo = f()
            a[idx] = orig
            num = (hi - lo) / (2 * EPS)
            ana = analytic[k][idx]
            assert abs(ana - num) <= TOL * max(1.0, abs(num)), (
                f"input {k} at {idx}: analytic {ana} vs numeric {num}")


def _away_from_zero(rng, shape, least=0.1):
    mag = rng.uniform(least, 1.0, size=shape)
    return mag * np.where(rng.random(shape) > 0.5, 1.0, -1.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_every_op(seed):
    rng = np.random.default_rng(seed)
    _gradcheck(add, [rng.normal(size=(3, 4)), rng.normal(size=(4,))], rng)
    _gradcheck(mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], rng)
    _gradcheck(matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], rng)
    _gradcheck(relu, [_away_from_zero(rng, (3, 4))], rng)
    _gradcheck(lambda t: reshape(t, (3, 4)), [rng.normal(size=(2, 6))], rng)
    _gradcheck(flatten, [rng.normal(size=(2, 3, 2))], rng)
    _gradcheck(lambda a, b: concat([a, b], axis=1),
               [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))], rng)
    _gradcheck(mean, [rng.normal(size=(3, 4))], rng)
    _gradcheck(tsum, [rng.normal(size=(3, 4))], rng)
    _gradcheck(lambda x, w, b: conv2d(x, w, b),
               [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
                rng.normal(size=(3,))], rng)
    _gradcheck(lambda x, w: conv2d(x, w, stride=2),
               [rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(2, 2, 3, 3))],
               rng)
    targets = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
    _gradcheck(lambda x: bce_with_logits(x, targets),
               [rng.normal(size=(4, 3))], rng)


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_composite_network(seed):
    rng = np.random.default_rng(100 + seed)
    d1 = Dense(6, 5, rng, dtype=np.float64)
    d2 = Dense(5, 2, rng, dtype=np.float64)
    x = rng.normal(size=(3, 6))
    targets = rng.integers(0, 2, size=(3, 2)).astype(np.float64)

    def run():
        return bce_with_logits(d2(relu(d1(Tensor(x)))), targets)

    loss = run()
    loss.backward()
    got = d1.w.grad.copy()
    flat = d1.w.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + EPS
        hi = float(run().data)
        flat[i] = orig - EPS
        lo = float(run().data)
        flat[i] = orig
        num = (hi - lo) / (2 * EPS)
        assert abs(got.reshape(-1)[i] - num) <= TOL * max(1.0, abs(num))


# ---------------------------------------------------------------------------
# op semantics

def test_dense_identity_weights_pass_through():
    rng = np.random.default_rng(0)
    d = Dense(4, 4, rng, dtype=np.float64)
    d.w.data = np.eye(4)
    d.b.data = np.zeros(4)
    x = rng.normal(size=(5, 4))
    assert np.allclose(d(Tensor(x)).data, x)


def test_relu_zero_gradient_at_negative_inputs():
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5]))
    out = tsum(relu(x))
    out.backward()
    assert x.grad.tolist() == [0.0, 0.0, 0.0, 1.0]


def test_matmul_shape_mismatch_message_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_shape_validation():
    with pytest.raises(ValueError, match="4-d"):
        conv2d(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="too small"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_stride_two_output_shape():
    rng = np.random.default_rng(1)
    c = Conv2d(1, 4, rng, stride=2)
    out = c(Tensor(rng.normal(size=(2, 1, 28, 28)).astype(np.float32)))
    assert out.shape == (2, 4, 13, 13)


def test_backward_requires_scalar_or_seed():
    t = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        t.backward()
    with pytest.raises(ValueError, match="seed shape"):
        t.backward(np.zeros(3))


def test_bce_with_logits_matches_direct_formula():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3))
    t = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
    loss = bce_with_logits(Tensor(x), t)
    p = 1.0 / (1.0 + np.exp(-x))
    want = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert float(loss.data) == pytest.approx(want, rel=1e-10)


# ---------------------------------------------------------------------------
# plain-array helpers

def test_softmax_constant_vector_is_uniform():
    out = softmax(np.full(7, 3.25))
    assert np.allclose(out, 1.0 / 7)


def test_softmax_normalization_and_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.normal(size=int(rng.integers(2, 12))) * 10
        out = softmax(v)
        assert abs(out.sum() - 1.0) <= 1e-12
        assert (out > 0).all()
        assert np.argmax(out) == np.argmax(softmax(v + 123.4))


def test_softmax_survives_large_magnitudes():
    out = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.isfinite(out).all()
    assert out.argmax() == 0


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        softmax(np.array([1.0, float("nan")]))


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == 0.5
    assert out[2] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# optimizers

def _param(values):
    t = Tensor(np.asarray(values, dtype=np.float64))
    t.grad = np.zeros_like(t.data)
    return t


def test_sgd_zero_gradient_no_change():
    p = _param([1.0, -2.0])
    opt = SGD([p], lr=0.5)
    before = p.data.copy()
    for _ in range(3):
        p.grad = np.zeros_like(p.data)
        opt.step()
    assert np.array_equal(p.data, before)


def test_sgd_single_step_quadratic_unclipped():
    p = _param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.0, clip=None)
    p.grad = p.data.copy()  # gradient of w^2/2 at w
    opt.step()
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_two_steps_match_scalar_nesterov_reference():
    p = _param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, clip=None)
    w, v = 1.0, 0.0
    for _ in range(2):
        g = w  # gradient of w^2/2
        p.grad = np.array([g])
        opt.step()
        v = 0.9 * v + g
        w = w - 0.1 * (g + 0.9 * v)
        assert p.data[0] == pytest.approx(w, rel=1e-12)


def test_sgd_clip_bounds_applied_step():
    p = _param(np.ones(8))
    opt = SGD([p], lr=1.0, momentum=0.0, clip=0.1)
    before = p.data.copy()
    p.grad = np.full(8, 5.0)
    opt.step()
    moved = np.linalg.norm(p.data - before)
    assert moved <= 0.1 + 1e-9
    assert moved == pytest.approx(0.1)


def test_sgd_schedule_overrides_fixed_rate():
    p = _param([0.0])
    opt = SGD([p], lr=99.0, momentum=0.0, clip=None,
              schedule=lambda t: 0.5 if t == 0 else 0.25)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.5)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.75)


def test_sgd_rejects_nonfinite_gradient():
    p = _param([1.0])
    opt = SGD([p], lr=0.1)
    p.grad = np.array([float("nan")])
    with pytest.raises(RuntimeError, match="non-finite"):
        opt.step()


def test_sgd_step_before_backward_rejected():
    p = Tensor(np.zeros(2))
    opt = SGD([p], lr=0.1)
    with pytest.raises(RuntimeError, match="missing gradients"):
        opt.step()


def test_adam_first_step_is_signed_learning_rate():
    p = _param([1.0, -1.0, 2.0])
    opt = Adam([p], lr=0.01)
    p.grad = np.array([0.3, -0.7, 0.0001])
    before = p.data.copy()
    opt.step()
    step = before - p.data
    # bias-corrected m/sqrt(v) is sign(g) on the first step, up to eps
    assert np.allclose(step, 0.01 * np.sign(p.grad), atol=1e-4)


def test_adam_two_steps_match_scalar_reference():
    p = _param([0.5])
    opt = Adam([p], lr=0.02)
    w = 0.5
    m = v = 0.0
    for t in range(1, 3):
        g = 2.0 * w
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.02 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t))
                                            + 1e-8)
        assert p.data[0] == pytest.approx(w, rel=1e-12)


def test_adam_rejects_nonfinite_gradient():
    p = _param([1.0])
    opt = Adam([p], lr=0.1)
    p.grad = np.array([float("inf")])
    with pytest.raises(RuntimeError, match="non-finite"):
        opt.step()


# ---------------------------------------------------------------------------
# schedule

def test_warmup_cosine_shape():
    s = WarmupCosine(2.0, warmup_steps=4, total_steps=20)
    assert s(0) == pytest.approx(0.5)
    assert s(3) == pytest.approx(2.0)  # end of warmup
    mid = s(12)  # halfway through the decay
    assert mid == pytest.approx(1.0)
    assert s(19) < s(12) < s(4)
    assert s(19) == pytest.approx(2.0 * 0.5 * (1 + math.cos(math.pi * 15 / 16)))
    assert s(1000) == pytest.approx(0.0, abs=1e-12)


def test_warmup_cosine_floor_bottoms_out():
    s = WarmupCosine(1.0, warmup_steps=2, total_steps=10, floor=0.2)
    assert s(500) == pytest.approx(0.2)
    assert all(s(t) >= 0.2 - 1e-12 for t in range(2, 50))


def test_warmup_cosine_degenerate_total():
    s = WarmupCosine(1.0, warmup_steps=5, total_steps=5)
    assert s(7) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# init and checkpoints

def test_kaiming_uniform_bounds_and_determinism():
    bound = math.sqrt(6.0 / 50)
    a = kaiming_uniform(np.random.default_rng(7), (50, 20), 50)
    b = kaiming_uniform(np.random.default_rng(7), (50, 20), 50)
    assert np.array_equal(a, b)
    assert a.dtype == np.float32
    assert np.abs(a).max() <= bound


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    params = {"enc.fc1.w": rng.normal(size=(7, 3)).astype(np.float32),
              "head.fc2.b": rng.normal(size=(4,)).astype(np.float32)}
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for k in params:
        assert np.array_equal(back[k], params[k])
        assert back[k].dtype == np.float32


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "checkpoint.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# end-to-end determinism

def test_fixed_seed_training_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(123)
        d = Dense(5, 2, rng)
        x = rng.normal(size=(16, 5)).astype(np.float32)
        t = rng.integers(0, 2, size=(16, 2)).astype(np.float64)
        opt = SGD(d.params(), lr=0.3,
                  schedule=WarmupCosine(0.3, 2, 10))
        for _ in range(10):
            loss = bce_with_logits(d(Tensor(x)), t)
            loss.backward()
            opt.step()
        return d.w.data.copy(), d.b.data.copy()

    w1, b1 = run()
    w2, b2 = run()
    assert np.array_equal(w1, w2)
    assert np.array_equal(b1, b2)
