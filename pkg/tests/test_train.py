import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctun import train
from ctun.errors import GradientError, ShapeError
from ctun.gradcheck import grad_check
from ctun.model import CtunConfig, init_params
from ctun.tensor import Tensor
from ctun.train import (AdamState, TrainConfig, adam_step, charbonnier_loss, cosine_lr, fft2d,
                        fft_loss, make_synthetic_sequence, train_loop)

from oracles import adam_reference, dft2_naive

TINY = CtunConfig(channels=4, blocks=(1, 1, 1))


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- losses

def test_charbonnier_equal_inputs_is_eps(rng):
    x = T(rng.random((1, 3, 4, 4)))
    assert charbonnier_loss(x, x, 1e-3).item() == pytest.approx(1e-3, rel=1e-12)


def test_charbonnier_unit_difference():
    a, b = T(np.ones((1, 1, 2, 2))), T(np.zeros((1, 1, 2, 2)))
    assert charbonnier_loss(a, b, 1e-3).item() == pytest.approx(1.0000005, abs=1e-9)


@given(st.integers(0, 10 ** 6))
def test_charbonnier_lower_bound(seed):
    r = np.random.default_rng(seed)
    a, b = T(r.random((1, 1, 3, 3))), T(r.random((1, 1, 3, 3)))
    assert charbonnier_loss(a, b).item() >= 1e-3


def test_charbonnier_gradient(rng):
    p, t = T(rng.random((1, 2, 3, 3)), True), T(rng.random((1, 2, 3, 3)))
    assert grad_check(lambda: charbonnier_loss(p, t), [p]) < 1e-5


def test_charbonnier_shape_mismatch():
    with pytest.raises(ShapeError):
        charbonnier_loss(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 2, 4))))


def test_fft_constant_and_impulse():
    re, im = fft2d(T(np.full((1, 1, 4, 8), 0.5)))
    expected = np.zeros((4, 8))
    expected[0, 0] = 0.5 * 32
    np.testing.assert_allclose(re.data[0, 0], expected, atol=1e-12)
    np.testing.assert_allclose(im.data, 0.0, atol=1e-12)
    imp = np.zeros((1, 1, 8, 8))
    imp[0, 0, 0, 0] = 1.0
    re, im = fft2d(T(imp))
    np.testing.assert_allclose(re.data, 1.0, atol=1e-15)
    np.testing.assert_allclose(im.data, 0.0, atol=1e-15)


def test_fft_matches_naive_dft(rng):
    x = rng.normal(size=(8, 8))
    re, im = fft2d(T(x[None, None]))
    ref = dft2_naive(x)
    np.testing.assert_allclose(re.data[0, 0], ref.real, atol=1e-9)
    np.testing.assert_allclose(im.data[0, 0], ref.imag, atol=1e-9)


@given(st.sampled_from([1, 2, 4, 8, 16, 32, 64]), st.sampled_from([1, 2, 8, 64]), st.integers(0, 10 ** 6))
def test_parseval(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(1, 1, h, w))
    re, im = fft2d(T(x))
    energy = (re.data ** 2 + im.data ** 2).sum() / (h * w)
    assert energy == pytest.approx((x ** 2).sum(), rel=1e-6)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ShapeError):
        fft2d(T(np.zeros((1, 1, 6, 8))))
    with pytest.raises(ShapeError):
        fft_loss(T(np.zeros((1, 1, 8, 12))), T(np.zeros((1, 1, 8, 12))))


def test_fft_loss_cases(rng):
    x = rng.random((1, 3, 8, 8))
    assert fft_loss(T(x), T(x)).item() == 0.0
    assert fft_loss(T(x), T(np.roll(x, 1, axis=3))).item() > 0


def test_fft_loss_gradient(rng):
    p, t = T(rng.random((1, 2, 8, 8)), True), T(rng.random((1, 2, 8, 8)))
    assert grad_check(lambda: fft_loss(p, t), [p]) < 1e-5


# ------------------------------------------------------------- optimiser

def scalar_store(v):
    return {"p": Tensor(np.array([v], dtype=np.float64))}


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_sign(g):
    params = scalar_store(1.0)
    adam_step(params, {"p": np.array([g])}, AdamState(), lr=1e-2)
    assert params["p"].data[0] - 1.0 == pytest.approx(-1e-2 * math.copysign(1, g), abs=1e-2 * 1e-6)


def test_adam_zero_gradient_keeps_params():
    params = scalar_store(0.3)
    state = AdamState()
    for _ in range(20):
        adam_step(params, {"p": np.zeros(1)}, state, lr=1e-2)
    assert params["p"].data[0] == 0.3


def test_adam_quadratic_bowl_matches_reference():
    params = scalar_store(1.0)
    state = AdamState()
    for _ in range(500):
        adam_step(params, {"p": 2 * params["p"].data}, state, lr=1e-2)
    ref = adam_reference(1.0, lambda p: 2 * p, 500, 1e-2)
    assert params["p"].data[0] == pytest.approx(ref, abs=1e-12)
    assert abs(params["p"].data[0]) < 1e-2


def test_adam_without_momentum_is_sign_sgd(rng):
    g = rng.normal(size=5)
    params = {"p": Tensor(np.zeros(5))}
    adam_step(params, {"p": g}, AdamState(), lr=0.1, betas=(0.0, 0.0))
    np.testing.assert_allclose(params["p"].data, -0.1 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_nan_names_parameter():
    with pytest.raises(GradientError, match="weird.weight"):
        adam_step({"weird.weight": Tensor(np.zeros(2))}, {"weird.weight": np.array([1.0, np.nan])},
                  AdamState(), lr=1e-3)


def test_cosine_schedule():
    assert cosine_lr(0, 1000, 2e-4) == 2e-4
    assert cosine_lr(1000, 1000, 2e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(500, 1000, 2e-4) == pytest.approx(1e-4, rel=1e-12)
    values = [cosine_lr(t, 300, 2e-4, 1e-6) for t in range(301)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        cosine_lr(1001, 1000, 2e-4)


def test_default_learning_rate():
    assert TrainConfig().lr0 == 2e-4
    assert TrainConfig().betas == (0.9, 0.99)


# -------------------------------------------------------- synthetic data

@pytest.mark.parametrize("motion", train.MOTIONS)
def test_synthetic_sequences(motion):
    a = make_synthetic_sequence(3, 16, 20, motion, seed=5)
    b = make_synthetic_sequence(3, 16, 20, motion, seed=5)
    for x, y in zip(a.frames, b.frames):
        assert x.data.tobytes() == y.data.tobytes()
        assert x.data.min() >= 0 and x.data.max() <= 1
    assert not np.array_equal(a.frames[0].data, a.frames[1].data)
    still = make_synthetic_sequence(3, 16, 20, motion, seed=5, velocity=(0.0, 0.0))
    for f in still.frames:
        np.testing.assert_array_equal(f.data, still.frames[0].data)


def test_synthetic_size_must_divide_by_four():
    with pytest.raises(ShapeError):
        make_synthetic_sequence(2, 10, 16)


# --------------------------------------------------------------- training

def tiny_train(iters, **kw):
    return TrainConfig(iters=iters, patch=8, frames=2, batch=1, **kw)


def test_zero_iterations_returns_initial_weights():
    params, history = train_loop(TINY, tiny_train(0))
    init = init_params(TINY, seed=0)
    assert history == []
    for k in init:
        np.testing.assert_array_equal(params[k].data, init[k].data)


def test_history_length_and_determinism():
    _, h1 = train_loop(TINY, tiny_train(5, log_every=2))
    _, h2 = train_loop(TINY, tiny_train(5, log_every=2))
    assert len(h1) == math.ceil(5 / 2)
    assert [r[0] for r in h1] == [0, 2, 4]
    assert h1 == h2


def test_history_length_default_window():
    _, history = train_loop(TINY, tiny_train(101, seq_size=8))
    assert len(history) == 2


def test_history_csv(tmp_path):
    train.write_history_csv([(0, 0.5, 0.25, 0.525, 2e-4)], tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,charbonnier,fft,total,lr"
    assert lines[1].split(",")[0] == "0"
