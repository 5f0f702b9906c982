"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .errors import DTypeError, GradientError
from .ops import record_branches
from .tensor import Tensor, backward


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _signature(branches):
    return [b.copy() for b in branches]


def _same_branches(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, params, eps=1e-4, max_coords=None, seed=0, floor=1e-6, stats=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` is called without arguments and must read ``params`` (a sequence of
    float64 leaf tensors) by reference; coordinates are perturbed in place.
    ``eps`` is scaled by ``max(1, |p|)`` per coordinate. When ``max_coords``
    is given, each tensor is probed on a random subset of that many entries.

    A probe whose +/- evaluations take a different branch of a non-smooth
    kernel (ReLU side, max index, sign) than the unperturbed point straddles
    a kink, where central differences are meaningless; such coordinates are
    skipped and replaced by fresh samples. Pass a dict as ``stats`` to get
    the number of coordinates checked and skipped.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``, so gradients smaller
    than ``floor`` are effectively compared in absolute terms; below that
    level central differences are dominated by roundoff.

    Returns the worst relative error seen.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise DTypeError("grad_check requires float64 parameters")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.grad = None
        p.requires_grad = True
    with record_branches() as log:
        loss = f()
    base = _signature(log)
    if not np.isfinite(loss.data).all():
        raise GradientError("grad_check: f returned a non-finite value")
    backward(loss)
    del loss

    def probe():
        with record_branches() as log:
            value = _scalar(f())
        return value, _same_branches(log, base)

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if max_coords is not None and max_coords < flat.size:
            order, want = rng.permutation(flat.size), max_coords
        else:
            order, want = range(flat.size), flat.size
        done = 0
        for i in order:
            if done == want:
                break
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            fp, same_p = probe()
            flat[i] = orig - h
            fm, same_m = probe()
            flat[i] = orig
            if not (same_p and same_m):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[i]), numeric, floor))
            done += 1
        checked += done
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


def _scalar(t):
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise GradientError("grad_check: f returned a non-finite value")
    return v


# ------------------------------------------------------------------ suite

PER_OP_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _t(rng, *shape, away_from_zero=0.0):
    a = rng.normal(size=shape)
    if away_from_zero:
        a = np.sign(a) * (np.abs(a) + away_from_zero)
    return Tensor(a, requires_grad=True)


def _op_cases(rng):
    """(name, f, params) triples covering every differentiable kernel."""
    from . import ops
    from . import model as M
    from .train import charbonnier_loss, fft2d, fft_loss

    x = _t(rng, 2, 3, 5, 5)
    w3 = _t(rng, 4, 3, 3, 3)
    w3s = _t(rng, 2, 3, 3, 3)
    w1 = _t(rng, 2, 3, 1, 1)
    wd = _t(rng, 3, 4, 3, 3)
    b4, b2, b3 = _t(rng, 4), _t(rng, 2), _t(rng, 3)
    xd = _t(rng, 1, 4, 6, 6)
    gamma, beta = _t(rng, 3), _t(rng, 3)
    ps = _t(rng, 1, 8, 3, 2)
    a, b = _t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)
    away = _t(rng, 1, 2, 4, 4, away_from_zero=0.1)
    pos = Tensor(np.abs(rng.normal(size=(1, 2, 3, 3))) + 0.5, requires_grad=True)
    one = _t(rng, 1, 1, 4, 4)
    pooled = _t(rng, 1, 3, 1, 1)
    img = _t(rng, 1, 2, 8, 4)
    tgt = Tensor(rng.normal(size=(1, 2, 8, 4)))
    probe = Tensor(rng.normal(size=(2, 4, 5, 5)))
    spec_probe = (Tensor(rng.normal(size=(1, 2, 8, 4))), Tensor(rng.normal(size=(1, 2, 8, 4))))
    ln_probe = Tensor(rng.normal(size=x.shape))
    scatter_probe = Tensor(rng.normal(size=(1, 3, 6, 6)))

    def weighted(t, p):
        return ops.sum_all(ops.mul(t, p))

    return [
        ("conv2d", lambda: weighted(ops.conv2d(x, w3, b4, pad=1), probe), [x, w3, b4]),
        ("conv2d_scatter", lambda: weighted(ops.conv2d(xd, wd, b3, pad=1), scatter_probe), [xd, wd, b3]),
        ("conv2d_stride2", lambda: ops.sum_all(ops.square(ops.conv2d(x, w3s, b2, stride=2, pad=1))), [x, w3s, b2]),
        ("conv1x1", lambda: ops.sum_all(ops.square(ops.conv1x1(x, w1, b2))), [x, w1, b2]),
        ("layer_norm", lambda: weighted(ops.layer_norm(x, gamma, beta), ln_probe), [x, gamma, beta]),
        ("pixel_shuffle", lambda: ops.sum_all(ops.square(ops.pixel_shuffle(ps, 2))), [ps]),
        ("pixel_unshuffle", lambda: ops.sum_all(ops.square(ops.pixel_unshuffle(img, 2))), [img]),
        ("bilinear_resize", lambda: ops.sum_all(ops.square(ops.bilinear_resize(a, 2.0))), [a]),
        ("concat_split", lambda: ops.sum_all(ops.mul(*ops.split_channels(
            ops.concat_channels([a, b, a]), [3, 3]))), [a, b]),
        ("sigmoid", lambda: ops.sum_all(ops.square(ops.sigmoid(a))), [a]),
        ("tanh", lambda: ops.sum_all(ops.square(ops.tanh(a))), [a]),
        ("leaky_relu", lambda: ops.sum_all(ops.square(ops.leaky_relu(away, 0.1))), [away]),
        ("mul_add_sub", lambda: ops.sum_all(ops.mul(ops.add(a, b), ops.sub(a, b))), [a, b]),
        ("scalar_ops", lambda: ops.sum_all(ops.square(ops.add_scalar(ops.mul_scalar(ops.neg(a), 3.0), 1.5))), [a]),
        ("sqrt", lambda: ops.sum_all(ops.sqrt(pos)), [pos]),
        ("abs", lambda: ops.sum_all(ops.mul(ops.abs_(away), away)), [away]),
        ("channel_mean", lambda: ops.sum_all(ops.square(ops.channel_mean(x))), [x]),
        ("channel_max", lambda: ops.sum_all(ops.square(ops.channel_max(x))), [x]),
        ("global_avg_pool", lambda: ops.sum_all(ops.square(ops.global_avg_pool(x))), [x]),
        ("tile_channels", lambda: ops.sum_all(ops.square(ops.tile_channels(one, 3))), [one]),
        ("expand_spatial", lambda: ops.sum_all(ops.square(ops.expand_spatial(pooled, 2, 3))), [pooled]),
        ("mean", lambda: ops.mean_all(ops.square(x)), [x]),
        ("gru_combine", lambda: ops.sum_all(ops.square(M.gru_combine(
            ops.sigmoid(a), ops.sigmoid(b), ops.tanh(pos), pos))), [a, b, pos]),
        ("charbonnier", lambda: charbonnier_loss(img, tgt, 1e-3), [img]),
        ("fft2d", lambda: ops.add(weighted(fft2d(img)[0], spec_probe[0]),
                                  weighted(fft2d(img)[1], spec_probe[1])), [img]),
        ("fft_loss", lambda: fft_loss(img, tgt), [img]),
    ]


def tiny_model_case(variant="split", seed=0, frames=3, size=8):
    """Loss closure over a C=4, blocks {1,1,1} model on a short random clip."""
    from . import ops
    from .model import CtunConfig, init_params, stream_super_resolve
    from .train import charbonnier_loss

    config = CtunConfig(channels=4, blocks=(1, 1, 1), scale=4, ugru_variant=variant)
    params = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    for name, p in params.items():
        # nonzero biases and LayerNorm affine so every parameter has a live gradient path
        if not name.endswith(".weight"):
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    lr = [Tensor(rng.random((1, 3, size, size))) for _ in range(frames)]
    hr = [Tensor(rng.random((1, 3, 4 * size, 4 * size))) for _ in range(frames)]

    def f():
        total = None
        for y, gt in zip(stream_super_resolve(lr, params, config), hr):
            term = charbonnier_loss(y, gt)
            total = term if total is None else ops.add(total, term)
        return total

    return f, list(params.values()) + lr


def run_suite(seed=0, end_to_end_coords=3, eps=1e-4, end_to_end_eps=1e-5):
    """Run every check; returns a list of (name, max_rel_error, tolerance)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params in _op_cases(rng):
        results.append((name, grad_check(f, params, eps=eps, seed=seed), PER_OP_TOL))
    for variant in ("split", "shared"):
        f, params = tiny_model_case(variant, seed=seed)
        err = grad_check(f, params, eps=end_to_end_eps, max_coords=end_to_end_coords, seed=seed)
        results.append((f"end_to_end_{variant}", err, END_TO_END_TOL))
    return results
