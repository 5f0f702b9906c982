"""Losses, optimiser, schedule, synthetic data and the toy training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import DegradationSpec, FrameSequence, bicubic_resize, degrade, rgb_to_y
from .errors import GradientError, ShapeError
from .metrics import psnr
from .model import init_params, stream_super_resolve
from .tensor import Tensor, backward, make_result, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    betas: tuple = (0.9, 0.99)
    iters: int = 2000
    patch: int = 32
    batch: int = 2
    frames: int = 8
    charbonnier_eps: float = 1e-3
    fft_weight: float = 0.1
    seed: int = 0
    lr_min: float = 0.0
    seq_size: int = 0  # LR size of each training sequence; 0 means equal to patch
    sequences: int = 2
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ValueError("patch must be a power of two")
        if self.iters < 0 or self.batch < 1 or self.frames < 1 or self.sequences < 1:
            raise ValueError("iters must be >= 0; batch, frames and sequences >= 1")
        if self.seq_size and self.seq_size < self.patch:
            raise ValueError("seq_size must be >= patch")

    @property
    def lr_size(self):
        return self.seq_size or self.patch


# ------------------------------------------------------------------- losses

def charbonnier_loss(pred, target, eps=1e-3):
    """mean(sqrt((pred - target)^2 + eps^2))."""
    if pred.shape != target.shape:
        raise ShapeError("charbonnier_loss", "inputs differ in shape", pred.shape, target.shape)
    d = ops.sub(pred, target)
    return ops.mean_all(ops.sqrt(ops.add_scalar(ops.square(d), eps * eps)))


def _is_pow2(n):
    return n >= 1 and not n & (n - 1)


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last_axis(x):
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ShapeError("fft", "length must be a power of two", "2^k", n)
    x = x[..., _bit_reverse(n)].astype(ctype)
    lead = x.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m).astype(ctype)
        blocks = x.reshape(lead + (n // m, m))
        t = blocks[..., half:] * tw
        blocks[..., half:] = blocks[..., :half] - t
        blocks[..., :half] += t
        m *= 2
    return x


def fft2d_array(x):
    """2-D DFT over the last two axes (rows then columns)."""
    x = fft_last_axis(x)
    return np.swapaxes(fft_last_axis(np.swapaxes(x, -1, -2)), -1, -2)


def _check_fft_dims(op, shape):
    h, w = shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(op, "spatial dims must be powers of two", "2^k", (h, w))


def fft2d(x):
    """Differentiable 2-D DFT; returns (real, imaginary) tensors."""
    _check_fft_dims("fft2d", x.shape)
    spec = fft2d_array(x.data)
    dtype = x.dtype

    # d Re(Fx) / dx = Re(F .), d Im(Fx) / dx = Im(F .) since the DFT matrix is symmetric
    def _back_re(g):
        return (fft2d_array(g).real.astype(dtype),)

    def _back_im(g):
        return (fft2d_array(g).imag.astype(dtype),)

    re = make_result(spec.real.astype(dtype), (x,), _back_re, "fft2d.re")
    im = make_result(spec.imag.astype(dtype), (x,), _back_im, "fft2d.im")
    return re, im


def fft_loss(pred, target):
    """Mean L1 distance between the stacked real/imaginary spectra.

    Fused into one node so the backward pass needs a single transform:
    Re(F g_re) + Im(F g_im) == Re(F (g_re - i g_im)).
    """
    if pred.shape != target.shape:
        raise ShapeError("fft_loss", "inputs differ in shape", pred.shape, target.shape)
    _check_fft_dims("fft_loss", pred.shape)
    diff = fft2d_array(pred.data) - fft2d_array(target.data)
    count = 2 * diff.size
    value = (np.abs(diff.real).sum(dtype=np.float64) + np.abs(diff.imag).sum(dtype=np.float64)) / count
    dtype = pred.dtype
    if ops._branch_log is not None:
        # bins that vanish identically for real inputs only carry roundoff noise
        tiny = 1e-9 * max(1.0, float(np.abs(diff).max()))
        ops._record_branch(np.where(np.abs(diff.real) > tiny, np.sign(diff.real), 0))
        ops._record_branch(np.where(np.abs(diff.imag) > tiny, np.sign(diff.imag), 0))

    def _backward(g):
        scale = g.reshape(()) / count
        seed = (np.sign(diff.real) - 1j * np.sign(diff.imag)) * scale
        return (fft2d_array(seed).real.astype(dtype), None)

    out = np.full((1,) * pred.data.ndim, value, dtype=dtype)
    return make_result(out, (pred, target), _backward, "fft_loss")


# ---------------------------------------------------------------- optimiser

class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.99), eps=1e-8):
    """Bias-corrected Adam, updating ``params[name].data`` in place.

    ``grads`` maps parameter names to arrays; missing entries count as zero.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t if b1 > 0 else 1.0
    c2 = 1.0 - b2 ** t if b2 > 0 else 1.0
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def cosine_lr(t, total, lr0, lr_min=0.0):
    if t < 0 or t > total:
        raise ValueError(f"cosine_lr: step {t} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ----------------------------------------------------------- synthetic data

MOTIONS = ("shift", "rotate-pattern")


def _pattern(u, v, rng_params):
    waves, cell, mix = rng_params
    val = np.zeros(u.shape + (3,))
    for angle, freq, phase, amp in waves:
        s = amp * np.sin(2 * np.pi * freq * (u * np.cos(angle) + v * np.sin(angle)) + phase)
        val += s[..., None]
    checker = np.sign(np.sin(np.pi * (u + 0.5) / cell) * np.sin(np.pi * (v + 0.5) / cell))
    val = val * mix[0] + 0.35 * checker[..., None] * mix[1]
    total = sum(w[3] for w in waves)
    return np.clip(0.5 + 0.5 * val / (total + 0.35), 0.0, 1.0)


def make_synthetic_sequence(n, h, w, motion="shift", seed=0, velocity=(0.75, 0.5)):
    """Textured pattern (oriented sinusoids plus a checkerboard) under steady motion.

    ``velocity`` is in HR pixels per frame for ``shift`` and its first
    component is degrees per frame for ``rotate-pattern``.
    """
    if h % 4 or w % 4:
        raise ShapeError("make_synthetic_sequence", "H and W must be divisible by 4", "multiple of 4", (h, w))
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion {motion!r}; expected one of {MOTIONS}")
    rng = np.random.default_rng(seed)
    waves = [(rng.uniform(0, np.pi), rng.uniform(0.02, 0.09), rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.0))
             for _ in range(3)]
    cell = float(rng.uniform(6.0, 12.0))
    mix = (rng.uniform(0.4, 1.0, size=3), rng.uniform(0.4, 1.0, size=3))
    params = (waves, cell, mix)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    frames = []
    for t in range(n):
        if motion == "shift":
            u = xx - velocity[0] * t
            v = yy - velocity[1] * t
        else:
            a = np.deg2rad(velocity[0] * t)
            u = cx + (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
            v = cy - (xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
        img = _pattern(u, v, params)
        frames.append(Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None].astype(np.float32))))
    return FrameSequence(frames, source=f"synthetic:{motion}:{seed}")


# ------------------------------------------------------------------ training

def sequence_loss(outputs, targets, train_config):
    charb = fft = None
    for y, gt in zip(outputs, targets):
        c = charbonnier_loss(y, gt, train_config.charbonnier_eps)
        f = fft_loss(y, gt)
        charb = c if charb is None else ops.add(charb, c)
        fft = f if fft is None else ops.add(fft, f)
    k = 1.0 / len(outputs)
    charb, fft = ops.mul_scalar(charb, k), ops.mul_scalar(fft, k)
    return charb, fft, ops.add(charb, ops.mul_scalar(fft, train_config.fft_weight))


def make_training_set(model_config, train_config):
    """Synthetic HR sequences and their BI-degraded LR counterparts."""
    s = model_config.scale
    size = train_config.lr_size * s
    pairs = []
    for i in range(train_config.sequences):
        hr = make_synthetic_sequence(train_config.frames, size, size, MOTIONS[i % len(MOTIONS)],
                                     seed=train_config.seed + i,
                                     velocity=(0.75, 0.5) if i % 2 == 0 else (2.0, 0.0))
        pairs.append((degrade(hr, DegradationSpec("BI", s)), hr))
    return pairs


def _sample_batch(pairs, it, train_config, scale, rng):
    p = train_config.patch
    lr_frames = [[] for _ in range(train_config.frames)]
    hr_frames = [[] for _ in range(train_config.frames)]
    for b in range(train_config.batch):
        lr_seq, hr_seq = pairs[(it * train_config.batch + b) % len(pairs)]
        top = int(rng.integers(0, train_config.lr_size - p + 1))
        left = int(rng.integers(0, train_config.lr_size - p + 1))
        for t in range(train_config.frames):
            lr_frames[t].append(lr_seq.frames[t].data[:, :, top:top + p, left:left + p])
            hr_frames[t].append(hr_seq.frames[t].data[:, :, top * scale:(top + p) * scale,
                                                      left * scale:(left + p) * scale])
    lr = [Tensor(np.concatenate(f, axis=0)) for f in lr_frames]
    hr = [Tensor(np.concatenate(f, axis=0)) for f in hr_frames]
    return lr, hr


def train_loop(model_config, train_config, params=None, on_log=None):
    """Train on synthetic BI sequences; returns (params, loss_history).

    Each history entry averages one window of ``log_every`` iterations:
    (iteration, charbonnier, fft, total, lr) with iteration the window start.
    """
    if params is None:
        params = init_params(model_config, seed=train_config.seed)
    pairs = make_training_set(model_config, train_config) if train_config.iters else []
    rng = np.random.default_rng(train_config.seed)
    state = AdamState()
    history = []
    window = []
    total_iters = train_config.iters
    for name in params:
        params[name].requires_grad = True
    started = time.perf_counter()
    for it in range(total_iters):
        lr = cosine_lr(it, total_iters, train_config.lr0, train_config.lr_min)
        lr_frames, hr_frames = _sample_batch(pairs, it, train_config, model_config.scale, rng)
        params.zero_grad()
        outputs = list(stream_super_resolve(lr_frames, params, model_config))
        charb, fft, total = sequence_loss(outputs, hr_frames, train_config)
        del outputs
        value = total.item()
        if not math.isfinite(value):
            raise GradientError(f"loss became non-finite at iteration {it}")
        backward(total)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, lr, train_config.betas)
        window.append((charb.item(), fft.item(), value, lr))
        if len(window) == train_config.log_every or it == total_iters - 1:
            start = it - len(window) + 1
            means = np.mean(np.array(window), axis=0)
            entry = (start, float(means[0]), float(means[1]), float(means[2]), window[0][3])
            history.append(entry)
            window = []
            log.info("iter %d loss %.5f lr %.2e (%.1fs)", start, entry[3], entry[4],
                     time.perf_counter() - started)
            if on_log is not None:
                on_log(entry)
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return params, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "charbonnier", "fft", "total", "lr"])
        for row in history:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def y_psnr_sequence(pred_frames, gt_frames, crop_border=4):
    vals = []
    for p, g in zip(pred_frames, gt_frames):
        yp = rgb_to_y(Tensor(np.clip(p.data, 0.0, 1.0))).data
        yg = rgb_to_y(g).data
        if crop_border:
            c = crop_border
            yp, yg = yp[..., c:-c, c:-c], yg[..., c:-c, c:-c]
        vals.append(psnr(yp, yg))
    return float(np.mean(vals))


def evaluate_against_bicubic(params, model_config, lr_seq, hr_seq, crop_border=4):
    """(model Y-PSNR, bicubic x scale Y-PSNR) averaged over the sequence."""
    with no_grad():
        sr = list(stream_super_resolve(lr_seq.frames, params, model_config))
        bic = [bicubic_resize(f, model_config.scale) for f in lr_seq.frames]
    return y_psnr_sequence(sr, hr_seq.frames, crop_border), y_psnr_sequence(bic, hr_seq.frames, crop_border)
