"""CTUN network: implicit cascaded alignment, unidirectional propagation with a
hidden updater, and pixel-shuffle reconstruction.

The network is written functionally: every component takes a
:class:`ParamStore` and reads the weights it needs by name. The layer table
returned by :func:`layer_specs` is the single source for parameter names,
shapes and initialisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import ops
from .errors import SequenceError, ShapeError
from .tensor import Tensor, no_grad

UGRU_VARIANTS = ("split", "shared")
BOUNDARY_POLICIES = ("replicate",)

LRELU_SLOPE = 0.1
LN_EPS = 1e-5
GATE_KERNEL = 7


@dataclass
class CtunConfig:
    channels: int = 64
    blocks: tuple = (3, 5, 3)
    scale: int = 4
    ugru_variant: str = "split"
    boundary_policy: str = "replicate"

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if len(self.blocks) != 3 or min(self.blocks) < 1:
            raise ValueError("blocks must be three counts, each >= 1")
        if self.scale not in (2, 4):
            raise ValueError("scale must be 2 or 4")
        if self.ugru_variant not in UGRU_VARIANTS:
            raise ValueError(f"unknown ugru_variant {self.ugru_variant!r}; expected one of {UGRU_VARIANTS}")
        if self.boundary_policy not in BOUNDARY_POLICIES:
            raise ValueError(f"unknown boundary_policy {self.boundary_policy!r}")

    @property
    def upsample_stages(self):
        return int(round(math.log2(self.scale)))

    @property
    def attn_channels(self):
        return max(1, self.channels // 4)


# Desk-scale configuration used for training and acceptance runs.
DESK_CONFIG = dict(channels=16, blocks=(1, 2, 1))


@dataclass(frozen=True)
class LayerSpec:
    """One parameterised layer.

    ``res`` is the output resolution relative to the LR frame (1, 2 or 4) and
    ``calls`` how many times the layer runs per timestep.
    """

    name: str
    kind: str  # "conv" or "norm"
    cin: int
    cout: int
    k: int = 1
    res: int = 1
    calls: int = 1

    @property
    def params(self):
        if self.kind == "norm":
            return 2 * self.cout
        return self.cout * self.cin * self.k * self.k + self.cout

    def shapes(self):
        if self.kind == "norm":
            return {f"{self.name}.gamma": (self.cout,), f"{self.name}.beta": (self.cout,)}
        return {f"{self.name}.weight": (self.cout, self.cin, self.k, self.k),
                f"{self.name}.bias": (self.cout,)}


def _res_block_specs(prefix, c, n):
    out = []
    for i in range(n):
        out.append(LayerSpec(f"{prefix}.res{i}.conv1", "conv", c, c, 3))
        out.append(LayerSpec(f"{prefix}.res{i}.conv2", "conv", c, c, 3))
    return out


def _spatial_gate_spec(name):
    return LayerSpec(name, "conv", 2, 1, GATE_KERNEL)


def layer_specs(config):
    c = config.channels
    n_ext, n_prop, n_rec = config.blocks
    specs = [LayerSpec("extract.conv_in", "conv", 3, c, 3)]
    specs += _res_block_specs("extract", c, n_ext)
    for slot in ("prev", "cur", "next"):
        specs.append(LayerSpec(f"icam.ln_{slot}", "norm", c, c))
    for slot in ("prev", "cur", "next"):
        specs += [
            LayerSpec(f"icam.seb_{slot}.conv1", "conv", c, c, 3),
            LayerSpec(f"icam.seb_{slot}.conv2", "conv", c, c, 3),
            _spatial_gate_spec(f"icam.seb_{slot}.gate"),
        ]
    specs.append(LayerSpec("prop.conv_in", "conv", 3 * c, c, 3))
    specs += _res_block_specs("prop", c, n_prop)
    a = config.attn_channels
    specs += [
        LayerSpec("hu.fuse", "conv", 3 * c, c, 1),
        LayerSpec("hu.enc.ca_down", "conv", c, a, 1, res=0),
        LayerSpec("hu.enc.ca_up", "conv", a, c, 1, res=0),
        _spatial_gate_spec("hu.enc.gate"),
    ]
    if config.ugru_variant == "split":
        specs.append(LayerSpec("hu.gru.expand", "conv", c, 3 * c, 1))
    specs += [LayerSpec(f"hu.gru.conv_{g}", "conv", c, c, 3) for g in ("z", "w", "q")]
    specs.append(LayerSpec("recon.conv_in", "conv", 3 * c, c, 3))
    specs += _res_block_specs("recon", c, n_rec)
    for s in range(config.upsample_stages):
        specs.append(LayerSpec(f"recon.up{s}", "conv", c, 4 * c, 3, res=2 ** s))
    specs.append(LayerSpec("recon.conv_out", "conv", c, 3, 3, res=config.scale))
    return specs


class ParamStore(dict):
    """Insertion-ordered mapping of parameter name to :class:`Tensor`."""

    def numel(self):
        return sum(t.data.size for t in self.values())

    def astype(self, dtype):
        return ParamStore((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                          for k, v in self.items())

    def requires_grad_(self, flag=True):
        for t in self.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def check_against(self, config):
        """Raise ShapeError naming the first tensor that does not match ``config``."""
        expected = {}
        for spec in layer_specs(config):
            expected.update(spec.shapes())
        for name, shape in expected.items():
            if name not in self:
                raise ShapeError("weights", f"missing tensor {name}", shape, None)
            if tuple(self[name].shape) != shape:
                raise ShapeError("weights", f"tensor {name} has the wrong shape", shape, self[name].shape)
        for name in self:
            if name not in expected:
                raise ShapeError("weights", f"unexpected tensor {name}", None, self[name].shape)


def init_params(config, seed=0, dtype=np.float32):
    """Fan-in scaled uniform conv weights, zero biases, unit LayerNorm gain."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in layer_specs(config):
        if spec.kind == "norm":
            store[f"{spec.name}.gamma"] = Tensor(np.ones(spec.cout, dtype=dtype))
            store[f"{spec.name}.beta"] = Tensor(np.zeros(spec.cout, dtype=dtype))
            continue
        bound = 1.0 / math.sqrt(spec.cin * spec.k * spec.k)
        w = rng.uniform(-bound, bound, size=(spec.cout, spec.cin, spec.k, spec.k))
        store[f"{spec.name}.weight"] = Tensor(w.astype(dtype))
        store[f"{spec.name}.bias"] = Tensor(np.zeros(spec.cout, dtype=dtype))
    return store


def zero_params(config, dtype=np.float32):
    store = ParamStore()
    for spec in layer_specs(config):
        for name, shape in spec.shapes().items():
            store[name] = Tensor(np.zeros(shape, dtype=dtype))
    return store


def param_count(config):
    return sum(spec.params for spec in layer_specs(config))


def describe(config, height=None, width=None):
    """Plain-text layer table: name, weight shape, params, FLOPs per LR pixel."""
    rows = [("layer", "shape", "params", "flops/px")]
    for spec in layer_specs(config):
        if spec.kind == "norm":
            shape = f"({spec.cout},)x2"
            flops = 0
        else:
            shape = f"({spec.cout},{spec.cin},{spec.k},{spec.k})"
            flops = 2 * spec.k * spec.k * spec.cin * spec.cout * spec.res * spec.res
        rows.append((spec.name, shape, str(spec.params), str(flops) if spec.res else "-"))
    rows.append(("total", "", str(param_count(config)), ""))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) if i < 2 else cell.rjust(widths[i])
                       for i, cell in enumerate(row)) for row in rows]
    return "\n".join(lines)


# -------------------------------------------------------------- components

def _conv(x, params, name, pad=None):
    w = params[f"{name}.weight"]
    k = w.shape[2]
    return ops.conv2d(x, w, params[f"{name}.bias"], pad=k // 2 if pad is None else pad)


def _check_channels(op, x, c):
    if x.shape[1] != c:
        raise ShapeError(op, "channel mismatch", c, x.shape[1])


def residual_block(x, params, prefix):
    """x + conv(relu(conv(x)))."""
    y = ops.relu(_conv(x, params, f"{prefix}.conv1"))
    return ops.add(x, _conv(y, params, f"{prefix}.conv2"))


def spatial_gate(x, params, name):
    """Sigmoid map from a conv over channel-wise mean and max, one channel."""
    pooled = ops.concat_channels([ops.channel_mean(x), ops.channel_max(x)])
    return ops.sigmoid(_conv(pooled, params, name))


def seb_forward(x, params, prefix):
    """Spatial enhancement block: residual conv pair modulated by a spatial gate."""
    y0 = ops.leaky_relu(_conv(x, params, f"{prefix}.conv1"), LRELU_SLOPE)
    y1 = _conv(y0, params, f"{prefix}.conv2")
    g = spatial_gate(y1, params, f"{prefix}.gate")
    return ops.add(x, ops.mul(y1, ops.tile_channels(g, x.shape[1])))


def extract_features(x, params, config):
    _check_channels("extract_features", x, 3)
    f = _conv(x, params, "extract.conv_in")
    for i in range(config.blocks[0]):
        f = residual_block(f, params, f"extract.res{i}")
    return f


def icam_cascade(f_prev, f_cur, f_next, params, config=None):
    """Normalise each neighbour, then run SEBs in order t-1 -> t -> t+1,
    each seeing the sum of its own input and the previous SEB's output."""
    if not (f_prev.shape == f_cur.shape == f_next.shape):
        raise ShapeError("icam_cascade", "neighbour features differ in shape",
                         f_cur.shape, (f_prev.shape, f_next.shape))
    outs = []
    carry = None
    for slot, f in (("prev", f_prev), ("cur", f_cur), ("next", f_next)):
        ln = ops.layer_norm(f, params[f"icam.ln_{slot}.gamma"], params[f"icam.ln_{slot}.beta"], LN_EPS)
        inp = ln if carry is None else ops.add(ln, carry)
        carry = seb_forward(inp, params, f"icam.seb_{slot}")
        outs.append(carry)
    return tuple(outs)


def gate_fuse(a_prev, a_cur, a_next):
    """sigmoid(a_prev) * a_cur + sigmoid(a_next) * a_cur.

    ``a_cur`` is the cascade's current-step output, not the raw feature.
    """
    return ops.add(ops.mul(ops.sigmoid(a_prev), a_cur), ops.mul(ops.sigmoid(a_next), a_cur))


def propagate_forward(f, f_aligned, prev_state, params, config, t=None):
    """Hidden features from concat(f_t, f'_t, previous state).

    At ``t == 0`` the previous state must be the zero tensor.
    """
    if t == 0 and np.any(prev_state.data):
        raise SequenceError("propagate_forward: the state entering t=0 must be all zeros")
    h = _conv(ops.concat_channels([f, f_aligned, prev_state]), params, "prop.conv_in")
    for i in range(config.blocks[1]):
        h = residual_block(h, params, f"prop.res{i}")
    return h


def channel_attention(x, params, prefix):
    """Per-channel sigmoid scales from globally pooled features, shape (N,C,1,1)."""
    s = ops.global_avg_pool(x)
    s = ops.relu(_conv(s, params, f"{prefix}.ca_down"))
    return ops.sigmoid(_conv(s, params, f"{prefix}.ca_up"))


def encode_hidden(f_next, h, f_aligned, params, config=None):
    m = _conv(ops.concat_channels([f_next, h, f_aligned]), params, "hu.fuse")
    n, c, hh, ww = m.shape
    scaled = ops.mul(m, ops.expand_spatial(channel_attention(m, params, "hu.enc"), hh, ww))
    g = spatial_gate(scaled, params, "hu.enc.gate")
    return ops.add(m, ops.mul(scaled, ops.tile_channels(g, c)))


def gru_combine(z, w, q, h):
    """z * h * (1 - w) + q * w."""
    one_minus_w = ops.add_scalar(ops.neg(w), 1.0)
    return ops.add(ops.mul(ops.mul(z, h), one_minus_w), ops.mul(q, w))


def ugru_update(m, h, params, variant="split"):
    if variant == "split":
        c = m.shape[1]
        m_past, m_cur, m_fut = ops.split_channels(_conv(m, params, "hu.gru.expand"), [c, c, c])
    elif variant == "shared":
        m_past = m_cur = m_fut = m
    else:
        raise ValueError(f"unknown ugru variant {variant!r}")
    z = ops.sigmoid(_conv(m_past, params, "hu.gru.conv_z"))
    w = ops.sigmoid(_conv(m_fut, params, "hu.gru.conv_w"))
    q = ops.tanh(_conv(m_cur, params, "hu.gru.conv_q"))
    return gru_combine(z, w, q, h)


def reconstruct(f, f_aligned, h, x, params, config):
    r = _conv(ops.concat_channels([f, f_aligned, h]), params, "recon.conv_in")
    for i in range(config.blocks[2]):
        r = residual_block(r, params, f"recon.res{i}")
    for s in range(config.upsample_stages):
        r = ops.pixel_shuffle(_conv(r, params, f"recon.up{s}"), 2)
    r = _conv(r, params, "recon.conv_out")
    return ops.add(r, ops.bilinear_resize(x, config.scale))


# ---------------------------------------------------------- sequence driver

@dataclass
class StepTrace:
    """Records which feature indices each stage read, for boundary audits."""

    events: list = field(default_factory=list)

    def read(self, t, stage, index):
        self.events.append((t, stage, index))


def stream_super_resolve(frames: Iterable[Tensor], params, config, trace=None,
                         on_step=None) -> Iterator[Tensor]:
    """Yield one HR frame per LR frame, consuming the input lazily.

    Only the previous updated hidden state and a three-frame feature window
    are kept alive, so memory does not grow with sequence length. Features
    are extracted one step ahead; ``on_step(t)`` runs after frame t's output
    is produced.
    """
    it = iter(frames)
    try:
        x_cur = next(it)
    except StopIteration:
        raise SequenceError("empty frame sequence") from None
    size = x_cur.shape
    f_cur = extract_features(x_cur, params, config)
    f_prev = f_cur  # replicate at the leading edge
    state = Tensor(np.zeros((size[0], config.channels) + size[2:], dtype=x_cur.dtype))
    t = 0
    while True:
        x_next = next(it, None)
        if x_next is not None:
            if x_next.shape != size:
                raise SequenceError(f"frame {t + 1} has shape {x_next.shape}, expected {size}")
            f_next = extract_features(x_next, params, config)
            next_index = t + 1
        else:
            f_next = f_cur  # replicate at the trailing edge
            next_index = t
        if trace is not None:
            trace.read(t, "icam", (max(t - 1, 0), t, next_index))
        a_prev, a_cur, a_next = icam_cascade(f_prev, f_cur, f_next, params, config)
        f_aligned = gate_fuse(a_prev, a_cur, a_next)
        del a_prev, a_next
        h = propagate_forward(f_cur, f_aligned, state, params, config, t=t)
        if x_next is not None:
            if trace is not None:
                trace.read(t, "hu", t + 1)
            m = encode_hidden(f_next, h, f_aligned, params, config)
            state = ugru_update(m, h, params, config.ugru_variant)
            del m
        else:
            state = None
        y = reconstruct(f_cur, f_aligned, h, x_cur, params, config)
        del h, f_aligned, a_cur
        yield y
        del y
        if on_step is not None:
            on_step(t)
        if x_next is None:
            return
        f_prev, f_cur, x_cur = f_cur, f_next, x_next
        del f_next
        t += 1


def super_resolve_frames(frames, params, config, trace=None):
    return list(stream_super_resolve(frames, params, config, trace=trace))


def super_resolve_sequence(seq, params, config):
    """Inference over a :class:`~ctun.data.FrameSequence`; returns HR frames."""
    from .data import FrameSequence

    if not seq.frames:
        raise SequenceError("empty frame sequence")
    with no_grad():
        out = [Tensor(np.clip(y.data, 0.0, 1.0)) for y in stream_super_resolve(seq.frames, params, config)]
    return FrameSequence(out, fps=seq.fps, source=seq.source)
