"""Efficiency accounting: parameter count, analytic FLOPs, measured MACs,
peak live-tensor bytes and wall time."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import init_params, layer_specs, param_count, stream_super_resolve
from .tensor import Tensor, mac_counter, meter, no_grad

# FLOPs charged per element for non-conv work. Pure data movement
# (concat, split, tile, pixel shuffle) is free; 1 MAC = 2 FLOPs.
ELEMENTWISE_COST = {
    "add": 1,
    "mul": 1,
    "relu": 1,
    "sigmoid": 4,
    "tanh": 4,
    "layer_norm": 8,
    "reduce": 1,  # channel mean/max and global pooling, per input element
    "bilinear": 8,  # 4 taps, per output element
}


@dataclass
class ProfileReport:
    params: int
    flops_analytic: int
    macs_measured: int
    peak_bytes: int
    wall_ms_per_frame: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def format_text(self):
        rows = [
            ("params", f"{self.params:,}"),
            ("flops_analytic", f"{self.flops_analytic:,}"),
            ("macs_measured", f"{self.macs_measured:,}"),
            ("peak_bytes", f"{self.peak_bytes:,}"),
            ("wall_ms_per_frame", f"{self.wall_ms_per_frame:.3f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def layer_flops(spec, height, width):
    """2 * kh * kw * Cin * Cout * H' * W' for every call of one conv layer.

    Layers with ``res == 0`` run on globally pooled 1x1 maps.
    """
    if spec.kind != "conv":
        return 0
    pixels = 1 if spec.res == 0 else (spec.res * height) * (spec.res * width)
    return 2 * spec.k * spec.k * spec.cin * spec.cout * pixels * spec.calls


def conv_flops(config, height, width):
    """Conv FLOPs summed over one timestep."""
    return sum(layer_flops(spec, height, width) for spec in layer_specs(config))


def elementwise_flops(config, height, width):
    c = config.channels
    cp = c * height * width
    p = height * width
    cost = ELEMENTWISE_COST
    res_block = cost["relu"] * cp + cost["add"] * cp
    seb = (cost["relu"] + 2 * cost["reduce"] + cost["mul"] + cost["add"]) * cp + cost["sigmoid"] * p
    total = config.blocks[0] * res_block
    # ICAM: three norms, two cascade adds, three SEBs, gated fusion
    total += 3 * cost["layer_norm"] * cp + 2 * cost["add"] * cp + 3 * seb
    total += (2 * cost["sigmoid"] + 2 * cost["mul"] + cost["add"]) * cp
    total += config.blocks[1] * res_block
    # hidden updater: channel attention, spatial gate, residual, U-GRU gates and combine
    a = config.attn_channels
    total += cost["reduce"] * cp + cost["relu"] * a + cost["sigmoid"] * c + cost["mul"] * cp
    total += 2 * cost["reduce"] * cp + cost["sigmoid"] * p + cost["mul"] * cp + cost["add"] * cp
    total += (2 * cost["sigmoid"] + cost["tanh"]) * cp + 6 * cost["mul"] * cp
    total += config.blocks[2] * res_block
    hr = 3 * config.scale * config.scale * p
    total += cost["bilinear"] * hr + cost["add"] * hr
    return total


def count_flops(config, height, width, include_elementwise=True):
    """Analytic FLOPs for one full timestep at LR size ``height`` x ``width``."""
    total = conv_flops(config, height, width)
    if include_elementwise:
        total += elementwise_flops(config, height, width)
    return total


def _synthetic_frames(n, height, width, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield Tensor(rng.random((1, 3, height, width)).astype(dtype))


def measure_timestep_macs(config, params, height, width, seed=0):
    """MACs of one interior timestep (all five stages run exactly once)."""
    marks = []
    with no_grad():
        frames = _synthetic_frames(3, height, width, seed, params_dtype(params))
        for _ in stream_super_resolve(frames, params, config, on_step=lambda t: marks.append(mac_counter.macs)):
            pass
    return marks[1] - marks[0]


def params_dtype(params):
    return next(iter(params.values())).dtype


def profile_inference(config, params=None, n=8, height=32, width=32, seed=0):
    """Run unidirectional inference on ``n`` random frames, streaming in and out.

    ``peak_bytes`` is the peak of tensor payload bytes allocated during the
    run above what was live beforehand (weights excluded).
    """
    if params is None:
        params = init_params(config, seed=seed)
    dtype = params_dtype(params)
    marks = []
    baseline = meter.live_bytes
    meter.reset_peak()
    start = time.perf_counter()
    with no_grad():
        frames = _synthetic_frames(n, height, width, seed, dtype)
        for y in stream_super_resolve(frames, params, config,
                                      on_step=lambda t: marks.append(mac_counter.macs)):
            del y
    elapsed = time.perf_counter() - start
    peak = meter.peak_bytes - baseline
    if n >= 3:
        macs = marks[1] - marks[0]
    else:
        macs = measure_timestep_macs(config, params, height, width, seed)
    return ProfileReport(
        params=param_count(config),
        flops_analytic=count_flops(config, height, width),
        macs_measured=int(macs),
        peak_bytes=int(peak),
        wall_ms_per_frame=1000.0 * elapsed / n,
    )
