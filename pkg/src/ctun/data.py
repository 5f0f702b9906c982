"""Frame sequences, degradation models, colour conversion and file formats."""
from __future__ import annotations

import math
import os
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .errors import SequenceError, ShapeError, WeightFileError
from .model import ParamStore
from .tensor import Tensor

FRAME_PATTERN = re.compile(r"^frame_(\d{6})\.png$")
BICUBIC_A = -0.5
BD_SIGMA = 1.6


@dataclass
class FrameSequence:
    frames: list
    fps: float | None = None
    source: str = ""

    def __post_init__(self):
        if self.frames:
            size = self.frames[0].shape
            for i, f in enumerate(self.frames):
                if f.shape != size:
                    raise SequenceError(f"frame {i} has shape {f.shape}, expected {size}")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self):
        """(H, W) of the frames."""
        return tuple(self.frames[0].shape[2:])


@dataclass
class DegradationSpec:
    mode: str = "BI"
    scale: int = 4
    sigma: float = BD_SIGMA

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in ("BI", "BD"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if self.scale < 2:
            raise ValueError("degradation scale must be >= 2")
        if self.mode == "BD" and self.sigma <= 0:
            raise ValueError("BD degradation needs sigma > 0")


# ------------------------------------------------------------------ bicubic

def cubic_kernel(x, a=BICUBIC_A):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def bicubic_matrix(n_in, n_out, scale, antialias=True):
    """(n_out, n_in) resampling operator with half-pixel centres and edge clamping.

    When shrinking with ``antialias`` the kernel is stretched by 1/scale.
    """
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    width = 4.0 * stretch
    a = np.zeros((n_out, n_in))
    for d in range(n_out):
        centre = (d + 0.5) / scale - 0.5
        lo = int(math.floor(centre - width / 2))
        hi = int(math.ceil(centre + width / 2))
        idx = np.arange(lo, hi + 1)
        wts = cubic_kernel((centre - idx) / stretch) / stretch
        wts /= wts.sum()
        np.add.at(a, (d, np.clip(idx, 0, n_in - 1)), wts)
    return a


def bicubic_resize(x, scale, antialias=True):
    h, w = x.shape[2:]
    ho, wo = ops.output_length(h, scale), ops.output_length(w, scale)
    return ops.separable_resize(x, bicubic_matrix(h, ho, scale, antialias),
                                bicubic_matrix(w, wo, scale, antialias), op="bicubic_resize")


# ----------------------------------------------------------------- gaussian

def gaussian_radius(sigma):
    return int(4.0 * sigma + 0.5)


def gaussian_kernel1d(sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = gaussian_radius(sigma)
    u = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (u / sigma) ** 2)
    return k / k.sum()


def reflect_index(i, n):
    """Half-sample symmetric reflection (edge sample repeated)."""
    period = 2 * n
    i = i % period
    return np.where(i < n, i, period - 1 - i)


def blur_matrix(n, sigma):
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    a = np.zeros((n, n))
    for d in range(n):
        np.add.at(a, (d, reflect_index(np.arange(d - r, d + r + 1), n)), k)
    return a


def gaussian_blur(x, sigma):
    h, w = x.shape[2:]
    return ops.separable_resize(x, blur_matrix(h, sigma), blur_matrix(w, sigma), op="gaussian_blur")


# -------------------------------------------------------------- degradation

def degrade_frame(x, spec, clamp=True):
    h, w = x.shape[2:]
    s = spec.scale
    if h % s or w % s:
        raise ShapeError("degrade", "frame size not divisible by scale", f"multiple of {s}", (h, w))
    if spec.mode == "BI":
        y = bicubic_resize(x, 1.0 / s, antialias=True).data
    else:
        y = gaussian_blur(x, spec.sigma).data[:, :, ::s, ::s]
    if clamp:
        y = np.clip(y, 0.0, 1.0)
    return Tensor(np.ascontiguousarray(y))


def degrade(seq, spec):
    return FrameSequence([degrade_frame(f, spec) for f in seq.frames], fps=seq.fps, source=seq.source)


# ---------------------------------------------------------------- colour

def rgb_to_y(x):
    """BT.601 limited-range luma in 0-255 units from RGB in [0, 1]."""
    if x.shape[1] != 3:
        raise ShapeError("rgb_to_y", "expected three channels", 3, x.shape[1])
    d = x.data
    y = 65.481 * d[:, 0:1] + 128.553 * d[:, 1:2] + 24.966 * d[:, 2:3] + 16.0
    return Tensor(y.astype(x.dtype, copy=False))


# --------------------------------------------------------------- PNG frames

def frame_name(i):
    return f"frame_{i:06d}.png"


def to_uint8(x):
    """(1,3,H,W) tensor in [0,1] -> (H,W,3) uint8."""
    return np.round(np.clip(x.data[0], 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(img):
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))


def load_sequence(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"{directory} is not a directory")
    indexed = {}
    for name in os.listdir(directory):
        m = FRAME_PATTERN.match(name)
        if m:
            indexed[int(m.group(1))] = directory / name
    if not indexed:
        raise SequenceError(f"no frames found in {directory}")
    for i in range(max(indexed) + 1):
        if i not in indexed:
            raise SequenceError(f"missing frame index {i} in {directory}")
    frames = []
    for i in range(len(indexed)):
        with Image.open(indexed[i]) as img:
            frames.append(from_uint8(img.convert("RGB")))
    return FrameSequence(frames, source=str(directory))


def save_frame(x, path):
    Image.fromarray(to_uint8(x), mode="RGB").save(path)


def save_sequence(seq, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        save_frame(f, directory / frame_name(i))


# -------------------------------------------------------------- weight file

WEIGHT_MAGIC = b"CTUN"
WEIGHT_VERSION = 1


def encode_weights(store):
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        shape = t.shape
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(blob):
    if len(blob) < 16:
        raise WeightFileError("weight file truncated")
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"bad magic {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    if zlib.crc32(body) != crc:
        raise WeightFileError("CRC mismatch; weight file is corrupt or truncated")
    store = ParamStore()
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(shape))
            if pos + 4 * n > len(body):
                raise WeightFileError(f"weight file truncated inside tensor {name}")
            data = np.frombuffer(body, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
            if name in store:
                raise WeightFileError(f"duplicate tensor name {name}")
            store[name] = Tensor(data)
    except struct.error as exc:
        raise WeightFileError("weight file truncated") from exc
    if pos != len(body):
        raise WeightFileError("trailing bytes after the last tensor")
    return store


def save_weights(store, path):
    Path(path).write_bytes(encode_weights(store))


def load_weights(path):
    return decode_weights(Path(path).read_bytes())
