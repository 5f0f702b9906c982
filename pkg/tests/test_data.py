import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from ctun import data
from ctun.data import (DegradationSpec, FrameSequence, bicubic_resize, decode_weights, degrade,
                       degrade_frame, encode_weights, gaussian_blur, gaussian_kernel1d, rgb_to_y)
from ctun.errors import SequenceError, ShapeError, WeightFileError
from ctun.model import CtunConfig, ParamStore, init_params
from ctun.tensor import Tensor

from oracles import bicubic_loops, gaussian_blur_loops, gaussian_taps


def img4(a):
    return Tensor(np.asarray(a, dtype=np.float64)[None, None])


# ---------------------------------------------------------------- bicubic

@pytest.mark.parametrize("scale", [0.25, 0.5, 1, 2, 4])
def test_bicubic_constant(scale):
    y = bicubic_resize(img4(np.full((8, 8), 0.6)), scale)
    np.testing.assert_allclose(y.data, 0.6, atol=1e-12)


def test_bicubic_scale_one_is_identity(rng):
    x = img4(rng.random((7, 9)))
    np.testing.assert_allclose(bicubic_resize(x, 1).data, x.data, atol=1e-12)


def test_bicubic_ramp_downscale_matches_oracle():
    ramp = np.add.outer(np.arange(8.0), np.arange(8.0)) / 14.0
    y = bicubic_resize(img4(ramp), 0.25).data[0, 0]
    np.testing.assert_allclose(y, bicubic_loops(ramp, 0.25), rtol=0, atol=1e-6)


@pytest.mark.parametrize("h,w", [(8, 8), (16, 12), (24, 32), (64, 64)])
@pytest.mark.parametrize("scale", [0.25, 4])
def test_bicubic_random_matches_oracle(rng, h, w, scale):
    if scale > 1 and h > 16:
        h, w = h // 4, w // 4  # keep the upscale oracle cheap
    img = rng.random((h, w))
    y = bicubic_resize(img4(img), scale).data[0, 0]
    np.testing.assert_allclose(y, bicubic_loops(img, scale), rtol=0, atol=1e-6)


# --------------------------------------------------------------- gaussian

def test_gaussian_kernel_has_13_taps_summing_to_one():
    k = gaussian_kernel1d(1.6)
    assert len(k) == 13
    assert abs(k.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(k, gaussian_taps(1.6), atol=1e-15)
    np.testing.assert_allclose(k, k[::-1], atol=0)


@given(st.floats(0.3, 4.0))
def test_gaussian_kernel_normalised(sigma):
    assert abs(gaussian_kernel1d(sigma).sum() - 1.0) < 1e-12


def test_blur_constant_unchanged():
    y = gaussian_blur(img4(np.full((9, 9), 0.42)), 1.6)
    np.testing.assert_allclose(y.data, 0.42, atol=1e-12)


def test_blur_impulse_is_outer_product():
    img = np.zeros((31, 31))
    img[15, 15] = 1.0
    y = gaussian_blur(img4(img), 1.6).data[0, 0]
    k = gaussian_kernel1d(1.6)
    expected = np.zeros((31, 31))
    expected[9:22, 9:22] = np.outer(k, k)
    np.testing.assert_allclose(y, expected, atol=1e-15)


@pytest.mark.parametrize("h,w", [(8, 8), (13, 10), (32, 32)])
def test_blur_matches_oracle(rng, h, w):
    img = rng.random((h, w))
    y = gaussian_blur(img4(img), 1.6).data[0, 0]
    np.testing.assert_allclose(y, gaussian_blur_loops(img, 1.6), rtol=0, atol=1e-6)


# ------------------------------------------------------------ degradation

def seq_of(frames):
    return FrameSequence([Tensor(f.astype(np.float32)) for f in frames])


@pytest.mark.parametrize("mode", ["BI", "BD"])
def test_degrade_constant_sequence(mode):
    seq = seq_of([np.full((1, 3, 16, 16), 0.7)] * 3)
    out = degrade(seq, DegradationSpec(mode))
    for f in out.frames:
        np.testing.assert_allclose(f.data, 0.7, atol=1e-6)


def test_degrade_shapes(rng):
    seq = seq_of([rng.random((1, 3, 64, 64)) for _ in range(8)])
    for mode in ("BI", "BD"):
        out = degrade(seq, DegradationSpec(mode, 4))
        assert len(out) == 8 and out.size == (16, 16)


def test_bd_impulse_is_decimated_gaussian():
    img = np.zeros((1, 1, 32, 32))
    img[0, 0, 16, 16] = 1.0
    y = degrade_frame(Tensor(img), DegradationSpec("BD", 4, 1.6), clamp=False).data[0, 0]
    k = gaussian_kernel1d(1.6)
    full = np.zeros((32, 32))
    full[10:23, 10:23] = np.outer(k, k)
    np.testing.assert_allclose(y, full[::4, ::4], atol=1e-15)


def test_degrade_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        degrade_frame(Tensor(np.zeros((1, 3, 10, 12))), DegradationSpec("BI", 4))


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec("XX")
    assert DegradationSpec("bd").sigma == 1.6


# ---------------------------------------------------------------- colour

@pytest.mark.parametrize("rgb,y", [((0, 0, 0), 16.0), ((1, 1, 1), 235.0), ((0.5, 0.5, 0.5), 125.5)])
def test_rgb_to_y(rgb, y):
    x = Tensor(np.array(rgb, dtype=np.float64).reshape(1, 3, 1, 1))
    assert rgb_to_y(x).item() == pytest.approx(y, abs=1e-9)


# -------------------------------------------------------------- PNG I/O

def test_png_round_trip_is_bit_identical(tmp_path, rng):
    frames = [Tensor(rng.integers(0, 256, size=(1, 3, 9, 7)).astype(np.float32) / 255.0) for _ in range(3)]
    data.save_sequence(FrameSequence(frames), tmp_path)
    back = data.load_sequence(tmp_path)
    assert len(back) == 3
    for a, b in zip(frames, back.frames):
        np.testing.assert_array_equal(data.to_uint8(a), data.to_uint8(b))
        np.testing.assert_array_equal(a.data, b.data)


def test_empty_directory(tmp_path):
    with pytest.raises(SequenceError, match="no frames"):
        data.load_sequence(tmp_path)


def test_missing_index_is_reported(tmp_path):
    for i in (0, 1, 3):
        Image.new("RGB", (4, 4)).save(tmp_path / data.frame_name(i))
    with pytest.raises(SequenceError, match="missing frame index 2"):
        data.load_sequence(tmp_path)


def test_mixed_sizes_rejected(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / data.frame_name(0))
    Image.new("RGB", (5, 4)).save(tmp_path / data.frame_name(1))
    with pytest.raises(SequenceError):
        data.load_sequence(tmp_path)


# ----------------------------------------------------------- weight file

def random_store(rng):
    store = init_params(CtunConfig(channels=4, blocks=(1, 1, 1)), seed=3)
    store["extra.scalar"] = Tensor(rng.normal(size=(1,)).astype(np.float32))
    return store


def test_weights_round_trip(tmp_path, rng):
    store = random_store(rng)
    path = tmp_path / "w.ctun"
    data.save_weights(store, path)
    back = data.load_weights(path)
    assert list(back) == list(store)
    for k in store:
        assert back[k].shape == store[k].shape
        assert back[k].data.tobytes() == store[k].data.tobytes()


def test_weight_payload_corruption_detected(rng):
    blob = bytearray(encode_weights(random_store(rng)))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(WeightFileError, match="CRC"):
        decode_weights(bytes(blob))


def test_empty_store_is_valid():
    blob = encode_weights(ParamStore())
    assert struct.unpack_from("<I", blob, 8)[0] == 0
    assert decode_weights(blob) == {}


def test_bad_magic_and_truncation(rng):
    blob = encode_weights(random_store(rng))
    with pytest.raises(WeightFileError, match="magic"):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(WeightFileError):
        decode_weights(blob[:-9])
    with pytest.raises(WeightFileError):
        decode_weights(blob[:10])


def test_unsupported_version(rng):
    blob = bytearray(encode_weights(ParamStore()))
    blob[4:8] = struct.pack("<I", 9)
    with pytest.raises(WeightFileError, match="version"):
        decode_weights(bytes(blob))
