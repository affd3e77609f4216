#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `floodseg.raster`."""
import struct
import unittest

import numpy as np
import pytest

from floodseg import ArgumentError, CoverageError, FormatError
from floodseg.raster import (
    S2_BANDS,
    BandId,
    ClassCode,
    ClassMask,
    MultiBandImage,
    crop_to_multiple,
    decode_image,
    decode_mask,
    default_bands,
    degrade,
    encode_image,
    encode_mask,
    encode_ppm,
    patch_grid,
    read_image,
    read_mask,
    render_mask,
    stitch,
    tile,
    write_image,
    write_mask,
)

W, L, C, I = ClassCode.WATER, ClassCode.LAND, ClassCode.CLOUD, ClassCode.INVALID


def make_image(data):
    data = np.asarray(data, dtype=np.float32)
    return MultiBandImage(default_bands(data.shape[0]), data)


class TestBands(unittest.TestCase):
    def test_sentinel2_has_13_bands(self):
        assert len(S2_BANDS) == 13
        assert [b.name for b in S2_BANDS][7:9] == ["B08", "B8A"]

    def test_parse(self):
        assert BandId.parse("B02") == S2_BANDS[1]
        assert BandId.parse("b2") == S2_BANDS[1]
        assert BandId.parse("B8A") == S2_BANDS[8]
        assert BandId.parse("G7") == BandId.generic_band(7)

    def test_parse_rejects_unknown(self):
        with pytest.raises(ArgumentError):
            BandId.parse("B13")

    def test_generic_index_non_negative(self):
        with pytest.raises(ArgumentError):
            BandId.generic_band(-1)

    def test_default_bands(self):
        assert default_bands(13) == S2_BANDS
        assert default_bands(49)[48] == BandId.generic_band(48)


class TestImageTypes(unittest.TestCase):
    def test_rejects_duplicate_bands(self):
        with pytest.raises(ArgumentError):
            MultiBandImage((S2_BANDS[0], S2_BANDS[0]), np.zeros((2, 2, 2)))

    def test_rejects_non_finite(self):
        data = np.zeros((1, 2, 2))
        data[0, 1, 1] = np.nan
        with pytest.raises(ArgumentError):
            make_image(data)

    def test_image_is_read_only(self):
        image = make_image(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            image.data[0, 0, 0] = 1

    def test_mask_rejects_codes_above_3(self):
        with pytest.raises(ArgumentError):
            ClassMask(np.array([[4]]))

    def test_mask_rejects_float_labels(self):
        with pytest.raises(ArgumentError, match="integers"):
            ClassMask(np.array([[2.7, 1.0]]))
        with pytest.raises(ArgumentError):
            ClassMask(np.zeros((2, 2), dtype=bool))

    def test_select(self):
        image = MultiBandImage(S2_BANDS, np.arange(13 * 4).reshape(13, 2, 2))
        sub = image.select([S2_BANDS[7], S2_BANDS[1]])
        assert sub.bands == (S2_BANDS[7], S2_BANDS[1])
        assert np.array_equal(sub.data[1], image.data[1])


def test_image_roundtrip_bit_exact(tmp_path):
    image = make_image([[[0.1, 0.2], [0.3, 0.4]]])
    write_image(image, tmp_path / "a.wfb")
    back = read_image(tmp_path / "a.wfb")
    assert (back.width, back.height, back.band_count) == (2, 2, 1)
    assert back.data.tobytes() == image.data.tobytes()


def test_image_file_size():
    image = MultiBandImage(S2_BANDS, np.zeros((13, 256, 256), dtype=np.float32))
    assert len(encode_image(image)) == 3_407_892


def test_image_header_layout():
    payload = encode_image(make_image(np.zeros((3, 5, 4))))
    assert struct.unpack("<4sIIII", payload[:20]) == (b"WFB1", 4, 5, 3, 0)


def test_truncated_image():
    payload = encode_image(make_image(np.ones((2, 4, 4))))
    header = struct.pack("<4sIIII", b"WFB1", 4, 4, 3, 0)
    with pytest.raises(FormatError) as err:
        decode_image(header + payload[20:])
    assert err.value.field == "payload"
    assert "truncated" in str(err.value)


@pytest.mark.parametrize(
    "header, field",
    [
        (struct.pack("<4sIIII", b"WFBX", 1, 1, 1, 0), "magic"),
        (struct.pack("<4sIIII", b"WFB1", 1, 1, 1, 7), "dtype"),
        (struct.pack("<4sIIII", b"WFB1", 0, 1, 1, 0), "width"),
        (struct.pack("<4sIIII", b"WFB1", 1, 1, 0, 0), "band_count"),
        (struct.pack("<4sIIII", b"WFB1", 1 << 16, 1 << 16, 1 << 8, 0), "band_count"),
        (b"WFB1", "header"),
    ],
)
def test_image_header_errors(header, field):
    with pytest.raises(FormatError) as err:
        decode_image(header + b"\0" * 4)
    assert err.value.field == field


def test_image_trailing_bytes():
    payload = encode_image(make_image(np.ones((1, 2, 2))))
    with pytest.raises(FormatError) as err:
        decode_image(payload + b"\0")
    assert "trailing" in str(err.value)


def test_image_roundtrip_random():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        bands = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        data = rng.normal(0, 2, size=(bands, h, w)).astype(np.float32)
        back = decode_image(encode_image(make_image(data)))
        assert back.data.tobytes() == data.tobytes()
        assert back.bands == default_bands(bands)


def test_mask_payload_vectors():
    assert encode_mask(ClassMask(np.array([[1, 2], [3, 0]])))[12:] == bytes([0x39])
    assert encode_mask(ClassMask.filled(1, 4, I))[12:] == bytes([0x00])
    assert encode_mask(ClassMask(np.full((1, 5), 2)))[12:] == bytes([0xAA, 0x02])


def test_mask_roundtrip(tmp_path):
    mask = ClassMask(np.array([[1, 2, 3], [0, 2, 2]]))
    write_mask(mask, tmp_path / "m.wfl")
    back = read_mask(tmp_path / "m.wfl")
    assert np.array_equal(back.labels, mask.labels)


def test_mask_padding_must_be_zero():
    payload = bytearray(encode_mask(ClassMask(np.full((1, 5), 2))))
    payload[-1] |= 0b0100
    with pytest.raises(FormatError) as err:
        decode_mask(bytes(payload))
    assert err.value.field == "padding"


def test_mask_bad_magic():
    payload = b"WFLX" + encode_mask(ClassMask.filled(2, 2, L))[4:]
    with pytest.raises(FormatError) as err:
        decode_mask(payload)
    assert err.value.field == "magic"


def test_mask_roundtrip_random():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 40, size=2))
        labels = rng.integers(0, 4, size=(h, w))
        back = decode_mask(encode_mask(ClassMask(labels)))
        assert np.array_equal(back.labels, labels)


# --- tiling -----------------------------------------------------------------


def test_tile_exact():
    image = make_image(np.zeros((1, 512, 512)))
    offsets = [p.offset for p in tile(image, patch_size=256, stride=256)]
    assert offsets == [(0, 0), (0, 256), (256, 0), (256, 256)]


def test_tile_shifts_edge_patches_inward():
    image = make_image(np.zeros((1, 300, 300)))
    mask = ClassMask.filled(300, 300, L)
    patches = tile(image, mask, patch_size=256, stride=256)
    assert [p.offset for p in patches] == [(0, 0), (0, 44), (44, 0), (44, 44)]
    assert all(p.image.width == p.image.height == 256 for p in patches)
    assert all(p.mask.shape == (256, 256) for p in patches)


def test_tile_single_patch():
    image = make_image(np.zeros((1, 256, 256)))
    assert [p.offset for p in tile(image, patch_size=256)] == [(0, 0)]


def test_tile_patch_larger_than_image():
    with pytest.raises(ArgumentError):
        tile(make_image(np.zeros((1, 100, 300))), patch_size=128)


def test_tile_cuts_image_and_mask_identically():
    rng = np.random.default_rng(0)
    data = rng.random((2, 20, 30))
    labels = rng.integers(0, 4, size=(20, 30))
    for patch in tile(make_image(data), ClassMask(labels), patch_size=8, stride=5):
        r, c = patch.offset
        expected = data[:, r : r + 8, c : c + 8].astype(np.float32)
        assert np.array_equal(patch.image.data, expected)
        assert np.array_equal(patch.mask.labels, labels[r : r + 8, c : c + 8])


def test_tile_coverage():
    rng = np.random.default_rng(1)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 50, size=2))
        size = int(rng.integers(1, min(h, w) + 1))
        stride = int(rng.integers(1, 60))
        grid = patch_grid(h, w, size, stride)
        covered = np.zeros((h, w), dtype=bool)
        for r, c in grid.offsets:
            assert 0 <= r <= h - size and 0 <= c <= w - size
            covered[r : r + size, c : c + size] = True
        assert covered.all()


def test_stride_must_be_positive():
    with pytest.raises(ArgumentError):
        patch_grid(10, 10, 4, 0)


# --- stitching --------------------------------------------------------------


def test_stitch_single_patch_passes_through():
    scores = np.random.default_rng(2).random((3, 16, 16)).astype(np.float32)
    assert np.array_equal(stitch([scores], [(0, 0)], (16, 16)), scores)


def test_stitch_averages_overlap():
    a = np.full((1, 1, 2), 0.2, dtype=np.float32)
    b = np.full((1, 1, 2), 0.6, dtype=np.float32)
    out = stitch([a, b], [(0, 0), (0, 1)], (1, 3))
    assert out[0, 0, 1] == pytest.approx(0.4)
    assert out[0, 0, 0] == pytest.approx(0.2)
    assert out[0, 0, 2] == pytest.approx(0.6)


def test_stitch_matches_brute_force():
    rng = np.random.default_rng(3)
    grid = patch_grid(300, 300, 256, 256)
    preds = [rng.random((1, 256, 256)).astype(np.float32) for _ in grid.offsets]
    out = stitch(preds, grid.offsets, (300, 300))
    for r, c in rng.integers(0, 300, size=(200, 2)):
        values = [
            pred[0, r - pr, c - pc]
            for pred, (pr, pc) in zip(preds, grid.offsets)
            if pr <= r < pr + 256 and pc <= c < pc + 256
        ]
        assert len(values) in (1, 2, 4)
        assert out[0, r, c] == pytest.approx(sum(values) / len(values), rel=1e-6)


def test_stitch_exact_tiling_is_concatenation():
    rng = np.random.default_rng(4)
    full = rng.random((3, 32, 48)).astype(np.float32)
    grid = patch_grid(32, 48, 16, 16)
    preds = [full[:, r : r + 16, c : c + 16] for r, c in grid.offsets]
    assert np.array_equal(stitch(preds, grid.offsets, (32, 48)), full)


def test_stitch_uncovered_pixel():
    with pytest.raises(CoverageError):
        stitch([np.zeros((1, 2, 2))], [(0, 0)], (2, 3))


# --- degradation ------------------------------------------------------------


def test_degrade_constant_block():
    image = make_image(np.full((2, 8, 8), 0.123))
    small, _ = degrade(image, factor=8)
    assert small.data.shape == (2, 1, 1)
    assert small.data[0, 0, 0] == np.float32(0.123)


def test_degrade_constant_image_is_exact():
    value = np.float32(0.7071)
    small, _ = degrade(make_image(np.full((1, 32, 24), value)), factor=8)
    assert (small.data == value).all()


def _block(counts):
    labels = np.concatenate([np.full(n, code) for code, n in counts])
    return ClassMask(labels.reshape(8, 8))


@pytest.mark.parametrize(
    "counts, expected",
    [
        ([(W, 33), (L, 31)], W),
        ([(L, 33), (W, 31)], L),
        ([(W, 32), (C, 32)], W),
        ([(C, 32), (L, 32)], C),
        ([(L, 32), (I, 32)], L),
        ([(I, 33), (W, 31)], I),
        ([(I, 30), (L, 20), (W, 14)], I),
    ],
)
def test_degrade_label_vote(counts, expected):
    image = make_image(np.zeros((1, 8, 8)))
    _, mask = degrade(image, _block(counts), factor=8)
    assert mask.labels[0, 0] == expected


def test_degrade_linearity():
    rng = np.random.default_rng(6)
    x = rng.random((3, 16, 16)).astype(np.float32)
    y = rng.random((3, 16, 16)).astype(np.float32)
    a, b = np.float32(0.5), np.float32(1.5)
    combined, _ = degrade(make_image(a * x + b * y), factor=4)
    dx, _ = degrade(make_image(x), factor=4)
    dy, _ = degrade(make_image(y), factor=4)
    assert np.abs(combined.data - (a * dx.data + b * dy.data)).max() < 1e-6


def test_degrade_requires_divisible_dims():
    with pytest.raises(ArgumentError):
        degrade(make_image(np.zeros((1, 10, 16))), factor=8)


def test_crop_to_multiple():
    image = make_image(np.zeros((1, 21, 19)))
    cropped, mask = crop_to_multiple(image, ClassMask.filled(21, 19, L), 8)
    assert (cropped.height, cropped.width) == (16, 16)
    assert mask.shape == (16, 16)


# --- rendering --------------------------------------------------------------


def test_render_single_water_pixel(tmp_path):
    render_mask(ClassMask.filled(1, 1, W), tmp_path / "w.ppm")
    payload = (tmp_path / "w.ppm").read_bytes()
    assert payload == b"P6\n1 1\n255\n" + bytes([0, 0, 255])


def test_render_palette_order():
    assert encode_ppm(ClassMask(np.array([[L, C]])))[-6:] == bytes(
        [34, 139, 34, 255, 255, 255]
    )
    pixels = encode_ppm(ClassMask(np.array([[0, 1], [2, 3]])))
    assert pixels.startswith(b"P6\n2 2\n255\n")
    assert pixels[-12:] == bytes([0, 0, 0, 34, 139, 34, 0, 0, 255, 255, 255, 255])
