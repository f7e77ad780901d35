"""SEG-Y ingestion, resampling, tiling inference, and map export."""

import struct

import numpy as np
import pytest

from conftest import ieee_to_ibm_word, write_segy
from seishet.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    LineNotFoundError,
)
from seishet.model import build_network, channel_softmax
from seishet.numcore import Prng
from seishet.pgm import read_pgm, write_pgm
from seishet.segy import (
    bilinear_resize,
    export_map,
    ibm_to_ieee,
    load_section_mask,
    mask_filename,
    nearest_resize,
    open_volume,
    read_raw_section,
    read_section,
    real_patches,
    tile_predict,
    write_raw_section,
)


# ---------------------------------------------------------------- IBM floats

def test_ibm_zero_word_decodes_to_zero():
    assert ibm_to_ieee(0x00000000) == 0.0


def test_ibm_known_word_positive():
    # sign 0, exponent byte 0x42 = 66 -> 16^2 = 256,
    # fraction 0x76A000 = 7774208 -> 7774208 / 2^24 = 0.46337890625,
    # 256 * 0.46337890625 = 118.625 exactly.
    assert ibm_to_ieee(0x4276A000) == 118.625


def test_ibm_known_word_negative_is_sign_flip():
    assert ibm_to_ieee(0xC276A000) == -118.625


def test_ibm_one():
    # exponent 65 -> 16^1, fraction 0x100000 / 2^24 = 1/16.
    assert ibm_to_ieee(0x41100000) == 1.0


def test_ibm_scalar_returns_python_float():
    out = ibm_to_ieee(0x4276A000)
    assert isinstance(out, float)


def test_ibm_array_form_matches_scalars():
    words = np.array([0x00000000, 0x4276A000, 0xC276A000, 0x41100000],
                     dtype=np.uint32)
    out = ibm_to_ieee(words)
    assert out.dtype == np.float64
    assert out.tolist() == [0.0, 118.625, -118.625, 1.0]


def test_ibm_round_trip_on_representable_values():
    # values with short hexadecimal fractions survive encode/decode exactly
    values = [0.0, 1.0, -1.0, 0.5, 0.0625, -118.625, 118.625, 2.5,
              1024.0, -0.00390625, 3.141592025756836]
    for v in values:
        assert ibm_to_ieee(ieee_to_ibm_word(v)) == v


# ---------------------------------------------------------------- open_volume

def _quad_traces():
    """Two inlines x two crosslines, value = il*10 + xl + k/8 (exact floats)."""
    traces = []
    for il in (10, 11):
        for xl in (5, 6):
            traces.append((il, xl, [il * 10 + xl + k * 0.125 for k in range(3)]))
    return traces


def test_open_volume_indexes_fixture(tmp_path):
    path = write_segy(tmp_path / "v.sgy", _quad_traces(), interval_us=2000)
    vol = open_volume(path)
    assert vol.n_traces == 4
    assert vol.ns == 3
    assert vol.format_code == 5
    assert vol.sample_interval_us == 2000
    assert vol.lines("inline") == [10, 11]
    assert vol.lines("crossline") == [5, 6]


def test_open_volume_rejects_short_file(tmp_path):
    path = tmp_path / "short.sgy"
    path.write_bytes(b"\x00" * 1000)
    with pytest.raises(FormatError, match="too short"):
        open_volume(path)


def test_open_volume_rejects_format_code_3(tmp_path):
    path = write_segy(tmp_path / "f3.sgy", _quad_traces(), fmt=3)
    with pytest.raises(FormatError, match="format code 3"):
        open_volume(path)


def test_open_volume_rejects_zero_sample_count(tmp_path):
    path = write_segy(tmp_path / "z.sgy", [], ns=0)
    with pytest.raises(FormatError, match="0 samples"):
        open_volume(path)


def test_open_volume_rejects_empty_body(tmp_path):
    path = write_segy(tmp_path / "empty.sgy", [], ns=4)
    with pytest.raises(FormatError, match="no traces"):
        open_volume(path)


def test_open_volume_names_truncated_trace_ordinal(tmp_path):
    # one stray byte after two complete traces -> "trace 3" is short
    path = write_segy(tmp_path / "t.sgy", _quad_traces()[:2], extra_tail=b"\x7f")
    with pytest.raises(FormatError, match="trace 3"):
        open_volume(path)


def test_open_volume_rejects_per_trace_length_mismatch(tmp_path):
    path = write_segy(tmp_path / "m.sgy", _quad_traces())
    with open(path, "r+b") as fh:
        fh.seek(3600 + 114)  # first trace header, samples-per-trace field
        fh.write(struct.pack(">H", 9))
    with pytest.raises(FormatError, match="trace 1 declares 9"):
        open_volume(path)


def test_open_volume_tolerates_zero_trace_sample_field(tmp_path):
    # a zeroed per-trace count defers to the binary header
    path = write_segy(tmp_path / "z2.sgy", _quad_traces())
    with open(path, "r+b") as fh:
        fh.seek(3600 + 114)
        fh.write(struct.pack(">H", 0))
    assert open_volume(path).n_traces == 4


def test_open_volume_validates_header_byte_positions(tmp_path):
    path = write_segy(tmp_path / "v.sgy", _quad_traces())
    with pytest.raises(ConfigError, match="inline byte 0"):
        open_volume(path, inline_byte=0)
    with pytest.raises(ConfigError, match="crossline byte 240"):
        open_volume(path, crossline_byte=240)


def test_open_volume_honours_custom_key_offsets(tmp_path):
    path = write_segy(tmp_path / "c.sgy", _quad_traces(),
                      inline_byte=9, crossline_byte=21)
    vol = open_volume(path, inline_byte=9, crossline_byte=21)
    assert vol.lines("inline") == [10, 11]
    assert vol.lines("crossline") == [5, 6]


# ---------------------------------------------------------------- read_section

def test_read_section_exact_values_and_sorting(tmp_path):
    path = write_segy(tmp_path / "v.sgy", _quad_traces())
    vol = open_volume(path)
    sec = read_section(vol, "inline", 10)
    assert sec.amplitudes.shape == (3, 2)
    assert sec.trace_keys == [5, 6]
    expected = np.array([[105.0, 106.0],
                         [105.125, 106.125],
                         [105.25, 106.25]], dtype=np.float32)
    assert np.array_equal(sec.amplitudes, expected)


def test_read_section_sorts_shuffled_trace_order(tmp_path):
    traces = _quad_traces()
    shuffled = [traces[2], traces[1], traces[3], traces[0]]
    a = write_segy(tmp_path / "a.sgy", traces)
    b = write_segy(tmp_path / "b.sgy", shuffled)
    sa = read_section(open_volume(a), "crossline", 6)
    sb = read_section(open_volume(b), "crossline", 6)
    assert sa.trace_keys == sb.trace_keys == [10, 11]
    assert np.array_equal(sa.amplitudes, sb.amplitudes)


def test_read_section_is_repeatable(tmp_path):
    vol = open_volume(write_segy(tmp_path / "v.sgy", _quad_traces()))
    first = read_section(vol, "inline", 11)
    second = read_section(vol, "inline", 11)
    assert np.array_equal(first.amplitudes, second.amplitudes)


def test_read_section_missing_line_lists_range(tmp_path):
    vol = open_volume(write_segy(tmp_path / "v.sgy", _quad_traces()))
    with pytest.raises(LineNotFoundError, match=r"inline 99.*10\.\.11"):
        read_section(vol, "inline", 99)


def test_read_section_rejects_unknown_axis(tmp_path):
    vol = open_volume(write_segy(tmp_path / "v.sgy", _quad_traces()))
    with pytest.raises(ConfigError, match="axis"):
        read_section(vol, "depth", 10)


def test_read_section_decodes_ibm_traces(tmp_path):
    traces = [(1, 7, [1.0, -118.625, 0.0625]),
              (1, 8, [0.0, 2.5, -0.5])]
    vol = open_volume(write_segy(tmp_path / "ibm.sgy", traces, fmt=1))
    sec = read_section(vol, "inline", 1)
    expected = np.array([[1.0, 0.0], [-118.625, 2.5], [0.0625, -0.5]],
                        dtype=np.float32)
    assert np.array_equal(sec.amplitudes, expected)


def test_read_section_rejects_non_finite_amplitudes(tmp_path):
    path = write_segy(tmp_path / "nan.sgy",
                      [(1, 7, [0.5, np.nan, 0.25]), (1, 8, [0.0, 1.0, 2.0])])
    vol = open_volume(path)
    with pytest.raises(FormatError, match="non-finite"):
        read_section(vol, "inline", 1)


def test_section_two_way_time_axis(tmp_path):
    vol = open_volume(write_segy(tmp_path / "v.sgy", _quad_traces(),
                                 interval_us=4000))
    sec = read_section(vol, "inline", 10)
    assert np.array_equal(sec.twt_ms, [0.0, 4.0, 8.0])


# ---------------------------------------------------------------- resampling

def test_bilinear_resize_identity():
    img = Prng(3).uniform(-1.0, 1.0, (6, 5))
    assert np.allclose(bilinear_resize(img, 6, 5), img, atol=1e-12)


def test_bilinear_resize_preserves_linear_ramp():
    y, x = np.mgrid[0:5, 0:7]
    img = 2.0 * y + 3.0 * x
    out = bilinear_resize(img, 13, 11)
    oy = np.arange(13) * (5 - 1) / (13 - 1)
    ox = np.arange(11) * (7 - 1) / (11 - 1)
    expected = 2.0 * oy[:, None] + 3.0 * ox[None, :]
    assert np.allclose(out, expected, atol=1e-10)


def test_bilinear_resize_single_row_broadcasts():
    out = bilinear_resize(np.array([[1.0, 3.0, 5.0, 7.0]]), 3, 4)
    for r in range(3):
        assert np.allclose(out[r], [1.0, 3.0, 5.0, 7.0], atol=1e-12)


def test_bilinear_resize_rejects_non_2d():
    with pytest.raises(DimensionError):
        bilinear_resize(np.zeros(5), 3, 3)


def test_nearest_resize_loop_oracle():
    mask = (np.arange(16).reshape(4, 4) % 2).astype(np.uint8)
    out = nearest_resize(mask, 7, 9)
    yi = np.rint(np.arange(7) * (4 - 1) / (7 - 1)).astype(int)
    xi = np.rint(np.arange(9) * (4 - 1) / (9 - 1)).astype(int)
    for r in range(7):
        for c in range(9):
            assert out[r, c] == mask[yi[r], xi[c]]


def test_nearest_resize_keeps_binary_values():
    mask = (Prng(9).uniform(0.0, 1.0, (20, 20)) > 0.5).astype(np.uint8)
    out = nearest_resize(mask, 44, 44)
    assert set(np.unique(out)) <= {0, 1}


def test_nearest_resize_rejects_non_2d():
    with pytest.raises(DimensionError):
        nearest_resize(np.zeros((2, 2, 2)), 3, 3)


# ---------------------------------------------------------------- real_patches

def test_real_patches_counts():
    sec = Prng(5).uniform(-1.0, 1.0, (20, 20))
    msk = np.zeros((20, 20), dtype=np.uint8)
    assert len(real_patches(sec, msk)) == 1
    sec = Prng(5).uniform(-1.0, 1.0, (30, 30))
    msk = np.zeros((30, 30), dtype=np.uint8)
    assert len(real_patches(sec, msk)) == 4


def test_real_patches_shapes_and_ranges():
    sec = Prng(6).uniform(-3.0, 3.0, (30, 30))
    msk = (Prng(7).uniform(0.0, 1.0, (30, 30)) > 0.8).astype(np.uint8)
    for sample in real_patches(sec, msk):
        assert sample.image.shape == (44, 44)
        assert sample.mask.shape == (44, 44)
        assert sample.mask.dtype == np.uint8
        assert sample.image.min() >= -1.0 and sample.image.max() <= 1.0
        assert set(np.unique(sample.mask)) <= {0, 1}


def test_real_patches_constant_window_normalizes_to_zero():
    sec = np.full((20, 20), 3.25)
    msk = np.zeros((20, 20), dtype=np.uint8)
    (sample,) = real_patches(sec, msk)
    assert np.array_equal(sample.image, np.zeros((44, 44), dtype=np.float32))


def test_real_patches_binarizes_multilevel_masks():
    sec = Prng(8).uniform(-1.0, 1.0, (20, 20))
    msk = np.zeros((20, 20), dtype=np.uint8)
    msk[4:8, 4:8] = 3
    (sample,) = real_patches(sec, msk)
    assert set(np.unique(sample.mask)) == {0, 1}


def test_real_patches_rejects_mismatched_mask():
    with pytest.raises(DimensionError, match="mask"):
        real_patches(np.zeros((20, 20)), np.zeros((19, 20)))


def test_real_patches_rejects_small_section():
    with pytest.raises(DimensionError, match="smaller"):
        real_patches(np.zeros((10, 30)), np.zeros((10, 30)))


# ---------------------------------------------------------------- tile_predict

class _ConstantLogitModel:
    """Emits fixed class logits (0, 1) for every pixel."""

    def forward(self, batch):
        out = np.zeros((batch.shape[0], 2, 44, 44), dtype=np.float32)
        out[:, 1] = 1.0
        return out


# softmax([0, 1]) class-1 probability: e / (1 + e)
_CONST_P = 0.7310585786300049


def test_tile_predict_constant_model_covers_window_footprint():
    section = Prng(11).uniform(-1.0, 1.0, (25, 25))
    out = tile_predict(_ConstantLogitModel(), section)
    assert np.allclose(out[:20, :20], _CONST_P, atol=1e-6)
    assert np.all(out[20:, :] == 0.0)
    assert np.all(out[:, 20:] == 0.0)


def test_tile_predict_non_overlapping_stride_tiles_exactly():
    section = Prng(12).uniform(-1.0, 1.0, (40, 40))
    out = tile_predict(_ConstantLogitModel(), section, src=20, stride=20)
    assert np.allclose(out, _CONST_P, atol=1e-6)


def test_tile_predict_output_in_unit_interval():
    model = build_network("se", Prng(21))
    section = Prng(13).uniform(-1.0, 1.0, (30, 30))
    out = tile_predict(model, section)
    assert out.shape == (30, 30)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_tile_predict_matches_explicit_accumulation():
    model = build_network("se", Prng(22))
    section = Prng(14).uniform(-1.0, 1.0, (30, 30))
    out = tile_predict(model, section, src=20, stride=10)
    prob_sum = np.zeros((30, 30))
    hits = np.zeros((30, 30))
    for y in (0, 10):
        for x in (0, 10):
            win = section[y:y + 20, x:x + 20]
            lo, hi = win.min(), win.max()
            win = 2.0 * (win - lo) / (hi - lo) - 1.0
            up = bilinear_resize(win, 44, 44).astype(np.float32)
            prob = channel_softmax(model.forward(up[None, None]))[0, 1]
            down = bilinear_resize(prob.astype(np.float64), 20, 20)
            prob_sum[y:y + 20, x:x + 20] += down
            hits[y:y + 20, x:x + 20] += 1.0
    expected = np.where(hits > 0, prob_sum / np.maximum(hits, 1.0), 0.0)
    assert np.allclose(out, expected, atol=1e-5)


def test_tile_predict_batch_size_does_not_change_result():
    model = build_network("se", Prng(23))
    section = Prng(15).uniform(-1.0, 1.0, (30, 30))
    one = tile_predict(model, section, batch_size=1)
    many = tile_predict(model, section, batch_size=64)
    assert np.allclose(one, many, atol=1e-6)


def test_tile_predict_rejects_small_section():
    with pytest.raises(DimensionError, match="smaller"):
        tile_predict(_ConstantLogitModel(), np.zeros((10, 10)))


# ---------------------------------------------------------------- export_map

def test_export_map_zero_payload(tmp_path):
    path = tmp_path / "zero.pgm"
    export_map(np.zeros((3, 4)), path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n")
    assert data[len(b"P5\n4 3\n255\n"):] == b"\x00" * 12


def test_export_map_unit_value_is_byte_255(tmp_path):
    path = tmp_path / "one.pgm"
    export_map(np.ones((2, 2)), path)
    assert path.read_bytes().endswith(b"\xff" * 4)


def test_export_map_pgm_round_trip_within_quantization(tmp_path):
    prob = Prng(31).uniform(0.0, 1.0, (9, 7))
    path = tmp_path / "map.pgm"
    export_map(prob, path)
    back = read_pgm(path).astype(np.float64) / 255.0
    assert np.abs(back - prob).max() <= 0.5 / 255.0 + 1e-12


def test_export_map_csv_round_trip(tmp_path):
    prob = Prng(32).uniform(0.0, 1.0, (5, 6))
    path = tmp_path / "map.csv"
    export_map(prob, path, fmt="csv")
    back = np.loadtxt(path, delimiter=",")
    assert np.allclose(back, prob, atol=1e-6)


def test_export_map_rejects_unknown_format(tmp_path):
    with pytest.raises(ConfigError, match="format"):
        export_map(np.zeros((2, 2)), tmp_path / "x.bin", fmt="bin")


def test_export_map_rejects_out_of_range_values(tmp_path):
    with pytest.raises(DimensionError, match=r"\[0, 1\]"):
        export_map(np.full((2, 2), 1.5), tmp_path / "x.pgm")


def test_export_map_rejects_non_2d(tmp_path):
    with pytest.raises(DimensionError):
        export_map(np.zeros(4), tmp_path / "x.pgm")


# ---------------------------------------------------------------- annotations

def test_mask_filename_convention():
    assert mask_filename("inline", 120) == "mask_inline120.pgm"
    assert mask_filename("crossline", 2800) == "mask_crossline2800.pgm"


def test_load_section_mask_binarizes(tmp_path):
    raw = np.zeros((6, 8), dtype=np.uint8)
    raw[2:4, 3:6] = 255
    write_pgm(tmp_path / "mask_inline120.pgm", raw)
    mask = load_section_mask(tmp_path, "inline", 120, shape=(6, 8))
    assert mask.dtype == np.uint8
    assert np.array_equal(mask, (raw > 0).astype(np.uint8))


def test_load_section_mask_checks_shape(tmp_path):
    write_pgm(tmp_path / "mask_inline5.pgm", np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(DimensionError, match="section"):
        load_section_mask(tmp_path, "inline", 5, shape=(6, 6))


def test_load_section_mask_missing_file(tmp_path):
    with pytest.raises(FormatError, match="mask_crossline9"):
        load_section_mask(tmp_path, "crossline", 9)


# ---------------------------------------------------------------- raw dumps

def test_raw_section_round_trip(tmp_path):
    arr = Prng(41).uniform(-2.0, 2.0, (7, 5)).astype(np.float32)
    path = tmp_path / "sec.f32"
    write_raw_section(arr, path)
    back = read_raw_section(path, 7, 5)
    assert np.array_equal(back, arr)


def test_raw_section_size_mismatch(tmp_path):
    path = tmp_path / "sec.f32"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(FormatError, match="expected 100"):
        read_raw_section(path, 5, 5)


def test_write_raw_section_rejects_non_2d(tmp_path):
    with pytest.raises(DimensionError):
        write_raw_section(np.zeros(9), tmp_path / "x.f32")
