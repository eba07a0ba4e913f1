import gzip
import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consensus_seg.errors import (
    IndexOutOfRange,
    InvalidVolume,
    MalformedHeader,
    TruncatedData,
    UnsupportedDatatype,
)
from consensus_seg.volgrid import (
    ValueKind,
    Volume,
    binary_mask,
    extract_slice,
    parse_nifti_header,
    read_nifti,
    read_raw,
    write_nifti,
    write_raw,
)


def _header_bytes(byteorder="<", sizeof=348, magic=b"n+1\0", datatype=16, bitpix=32,
                  dims=(2, 2, 2), slope=1.0, inter=0.0, vox_offset=352.0, dim0=3):
    """Hand-packed NIfTI-1 header, independent of the module's field table."""
    buf = bytearray(348)
    struct.pack_into(byteorder + "i", buf, 0, sizeof)
    struct.pack_into(byteorder + "8h", buf, 40, dim0, *dims, 1, 1, 1, 1)
    struct.pack_into(byteorder + "h", buf, 70, datatype)
    struct.pack_into(byteorder + "h", buf, 72, bitpix)
    struct.pack_into(byteorder + "8f", buf, 76, 1.0, 1.5, 2.0, 2.5, 0, 0, 0, 0)
    struct.pack_into(byteorder + "f", buf, 108, vox_offset)
    struct.pack_into(byteorder + "f", buf, 112, slope)
    struct.pack_into(byteorder + "f", buf, 116, inter)
    buf[344:348] = magic
    return bytes(buf) + b"\0" * 4


def test_little_endian_header():
    hdr = parse_nifti_header(_header_bytes("<"))
    assert hdr.endianness == "little"
    assert hdr.sizeof_hdr == 348


def test_big_endian_header_detected_from_byte_swapped_size():
    raw = _header_bytes(">")
    assert struct.unpack("<i", raw[:4])[0] == 0x5C010000 == 1543569408
    hdr = parse_nifti_header(raw)
    assert hdr.endianness == "big"
    assert hdr.dim[:4] == (3, 2, 2, 2)


def test_big_endian_payload_values():
    data = np.arange(8, dtype=">f4")
    vol = read_nifti(_header_bytes(">") + data.tobytes())
    assert vol.flat().tolist() == list(range(8))
    assert vol.spacing == (1.5, 2.0, 2.5)


def test_scale_slope_and_intercept_applied():
    data = np.full(8, 3.0, dtype="<f4")
    vol = read_nifti(_header_bytes(slope=2.0, inter=1.0) + data.tobytes())
    assert (vol.flat() == 7.0).all()


@pytest.mark.parametrize("sizeof", [0, 347, 349, 1543503872, 1543569409, -1])
def test_bad_sizeof_hdr_rejected(sizeof):
    with pytest.raises(MalformedHeader):
        parse_nifti_header(_header_bytes(sizeof=sizeof))


def test_bad_magic_rejected():
    with pytest.raises(MalformedHeader):
        read_nifti(_header_bytes(magic=b"n+2\0") + bytes(32))


@pytest.mark.parametrize("code,bitpix", [(8, 32), (64, 64), (128, 24), (512, 16)])
def test_unsupported_datatypes(code, bitpix):
    with pytest.raises(UnsupportedDatatype):
        read_nifti(_header_bytes(datatype=code, bitpix=bitpix) + bytes(64))


def test_truncated_payload():
    with pytest.raises(TruncatedData):
        read_nifti(_header_bytes() + bytes(31))
    with pytest.raises(TruncatedData):
        parse_nifti_header(bytes(100))


def test_four_d_rejected():
    with pytest.raises(MalformedHeader):
        read_nifti(_header_bytes(dim0=4) + bytes(32))


def test_int16_widened():
    data = np.array([-5, 0, 7, 32767, -32768, 1, 2, 3], dtype="<i2")
    vol = read_nifti(_header_bytes(datatype=4, bitpix=16) + data.tobytes())
    assert vol.data.dtype == np.float64
    assert vol.flat().tolist() == data.tolist()


def test_binary_header_fields():
    mask = binary_mask(np.ones((2, 3, 4)))
    hdr = parse_nifti_header(write_nifti(mask))
    assert hdr.datatype == 2 and hdr.bitpix == 8
    assert hdr.vox_offset == 352 and hdr.scl_slope == 1 and hdr.scl_inter == 0


def test_float_payload_length():
    vol = Volume(np.zeros((3, 4, 5)))
    assert len(write_nifti(vol)) == 352 + 3 * 4 * 5 * 4


def test_roundtrip_keeps_kind():
    for kind, data in ((ValueKind.BINARY, np.eye(4)[:, :, None].repeat(2, 2)),
                       (ValueKind.PROBABILITY, np.full((2, 2, 2), 0.25)),
                       (ValueKind.INTENSITY, np.arange(8.0).reshape(2, 2, 2))):
        vol = Volume(data, (1.0, 0.5, 2.0), kind)
        assert read_nifti(write_nifti(vol)) == vol


def test_written_file_readable_by_nibabel():
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(3)
    data = rng.random((5, 6, 7)).astype(np.float32).astype(np.float64)
    vol = Volume(data, (0.5, 1.0, 2.0))
    img = nib.Nifti1Image.from_bytes(write_nifti(vol))
    np.testing.assert_array_equal(np.asarray(img.dataobj), data)
    assert img.header.get_zooms() == (0.5, 1.0, 2.0)


def test_reads_nibabel_output():
    nib = pytest.importorskip("nibabel")
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    img = nib.Nifti1Image(data, np.diag([1.0, 2.0, 3.0, 1.0]))
    vol = read_nifti(img.to_bytes())
    np.testing.assert_array_equal(vol.data, data)
    assert vol.spacing == (1.0, 2.0, 3.0)


def test_gzip_payload_after_decompression():
    vol = Volume(np.arange(8.0).reshape(2, 2, 2))
    packed = gzip.compress(write_nifti(vol))
    assert read_nifti(gzip.decompress(packed)) == vol


def test_volume_invariants():
    with pytest.raises(InvalidVolume):
        Volume(np.zeros((2, 2)))
    with pytest.raises(InvalidVolume):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(InvalidVolume):
        Volume(np.full((2, 2, 2), 2), kind=ValueKind.BINARY)
    with pytest.raises(InvalidVolume):
        Volume(np.full((2, 2, 2), 1.5), kind=ValueKind.PROBABILITY)


# --- slices -----------------------------------------------------------------

def test_extract_slice_layout():
    vol = Volume.from_flat((2, 2, 2), np.arange(8))
    assert extract_slice(vol, "z", 0).pixels.tolist() == [[0, 1], [2, 3]]
    assert extract_slice(vol, "z", 1).pixels.tolist() == [[4, 5], [6, 7]]


def test_extract_slice_bounds():
    vol = Volume(np.zeros((3, 4, 5)))
    with pytest.raises(IndexOutOfRange):
        extract_slice(vol, "x", 3)
    with pytest.raises(IndexOutOfRange):
        extract_slice(vol, "z", -1)


def test_extract_slice_spacing():
    vol = Volume(np.zeros((3, 4, 5)), (1.0, 2.0, 3.0))
    assert extract_slice(vol, "z", 0).spacing == (2.0, 1.0)
    assert extract_slice(vol, "x", 0).spacing == (3.0, 2.0)


@pytest.mark.parametrize("axis", ["x", "y", "z"])
def test_restack_slices(axis):
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((3, 4, 5)))
    ax = "xyz".index(axis)
    planes = [extract_slice(vol, axis, k).pixels.T for k in range(vol.dims[ax])]
    np.testing.assert_array_equal(np.stack(planes, axis=ax), vol.data)


# --- raw --------------------------------------------------------------------

def test_raw_layout():
    vol = Volume.from_flat((2, 3, 1), np.arange(6.0))
    buf = write_raw(vol)
    assert buf[:4] == b"CSG0"
    assert struct.unpack("<3I", buf[4:16]) == (2, 3, 1)
    assert np.frombuffer(buf[16:], "<f4").tolist() == list(range(6))
    assert read_raw(buf) == vol


def test_raw_rejects_garbage():
    with pytest.raises(MalformedHeader):
        read_raw(b"XXXX" + bytes(12))
    with pytest.raises(TruncatedData):
        read_raw(b"CSG0" + struct.pack("<3I", 2, 2, 2) + bytes(4))


float32s = st.floats(width=32, allow_nan=False, allow_infinity=False)
spacings = st.tuples(*[st.floats(0.125, 10, width=32)] * 3)
dims_st = st.tuples(*[st.integers(1, 5)] * 3)


@settings(max_examples=60, deadline=None)
@given(dims=dims_st, spacing=spacings, data=st.data())
def test_roundtrip_property_float(dims, spacing, data):
    n = int(np.prod(dims))
    values = data.draw(st.lists(float32s, min_size=n, max_size=n))
    vol = Volume.from_flat(dims, np.array(values, dtype=np.float32), spacing)
    assert read_nifti(write_nifti(vol)) == vol


@settings(max_examples=40, deadline=None)
@given(dims=dims_st, spacing=spacings, data=st.data())
def test_roundtrip_property_binary(dims, spacing, data):
    n = int(np.prod(dims))
    bits = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    vol = Volume.from_flat(dims, np.array(bits), spacing, ValueKind.BINARY)
    assert read_nifti(write_nifti(vol)) == vol


def test_header_stream_is_plain_bytes():
    # write_nifti output is usable as a file body as-is
    vol = Volume(np.ones((1, 1, 1)))
    assert read_nifti(io.BytesIO(write_nifti(vol)).read()) == vol
