"""Volume data model, NIfTI-1 single-file codec and the raw interchange format.

Volumes are held as numpy arrays indexed ``[x, y, z]``.  The on-disk order of
both NIfTI-1 and the raw format is x-fastest, which is Fortran order for such
an array, so ``data.ravel(order="F")`` is the flat file layout.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidVolume,
    MalformedHeader,
    TruncatedData,
    UnsupportedDatatype,
)

__all__ = [
    "ValueKind",
    "Volume",
    "Plane",
    "NiftiHeader",
    "binary_mask",
    "probability_volume",
    "intensity_volume",
    "read_nifti",
    "write_nifti",
    "parse_nifti_header",
    "read_raw",
    "write_raw",
    "extract_slice",
    "axis_index",
    "AXES",
]


class ValueKind(str, enum.Enum):
    INTENSITY = "intensity"
    BINARY = "binary"
    PROBABILITY = "probability"


AXES = ("x", "y", "z")
AxisLike = Union[str, int]


def axis_index(axis: AxisLike) -> int:
    if isinstance(axis, str):
        try:
            return AXES.index(axis.lower())
        except ValueError:
            raise ValueError(f"unknown axis {axis!r}, expected one of x, y, z") from None
    if axis in (0, 1, 2):
        return int(axis)
    raise ValueError(f"unknown axis {axis!r}, expected one of x, y, z")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar grid with physical voxel spacing in mm.

    ``data`` is indexed ``[x, y, z]``.  Binary volumes are stored as uint8,
    intensity and probability volumes as float64.  The array is made
    read-only so a Volume can be shared freely between threads.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: ValueKind = ValueKind.INTENSITY

    def __post_init__(self) -> None:
        kind = ValueKind(self.kind)
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidVolume(f"volume data must be a non-empty 3-D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidVolume(f"spacing must be three positive finite numbers, got {self.spacing}")
        if kind is ValueKind.BINARY:
            if arr.dtype != np.uint8:
                if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
                    raise InvalidVolume("binary volume holds values outside {0, 1}")
                arr = arr.astype(np.uint8)
            elif arr.max(initial=0) > 1:
                raise InvalidVolume("binary volume holds values outside {0, 1}")
        else:
            arr = np.asarray(arr, dtype=np.float64)
            if kind is ValueKind.PROBABILITY and not ((arr >= 0) & (arr <= 1)).all():
                raise InvalidVolume("probability volume holds values outside [0, 1]")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def flat(self) -> np.ndarray:
        """Data in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, dims: Sequence[int], flat, spacing=(1.0, 1.0, 1.0), kind=ValueKind.INTENSITY) -> "Volume":
        flat = np.asarray(flat)
        nx, ny, nz = (int(d) for d in dims)
        if flat.size != nx * ny * nz:
            raise InvalidVolume(f"flat data has {flat.size} elements, dims {dims} need {nx * ny * nz}")
        return cls(flat.reshape((nx, ny, nz), order="F"), spacing, kind)

    def with_data(self, data, kind=None) -> "Volume":
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.dtype == other.data.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, spacing={self.spacing}, kind={self.kind.value})"


def binary_mask(data, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.asarray(data).astype(bool), spacing, ValueKind.BINARY)


def probability_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(data, spacing, ValueKind.PROBABILITY)


def intensity_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(data, spacing, ValueKind.INTENSITY)


@dataclass(frozen=True)
class Plane:
    """A 2-D slice.  Rows run along the slower remaining axis, columns along the faster one."""

    pixels: np.ndarray
    spacing: tuple  # (row spacing, column spacing) in mm


def extract_slice(vol: Volume, axis: AxisLike, index: int) -> Plane:
    ax = axis_index(axis)
    n = vol.dims[ax]
    if not 0 <= index < n:
        raise IndexOutOfRange(f"slice {index} out of range for axis {AXES[ax]} with {n} slices")
    plane = np.take(vol.data, index, axis=ax).T
    rest = [s for i, s in enumerate(vol.spacing) if i != ax]
    return Plane(plane, (rest[1], rest[0]))


# --------------------------------------------------------------------------
# NIfTI-1

_HEADER_FIELDS = (
    ("sizeof_hdr", "i", 1),
    ("data_type", "10s", 1),
    ("db_name", "18s", 1),
    ("extents", "i", 1),
    ("session_error", "h", 1),
    ("regular", "B", 1),
    ("dim_info", "B", 1),
    ("dim", "h", 8),
    ("intent_p", "f", 3),
    ("intent_code", "h", 1),
    ("datatype", "h", 1),
    ("bitpix", "h", 1),
    ("slice_start", "h", 1),
    ("pixdim", "f", 8),
    ("vox_offset", "f", 1),
    ("scl_slope", "f", 1),
    ("scl_inter", "f", 1),
    ("slice_end", "h", 1),
    ("slice_code", "B", 1),
    ("xyzt_units", "B", 1),
    ("cal_max", "f", 1),
    ("cal_min", "f", 1),
    ("slice_duration", "f", 1),
    ("toffset", "f", 1),
    ("glmax", "i", 1),
    ("glmin", "i", 1),
    ("descrip", "80s", 1),
    ("aux_file", "24s", 1),
    ("qform_code", "h", 1),
    ("sform_code", "h", 1),
    ("quatern", "f", 6),
    ("srow", "f", 12),
    ("intent_name", "16s", 1),
    ("magic", "4s", 1),
)
_HEADER_FMT = "".join(f"{n}{c}" if n > 1 else c for _, c, n in _HEADER_FIELDS)
HEADER_SIZE = 348
VOX_OFFSET = 352
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE

# code -> (numpy dtype char, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32)}
_KIND_TAG = b"kind="


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    endianness: str
    descrip: bytes = b""
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0,) * 6
    srow: tuple = (0.0,) * 12
    xyzt_units: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def byteorder(self) -> str:
        return "<" if self.endianness == "little" else ">"


def _unpack_header(buf: bytes, byteorder: str) -> dict:
    values = struct.unpack(byteorder + _HEADER_FMT, buf[:HEADER_SIZE])
    out, i = {}, 0
    for name, code, n in _HEADER_FIELDS:
        if n == 1:
            out[name] = values[i]
        else:
            out[name] = tuple(values[i:i + n])
        i += n
    return out


def parse_nifti_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedData(f"NIfTI header needs {HEADER_SIZE} bytes, got {len(buf)}")
    if struct.unpack("<i", buf[:4])[0] == HEADER_SIZE:
        byteorder, endianness = "<", "little"
    elif struct.unpack(">i", buf[:4])[0] == HEADER_SIZE:
        byteorder, endianness = ">", "big"
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either byte order")
    raw = _unpack_header(buf, byteorder)
    if raw["magic"] not in (b"n+1\0", b"ni1\0"):
        raise MalformedHeader(f"bad magic {raw['magic']!r}")
    known = {"sizeof_hdr", "dim", "datatype", "bitpix", "pixdim", "scl_slope", "scl_inter",
             "vox_offset", "magic", "descrip", "qform_code", "sform_code", "quatern", "srow", "xyzt_units"}
    return NiftiHeader(
        sizeof_hdr=raw["sizeof_hdr"],
        dim=raw["dim"],
        datatype=raw["datatype"],
        bitpix=raw["bitpix"],
        pixdim=raw["pixdim"],
        scl_slope=raw["scl_slope"],
        scl_inter=raw["scl_inter"],
        vox_offset=raw["vox_offset"],
        magic=raw["magic"],
        endianness=endianness,
        descrip=raw["descrip"],
        qform_code=raw["qform_code"],
        sform_code=raw["sform_code"],
        quatern=raw["quatern"],
        srow=raw["srow"],
        xyzt_units=raw["xyzt_units"],
        extra={k: v for k, v in raw.items() if k not in known},
    )


def _kind_from_descrip(descrip: bytes):
    text = descrip.split(b"\0", 1)[0]
    for token in text.split():
        if token.startswith(_KIND_TAG):
            try:
                return ValueKind(token[len(_KIND_TAG):].decode("ascii"))
            except (ValueError, UnicodeDecodeError):
                return None
    return None


def read_nifti(buf: bytes, image: bytes | None = None) -> Volume:
    """Decode a single-file NIfTI-1 payload into a Volume.

    For a two-file pair (magic ``ni1``) pass the ``.img`` bytes as *image*.
    Affine/orientation fields are parsed into the header but never applied.
    """
    hdr = parse_nifti_header(buf)
    if hdr.dim[0] != 3:
        raise MalformedHeader(f"only 3-D volumes are supported, dim[0] = {hdr.dim[0]}")
    dims = tuple(int(d) for d in hdr.dim[1:4])
    if min(dims) < 1:
        raise MalformedHeader(f"non-positive dimension in {dims}")
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} is not supported")
    char, bitpix = DATATYPES[hdr.datatype]
    if hdr.bitpix != bitpix:
        raise MalformedHeader(f"bitpix {hdr.bitpix} does not match datatype {hdr.datatype}")

    if hdr.magic == b"n+1\0":
        payload, offset = buf, int(hdr.vox_offset)
        if offset < HEADER_SIZE:
            raise MalformedHeader(f"vox_offset {hdr.vox_offset} inside the header")
    else:
        if image is None:
            raise MalformedHeader("header-only (ni1) file needs the image payload")
        payload, offset = image, int(hdr.vox_offset)
    count = dims[0] * dims[1] * dims[2]
    need = offset + count * bitpix // 8
    if len(payload) < need:
        raise TruncatedData(f"payload has {len(payload)} bytes, need {need}")
    raw = np.frombuffer(payload, dtype=hdr.byteorder + char, count=count, offset=offset)

    spacing = tuple(abs(float(p)) for p in hdr.pixdim[1:4])
    spacing = tuple(s if s > 0 and math.isfinite(s) else 1.0 for s in spacing)
    kind = _kind_from_descrip(hdr.descrip)

    slope, inter = float(hdr.scl_slope), float(hdr.scl_inter)
    if slope != 0 and math.isfinite(slope) and not (slope == 1 and inter == 0):
        values = raw.astype(np.float64) * slope + inter
    elif hdr.datatype == 2:
        values = raw.astype(np.uint8)
    else:
        values = raw.astype(np.float32).astype(np.float64)

    arr = values.reshape(dims, order="F")
    if kind is None:
        kind = ValueKind.BINARY if hdr.datatype == 2 and arr.max(initial=0) <= 1 else ValueKind.INTENSITY
    try:
        return Volume(arr, spacing, kind)
    except InvalidVolume:
        return Volume(arr, spacing, ValueKind.INTENSITY)


def write_nifti(vol: Volume, datatype: int | None = None) -> bytes:
    """Encode *vol* as little-endian single-file NIfTI-1.

    Binary volumes are written as uint8, everything else as float32 unless
    *datatype* asks for int16 (values must then be integral and in range).
    Float data is narrowed to float32, so the round trip is bit-exact for any
    volume whose values are float32-representable, which includes every
    volume produced by :func:`read_nifti`.
    """
    if datatype is None:
        datatype = 2 if vol.kind is ValueKind.BINARY else 16
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    char, bitpix = DATATYPES[datatype]
    data = vol.flat()
    if datatype in (2, 4):
        info = np.iinfo(np.dtype(char))
        if not (np.all(data == np.round(data)) and data.min() >= info.min and data.max() <= info.max):
            raise UnsupportedDatatype(f"values do not fit datatype {datatype}")
    payload = np.asarray(data, dtype="<" + char).tobytes()

    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    descrip = (_KIND_TAG + vol.kind.value.encode("ascii")).ljust(80, b"\0")
    values = dict(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        extents=0,
        session_error=0,
        regular=ord("r"),
        dim_info=0,
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        intent_p=(0.0, 0.0, 0.0),
        intent_code=0,
        datatype=datatype,
        bitpix=bitpix,
        slice_start=0,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(VOX_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        slice_end=0,
        slice_code=0,
        xyzt_units=2,
        cal_max=0.0,
        cal_min=0.0,
        slice_duration=0.0,
        toffset=0.0,
        glmax=0,
        glmin=0,
        descrip=descrip,
        aux_file=b"",
        qform_code=0,
        sform_code=0,
        quatern=(0.0,) * 6,
        srow=(0.0,) * 12,
        intent_name=b"",
        magic=b"n+1\0",
    )
    flat_values = []
    for name, _, n in _HEADER_FIELDS:
        v = values[name]
        flat_values.extend(v if n > 1 else (v,))
    header = struct.pack("<" + _HEADER_FMT, *flat_values)
    return header + b"\0\0\0\0" + payload


# --------------------------------------------------------------------------
# raw interchange: b"CSG0", three little-endian uint32 dims, float32 LE data

RAW_MAGIC = b"CSG0"


def write_raw(vol_or_array) -> bytes:
    if isinstance(vol_or_array, Volume):
        dims, flat = vol_or_array.dims, vol_or_array.flat()
    else:
        arr = np.asarray(vol_or_array)
        arr = arr.reshape(arr.shape + (1,) * (3 - arr.ndim))
        dims, flat = arr.shape, arr.ravel(order="F")
    return RAW_MAGIC + struct.pack("<3I", *dims) + np.asarray(flat, dtype="<f4").tobytes()


def read_raw(buf: bytes, spacing=(1.0, 1.0, 1.0), kind=ValueKind.INTENSITY) -> Volume:
    if len(buf) < 16 or buf[:4] != RAW_MAGIC:
        raise MalformedHeader("not a CSG0 raw payload")
    dims = struct.unpack("<3I", buf[4:16])
    count = dims[0] * dims[1] * dims[2]
    if len(buf) < 16 + 4 * count:
        raise TruncatedData(f"raw payload has {len(buf)} bytes, need {16 + 4 * count}")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=16)
    return Volume.from_flat(dims, flat.astype(np.float64), spacing, kind)
