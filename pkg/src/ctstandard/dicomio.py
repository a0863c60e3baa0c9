"""Reader and writer for a small DICOM subset.

Only explicit-VR little-endian, uncompressed, single-frame, 16-bit unsigned
pixel data is handled. That is enough to round-trip CT slices together with
their rescale parameters, slice thickness and reconstruction kernel name.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

HU_MIN = -1024.0
HU_MAX = 3071.0

PREAMBLE = b"\x00" * 128 + b"DICM"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

Tag = Tuple[int, int]

ROWS: Tag = (0x0028, 0x0010)
COLUMNS: Tag = (0x0028, 0x0011)
RESCALE_INTERCEPT: Tag = (0x0028, 0x1052)
RESCALE_SLOPE: Tag = (0x0028, 0x1053)
SLICE_THICKNESS: Tag = (0x0018, 0x0050)
CONVOLUTION_KERNEL: Tag = (0x0018, 0x1210)
PIXEL_DATA: Tag = (0x7FE0, 0x0010)

REQUIRED_TAGS: Tuple[Tag, ...] = (
    ROWS, COLUMNS, RESCALE_INTERCEPT, RESCALE_SLOPE, SLICE_THICKNESS, CONVOLUTION_KERNEL, PIXEL_DATA,
)

# VRs whose explicit header carries two reserved bytes and a 4-byte length
_LONG_VRS = {b"OB", b"OW", b"OF", b"OD", b"OL", b"SQ", b"UT", b"UN", b"UC", b"UR", b"OV"}


class DicomError(ValueError):
    """Base class for parse and encode failures."""


class MissingTagError(DicomError):
    def __init__(self, tag: Tag):
        self.tag = tag
        super().__init__(f"missing required tag {format_tag(tag)}")


class TruncatedError(DicomError):
    pass


class HURangeError(DicomError):
    pass


def format_tag(tag: Tag) -> str:
    return f"({tag[0]:04X},{tag[1]:04X})"


@dataclass
class DicomSlice:
    rows: int
    cols: int
    rescale_slope: float
    rescale_intercept: float
    slice_thickness_mm: float
    kernel_label: str
    stored_pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.stored_pixels = np.asarray(self.stored_pixels, dtype=np.uint16).reshape(-1)
        if self.rows < 1 or self.cols < 1:
            raise DicomError(f"bad dimensions {self.rows}x{self.cols}")
        if self.rows * self.cols != self.stored_pixels.size:
            raise DicomError(
                f"rows*cols = {self.rows * self.cols} but {self.stored_pixels.size} pixels present"
            )
        if not self.rescale_slope > 0:
            raise DicomError(f"rescale slope must be positive, got {self.rescale_slope}")

    @property
    def pixels(self) -> np.ndarray:
        return self.stored_pixels.reshape(self.rows, self.cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DicomSlice):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.rescale_slope == other.rescale_slope
            and self.rescale_intercept == other.rescale_intercept
            and self.slice_thickness_mm == other.slice_thickness_mm
            and self.kernel_label == other.kernel_label
            and np.array_equal(self.stored_pixels, other.stored_pixels)
        )


# --- decimal strings ----------------------------------------------------------

def format_ds(value: float) -> str:
    """Shortest decimal string (at most 16 chars) for a DS element."""
    text = repr(float(value))
    if text.endswith(".0"):
        text = text[:-2]
    if len(text) <= 16:
        return text
    for digits in range(15, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 16:
            return text
    raise DicomError(f"cannot encode {value!r} as a decimal string")


def _parse_ds(raw: bytes, tag: Tag) -> float:
    try:
        text = raw.decode("ascii").strip(" \x00")
        # multi-valued DS: the first value wins
        return float(text.split("\\")[0])
    except (UnicodeDecodeError, ValueError) as exc:
        raise DicomError(f"bad decimal string in {format_tag(tag)}: {raw[:32]!r}") from exc


def _pad_even(raw: bytes, fill: bytes = b" ") -> bytes:
    return raw + fill if len(raw) % 2 else raw


# --- parsing --------------------------------------------------------------------

def iter_elements(data: bytes, start: int = 0) -> Iterable[Tuple[Tag, bytes, bytes]]:
    """Yield ``(tag, vr, value)`` for each explicit-VR little-endian element."""
    pos = start
    end = len(data)
    while pos < end:
        if pos + 8 > end:
            raise TruncatedError(f"element header truncated at offset {pos}")
        group, elem = struct.unpack_from("<HH", data, pos)
        vr = bytes(data[pos + 4 : pos + 6])
        if not (len(vr) == 2 and 65 <= vr[0] <= 90 and 65 <= vr[1] <= 90):
            raise DicomError(f"invalid VR {vr!r} at offset {pos}")
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise TruncatedError(f"element header truncated at offset {pos}")
            (length,) = struct.unpack_from("<I", data, pos + 8)
            pos += 12
        else:
            (length,) = struct.unpack_from("<H", data, pos + 6)
            pos += 8
        if length == 0xFFFFFFFF:
            raise DicomError(f"undefined length in {format_tag((group, elem))} is not supported")
        if pos + length > end:
            raise TruncatedError(
                f"{format_tag((group, elem))} declares {length} bytes but only {end - pos} remain"
            )
        yield (group, elem), vr, bytes(data[pos : pos + length])
        pos += length


def _body_offset(data: bytes) -> int:
    if len(data) >= 132 and data[128:132] == b"DICM":
        return 132
    return 0


def parse_dicom(data: bytes) -> DicomSlice:
    """Parse a DICOM byte string into a :class:`DicomSlice`.

    Unknown tags are skipped using their declared lengths. The 128-byte
    preamble plus ``DICM`` marker is optional.
    """
    data = bytes(data)
    found: Dict[Tag, Tuple[bytes, bytes]] = {}
    for tag, vr, value in iter_elements(data, _body_offset(data)):
        if tag == (0x0002, 0x0010):
            uid = value.decode("ascii", "replace").strip("\x00 ")
            if uid != EXPLICIT_VR_LE:
                raise DicomError(f"unsupported transfer syntax {uid!r}")
        elif tag in REQUIRED_TAGS:
            found[tag] = (vr, value)
            if tag == PIXEL_DATA:
                break

    for tag in REQUIRED_TAGS:
        if tag not in found:
            raise MissingTagError(tag)

    def us(tag: Tag) -> int:
        raw = found[tag][1]
        if len(raw) != 2:
            raise DicomError(f"{format_tag(tag)} must hold one US value")
        return struct.unpack("<H", raw)[0]

    rows, cols = us(ROWS), us(COLUMNS)
    raw_kernel = found[CONVOLUTION_KERNEL][1]
    try:
        kernel = raw_kernel.decode("ascii").strip(" \x00")
    except UnicodeDecodeError as exc:
        raise DicomError(f"non-ASCII kernel label {raw_kernel!r}") from exc
    pixel_raw = found[PIXEL_DATA][1]
    if len(pixel_raw) != 2 * rows * cols:
        raise DicomError(f"pixel data holds {len(pixel_raw)} bytes, expected {2 * rows * cols}")
    pixels = np.frombuffer(pixel_raw, dtype="<u2").astype(np.uint16)
    return DicomSlice(
        rows=rows,
        cols=cols,
        rescale_slope=_parse_ds(found[RESCALE_SLOPE][1], RESCALE_SLOPE),
        rescale_intercept=_parse_ds(found[RESCALE_INTERCEPT][1], RESCALE_INTERCEPT),
        slice_thickness_mm=_parse_ds(found[SLICE_THICKNESS][1], SLICE_THICKNESS),
        kernel_label=kernel,
        stored_pixels=pixels,
    )


# --- writing ----------------------------------------------------------------------

def encode_element(tag: Tag, vr: bytes, value: bytes) -> bytes:
    if vr in _LONG_VRS:
        return struct.pack("<HH2s2xI", tag[0], tag[1], vr, len(value)) + value
    if len(value) > 0xFFFF:
        raise DicomError(f"value too long for {vr!r}")
    return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value


def write_dicom(s: DicomSlice) -> bytes:
    """Encode a slice with preamble, a file-meta transfer syntax and the required tags."""
    kernel = s.kernel_label.encode("ascii")
    if len(kernel) > 16:
        raise DicomError("kernel label longer than 16 characters")
    ts = _pad_even(EXPLICIT_VR_LE.encode("ascii"), b"\x00")
    elements: List[Tuple[Tag, bytes, bytes]] = [
        ((0x0002, 0x0010), b"UI", ts),
        (SLICE_THICKNESS, b"DS", _pad_even(format_ds(s.slice_thickness_mm).encode("ascii"))),
        (CONVOLUTION_KERNEL, b"SH", _pad_even(kernel)),
        ((0x0028, 0x0002), b"US", struct.pack("<H", 1)),
        (ROWS, b"US", struct.pack("<H", s.rows)),
        (COLUMNS, b"US", struct.pack("<H", s.cols)),
        ((0x0028, 0x0100), b"US", struct.pack("<H", 16)),
        ((0x0028, 0x0101), b"US", struct.pack("<H", 16)),
        ((0x0028, 0x0103), b"US", struct.pack("<H", 0)),
        (RESCALE_INTERCEPT, b"DS", _pad_even(format_ds(s.rescale_intercept).encode("ascii"))),
        (RESCALE_SLOPE, b"DS", _pad_even(format_ds(s.rescale_slope).encode("ascii"))),
        (PIXEL_DATA, b"OW", s.stored_pixels.astype("<u2").tobytes()),
    ]
    return PREAMBLE + b"".join(encode_element(*e) for e in elements)


# --- Hounsfield conversion -----------------------------------------------------------

def to_hu(s: DicomSlice) -> np.ndarray:
    return s.pixels.astype(np.float64) * s.rescale_slope + s.rescale_intercept


def from_hu(hu: np.ndarray, slope: float = 1.0, intercept: float = -1024.0) -> np.ndarray:
    """Stored u16 values for ``hu`` under the given rescale.

    Raises :class:`HURangeError` for HU outside ``[HU_MIN, HU_MAX]`` or stored
    values outside ``[0, 65535]``.
    """
    if not slope > 0:
        raise DicomError("slope must be positive")
    hu = np.asarray(hu, dtype=np.float64)
    if hu.size and (hu.min() < HU_MIN or hu.max() > HU_MAX):
        raise HURangeError(f"HU values [{hu.min():.1f}, {hu.max():.1f}] outside [{HU_MIN:.0f}, {HU_MAX:.0f}]")
    stored = np.rint((np.asarray(hu, dtype=np.float64) - intercept) / slope)
    if stored.size and (stored.min() < 0 or stored.max() > 65535):
        raise HURangeError(
            f"HU values map to stored range [{stored.min():.0f}, {stored.max():.0f}] outside [0, 65535]"
        )
    return stored.astype(np.uint16)


def slice_from_hu(
    hu: np.ndarray,
    kernel_label: str,
    slice_thickness_mm: float = 1.0,
    slope: float = 1.0,
    intercept: float = -1024.0,
) -> DicomSlice:
    hu = np.asarray(hu)
    return DicomSlice(
        rows=hu.shape[0],
        cols=hu.shape[1],
        rescale_slope=slope,
        rescale_intercept=intercept,
        slice_thickness_mm=slice_thickness_mm,
        kernel_label=kernel_label,
        stored_pixels=from_hu(hu, slope, intercept).reshape(-1),
    )


def read_dicom_file(path) -> DicomSlice:
    with open(path, "rb") as fh:
        return parse_dicom(fh.read())


def write_dicom_file(path, s: DicomSlice) -> None:
    with open(path, "wb") as fh:
        fh.write(write_dicom(s))


@dataclass
class Volume:
    """A stack of HU slices sharing geometry and acquisition metadata."""

    hu: np.ndarray
    kernel_label: str = ""
    slice_thickness_mm: float = 1.0

    def __post_init__(self):
        self.hu = np.asarray(self.hu, dtype=np.float64)
        if self.hu.ndim != 3:
            raise ValueError(f"volume needs a 3-D array, got shape {self.hu.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.hu.shape

    def slices(self) -> List[DicomSlice]:
        clipped = np.clip(self.hu, HU_MIN, HU_MAX)
        return [slice_from_hu(s, self.kernel_label, self.slice_thickness_mm) for s in clipped]

    @classmethod
    def from_slices(cls, slices: List[DicomSlice]) -> "Volume":
        if not slices:
            raise DicomError("no slices")
        first = slices[0]
        for s in slices[1:]:
            if (s.rows, s.cols, s.slice_thickness_mm, s.kernel_label) != (
                first.rows, first.cols, first.slice_thickness_mm, first.kernel_label,
            ):
                raise DicomError("slices disagree on geometry or kernel")
        hu = np.stack([to_hu(s) for s in slices])
        return cls(hu, first.kernel_label, first.slice_thickness_mm)


def slice_name(index: int) -> str:
    return f"slice_{index:04d}.dcm"


def write_volume(directory, volume: Volume) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, s in enumerate(volume.slices()):
        path = os.path.join(directory, slice_name(i))
        write_dicom_file(path, s)
        paths.append(path)
    return paths


def read_volume(directory) -> Volume:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".dcm"))
    if not names:
        raise DicomError(f"no .dcm files in {directory}")
    return Volume.from_slices([read_dicom_file(os.path.join(directory, n)) for n in names])


def optional_meta_transfer_syntax(data: bytes) -> Optional[str]:
    """The transfer syntax UID from the file meta group, if present."""
    for tag, _vr, value in iter_elements(data, _body_offset(data)):
        if tag == (0x0002, 0x0010):
            return value.decode("ascii", "replace").strip("\x00 ")
        if tag[0] > 0x0002:
            break
    return None
