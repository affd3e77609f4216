"""Multiband scenes, class masks, their binary file formats and the
patch/resolution operators shared by training and inference.

WFB image file (little-endian)::

    "WFB1" | u32 width | u32 height | u32 band_count | u32 dtype (0 = float32)
    | band-sequential, row-major float32 samples

WFL mask file::

    "WFL1" | u32 width | u32 height | 2-bit labels, row-major, LSB-first,
    final byte zero-padded
"""
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from structlog import get_logger

from . import ArgumentError, CoverageError, FormatError

_log = get_logger(__name__)

S2_BAND_NAMES = (
    "B01",
    "B02",
    "B03",
    "B04",
    "B05",
    "B06",
    "B07",
    "B08",
    "B8A",
    "B09",
    "B10",
    "B11",
    "B12",
)
# Central wavelength (nm) of each Sentinel-2 band, same order as above.
S2_WAVELENGTHS_NM = (443, 490, 560, 665, 705, 740, 783, 842, 865, 945, 1375, 1610, 2190)

WFB_MAGIC = b"WFB1"
WFL_MAGIC = b"WFL1"
DTYPE_FLOAT32 = 0
MAX_SAMPLES = 1 << 34

_WFB_HEADER = struct.Struct("<4sIIII")
_WFL_HEADER = struct.Struct("<4sII")


class ClassCode(IntEnum):
    """Per-pixel label. Every code fits in two bits."""

    INVALID = 0
    LAND = 1
    WATER = 2
    CLOUD = 3


# Label priority when degrading: first entry wins a tied vote.
DEGRADE_PRIORITY = (ClassCode.WATER, ClassCode.CLOUD, ClassCode.LAND, ClassCode.INVALID)

PALETTE = np.array(
    [
        (0, 0, 0),  # INVALID
        (34, 139, 34),  # LAND
        (0, 0, 255),  # WATER
        (255, 255, 255),  # CLOUD
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True, order=True)
class BandId:
    """A Sentinel-2 band, or GENERIC(n) for synthetic and hyperspectral cubes"""

    index: int
    generic: bool = False

    def __post_init__(self):
        if self.index < 0:
            raise ArgumentError(f"Band index must be >= 0, got {self.index}")
        if not self.generic and self.index >= len(S2_BAND_NAMES):
            raise ArgumentError(f"No Sentinel-2 band with index {self.index}")

    @property
    def name(self) -> str:
        if self.generic:
            return f"G{self.index}"
        return S2_BAND_NAMES[self.index]

    def __str__(self):
        return self.name

    @classmethod
    def generic_band(cls, index: int) -> "BandId":
        return cls(index, generic=True)

    @classmethod
    def parse(cls, text: str) -> "BandId":
        """Parse `B02`, `B2`, `B8A` or `G7`."""
        val = text.strip().upper()
        if val in S2_BAND_NAMES:
            return cls(S2_BAND_NAMES.index(val))
        if val[:1] == "B" and val[1:].isdigit():
            padded = f"B{int(val[1:]):02d}"
            if padded in S2_BAND_NAMES:
                return cls(S2_BAND_NAMES.index(padded))
        if val[:1] == "G" and val[1:].isdigit():
            return cls.generic_band(int(val[1:]))
        raise ArgumentError(f"Unknown band identifier {text!r}")


S2_BANDS = tuple(BandId(i) for i in range(len(S2_BAND_NAMES)))


def default_bands(count: int) -> Tuple[BandId, ...]:
    """Band identifiers for a cube with `count` channels.

    WFB files carry no band names: 13 channels are read as Sentinel-2,
    anything else as GENERIC(0..count-1).
    """
    if count == len(S2_BANDS):
        return S2_BANDS
    return tuple(BandId.generic_band(i) for i in range(count))


@dataclass(frozen=True)
class MultiBandImage:
    """Scene of top-of-atmosphere reflectances, stored as (bands, rows, cols)."""

    bands: Tuple[BandId, ...]
    data: np.ndarray

    def __post_init__(self):
        bands = tuple(self.bands)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if not bands:
            raise ArgumentError("An image needs at least one band")
        if len(set(bands)) != len(bands):
            raise ArgumentError("Band identifiers must be unique")
        if data.ndim != 3 or data.shape[0] != len(bands):
            raise ArgumentError(
                f"Data shape {data.shape} does not match {len(bands)} bands"
            )
        if not np.isfinite(data).all():
            raise ArgumentError("Reflectances must be finite")
        data = data.view()
        data.setflags(write=False)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def band_count(self) -> int:
        return len(self.bands)

    def band_index(self, band: BandId) -> int:
        try:
            return self.bands.index(band)
        except ValueError:
            raise ArgumentError(f"Band {band} not present in image") from None

    def band(self, band: BandId) -> np.ndarray:
        return self.data[self.band_index(band)]

    def select(self, bands: Sequence[BandId]) -> "MultiBandImage":
        idx = [self.band_index(b) for b in bands]
        return MultiBandImage(tuple(bands), self.data[idx])


@dataclass(frozen=True)
class ClassMask:
    """Per-pixel labels in {INVALID, LAND, WATER, CLOUD}, shape (rows, cols)."""

    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 2:
            raise ArgumentError(f"Mask must be two-dimensional, got shape {raw.shape}")
        if raw.dtype.kind not in "iu":
            raise ArgumentError(f"Mask labels must be integers, got dtype {raw.dtype}")
        if raw.size and (raw.min() < 0 or raw.max() > ClassCode.CLOUD):
            raise ArgumentError("Mask labels must be class codes 0..3")
        labels = np.ascontiguousarray(raw, dtype=np.uint8)
        labels = labels.view()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    def counts(self) -> Tuple[int, int, int, int]:
        """Pixel count per class code (INVALID, LAND, WATER, CLOUD)"""
        counts = np.bincount(self.labels.ravel(), minlength=len(ClassCode))
        return tuple(int(c) for c in counts)

    @classmethod
    def filled(cls, height: int, width: int, code: ClassCode) -> "ClassMask":
        return cls(np.full((height, width), int(code), dtype=np.uint8))


def _check_pair(image: MultiBandImage, mask: Optional[ClassMask]):
    if mask is not None and mask.shape != (image.height, image.width):
        raise ArgumentError(
            f"Mask {mask.width}x{mask.height} does not match "
            f"image {image.width}x{image.height}"
        )


# --- file formats -----------------------------------------------------------


def _check_dims(width: int, height: int):
    if width == 0:
        raise FormatError("width", "must be >= 1")
    if height == 0:
        raise FormatError("height", "must be >= 1")


def encode_image(image: MultiBandImage) -> bytes:
    header = _WFB_HEADER.pack(
        WFB_MAGIC, image.width, image.height, image.band_count, DTYPE_FLOAT32
    )
    return header + image.data.astype("<f4").tobytes()


def decode_image(payload: bytes) -> MultiBandImage:
    if len(payload) < _WFB_HEADER.size:
        raise FormatError(
            "header", f"need {_WFB_HEADER.size} bytes, found {len(payload)}"
        )
    magic, width, height, band_count, dtype = _WFB_HEADER.unpack_from(payload)
    if magic != WFB_MAGIC:
        raise FormatError("magic", f"expected {WFB_MAGIC!r}, found {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError("dtype", f"unsupported sample type code {dtype}")
    _check_dims(width, height)
    if band_count == 0:
        raise FormatError("band_count", "must be >= 1")
    samples = width * height * band_count
    if samples > MAX_SAMPLES:
        raise FormatError("band_count", f"{samples} samples overflow the format limit")

    body = memoryview(payload)[_WFB_HEADER.size :]
    expected = samples * 4
    if len(body) < expected:
        raise FormatError(
            "payload",
            f"truncated: header declares {band_count} bands of {width}x{height} "
            f"({expected} bytes), found {len(body)} bytes",
        )
    if len(body) > expected:
        raise FormatError("payload", f"{len(body) - expected} trailing bytes")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    if not np.isfinite(data).all():
        raise FormatError("payload", "non-finite sample values")
    data = data.reshape(band_count, height, width)
    return MultiBandImage(default_bands(band_count), data)


def write_image(image: MultiBandImage, path) -> None:
    path = Path(path)
    path.write_bytes(encode_image(image))
    _log.debug(
        "Wrote image",
        path=str(path),
        width=image.width,
        height=image.height,
        bands=image.band_count,
    )


def read_image(path) -> MultiBandImage:
    path = Path(path)
    image = decode_image(path.read_bytes())
    _log.debug("Read image", path=str(path), width=image.width, height=image.height)
    return image


def encode_mask(mask: ClassMask) -> bytes:
    from .onboard import pack_mask

    header = _WFL_HEADER.pack(WFL_MAGIC, mask.width, mask.height)
    return header + pack_mask(mask)


def decode_mask(payload: bytes) -> ClassMask:
    from .onboard import unpack_mask

    if len(payload) < _WFL_HEADER.size:
        raise FormatError(
            "header", f"need {_WFL_HEADER.size} bytes, found {len(payload)}"
        )
    magic, width, height = _WFL_HEADER.unpack_from(payload)
    if magic != WFL_MAGIC:
        raise FormatError("magic", f"expected {WFL_MAGIC!r}, found {magic!r}")
    _check_dims(width, height)
    if width * height > MAX_SAMPLES:
        raise FormatError("height", "pixel count overflows the format limit")
    return unpack_mask(bytes(payload[_WFL_HEADER.size :]), (height, width))


def write_mask(mask: ClassMask, path) -> None:
    path = Path(path)
    path.write_bytes(encode_mask(mask))
    _log.debug("Wrote mask", path=str(path), width=mask.width, height=mask.height)


def read_mask(path) -> ClassMask:
    return decode_mask(Path(path).read_bytes())


def encode_ppm(mask: ClassMask) -> bytes:
    header = f"P6\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + PALETTE[mask.labels].tobytes()


def render_mask(mask: ClassMask, path) -> None:
    """Write the mask as a binary PPM with the fixed class palette."""
    path = Path(path)
    path.write_bytes(encode_ppm(mask))
    _log.info("Rendered mask", path=str(path))


# --- patches ----------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Patch origins (row, col); edge patches are shifted inward to fit."""

    patch_size: int
    stride: int
    offsets: Tuple[Tuple[int, int], ...]


class Patch(NamedTuple):
    image: MultiBandImage
    mask: Optional[ClassMask]
    offset: Tuple[int, int]


def _axis_offsets(dim: int, patch_size: int, stride: int) -> List[int]:
    offsets = list(range(0, dim - patch_size + 1, stride))
    if offsets[-1] != dim - patch_size:
        offsets.append(dim - patch_size)
    return offsets


def patch_grid(height: int, width: int, patch_size: int, stride: int) -> PatchGrid:
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if patch_size < 1:
        raise ArgumentError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > min(height, width):
        raise ArgumentError(
            f"patch_size {patch_size} exceeds image dimensions {width}x{height}"
        )
    rows = _axis_offsets(height, patch_size, stride)
    cols = _axis_offsets(width, patch_size, stride)
    offsets = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch_size=patch_size, stride=stride, offsets=offsets)


def tile(
    image: MultiBandImage,
    mask: Optional[ClassMask] = None,
    patch_size: int = 256,
    stride: Optional[int] = None,
) -> List[Patch]:
    """Cut image (and mask) into square patches covering every pixel."""
    _check_pair(image, mask)
    stride = patch_size if stride is None else stride
    grid = patch_grid(image.height, image.width, patch_size, stride)
    size = grid.patch_size

    patches = []
    for r, c in grid.offsets:
        sub = MultiBandImage(image.bands, image.data[:, r : r + size, c : c + size])
        sub_mask = None
        if mask is not None:
            sub_mask = ClassMask(mask.labels[r : r + size, c : c + size])
        patches.append(Patch(sub, sub_mask, (r, c)))
    return patches


class Stitcher:
    """Accumulates per-patch (classes, rows, cols) scores in arrival order."""

    def __init__(self, channels: int, height: int, width: int):
        self.height = height
        self.width = width
        self.total = np.zeros((channels, height, width), dtype=np.float32)
        self.count = np.zeros((height, width), dtype=np.int32)

    def add(self, pred: np.ndarray, offset: Tuple[int, int]):
        r, c = offset
        rows, cols = pred.shape[1:]
        if r < 0 or c < 0 or r + rows > self.height or c + cols > self.width:
            raise ArgumentError(f"Patch at ({r}, {c}) falls outside the image")
        if pred.shape[0] != self.total.shape[0]:
            raise ArgumentError(
                f"Patch has {pred.shape[0]} channels, expected {self.total.shape[0]}"
            )
        self.total[:, r : r + rows, c : c + cols] += pred
        self.count[r : r + rows, c : c + cols] += 1

    def result(self) -> np.ndarray:
        uncovered = np.argwhere(self.count == 0)
        if len(uncovered):
            r, c = uncovered[0]
            raise CoverageError(f"Pixel ({r}, {c}) is not covered by any patch")
        return self.total / self.count.astype(np.float32)


def stitch(
    predictions: Sequence[np.ndarray],
    offsets: Sequence[Tuple[int, int]],
    dims: Tuple[int, int],
) -> np.ndarray:
    """Merge per-patch scores into one full-size (classes, rows, cols) map.

    Overlapping pixels receive the mean of the score vectors of every patch
    covering them. `dims` is (height, width).
    """
    if len(predictions) != len(offsets):
        raise ArgumentError(
            f"{len(predictions)} predictions but {len(offsets)} offsets"
        )
    height, width = dims
    if not predictions:
        raise CoverageError(f"No patches to cover a {width}x{height} image")

    stitcher = Stitcher(predictions[0].shape[0], height, width)
    for pred, offset in zip(predictions, offsets):
        stitcher.add(pred, offset)
    return stitcher.result()


# --- resolution -------------------------------------------------------------


def crop_to_multiple(
    image: MultiBandImage, mask: Optional[ClassMask], factor: int
) -> Tuple[MultiBandImage, Optional[ClassMask]]:
    """Drop bottom rows / right columns so both dims divide by `factor`."""
    if factor < 1:
        raise ArgumentError(f"factor must be >= 1, got {factor}")
    _check_pair(image, mask)
    rows = image.height - image.height % factor
    cols = image.width - image.width % factor
    if rows == 0 or cols == 0:
        raise ArgumentError(
            f"Image {image.width}x{image.height} is smaller than factor {factor}"
        )
    cropped = MultiBandImage(image.bands, image.data[:, :rows, :cols])
    if mask is not None:
        mask = ClassMask(mask.labels[:rows, :cols])
    return cropped, mask


def degrade(
    image: MultiBandImage, mask: Optional[ClassMask] = None, factor: int = 8
) -> Tuple[MultiBandImage, Optional[ClassMask]]:
    """Block-average the scene by `factor` (e.g. 10 m -> 80 m).

    Reflectances become the mean of each factor x factor block. Labels take
    the block majority, ties resolved WATER > CLOUD > LAND > INVALID, and a
    block that is more than half INVALID stays INVALID.
    """
    if factor < 1:
        raise ArgumentError(f"factor must be >= 1, got {factor}")
    _check_pair(image, mask)
    height, width = image.height, image.width
    if height % factor or width % factor:
        raise ArgumentError(
            f"Image {width}x{height} is not divisible by factor {factor}"
        )
    rows, cols = height // factor, width // factor

    blocks = image.data.reshape(image.band_count, rows, factor, cols, factor)
    # float64 sums of float32 blocks are exact, so constants survive unchanged
    data = blocks.mean(axis=(2, 4), dtype=np.float64).astype(np.float32)
    degraded = MultiBandImage(image.bands, data)
    if mask is None:
        return degraded, None

    labels = mask.labels.reshape(rows, factor, cols, factor)
    counts = np.stack([(labels == code).sum(axis=(1, 3)) for code in DEGRADE_PRIORITY])
    priority = np.array([int(code) for code in DEGRADE_PRIORITY], dtype=np.uint8)
    winner = priority[counts.argmax(axis=0)]
    invalid = counts[DEGRADE_PRIORITY.index(ClassCode.INVALID)]
    winner[invalid * 2 > factor * factor] = ClassCode.INVALID
    return degraded, ClassMask(winner)
