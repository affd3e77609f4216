"""The satellite side of the pipeline: scene-scale inference, 2-bit map
packing, downlink accounting and the throughput benchmark."""
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Tuple

import numpy as np
from structlog import get_logger

from . import ArgumentError, FormatError, get_thread_count, make_rng
from .logs import log_state, write_csv
from .nnet import NUM_CLASSES, Model, count_flops, forward, labels_from_scores, softmax
from .raster import ClassMask, MultiBandImage, Stitcher, default_bands, patch_grid

_log = get_logger(__name__)

# Downlink reduction quoted for 49 16-bit channels vs a 2-bit map.
QUOTED_REDUCTION_FACTOR = 100
DEFAULT_LINK_BPS = 1_000_000
ALLOWED_MAP_BITS = (1, 2, 4, 8)

DEFAULT_PATCH = 64
DEFAULT_OVERLAP = 8
# Tiles per inference batch. Fixed so results never depend on the thread count.
INFERENCE_CHUNK = 8

_SHIFTS = np.array([0, 2, 4, 6], dtype=np.uint8)


# --- 2-bit maps -------------------------------------------------------------


def packed_size(width: int, height: int, bits: int = 2) -> int:
    return math.ceil(width * height * bits / 8)


def pack_mask(mask: ClassMask) -> bytes:
    """Row-major 2-bit labels, LSB-first within each byte, zero-padded."""
    flat = mask.labels.ravel()
    pad = (-flat.size) % 4
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    quads = flat.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_mask(payload: bytes, dims: Tuple[int, int]) -> ClassMask:
    """Inverse of `pack_mask`; `dims` is (height, width)."""
    height, width = dims
    count = height * width
    needed = packed_size(width, height)
    if len(payload) < needed:
        raise FormatError(
            "payload",
            f"too short: {width}x{height} needs {needed} bytes, found {len(payload)}",
        )
    if len(payload) > needed:
        raise FormatError("payload", f"{len(payload) - needed} trailing bytes")
    raw = np.frombuffer(payload, dtype=np.uint8)
    flat = ((raw[:, None] >> _SHIFTS) & 3).reshape(-1)
    if flat[count:].any():
        raise FormatError("padding", "nonzero padding bits in the final byte")
    return ClassMask(flat[:count].reshape(height, width))


# --- downlink ---------------------------------------------------------------


@dataclass(frozen=True)
class DownlinkSpec:
    bands: int = 49
    bits_per_sample: int = 16
    map_bits: int = 2

    def __post_init__(self):
        if self.bands <= 0 or self.bits_per_sample <= 0 or self.map_bits <= 0:
            raise ArgumentError("Downlink bands and bit depths must be > 0")
        if self.map_bits not in ALLOWED_MAP_BITS:
            raise ArgumentError(
                f"map_bits must be one of {ALLOWED_MAP_BITS}, got {self.map_bits}"
            )


@dataclass(frozen=True)
class DownlinkTime:
    raw_seconds: float
    map_seconds: float


def reduction_factor(spec: DownlinkSpec) -> Fraction:
    """Raw cube bits per pixel over map bits per pixel, exact."""
    return Fraction(spec.bands * spec.bits_per_sample, spec.map_bits)


def downlink_seconds(
    spec: DownlinkSpec, width: int, height: int, link_bps: float = DEFAULT_LINK_BPS
) -> DownlinkTime:
    """Time to send the raw cube vs the packed map over a link of `link_bps`."""
    if link_bps <= 0:
        raise ArgumentError("link_bps must be > 0")
    raw_bits = width * height * spec.bands * spec.bits_per_sample
    map_bits = packed_size(width, height, spec.map_bits) * 8
    return DownlinkTime(raw_bits / link_bps, map_bits / link_bps)


# --- scene inference --------------------------------------------------------


def _scene_grid(image: MultiBandImage, patch_size: int, overlap: int):
    if patch_size < 1:
        raise ArgumentError(f"patch_size must be >= 1, got {patch_size}")
    if overlap < 0:
        raise ArgumentError(f"overlap must be >= 0, got {overlap}")
    size = min(patch_size, image.height, image.width)
    stride = max(1, size - overlap)
    return patch_grid(image.height, image.width, size, stride)


def scene_probabilities(
    model: Model,
    image: MultiBandImage,
    patch_size: int = DEFAULT_PATCH,
    overlap: int = DEFAULT_OVERLAP,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Stitched softmax probabilities (3 x H x W) for a whole scene."""
    if image.band_count != model.in_bands:
        raise ArgumentError(
            f"Model expects {model.in_bands} bands, image has {image.band_count}"
        )
    grid = _scene_grid(image, patch_size, overlap)
    size = grid.patch_size
    offsets = grid.offsets
    chunks = [
        offsets[i : i + INFERENCE_CHUNK]
        for i in range(0, len(offsets), INFERENCE_CHUNK)
    ]

    def run(chunk):
        batch = np.stack([image.data[:, r : r + size, c : c + size] for r, c in chunk])
        return softmax(forward(model, batch))

    threads = threads or get_thread_count()
    stitcher = Stitcher(NUM_CLASSES, image.height, image.width)
    with log_state(patches=len(offsets), patch_size=size, threads=threads):
        if threads == 1:
            results: Iterable = map(run, chunks)
            for chunk, probs in zip(chunks, results):
                for offset, pred in zip(chunk, probs):
                    stitcher.add(pred, offset)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for chunk, probs in zip(chunks, pool.map(run, chunks)):
                    for offset, pred in zip(chunk, probs):
                        stitcher.add(pred, offset)
        _log.debug("Scene inference done", width=image.width, height=image.height)
    return stitcher.result()


def segment_scene(
    model: Model,
    image: MultiBandImage,
    patch_size: int = DEFAULT_PATCH,
    overlap: int = DEFAULT_OVERLAP,
    threads: Optional[int] = None,
) -> ClassMask:
    """Tile, infer, stitch (mean of probabilities) and take the argmax."""
    probs = scene_probabilities(model, image, patch_size, overlap, threads)
    return ClassMask(labels_from_scores(probs))


# --- benchmark --------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    pixels: int
    wall_seconds: float
    px_per_s: float
    flops: int
    peak_memory_bytes: int

    @property
    def wall_ms(self) -> float:
        return self.wall_seconds * 1000.0


def estimate_peak_memory(
    model: Model, height: int, width: int, bands: int, patch_size: int, threads: int
) -> int:
    """Rough upper bound of resident bytes during `segment_scene`.

    Scene cube + probability accumulator and counts + label map, plus for
    each worker one chunk holding its two widest activations.
    """
    pixels = height * width
    scene = 4 * bands * pixels
    accumulator = 4 * NUM_CLASSES * pixels + 4 * pixels
    labels = pixels
    widths = sorted(
        [bands] + [layer.out_channels for layer in model.conv_layers], reverse=True
    )
    per_chunk = 4 * INFERENCE_CHUNK * patch_size * patch_size * sum(widths[:2])
    return scene + accumulator + labels + threads * per_chunk


def benchmark(
    model: Model,
    width: int = 4000,
    height: int = 3000,
    bands: int = 13,
    repetitions: int = 1,
    patch_size: int = DEFAULT_PATCH,
    overlap: int = DEFAULT_OVERLAP,
    threads: Optional[int] = None,
    seed: int = 0,
) -> BenchResult:
    """Time `segment_scene` on a seeded random scene; median over repetitions.

    Scene synthesis is outside the timed region.
    """
    if repetitions < 1:
        raise ArgumentError(f"repetitions must be >= 1, got {repetitions}")
    threads = threads or get_thread_count()
    rng = make_rng(seed)
    data = rng.random((bands, height, width), dtype=np.float32) * np.float32(0.5)
    image = MultiBandImage(default_bands(bands), data)

    times = []
    with log_state(width=width, height=height, bands=bands, threads=threads):
        for rep in range(repetitions):
            start = time.perf_counter()
            segment_scene(model, image, patch_size, overlap, threads)
            elapsed = time.perf_counter() - start
            times.append(elapsed)
            _log.info("Benchmark repetition", repetition=rep, wall_s=round(elapsed, 3))

    grid = _scene_grid(image, patch_size, overlap)
    size = grid.patch_size
    wall = statistics.median(times)
    pixels = width * height
    return BenchResult(
        pixels=pixels,
        wall_seconds=wall,
        px_per_s=pixels / wall,
        flops=count_flops(model, size, size, bands) * len(grid.offsets),
        peak_memory_bytes=estimate_peak_memory(
            model, height, width, bands, size, threads
        ),
    )


def write_bench_csv(results: Iterable[BenchResult], path) -> None:
    rows = (
        [res.pixels, f"{res.wall_ms:.3f}", f"{res.px_per_s:.1f}", res.flops]
        for res in results
    )
    path = write_csv(path, ["pixels", "wall_ms", "px_per_s", "flops"], rows)
    _log.info("Wrote benchmark csv", path=str(path))
