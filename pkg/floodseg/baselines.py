"""NDWI water baselines: a fixed threshold and a per-image oracle threshold."""
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from structlog import get_logger

from . import ArgumentError, EvaluationError
from .raster import S2_BANDS, BandId, ClassCode, ClassMask, MultiBandImage

_log = get_logger(__name__)

# 201 thresholds, -1.00 to 1.00 in steps of 0.01; contains 0 exactly.
DEFAULT_GRID = tuple(np.arange(-100, 101) / 100)


@dataclass(frozen=True)
class NdwiConfig:
    """Index (a - b) / (a + b); defaults to Sentinel-2 bands 2 and 8"""

    band_a: BandId = S2_BANDS[1]
    band_b: BandId = S2_BANDS[7]
    threshold: float = 0.0

    def __post_init__(self):
        if self.band_a == self.band_b:
            raise ArgumentError(
                f"NDWI needs two distinct bands, got {self.band_a} twice"
            )
        if not -1.0 <= self.threshold <= 1.0:
            raise ArgumentError(f"NDWI threshold must lie in [-1, 1]: {self.threshold}")


def ndwi(image: MultiBandImage, band_a: BandId, band_b: BandId) -> np.ndarray:
    """Per-pixel index in [-1, 1], float64; 0 where a + b == 0."""
    a = image.band(band_a).astype(np.float64)
    b = image.band(band_b).astype(np.float64)
    total = a + b
    index = np.divide(a - b, total, out=np.zeros_like(total), where=total != 0)
    return np.clip(index, -1.0, 1.0)


def classify_index(
    index: np.ndarray, threshold: float, validity: Optional[ClassMask] = None
) -> ClassMask:
    labels = np.where(index > threshold, ClassCode.WATER, ClassCode.LAND)
    labels = labels.astype(np.uint8)
    if validity is not None:
        if validity.shape != index.shape:
            raise ArgumentError(
                f"Validity mask {validity.width}x{validity.height} does not match "
                f"index map {index.shape[1]}x{index.shape[0]}"
            )
        labels[validity.labels == ClassCode.INVALID] = ClassCode.INVALID
    return ClassMask(labels)


def classify_fixed(
    image: MultiBandImage,
    config: Optional[NdwiConfig] = None,
    validity: Optional[ClassMask] = None,
) -> ClassMask:
    """WATER where the index exceeds the threshold, LAND elsewhere.

    Pixels that are INVALID in `validity` stay INVALID.
    """
    config = config or NdwiConfig()
    index = ndwi(image, config.band_a, config.band_b)
    return classify_index(index, config.threshold, validity)


def _check_grid(grid: Optional[Sequence[float]]) -> np.ndarray:
    values = np.asarray(DEFAULT_GRID if grid is None else grid, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ArgumentError("Threshold grid must be a non-empty list")
    if values.min() < -1.0 or values.max() > 1.0:
        raise ArgumentError("Threshold grid values must lie in [-1, 1]")
    return np.unique(values)


def grid_water_iou(
    index: np.ndarray, truth: ClassMask, grid: Sequence[float]
) -> np.ndarray:
    """Water IoU of `index > t` against `truth` for every `t` of `grid`."""
    if truth.shape != index.shape:
        raise ArgumentError(
            f"Truth {truth.width}x{truth.height} does not match "
            f"index map {index.shape[1]}x{index.shape[0]}"
        )
    thresholds = np.asarray(grid, dtype=np.float64)
    valid = truth.labels != ClassCode.INVALID
    is_water = truth.labels == ClassCode.WATER
    water = np.sort(index[is_water])
    other = np.sort(index[valid & ~is_water])

    tp = water.size - np.searchsorted(water, thresholds, side="right")
    fp = other.size - np.searchsorted(other, thresholds, side="right")
    fn = water.size - tp
    union = tp + fp + fn
    return np.divide(
        tp, union, out=np.zeros(thresholds.shape), where=union > 0
    )


def tune_threshold(
    image: MultiBandImage,
    truth: ClassMask,
    grid: Optional[Sequence[float]] = None,
    config: Optional[NdwiConfig] = None,
) -> Tuple[float, float]:
    """Grid threshold with the best water IoU against `truth`.

    Ties go to the smallest threshold. This peeks at the labels, so it is
    the best case any single NDWI threshold can reach on the image.
    """
    config = config or NdwiConfig()
    thresholds = _check_grid(grid)
    if not (truth.labels != ClassCode.INVALID).any():
        raise EvaluationError("Truth mask has no valid pixels")
    index = ndwi(image, config.band_a, config.band_b)
    ious = grid_water_iou(index, truth, thresholds)
    best = int(np.argmax(ious))
    return float(thresholds[best]), float(ious[best])


class NdwiSegmenter:
    """Fixed-threshold NDWI, usable wherever a model segmenter is"""

    def __init__(self, config: Optional[NdwiConfig] = None):
        self.config = config or NdwiConfig()
        self.name = f"NDWI (thresh {self.config.threshold:g})"

    def segment(self, image: MultiBandImage, truth: Optional[ClassMask] = None):
        return classify_fixed(image, self.config, truth)


class TunedNdwiSegmenter:
    """NDWI with the threshold re-tuned on every image against its truth"""

    name = "NDWI (tuned)"

    def __init__(
        self,
        config: Optional[NdwiConfig] = None,
        grid: Optional[Sequence[float]] = None,
    ):
        self.config = config or NdwiConfig()
        self.grid = grid

    def segment(self, image: MultiBandImage, truth: Optional[ClassMask] = None):
        if truth is None:
            raise ArgumentError("Tuned NDWI needs the truth mask of every image")
        if not (truth.labels != ClassCode.INVALID).any():
            _log.debug("No valid truth pixels, keeping the fixed threshold")
            return classify_fixed(image, self.config, truth)
        threshold, iou = tune_threshold(image, truth, self.grid, self.config)
        _log.debug("Tuned NDWI threshold", threshold=threshold, water_iou=iou)
        return classify_fixed(image, replace(self.config, threshold=threshold), truth)
