"""Water-class scoring of segmenters over whole manifests.

Every segmenter exposes `name` and `segment(image, truth=None) -> ClassMask`;
`truth` is only consulted by oracle baselines. Test-set numbers pool the
pixel counts of all images before dividing.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from jinja2 import Environment, PackageLoader
from structlog import get_logger

from . import ArgumentError, EvaluationError, get_thread_count
from .logs import log_state, log_timing, write_csv
from .nnet import NUM_CLASSES, OUTPUT_CLASSES, Model, labels_from_scores
from .onboard import DEFAULT_OVERLAP, DEFAULT_PATCH, scene_probabilities
from .raster import ClassCode, ClassMask, MultiBandImage
from .synthgen import Manifest, read_manifest

_log = get_logger(__name__)

MIN_RECALL = 0.95
DEFAULT_THRESHOLDS = tuple(np.linspace(0.0, 1.0, 101))
WATER_CHANNEL = OUTPUT_CLASSES.index(ClassCode.WATER)


class Metrics(NamedTuple):
    precision: float
    recall: float
    iou: float


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


@dataclass(frozen=True)
class ConfusionMatrix:
    """Pixel counts, rows = truth, cols = prediction, in LAND/WATER/CLOUD order"""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ArgumentError(f"Confusion counts must be 3x3, got {counts.shape}")
        if (counts < 0).any():
            raise ArgumentError("Confusion counts must be >= 0")
        counts = counts.view()
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls) -> "ConfusionMatrix":
        return cls(np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self + other

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def metrics(self, cls: ClassCode = ClassCode.WATER) -> Metrics:
        return metrics(self, cls)


def _index(code: ClassCode) -> int:
    if code not in OUTPUT_CLASSES:
        raise ArgumentError(f"No metrics for class {ClassCode(code).name}")
    return OUTPUT_CLASSES.index(code)


def confusion(pred: ClassMask, truth: ClassMask) -> ConfusionMatrix:
    """Tally over pixels whose truth is not INVALID."""
    if pred.shape != truth.shape:
        raise ArgumentError(
            f"Prediction {pred.width}x{pred.height} does not match "
            f"truth {truth.width}x{truth.height}"
        )
    valid = truth.labels != ClassCode.INVALID
    t = truth.labels[valid].astype(np.int64) - 1
    p = pred.labels[valid].astype(np.int64) - 1
    if (p < 0).any():
        raise ArgumentError("Prediction is INVALID on a pixel with valid truth")
    counts = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES**2)
    return ConfusionMatrix(counts.reshape(NUM_CLASSES, NUM_CLASSES))


def metrics(matrix: ConfusionMatrix, cls: ClassCode = ClassCode.WATER) -> Metrics:
    """Precision, recall and IoU of one class; 0/0 counts as 0."""
    k = _index(cls)
    counts = matrix.counts
    tp = counts[k, k]
    fp = counts[:, k].sum() - tp
    fn = counts[k, :].sum() - tp
    return Metrics(_ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tp, tp + fp + fn))


# --- PR curves --------------------------------------------------------------


class PrPoint(NamedTuple):
    threshold: float
    precision: float
    recall: float


class OperatingPoint(NamedTuple):
    threshold: float
    precision: float
    recall: float
    # False when no point reaches the requested recall
    qualified: bool


@dataclass(frozen=True)
class PrCurve:
    points: Sequence[PrPoint]

    def __post_init__(self):
        thresholds = [p.threshold for p in self.points]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ArgumentError("PR curve thresholds must be strictly increasing")
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


def pr_curve(
    water_probs, truths, thresholds: Optional[Sequence[float]] = None
) -> PrCurve:
    """Water precision/recall when a pixel counts as WATER iff p >= threshold.

    `water_probs` and `truths` are one H x W map and mask, or matching
    sequences of them; counts are pooled over all of them.
    """
    if isinstance(truths, ClassMask):
        water_probs, truths = [water_probs], [truths]
    if len(water_probs) != len(truths):
        raise ArgumentError(
            f"{len(water_probs)} probability maps for {len(truths)} masks"
        )
    values = np.unique(
        np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
    )
    if values.size == 0:
        raise ArgumentError("Threshold list is empty")

    water, other = [], []
    for probs, truth in zip(water_probs, truths):
        probs = np.asarray(probs)
        if probs.shape != truth.shape:
            raise ArgumentError(
                f"Probability map {probs.shape} does not match truth {truth.shape}"
            )
        if probs.size and (probs.min() < 0 or probs.max() > 1):
            raise ArgumentError("Water probabilities must lie in [0, 1]")
        valid = truth.labels != ClassCode.INVALID
        is_water = truth.labels == ClassCode.WATER
        water.append(probs[is_water])
        other.append(probs[valid & ~is_water])
    water = np.sort(np.concatenate(water))
    other = np.sort(np.concatenate(other))

    tp = water.size - np.searchsorted(water, values, side="left")
    fp = other.size - np.searchsorted(other, values, side="left")
    points = [
        PrPoint(float(t), _ratio(a, a + b), _ratio(a, water.size))
        for t, a, b in zip(values, tp, fp)
    ]
    return PrCurve(points)


def operating_point(curve: PrCurve, min_recall: float = MIN_RECALL) -> OperatingPoint:
    """Most precise point with recall >= `min_recall`, lowest threshold on ties.

    Falls back to the highest-recall point, flagged as not qualified.
    """
    if not len(curve):
        raise ArgumentError("PR curve is empty")
    eligible = [p for p in curve if p.recall >= min_recall]
    if eligible:
        best = max(eligible, key=lambda p: (p.precision, -p.threshold))
        return OperatingPoint(*best, qualified=True)
    best = max(curve, key=lambda p: (p.recall, p.precision, -p.threshold))
    return OperatingPoint(*best, qualified=False)


# --- segmenters and datasets ------------------------------------------------


class ModelSegmenter:
    """Scene-scale inference of a trained model"""

    def __init__(
        self,
        model: Model,
        patch_size: int = DEFAULT_PATCH,
        overlap: int = DEFAULT_OVERLAP,
        threads: int = 1,
        name: Optional[str] = None,
    ):
        self.model = model
        self.patch_size = patch_size
        self.overlap = overlap
        self.threads = threads
        self.name = name or model.kind.name

    def probabilities(self, image: MultiBandImage) -> np.ndarray:
        return scene_probabilities(
            self.model, image, self.patch_size, self.overlap, self.threads
        )

    def water_probability(self, image: MultiBandImage) -> np.ndarray:
        return self.probabilities(image)[WATER_CHANNEL]

    def segment(self, image: MultiBandImage, truth: Optional[ClassMask] = None):
        return ClassMask(labels_from_scores(self.probabilities(image)))


class ImageResult(NamedTuple):
    image_id: str
    matrix: ConfusionMatrix


@dataclass
class EvalReport:
    name: str
    images: List[ImageResult]

    @property
    def aggregate(self) -> ConfusionMatrix:
        total = ConfusionMatrix.zeros()
        for result in self.images:
            total = total + result.matrix
        return total

    def water(self) -> Metrics:
        return metrics(self.aggregate, ClassCode.WATER)


def _as_manifest(manifest) -> Manifest:
    return manifest if isinstance(manifest, Manifest) else read_manifest(manifest)


def _ordered_map(func, items, threads: int) -> list:
    if threads <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def evaluate_dataset(
    segmenter, manifest, threads: Optional[int] = None
) -> EvalReport:
    """Segment every scene of the manifest and tally it against its mask."""
    manifest = _as_manifest(manifest)
    threads = threads or get_thread_count()

    def run(entry):
        with log_state(image_id=entry.image_id):
            image, truth = manifest.load(entry)
            pred = segmenter.segment(image, truth)
            matrix = confusion(pred, truth)
            _log.debug("Evaluated image", water=metrics(matrix).iou)
        return ImageResult(entry.image_id, matrix)

    with log_timing("Evaluated dataset", logger=_log, method=segmenter.name):
        results = _ordered_map(run, manifest.entries, threads)
        report = EvalReport(segmenter.name, results)
    if report.aggregate.total == 0:
        raise EvaluationError("No valid pixels in the whole manifest")
    water = report.water()
    _log.info(
        "Water metrics",
        method=report.name,
        precision=round(water.precision, 4),
        recall=round(water.recall, 4),
        iou=round(water.iou, 4),
    )
    return report


def dataset_pr_curve(
    segmenter: ModelSegmenter,
    manifest,
    thresholds: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> PrCurve:
    manifest = _as_manifest(manifest)
    threads = threads or get_thread_count()

    def run(entry):
        image, truth = manifest.load(entry)
        return segmenter.water_probability(image), truth

    pairs = _ordered_map(run, manifest.entries, threads)
    return pr_curve([p for p, _ in pairs], [t for _, t in pairs], thresholds)


class MethodResult(NamedTuple):
    name: str
    report: EvalReport


def compare_methods(
    manifest,
    models: Mapping[str, Model],
    patch_size: int = DEFAULT_PATCH,
    overlap: int = DEFAULT_OVERLAP,
    ndwi_config=None,
    threads: Optional[int] = None,
) -> List[MethodResult]:
    """Fixed NDWI, tuned NDWI and each model, scored on the same scenes."""
    from .baselines import NdwiSegmenter, TunedNdwiSegmenter

    manifest = _as_manifest(manifest)
    segmenters = [NdwiSegmenter(ndwi_config), TunedNdwiSegmenter(ndwi_config)]
    segmenters += [
        ModelSegmenter(model, patch_size, overlap, name=name)
        for name, model in models.items()
    ]
    return [
        MethodResult(seg.name, evaluate_dataset(seg, manifest, threads))
        for seg in segmenters
    ]


# --- reports ----------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_report_csv(report: EvalReport, path) -> None:
    rows = [
        [result.image_id, *map(_fmt, metrics(result.matrix))]
        for result in report.images
    ]
    rows.append(["AGGREGATE", *map(_fmt, report.water())])
    header = ["image_id", "precision_water", "recall_water", "iou_water"]
    path = write_csv(path, header, rows)
    _log.info("Wrote report", path=str(path), images=len(report.images))


def write_confusion_csv(report: EvalReport, path) -> None:
    """Aggregate 3x3 counts, one row per truth class."""
    names = [code.name.lower() for code in OUTPUT_CLASSES]
    rows = (
        [name] + [int(c) for c in row]
        for name, row in zip(names, report.aggregate.counts)
    )
    path = write_csv(path, ["truth"] + [f"pred_{name}" for name in names], rows)
    _log.info("Wrote confusion matrix", path=str(path))


def write_pr_csv(curve: PrCurve, path) -> None:
    rows = ([_fmt(v) for v in point] for point in curve)
    path = write_csv(path, ["threshold", "precision", "recall"], rows)
    _log.info("Wrote PR curve", path=str(path), points=len(curve))


def percent(value: float) -> str:
    return f"{100 * value:.2f}"


def svg_points(points: Iterable) -> str:
    return " ".join(f"{x:.1f},{y:.1f}" for x, y in points)


def get_template(template_name: str):
    environment = Environment(
        loader=PackageLoader("floodseg", "templates"),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    environment.filters["percent"] = percent
    environment.filters["svg_points"] = svg_points
    return environment.get_template(template_name)


PLOT_SIZE = (480, 360)
PLOT_MARGIN = 48
CURVE_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


class _Plot(NamedTuple):
    width: int
    height: int
    left: int
    top: int
    right: int
    bottom: int

    def x(self, recall: float) -> float:
        return self.left + recall * (self.right - self.left)

    def y(self, precision: float) -> float:
        return self.bottom - precision * (self.bottom - self.top)


def render_pr_svg(
    curves: Mapping[str, PrCurve], path, min_recall: float = MIN_RECALL
) -> None:
    """Precision over recall, one polyline per curve, dashed recall marker."""
    if not curves:
        raise ArgumentError("Nothing to plot")
    width, height = PLOT_SIZE
    plot = _Plot(
        width=width,
        height=height,
        left=PLOT_MARGIN,
        top=PLOT_MARGIN // 2,
        right=width - PLOT_MARGIN // 2,
        bottom=height - PLOT_MARGIN,
    )
    series: List[Dict] = []
    for pos, (name, curve) in enumerate(curves.items()):
        chosen = operating_point(curve, min_recall)
        series.append(
            {
                "name": name,
                "color": CURVE_COLORS[pos % len(CURVE_COLORS)],
                "points": [(plot.x(p.recall), plot.y(p.precision)) for p in curve],
                "chosen": (plot.x(chosen.recall), plot.y(chosen.precision)),
                "threshold": chosen.threshold,
            }
        )
    content = get_template("pr_curve.svg").render(
        plot=plot,
        curves=series,
        marker_x=plot.x(min_recall),
        min_recall=min_recall,
        ticks=[i / 5 for i in range(6)],
    )
    path = Path(path)
    path.write_text(content)
    _log.info("Rendered PR curve", path=str(path), curves=len(series))


def render_results_table(
    results: Sequence[MethodResult], path=None, title: str = "Water segmentation"
) -> str:
    rows = [{"name": r.name, "water": r.report.water()} for r in results]
    content = get_template("results_table.md").render(title=title, rows=rows)
    if path is not None:
        Path(path).write_text(content)
        _log.info("Wrote results table", path=str(path))
    return content
