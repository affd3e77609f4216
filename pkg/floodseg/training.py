"""Losses, augmentation and the SGD loop that fits a `Model` to a manifest.

Loss functions take N x 3 x H x W scores and N x H x W class codes and
return `(loss, d_loss/d_scores)`. INVALID pixels carry no weight anywhere.
"""
from dataclasses import dataclass, field, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from structlog import get_logger

from . import ArgumentError, LossError, NumericError, make_rng
from .logs import log_state, log_timing, write_csv
from .nnet import NUM_CLASSES, OUTPUT_CLASSES, Model, ModelKind, log_softmax, softmax
from .raster import ClassCode, ClassMask, MultiBandImage, tile

_log = get_logger(__name__)

# Training-split class frequencies (LAND, WATER, CLOUD) of the published dataset.
PUBLISHED_FRACTIONS = (0.3719, 0.0258, 0.5635)
WEIGHT_SOURCES = ("observed", "published", "equal")
RIGHT_ANGLES = (0, 90, 180, 270)
MIN_STD = 1e-6


def inverse_frequency_weights(
    fractions: Sequence[float], normalise: bool = True
) -> Tuple[float, float, float]:
    """1 / fraction per class (LAND, WATER, CLOUD), scaled to mean 1."""
    values = np.asarray(fractions, dtype=np.float64)
    if values.shape != (NUM_CLASSES,):
        raise ArgumentError(f"Need {NUM_CLASSES} class fractions, got {len(values)}")
    if not (values > 0).all():
        raise ArgumentError(f"Class fractions must be > 0: {tuple(fractions)}")
    weights = 1.0 / values
    if normalise:
        weights = weights / weights.mean()
    return tuple(float(w) for w in weights)


@dataclass(frozen=True)
class LossConfig:
    # None: derived by `train` from TrainConfig.class_weights
    class_weights: Optional[Tuple[float, float, float]] = (1.0, 1.0, 1.0)
    dice_weight: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.class_weights is not None:
            weights = tuple(float(w) for w in self.class_weights)
            if len(weights) != NUM_CLASSES:
                raise ArgumentError(f"Need {NUM_CLASSES} class weights, got {weights}")
            if not all(np.isfinite(w) and w > 0 for w in weights):
                raise ArgumentError(f"Class weights must be finite and > 0: {weights}")
            object.__setattr__(self, "class_weights", weights)
        if self.dice_weight < 0:
            raise ArgumentError(f"dice_weight must be >= 0, got {self.dice_weight}")
        if not self.epsilon > 0:
            raise ArgumentError(f"epsilon must be > 0, got {self.epsilon}")


# --- losses -----------------------------------------------------------------


def _label_array(truth) -> np.ndarray:
    if isinstance(truth, ClassMask):
        return truth.labels[None]
    labels = np.asarray(truth)
    return labels[None] if labels.ndim == 2 else labels


def _targets(scores: np.ndarray, truth) -> Tuple[np.ndarray, np.ndarray]:
    """One-hot targets N x 3 x H x W and the N x H x W validity mask."""
    labels = _label_array(truth)
    if scores.ndim != 4 or scores.shape[1] != NUM_CLASSES:
        raise ArgumentError(f"Scores must be N x {NUM_CLASSES} x H x W: {scores.shape}")
    if labels.shape != (scores.shape[0],) + scores.shape[2:]:
        raise ArgumentError(
            f"Truth shape {labels.shape} does not match scores shape {scores.shape}"
        )
    valid = labels != ClassCode.INVALID
    if not valid.any():
        raise LossError("Every pixel of the batch is INVALID")
    onehot = np.stack([labels == code for code in OUTPUT_CLASSES], axis=1)
    return onehot.astype(scores.dtype), valid


def weighted_ce(
    scores: np.ndarray, truth, weights: Sequence[float]
) -> Tuple[float, np.ndarray]:
    """Class-weighted cross-entropy, normalised by the total valid weight."""
    onehot, _ = _targets(scores, truth)
    class_w = np.asarray(weights, dtype=scores.dtype)[None, :, None, None]
    pixel_w = (onehot * class_w).sum(axis=1)
    total_w = pixel_w.sum()

    logp = log_softmax(scores, axis=1)
    loss = -(pixel_w * (onehot * logp).sum(axis=1)).sum() / total_w
    probs = np.exp(logp)
    grad = pixel_w[:, None] * (probs - onehot) / total_w
    return float(loss), grad


def dice_loss(
    scores: np.ndarray, truth, epsilon: float = 1e-6
) -> Tuple[float, np.ndarray]:
    """Generalised soft Dice: per-class terms weighted by 1 / (truth count)^2."""
    onehot, valid = _targets(scores, truth)
    mask = valid[:, None].astype(scores.dtype)
    probs = softmax(scores, axis=1) * mask

    axes = (0, 2, 3)
    inter = (probs * onehot).sum(axis=axes)
    pred_sum = probs.sum(axis=axes)
    true_sum = onehot.sum(axis=axes)
    # classes absent from the truth get weight 0
    gen_w = np.divide(
        1.0, true_sum**2, out=np.zeros_like(true_sum), where=true_sum > 0
    )
    alpha = gen_w / gen_w.sum()

    num = 2 * inter + epsilon
    den = pred_sum + true_sum + epsilon
    loss = float((alpha * (1 - num / den)).sum())

    shape = (1, NUM_CLASSES, 1, 1)
    dprobs = (
        alpha.reshape(shape)
        * (num.reshape(shape) - 2 * onehot * den.reshape(shape))
        / (den**2).reshape(shape)
    ) * mask
    grad = probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))
    return loss, grad


def combined_loss(
    scores: np.ndarray, truth, config: LossConfig
) -> Tuple[float, np.ndarray]:
    if config.class_weights is None:
        raise ArgumentError("LossConfig.class_weights is unresolved")
    loss, grad = weighted_ce(scores, truth, config.class_weights)
    if config.dice_weight:
        dice, dice_grad = dice_loss(scores, truth, config.epsilon)
        loss += config.dice_weight * dice
        grad = grad + config.dice_weight * dice_grad
    return loss, grad


# --- augmentation -----------------------------------------------------------


def _contains(bounds: Tuple[float, float], value: float) -> bool:
    low, high = bounds
    return low <= value <= high


@dataclass(frozen=True)
class AugmentationParams:
    flip_horizontal: float = 0.5
    flip_vertical: float = 0.5
    rotations: Tuple[int, ...] = RIGHT_ANGLES
    # per-band multiplicative factor
    jitter: Tuple[float, float] = (0.95, 1.05)
    # variance of the Gaussian shot-noise stand-in is max(x, 0) * scale
    poisson_scale: float = 1e-3
    brightness: Tuple[float, float] = (-0.02, 0.02)
    contrast: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("flip_horizontal", "flip_vertical"):
            if not 0 <= getattr(self, name) <= 1:
                raise ArgumentError(f"{name} must be a probability")
        rotations = tuple(int(r) for r in self.rotations)
        if not rotations or 0 not in rotations or set(rotations) - set(RIGHT_ANGLES):
            raise ArgumentError(
                f"rotations must include 0 and be right angles: {rotations}"
            )
        object.__setattr__(self, "rotations", rotations)
        for name in ("jitter", "brightness", "contrast"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name, identity in (("jitter", 1.0), ("brightness", 0.0), ("contrast", 1.0)):
            if not _contains(getattr(self, name), identity):
                raise ArgumentError(f"{name} range must contain {identity}")
        if self.jitter[0] <= 0 or self.contrast[0] < 0:
            raise ArgumentError("jitter and contrast factors must be positive")
        if self.poisson_scale < 0:
            raise ArgumentError("poisson_scale must be >= 0")

    @property
    def rotates(self) -> bool:
        return self.rotations != (0,)

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(
            flip_horizontal=0.0,
            flip_vertical=0.0,
            rotations=(0,),
            jitter=(1.0, 1.0),
            poisson_scale=0.0,
            brightness=(0.0, 0.0),
            contrast=(1.0, 1.0),
        )


def _draw(rng, bounds: Tuple[float, float], size=None):
    low, high = bounds
    return rng.uniform(low, high, size=size)


def augment_arrays(
    data: np.ndarray, labels: np.ndarray, params: AugmentationParams, rng
) -> Tuple[np.ndarray, np.ndarray]:
    """`augment` on a C x H x W array and its H x W labels."""
    if params.rotates and data.shape[1] != data.shape[2]:
        raise ArgumentError(
            f"Rotations need a square patch, got {data.shape[2]}x{data.shape[1]}"
        )
    if params.flip_horizontal and rng.random() < params.flip_horizontal:
        data, labels = data[:, :, ::-1], labels[:, ::-1]
    if params.flip_vertical and rng.random() < params.flip_vertical:
        data, labels = data[:, ::-1, :], labels[::-1, :]
    if params.rotates:
        quarter = params.rotations[rng.integers(len(params.rotations))] // 90
        if quarter:
            data = np.rot90(data, quarter, axes=(1, 2))
            labels = np.rot90(labels, quarter)

    photometric = False
    if params.jitter != (1.0, 1.0):
        factors = _draw(rng, params.jitter, size=data.shape[0]).astype(data.dtype)
        data = data * factors[:, None, None]
        photometric = True
    if params.poisson_scale:
        sigma = np.sqrt(np.maximum(data, 0) * params.poisson_scale)
        data = data + (rng.standard_normal(data.shape) * sigma).astype(data.dtype)
        photometric = True
    if params.brightness != (0.0, 0.0):
        data = data + data.dtype.type(_draw(rng, params.brightness))
        photometric = True
    if params.contrast != (1.0, 1.0):
        gamma = data.dtype.type(_draw(rng, params.contrast))
        mean = data.mean(axis=(1, 2), keepdims=True)
        data = (data - mean) * gamma + mean
        photometric = True
    if photometric:
        data = np.maximum(data, 0)
    return np.ascontiguousarray(data), np.ascontiguousarray(labels)


def augment(
    image: MultiBandImage, mask: ClassMask, params: AugmentationParams, rng
) -> Tuple[MultiBandImage, ClassMask]:
    """Random flips and right-angle rotations of image and mask together,
    then photometric noise on the image only."""
    if mask.shape != (image.height, image.width):
        raise ArgumentError("Image and mask dimensions differ")
    data, labels = augment_arrays(image.data, mask.labels, params, rng)
    return MultiBandImage(image.bands, data), ClassMask(labels)


# --- loop -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    patch_size: int = 64
    standardize: bool = True
    augment: bool = True
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    class_weights: str = "observed"

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.patch_size < 1:
            raise ArgumentError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.class_weights not in WEIGHT_SOURCES:
            raise ArgumentError(
                f"class_weights must be one of {WEIGHT_SOURCES}, "
                f"got {self.class_weights!r}"
            )

    @classmethod
    def for_model(cls, kind: ModelKind, **kws) -> "TrainConfig":
        """Defaults with the learning rate suited to the architecture."""
        kws.setdefault("learning_rate", 1e-2 if kind == ModelKind.LINEAR else 1e-3)
        return cls(**kws)


class EpochLog(NamedTuple):
    epoch: int
    step: int
    loss: float
    val_water_iou: Optional[float] = None
    val_water_recall: Optional[float] = None


class TrainResult(NamedTuple):
    model: Model
    history: List[EpochLog]


class Trainer:
    """SGD with momentum over a model it owns exclusively"""

    def __init__(self, model: Model, train_cfg: TrainConfig, loss_cfg: LossConfig):
        self.model = model
        self.train_cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.params = model.parameters()
        self.velocity = [np.zeros_like(p.value) for p in self.params]
        self.steps = 0

    def step(self, images: np.ndarray, labels: np.ndarray) -> float:
        """One update on a batch; returns the batch loss before the update."""
        try:
            self.model.zero_grad()
            x = np.asarray(images, dtype=self.model.dtype)
            scores, inputs = self.model.forward(x, keep=True)
            loss, dscores = combined_loss(scores, labels, self.loss_cfg)
            if not np.isfinite(loss):
                raise NumericError("loss is not finite")
            self.model.backward(inputs, dscores)
        except NumericError as err:
            message = f"Training diverged at step {self.steps}: {err}"
            raise NumericError(message) from err

        lr, momentum = self.train_cfg.learning_rate, self.train_cfg.momentum
        for param, velocity in zip(self.params, self.velocity):
            velocity *= momentum
            velocity += param.grad
            param.value -= param.value.dtype.type(lr) * velocity
        self.steps += 1
        _log.debug("Training step", step=self.steps, loss=round(loss, 6))
        return loss


def resolve_class_weights(
    source: str, manifest=None
) -> Tuple[float, float, float]:
    if source == "equal":
        return (1.0, 1.0, 1.0)
    if source == "published":
        return inverse_frequency_weights(PUBLISHED_FRACTIONS)
    if source == "observed":
        if manifest is None:
            raise ArgumentError("Observed class weights need a training manifest")
        fractions = manifest.class_fractions()
        if min(fractions) == 0:
            raise ArgumentError(
                f"A class is absent from the training data {fractions}; "
                "use 'equal' or 'published' class weights"
            )
        return inverse_frequency_weights(fractions)
    raise ArgumentError(f"Unknown class weight source {source!r}")


def _load_patches(manifest, patch_size: int) -> Tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for _entry, image, mask in manifest.scenes():
        if min(image.height, image.width) < patch_size:
            raise ArgumentError(
                f"Scene {image.width}x{image.height} is smaller than the "
                f"training patch size {patch_size}"
            )
        for patch in tile(image, mask, patch_size, patch_size):
            if (patch.mask.labels != ClassCode.INVALID).any():
                images.append(patch.image.data)
                labels.append(patch.mask.labels)
    if not images:
        raise ArgumentError("The training manifest holds no valid patches")
    return np.stack(images), np.stack(labels)


def fit_standardizer(images: np.ndarray, labels: np.ndarray):
    """Per-band mean and std over the valid pixels of a patch stack."""
    valid = labels != ClassCode.INVALID
    pixels = np.moveaxis(images, 1, -1)[valid].astype(np.float64)
    mean = pixels.mean(axis=0)
    std = np.maximum(pixels.std(axis=0), MIN_STD)
    return mean, std


def _validate(model: Model, manifest, patch_size: int) -> Tuple[float, float]:
    from .evaluation import ModelSegmenter, evaluate_dataset

    report = evaluate_dataset(ModelSegmenter(model, patch_size), manifest, threads=1)
    _precision, recall, iou = report.water()
    return iou, recall


def train(
    model: Model,
    train_manifest,
    train_cfg: Optional[TrainConfig] = None,
    loss_cfg: Optional[LossConfig] = None,
    val_manifest=None,
) -> TrainResult:
    """Fit a copy of `model` on the patches of `train_manifest`.

    Bit-identical results for identical inputs and seed.
    """
    train_cfg = train_cfg or TrainConfig.for_model(model.kind)
    loss_cfg = loss_cfg or LossConfig(class_weights=None)
    if loss_cfg.class_weights is None:
        weights = resolve_class_weights(train_cfg.class_weights, train_manifest)
        loss_cfg = replace(loss_cfg, class_weights=weights)
    _log.info(
        "Training",
        kind=model.kind.name,
        epochs=train_cfg.epochs,
        learning_rate=train_cfg.learning_rate,
        class_weights=[round(w, 4) for w in loss_cfg.class_weights],
    )

    images, labels = _load_patches(train_manifest, train_cfg.patch_size)
    if train_cfg.standardize:
        model = model.with_standardizer(*fit_standardizer(images, labels))
    else:
        model = model.copy()

    trainer = Trainer(model, train_cfg, loss_cfg)
    rng = make_rng(train_cfg.seed)
    params = train_cfg.augmentation if train_cfg.augment else None
    history = []
    for epoch in range(train_cfg.epochs):
        with log_state(epoch=epoch), log_timing("Epoch done", logger=_log):
            order = rng.permutation(len(images))
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = order[start : start + train_cfg.batch_size]
                x, y = images[batch], labels[batch]
                if params is not None:
                    pairs = [
                        augment_arrays(xi, yi, params, rng) for xi, yi in zip(x, y)
                    ]
                    x = np.stack([p[0] for p in pairs])
                    y = np.stack([p[1] for p in pairs])
                losses.append(trainer.step(x, y))
            record = EpochLog(epoch, trainer.steps, float(np.mean(losses)))
            if val_manifest is not None:
                iou, recall = _validate(model, val_manifest, train_cfg.patch_size)
                record = record._replace(val_water_iou=iou, val_water_recall=recall)
            _log.info(
                "Epoch summary",
                step=record.step,
                loss=round(record.loss, 6),
                val_water_iou=record.val_water_iou,
            )
        history.append(record)
    return TrainResult(model, history)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def training_log_csv(history: Iterable[EpochLog], path) -> None:
    rows = (
        [
            rec.epoch,
            rec.step,
            _fmt(rec.loss),
            _fmt(rec.val_water_iou),
            _fmt(rec.val_water_recall),
        ]
        for rec in history
    )
    header = ["epoch", "step", "loss", "val_water_iou", "val_water_recall"]
    path = write_csv(path, header, rows)
    _log.info("Wrote training log", path=str(path))
