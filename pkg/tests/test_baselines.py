"""Tests for `floodseg.baselines`."""
import numpy as np
import pytest

from floodseg import ArgumentError, EvaluationError
from floodseg.baselines import (
    DEFAULT_GRID,
    NdwiConfig,
    NdwiSegmenter,
    TunedNdwiSegmenter,
    classify_fixed,
    classify_index,
    grid_water_iou,
    ndwi,
    tune_threshold,
)
from floodseg.raster import BandId, ClassCode, ClassMask, MultiBandImage, default_bands
from floodseg.synthgen import SceneSpec, generate

W, L, C, I = ClassCode.WATER, ClassCode.LAND, ClassCode.CLOUD, ClassCode.INVALID
G0, G1 = BandId.generic_band(0), BandId.generic_band(1)
GENERIC = NdwiConfig(G0, G1)


def two_band(a, b):
    data = np.stack([np.asarray(a, dtype=float), np.asarray(b, dtype=float)])
    return MultiBandImage(default_bands(2), data)


def index_image(values):
    """Image whose G0/G1 NDWI equals `values` (up to float32 rounding)."""
    values = np.asarray(values, dtype=float)
    return two_band(1 + values, 1 - values)


def water_iou(pred, truth):
    valid = truth.labels != I
    p = (pred.labels == W) & valid
    t = truth.labels == W
    union = (p | t).sum()
    return (p & t).sum() / union if union else 0.0


@pytest.mark.parametrize(
    "a, b, expected",
    [(0.3, 0.1, 0.5), (0.2, 0.2, 0.0), (0.0, 0.0, 0.0), (0.0, 0.4, -1)],
)
def test_ndwi_values(a, b, expected):
    index = ndwi(two_band([[a]], [[b]]), G0, G1)
    assert index[0, 0] == pytest.approx(expected, abs=1e-7)


def test_ndwi_antisymmetric_and_scale_invariant():
    rng = np.random.default_rng(0)
    image = two_band(rng.random((8, 9)), rng.random((8, 9)))
    forward = ndwi(image, G0, G1)
    assert np.array_equal(ndwi(image, G1, G0), -forward)
    scaled = MultiBandImage(image.bands, image.data * 3.5)
    assert np.abs(ndwi(scaled, G0, G1) - forward).max() < 1e-6
    assert forward.min() >= -1 and forward.max() <= 1


def test_ndwi_missing_band():
    with pytest.raises(ArgumentError):
        ndwi(two_band([[1]], [[1]]), G0, BandId.generic_band(5))


def test_config_rejects_same_band():
    with pytest.raises(ArgumentError):
        NdwiConfig(G0, G0)


def test_config_rejects_threshold_out_of_range():
    with pytest.raises(ArgumentError):
        NdwiConfig(threshold=1.5)


def test_classify_threshold_rule():
    mask = classify_index(np.array([[0.5, -0.2]]), 0.0)
    assert mask.labels.tolist() == [[W, L]]


def test_classify_threshold_one_means_no_water():
    image = index_image([[1.0, 0.7, -1.0]])
    mask = classify_fixed(image, NdwiConfig(G0, G1, threshold=1.0))
    assert W not in mask.labels


def test_classify_keeps_invalid():
    truth = ClassMask(np.array([[I, W, L]]))
    mask = classify_index(np.array([[0.5, 0.5, 0.5]]), 0.0, truth)
    assert mask.labels.tolist() == [[I, W, W]]


def test_classify_never_emits_cloud():
    image, _ = generate(SceneSpec(width=32, height=32, seed=2, cloud_fraction=0.5))
    assert C not in classify_fixed(image).labels


def test_fixed_threshold_on_clean_scene():
    image, truth = generate(SceneSpec(seed=3, cloud_fraction=0))
    pred = classify_fixed(image)
    water = truth.labels == W
    assert ((pred.labels == W) & water).sum() / water.sum() > 0.9


def test_tune_hand_example():
    image = index_image([[0.6, 0.4, -0.1, -0.5]])
    truth = ClassMask(np.array([[W, W, L, L]]))
    threshold, iou = tune_threshold(image, truth, [-0.3, 0.2, 0.5], GENERIC)
    assert threshold == pytest.approx(0.2)
    assert iou == pytest.approx(1.0)


def test_tune_no_water_picks_smallest_threshold():
    image = index_image([[0.6, 0.4, -0.1]])
    truth = ClassMask(np.full((1, 3), L))
    assert tune_threshold(image, truth, [0.5, -0.3, 0.1], GENERIC) == (-0.3, 0.0)


def test_tune_all_invalid():
    with pytest.raises(EvaluationError):
        tune_threshold(index_image([[0.2]]), ClassMask(np.array([[I]])), None, GENERIC)


@pytest.mark.parametrize("grid", [[], [2.0], [[0.1]]])
def test_tune_bad_grid(grid):
    with pytest.raises(ArgumentError):
        tune_threshold(index_image([[0.2]]), ClassMask(np.array([[W]])), grid, GENERIC)


def test_grid_iou_matches_exhaustive_recount():
    rng = np.random.default_rng(7)
    index = np.round(rng.uniform(-1, 1, size=(12, 12)), 2)
    truth = ClassMask(rng.integers(0, 4, size=(12, 12)))
    grid = DEFAULT_GRID
    ious = grid_water_iou(index, truth, grid)
    for t, iou in zip(grid, ious):
        assert iou == pytest.approx(water_iou(classify_index(index, t), truth))


def test_tuned_beats_fixed_on_random_scenes():
    for seed in range(5):
        spec = SceneSpec(width=48, height=48, seed=seed, invalid_fraction=0.05)
        image, truth = generate(spec, muddy_water_fraction=0.3)
        _, tuned = tune_threshold(image, truth)
        fixed = water_iou(classify_fixed(image, validity=truth), truth)
        assert tuned >= fixed


def test_segmenters():
    image, truth = generate(SceneSpec(width=32, height=32, seed=9))
    assert NdwiSegmenter().name == "NDWI (thresh 0)"
    assert NdwiSegmenter().segment(image).shape == (32, 32)
    tuned = TunedNdwiSegmenter()
    assert tuned.name == "NDWI (tuned)"
    assert tuned.segment(image, truth).shape == (32, 32)
    with pytest.raises(ArgumentError):
        tuned.segment(image)


def test_tuned_segmenter_on_all_invalid_truth():
    image = index_image([[0.4, -0.2], [0.1, 0.3]])
    truth = ClassMask(np.full((2, 2), I))
    mask = TunedNdwiSegmenter(GENERIC).segment(image, truth)
    assert (mask.labels == I).all()
