"""Tests for `floodseg.nnet`."""
import unittest

import numpy as np
import pytest

from floodseg import ArgumentError, FormatError, NumericError, ShapeError
from floodseg.nnet import (
    ConvLayer,
    Model,
    ModelKind,
    Relu,
    Standardize,
    Tensor,
    build_linear,
    build_scnn,
    conv2d_backward,
    conv2d_forward,
    count_flops,
    count_params,
    decode_model,
    encode_model,
    flops_breakdown,
    forward,
    labels_from_scores,
    load_model,
    predict,
    relu_backward,
    relu_forward,
    save_model,
    softmax,
)
from floodseg.raster import ClassCode, MultiBandImage, default_bands
from floodseg.training import LossConfig, combined_loss

STEP = 1e-5


def _relu_pattern(model, x):
    _, inputs = model.forward(x, keep=True)
    return [
        inp > 0 for inp, layer in zip(inputs, model.layers) if isinstance(layer, Relu)
    ]


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


SEEDS = range(5)


def _small_scnn(seed):
    return build_scnn(bands=2, widths=(3, 4, 4), seed=seed, dtype=np.float64)


def _numeric(fn, array, idx):
    old = array[idx]
    array[idx] = old + STEP
    plus = fn()
    array[idx] = old - STEP
    minus = fn()
    array[idx] = old
    return (plus - minus) / (2 * STEP)


def _check_model_gradients(model, x, loss_fn):
    """Sampled finite differences of `loss_fn(scores)` for every parameter.

    Samples whose step flips a ReLU are skipped; returns how many were checked.
    """
    model.zero_grad()
    scores, inputs = model.forward(x, keep=True)
    _, dscores = loss_fn(scores)
    model.backward(inputs, dscores)
    base = _relu_pattern(model, x)
    rng = np.random.default_rng(0)
    checked = 0
    for param in model.parameters():
        flat = param.value.reshape(-1)
        for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            old = flat[idx]
            patterns = []
            values = []
            for value in (old + STEP, old - STEP):
                flat[idx] = value
                values.append(loss_fn(model.forward(x))[0])
                patterns.append(_relu_pattern(model, x))
            flat[idx] = old
            if not all(_same_pattern(base, p) for p in patterns):
                continue
            numeric = (values[0] - values[1]) / (2 * STEP)
            analytic = param.grad.reshape(-1)[idx]
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-6)
            checked += 1
    return checked


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_backward(seed):
    rng = np.random.default_rng(seed)
    layer = ConvLayer(Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3)))
    x = rng.normal(size=(1, 2, 4, 4))
    upstream = rng.normal(size=(1, 3, 4, 4))

    def loss():
        return float((conv2d_forward(x, layer) * upstream).sum())

    dx, dw, db = conv2d_backward(x, layer, upstream)
    for idx in np.ndindex(x.shape):
        assert dx[idx] == pytest.approx(_numeric(loss, x, idx), rel=1e-4, abs=1e-8)
    for idx in np.ndindex(dw.shape):
        numeric = _numeric(loss, layer.weight.value, idx)
        assert dw[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)
    for idx in np.ndindex(db.shape):
        numeric = _numeric(loss, layer.bias.value, idx)
        assert db[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_backward(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    upstream = rng.normal(size=x.shape)
    dx = relu_backward(x, upstream)

    def loss():
        return float((relu_forward(x) * upstream).sum())

    for idx in [(0, 0, 0, 0), (1, 2, 3, 3), (0, 1, 2, 1), (1, 0, 1, 2)]:
        assert dx[idx] == pytest.approx(_numeric(loss, x, idx), rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("seed", SEEDS)
def test_scnn_parameter_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    model = _small_scnn(seed)
    x = rng.normal(size=(2, 2, 5, 6))
    upstream = rng.normal(size=(2, 3, 5, 6))

    def loss_fn(scores):
        return float((scores * upstream).sum()), upstream

    assert _check_model_gradients(model, x, loss_fn) > 20


@pytest.mark.parametrize("seed", SEEDS)
def test_scnn_combined_loss_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    model = _small_scnn(seed)
    x = rng.normal(size=(2, 2, 5, 6))
    labels = rng.integers(0, 4, size=(2, 5, 6))
    labels[0, 0, :3] = (ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD)
    config = LossConfig((1.0, 4.0, 0.5), dice_weight=0.7)

    def loss_fn(scores):
        return combined_loss(scores, labels, config)

    assert _check_model_gradients(model, x, loss_fn) > 20


@pytest.mark.parametrize("seed", SEEDS)
def test_scnn_input_gradient(seed):
    rng = np.random.default_rng(300 + seed)
    model = _small_scnn(seed)
    x = rng.normal(size=(2, 2, 5, 6))
    upstream = rng.normal(size=(2, 3, 5, 6))
    model.zero_grad()
    _, inputs = model.forward(x, keep=True)
    dx = model.backward(inputs, upstream, input_grad=True)
    assert dx.shape == x.shape
    base = _relu_pattern(model, x)
    for idx in [(0, 0, 0, 0), (1, 1, 4, 5), (0, 1, 2, 3), (1, 0, 3, 1)]:
        shifted = x.copy()
        shifted[idx] += STEP
        if not _same_pattern(base, _relu_pattern(model, shifted)):
            continue
        plus = float((model.forward(shifted) * upstream).sum())
        shifted[idx] -= 2 * STEP
        minus = float((model.forward(shifted) * upstream).sum())
        numeric = (plus - minus) / (2 * STEP)
        assert dx[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


class TestGradients(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(42)
        self.model = _small_scnn(3)
        self.x = rng.normal(size=(2, 2, 5, 6))
        self.upstream = rng.normal(size=(2, 3, 5, 6))

    def test_standardized_input_gradient(self):
        model = self.model.with_standardizer([0.5, -0.2], [2.0, 0.25])
        model.zero_grad()
        _, inputs = model.forward(self.x, keep=True)
        dx = model.backward(inputs, self.upstream, input_grad=True)
        idx = (0, 1, 2, 2)
        x = self.x.copy()
        x[idx] += STEP
        plus = float((model.forward(x) * self.upstream).sum())
        x[idx] -= 2 * STEP
        minus = float((model.forward(x) * self.upstream).sum())
        assert dx[idx] == pytest.approx((plus - minus) / (2 * STEP), rel=1e-4)

    def test_gradients_accumulate(self):
        self.model.zero_grad()
        for _ in range(2):
            _, inputs = self.model.forward(self.x, keep=True)
            self.model.backward(inputs, self.upstream)
        doubled = [p.grad.copy() for p in self.model.parameters()]
        self.model.zero_grad()
        _, inputs = self.model.forward(self.x, keep=True)
        self.model.backward(inputs, self.upstream)
        for once, twice in zip(self.model.parameters(), doubled):
            assert np.allclose(2 * once.grad, twice)


class TestArchitecture(unittest.TestCase):
    def test_param_counts(self):
        assert count_params(build_linear()) == 42
        assert count_params(build_scnn()) == 229_379

    def test_scnn_layout(self):
        model = build_scnn()
        shapes = [c.weight.shape for c in model.conv_layers]
        assert shapes == [
            (64, 13, 3, 3),
            (128, 64, 3, 3),
            (128, 128, 3, 3),
            (3, 128, 1, 1),
        ]
        assert model.kind == ModelKind.SCNN

    def test_flops(self):
        model = build_scnn()
        pixels = 64 * 64
        conv = 2 * pixels * (13 * 64 * 9 + 64 * 128 * 9 + 128 * 128 * 9 + 128 * 3)
        breakdown = flops_breakdown(model, 64, 64)
        assert breakdown["conv"] == conv
        assert breakdown["relu"] == pixels * (64 + 128 + 128)
        assert breakdown["softmax"] == pixels * 3 * 5
        assert breakdown["standardize"] == 0
        assert count_flops(model, 64, 64, 13) == sum(breakdown.values())
        assert conv == pytest.approx(1.88e9, rel=0.01)

    def test_flops_standardize(self):
        model = build_linear().with_standardizer(np.zeros(13), np.ones(13))
        assert flops_breakdown(model, 2, 2)["standardize"] == 2 * 4 * 13
        assert count_params(model) == 42

    def test_flops_band_mismatch(self):
        with pytest.raises(ArgumentError):
            count_flops(build_linear(), 8, 8, bands=4)

    def test_seeded_builds_are_identical(self):
        a, b = build_scnn(seed=9), build_scnn(seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.value, pb.value)
        c = build_scnn(seed=10)
        assert not np.array_equal(a.parameters()[0].value, c.parameters()[0].value)

    def test_last_layer_must_emit_three_classes(self):
        layer = ConvLayer(Tensor(np.zeros((2, 4, 1, 1))), Tensor(np.zeros(2)))
        with pytest.raises(ArgumentError):
            Model(ModelKind.SCNN, [layer])

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ConvLayer(Tensor(np.zeros((3, 4, 2, 2))), Tensor(np.zeros(3)))

    def test_linear_must_be_single_1x1(self):
        scnn = build_scnn(bands=2, widths=(4,))
        with pytest.raises(ArgumentError):
            Model(ModelKind.LINEAR, scnn.layers)


def _conv(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, float)
    return ConvLayer(Tensor(weight), Tensor(bias))


class TestPrimitives(unittest.TestCase):
    def test_all_ones_kernel_counts_neighbours(self):
        out = conv2d_forward(np.ones((1, 1, 4, 4)), _conv(np.ones((1, 1, 3, 3))))
        assert out[0, 0].tolist() == [
            [4, 6, 6, 4],
            [6, 9, 9, 6],
            [6, 9, 9, 6],
            [4, 6, 6, 4],
        ]

    def test_identity_kernel(self):
        weight = np.zeros((2, 2, 3, 3))
        weight[0, 0, 1, 1] = weight[1, 1, 1, 1] = 1
        x = np.random.default_rng(5).normal(size=(2, 2, 5, 7))
        assert np.array_equal(conv2d_forward(x, _conv(weight)), x)

    def test_conv_bias(self):
        layer = _conv(np.zeros((2, 1, 1, 1)), [1, -2])
        out = conv2d_forward(np.zeros((1, 1, 2, 2)), layer)
        assert out[0, 0].tolist() == [[1, 1], [1, 1]]
        assert out[0, 1].tolist() == [[-2, -2], [-2, -2]]

    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert relu_forward(x).tolist() == [0, 0, 2]
        assert relu_backward(x, np.ones(3)).tolist() == [0, 0, 1]

    def test_softmax_of_equal_scores(self):
        probs = softmax(np.zeros((1, 3, 1, 1)))
        assert probs.ravel() == pytest.approx([1 / 3] * 3)

    def test_conv_stack_is_translation_equivariant_inside(self):
        model = build_scnn(bands=2, widths=(3, 4, 4), seed=6, dtype=np.float64)
        x = np.random.default_rng(6).normal(size=(1, 2, 20, 20))
        full = model.forward(x)
        crop = model.forward(x[:, :, 2:, 3:])
        # three 3x3 layers see 3 pixels past the border
        m = 3
        assert np.allclose(crop[..., m:-m, m:-m], full[..., 2 + m : -m, 3 + m : -m])


class TestInference(unittest.TestCase):
    def test_linear_is_a_per_pixel_affine_map(self):
        model = build_linear(bands=4, seed=1)
        x = np.random.default_rng(0).random((1, 4, 3, 5)).astype(np.float32)
        weight = model.conv_layers[0].weight.value[:, :, 0, 0]
        bias = model.conv_layers[0].bias.value
        expected = np.einsum("oc,nchw->nohw", weight, x) + bias[None, :, None, None]
        assert np.allclose(forward(model, x), expected, atol=1e-6)

    def test_shape_preserved(self):
        model = build_scnn(bands=3, widths=(4, 4, 4))
        for h, w in [(1, 1), (7, 3), (16, 16)]:
            assert forward(model, np.zeros((2, 3, h, w))).shape == (2, 3, h, w)

    def test_scnn_keeps_spatial_dims(self):
        model = build_scnn()
        assert forward(model, np.zeros((1, 13, 64, 64))).shape == (1, 3, 64, 64)
        narrow = build_scnn(widths=(4, 4, 4))
        assert forward(narrow, np.zeros((1, 13, 256, 256))).shape == (1, 3, 256, 256)

    def test_zero_weights_predict_land(self):
        rng = np.random.default_rng(3)
        image = MultiBandImage(default_bands(13), rng.random((13, 6, 5)))
        for model in (build_linear(), build_scnn(widths=(4, 4, 4))):
            for param in model.parameters():
                param.value[...] = 0
            assert (predict(model, image).labels == ClassCode.LAND).all()

    def test_water_favouring_linear_model(self):
        model = build_linear(bands=2)
        layer = model.conv_layers[0]
        layer.weight.value[...] = 0
        layer.bias.value[...] = 0
        # channels are LAND, WATER, CLOUD
        layer.weight.value[1, 0, 0, 0] = 1.0
        layer.weight.value[0, 1, 0, 0] = 1.0
        data = np.stack([np.full((3, 3), 0.6), np.full((3, 3), 0.1)])
        mask = predict(model, MultiBandImage(default_bands(2), data))
        assert (mask.labels == ClassCode.WATER).all()

    def test_wrong_band_count(self):
        with pytest.raises(ArgumentError):
            forward(build_linear(bands=13), np.zeros((1, 4, 8, 8)))

    def test_non_finite_output(self):
        model = build_linear(bands=1)
        model.conv_layers[0].weight.value[...] = 3e38
        with pytest.raises(NumericError):
            forward(model, np.full((1, 1, 2, 2), 3e38, dtype=np.float32))

    def test_softmax_sums_to_one_and_is_stable(self):
        scores = np.array([[[[1000.0]], [[1001.0]], [[-1000.0]]]])
        probs = softmax(scores)
        assert np.isfinite(probs).all()
        assert probs.sum(axis=1) == pytest.approx(1.0)
        assert probs[0, 1, 0, 0] > probs[0, 0, 0, 0]

    def test_labels_map_channels_to_codes(self):
        scores = np.zeros((3, 1, 4))
        scores[0, 0, 0] = 1
        scores[1, 0, 1] = 1
        scores[2, 0, 2] = 1
        labels = labels_from_scores(scores)
        assert labels.tolist() == [
            [ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD, ClassCode.LAND]
        ]
        assert ClassCode.INVALID not in labels

    def test_predict_mask_shape(self):
        image = MultiBandImage(default_bands(13), np.zeros((13, 8, 6)))
        mask = predict(build_linear(), image)
        assert mask.shape == (8, 6)


class TestPersistence(unittest.TestCase):
    def test_roundtrip(self):
        model = build_scnn(bands=3, widths=(4, 5, 6), seed=2).with_standardizer(
            [0.1, 0.2, 0.3], [1.0, 2.0, 3.0]
        )
        back = decode_model(encode_model(model))
        assert back.kind == ModelKind.SCNN
        x = np.random.default_rng(1).random((1, 3, 6, 6)).astype(np.float32)
        assert np.array_equal(forward(back, x), forward(model, x))

    def test_linear_kind_inferred(self):
        back = decode_model(encode_model(build_linear()))
        assert back.kind == ModelKind.LINEAR

    def test_save_load(self):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.wfm"
            save_model(build_linear(seed=4), path)
            back = load_model(path)
        assert count_params(back) == 42

    def test_truncated(self):
        payload = encode_model(build_linear())
        with pytest.raises(FormatError):
            decode_model(payload[:-2])

    def test_bad_magic(self):
        payload = encode_model(build_linear())
        with pytest.raises(FormatError) as err:
            decode_model(b"XXXX" + payload[4:])
        assert err.value.field == "magic"

    def test_unknown_layer(self):
        payload = encode_model(build_linear())
        with pytest.raises(FormatError):
            decode_model(payload[:8] + (9).to_bytes(4, "little") + payload[12:])

    def test_trailing(self):
        with pytest.raises(FormatError):
            decode_model(encode_model(build_linear()) + b"\0")


def test_standardize_rejects_zero_std():
    with pytest.raises(ArgumentError):
        Standardize([0.0], [0.0])
