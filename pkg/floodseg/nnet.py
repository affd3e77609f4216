"""Minimal differentiable engine for fully convolutional segmentation.

Activations are plain numpy arrays laid out N x C x H x W; trainable weights
are `Tensor`s holding a value and a gradient buffer. Models are sequential
stacks of `ConvLayer`, `Relu` and (optionally, first) `Standardize`.

WFM model file (little-endian)::

    "WFM1" | u32 layer_count | per layer: u32 type code, then
      CONV:        u32 cout | u32 cin | u32 k | float32 weights | float32 bias
      RELU:        nothing
      STANDARDIZE: u32 channels | float32 mean | float32 std
"""
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from structlog import get_logger

from . import ArgumentError, FormatError, NumericError, ShapeError, make_rng
from .raster import ClassCode, ClassMask, MultiBandImage

_log = get_logger(__name__)

NUM_CLASSES = 3
# Output channel i predicts class code OUTPUT_CLASSES[i]; INVALID is never emitted.
OUTPUT_CLASSES = (ClassCode.LAND, ClassCode.WATER, ClassCode.CLOUD)
SCNN_WIDTHS = (64, 128, 128)
WFM_MAGIC = b"WFM1"

RELU_FLOPS = 1
SOFTMAX_FLOPS = 5
STANDARDIZE_FLOPS = 2


class ModelKind(IntEnum):
    LINEAR = 0
    SCNN = 1


class LayerType(IntEnum):
    CONV = 0
    RELU = 1
    STANDARDIZE = 2


def check_finite(values: np.ndarray, what: str):
    if not np.isfinite(values).all():
        raise NumericError(f"Non-finite values in {what}")


@dataclass
class Tensor:
    """Array of float32 (float64 for gradient checks) with a gradient slot"""

    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        value = np.asarray(self.value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float32)
        check_finite(value, "tensor")
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise ShapeError(
                f"Gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.value.dtype)
        else:
            self.grad += grad

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.value.astype(dtype))


# --- primitive ops ----------------------------------------------------------


def conv2d_forward(x: np.ndarray, layer: "ConvLayer") -> np.ndarray:
    """Same-padded, stride-1 cross-correlation plus bias."""
    x = np.asarray(x)
    weight = layer.weight.value
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"Conv input shape {x.shape} does not fit weight shape {weight.shape}"
        )
    n, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"Conv input shape {x.shape} has an empty spatial axis")
    cout, _, k, _ = weight.shape
    pad = layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    out = np.empty((cout, n, h, w), dtype=np.result_type(x, weight))
    out[...] = layer.bias.value[:, None, None, None]
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i : i + h, j : j + w]
            out += np.tensordot(weight[:, :, i, j], window, axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    check_finite(out, "conv2d output")
    return out


def conv2d_backward(
    x: np.ndarray, layer: "ConvLayer", dout: np.ndarray, input_grad: bool = True
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of a conv layer w.r.t. (input, weight, bias)."""
    weight = layer.weight.value
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    if dout.shape != (n, cout, h, w):
        raise ShapeError(
            f"Upstream gradient shape {dout.shape} does not match output shape "
            f"{(n, cout, h, w)}"
        )
    pad = layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dtype = np.result_type(x, weight, dout)

    dw = np.zeros(weight.shape, dtype=dtype)
    dxp = np.zeros(xp.shape, dtype=dtype) if input_grad else None
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i : i + h, j : j + w]
            dw[:, :, i, j] = np.tensordot(dout, window, axes=([0, 2, 3], [0, 2, 3]))
            if input_grad:
                back = np.tensordot(weight[:, :, i, j], dout, axes=([0], [1]))
                dxp[:, :, i : i + h, j : j + w] += back.transpose(1, 0, 2, 3)
    db = dout.sum(axis=(0, 2, 3)).astype(dtype)

    dx = None
    if input_grad:
        dx = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])
    return dx, dw, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return dout * (x > 0)


def log_softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(
    scores: np.ndarray, axis: int = 1, classes: int = NUM_CLASSES
) -> np.ndarray:
    """Per-pixel class probabilities, stabilised by max subtraction."""
    scores = np.asarray(scores)
    if scores.shape[axis] != classes:
        raise ShapeError(
            f"Softmax expects {classes} classes on axis {axis}, "
            f"got shape {scores.shape}"
        )
    shifted = scores - scores.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


# --- layers -----------------------------------------------------------------


@dataclass
class ConvLayer:
    """Cout x Cin x k x k weights, stride 1, same padding"""

    weight: Tensor
    bias: Tensor

    layer_type = LayerType.CONV

    def __post_init__(self):
        shape = self.weight.shape
        if len(shape) != 4 or shape[2] != shape[3] or shape[2] % 2 == 0:
            raise ShapeError(f"Conv weights must be Cout x Cin x k x k, k odd: {shape}")
        if self.bias.shape != (shape[0],):
            raise ShapeError(
                f"Bias shape {self.bias.shape} does not match weight shape {shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @classmethod
    def he_uniform(cls, cin: int, cout: int, k: int, rng, dtype=np.float32):
        limit = np.sqrt(6.0 / (cin * k * k))
        weight = rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dtype)
        return cls(Tensor(weight), Tensor(np.zeros(cout, dtype=dtype)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return conv2d_forward(x, self)

    def backward(self, x: np.ndarray, dout: np.ndarray, input_grad=True):
        dx, dw, db = conv2d_backward(x, self, dout, input_grad=input_grad)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weight.astype(dtype), self.bias.astype(dtype))


class Relu:
    layer_type = LayerType.RELU

    def forward(self, x):
        return relu_forward(x)

    def backward(self, x, dout, input_grad=True):
        return relu_backward(x, dout) if input_grad else None

    def parameters(self) -> List[Tensor]:
        return []

    def astype(self, dtype) -> "Relu":
        return Relu()


@dataclass
class Standardize:
    """Fixed per-band (x - mean) / std; not trained."""

    mean: np.ndarray
    std: np.ndarray

    layer_type = LayerType.STANDARDIZE

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.ndim != 1 or self.mean.shape != self.std.shape:
            raise ShapeError(
                f"Standardize mean {self.mean.shape} and std {self.std.shape} "
                "must be matching vectors"
            )
        check_finite(self.mean, "standardize mean")
        if not (self.std > 0).all():
            raise ArgumentError("Standardize std must be > 0")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def forward(self, x):
        mean = self.mean.astype(x.dtype)[None, :, None, None]
        std = self.std.astype(x.dtype)[None, :, None, None]
        return (x - mean) / std

    def backward(self, x, dout, input_grad=True):
        if not input_grad:
            return None
        return dout / self.std.astype(dout.dtype)[None, :, None, None]

    def parameters(self) -> List[Tensor]:
        return []

    def astype(self, dtype) -> "Standardize":
        return Standardize(self.mean.copy(), self.std.copy())


Layer = Union[ConvLayer, Relu, Standardize]


# --- model ------------------------------------------------------------------


@dataclass
class Model:
    """Sequential map from a C-band patch to 3 per-pixel class scores"""

    kind: ModelKind
    layers: List[Layer]

    def __post_init__(self):
        convs = self.conv_layers
        if not convs:
            raise ArgumentError("A model needs at least one conv layer")
        if not isinstance(self.layers[-1], ConvLayer):
            raise ArgumentError("The last layer must be a conv layer")
        if convs[-1].out_channels != NUM_CLASSES:
            raise ArgumentError(
                f"The last conv layer must emit {NUM_CLASSES} classes, "
                f"got {convs[-1].out_channels}"
            )
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, Standardize) and pos != 0:
                raise ArgumentError("Standardize may only be the first layer")
        if self.standardizer and self.standardizer.channels != convs[0].in_channels:
            raise ArgumentError("Standardize channels do not match the first conv")
        for prev, nxt in zip(convs, convs[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ShapeError(
                    f"Conv {prev.weight.shape} cannot feed conv {nxt.weight.shape}"
                )
        if self.kind == ModelKind.LINEAR and (
            len(convs) != 1 or convs[0].kernel_size != 1
        ):
            raise ArgumentError("A LINEAR model is a single 1x1 conv")

    @property
    def conv_layers(self) -> List[ConvLayer]:
        return [x for x in self.layers if isinstance(x, ConvLayer)]

    @property
    def standardizer(self) -> Optional[Standardize]:
        first = self.layers[0]
        return first if isinstance(first, Standardize) else None

    @property
    def in_bands(self) -> int:
        return self.conv_layers[0].in_channels

    @property
    def dtype(self):
        return self.conv_layers[0].weight.value.dtype

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def astype(self, dtype) -> "Model":
        return Model(self.kind, [layer.astype(dtype) for layer in self.layers])

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def with_standardizer(self, mean, std) -> "Model":
        """Copy of the model with a fixed input standardisation in front."""
        layers = [x.astype(self.dtype) for x in self.layers]
        if isinstance(layers[0], Standardize):
            layers = layers[1:]
        return Model(self.kind, [Standardize(mean, std)] + layers)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Scores for a batch; with `keep` also the input of every layer."""
        inputs = []
        out = x
        for layer in self.layers:
            if keep:
                inputs.append(out)
            out = layer.forward(out)
        if keep:
            return out, inputs
        return out

    def backward(self, inputs: List[np.ndarray], dscores: np.ndarray, input_grad=False):
        """Accumulate parameter gradients; returns d(loss)/d(input) on request."""
        grad = dscores
        last = len(self.layers) - 1
        first_trainable = min(
            pos for pos, x in enumerate(self.layers) if isinstance(x, ConvLayer)
        )
        for pos in range(last, -1, -1):
            need = input_grad or pos > first_trainable
            grad = self.layers[pos].backward(inputs[pos], grad, input_grad=need)
            if grad is None:
                break
        return grad


def build_linear(bands: int = 13, seed: int = 0, dtype=np.float32) -> Model:
    """Per-pixel linear classifier: one 1x1 conv (bands -> 3)."""
    rng = make_rng(seed)
    return Model(
        ModelKind.LINEAR, [ConvLayer.he_uniform(bands, NUM_CLASSES, 1, rng, dtype)]
    )


def build_scnn(
    bands: int = 13,
    widths: Sequence[int] = SCNN_WIDTHS,
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    """Three 3x3 conv + ReLU blocks followed by a 1x1 classifier."""
    rng = make_rng(seed)
    layers: List[Layer] = []
    cin = bands
    for width in widths:
        layers.append(ConvLayer.he_uniform(cin, width, 3, rng, dtype))
        layers.append(Relu())
        cin = width
    layers.append(ConvLayer.he_uniform(cin, NUM_CLASSES, 1, rng, dtype))
    return Model(ModelKind.SCNN, layers)


def _as_batch(batch) -> np.ndarray:
    if isinstance(batch, MultiBandImage):
        return batch.data[None]
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"Expected an N x C x H x W batch, got shape {x.shape}")
    return x


def forward(model: Model, batch) -> np.ndarray:
    """Per-pixel class scores (N x 3 x H x W) for a batch or single image."""
    x = _as_batch(batch)
    if x.shape[1] != model.in_bands:
        raise ArgumentError(
            f"Model expects {model.in_bands} bands, input has {x.shape[1]}"
        )
    return model.forward(x)


def labels_from_scores(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    """Argmax over classes mapped to class codes; ties pick the lowest code."""
    codes = np.array([int(c) for c in OUTPUT_CLASSES], dtype=np.uint8)
    return codes[np.argmax(scores, axis=axis)]


def predict(model: Model, patch: MultiBandImage) -> ClassMask:
    scores = forward(model, patch)[0]
    return ClassMask(labels_from_scores(scores))


def count_params(model: Model) -> int:
    return sum(p.size for p in model.parameters())


def flops_breakdown(model: Model, height: int, width: int) -> Dict[str, int]:
    """Operation counts per kind for one H x W inference.

    A multiply-accumulate counts as 2 ops; ReLU 1 and softmax 5 per element.
    """
    pixels = height * width
    counts = {"standardize": 0, "conv": 0, "relu": 0, "softmax": 0}
    channels = model.in_bands
    for layer in model.layers:
        if isinstance(layer, Standardize):
            counts["standardize"] += STANDARDIZE_FLOPS * pixels * layer.channels
        elif isinstance(layer, ConvLayer):
            k = layer.kernel_size
            macs = pixels * layer.in_channels * layer.out_channels * k * k
            counts["conv"] += 2 * macs
            channels = layer.out_channels
        else:
            counts["relu"] += RELU_FLOPS * pixels * channels
    counts["softmax"] = SOFTMAX_FLOPS * pixels * NUM_CLASSES
    return counts


def count_flops(
    model: Model, height: int, width: int, bands: Optional[int] = None
) -> int:
    if bands is not None and bands != model.in_bands:
        raise ArgumentError(f"Model expects {model.in_bands} bands, got {bands}")
    return sum(flops_breakdown(model, height, width).values())


# --- persistence ------------------------------------------------------------

_U32 = struct.Struct("<I")


def encode_model(model: Model) -> bytes:
    parts = [WFM_MAGIC, _U32.pack(len(model.layers))]
    for layer in model.layers:
        parts.append(_U32.pack(layer.layer_type))
        if isinstance(layer, ConvLayer):
            cout, cin, k, _ = layer.weight.shape
            parts.append(struct.pack("<III", cout, cin, k))
            parts.append(layer.weight.value.astype("<f4").tobytes())
            parts.append(layer.bias.value.astype("<f4").tobytes())
        elif isinstance(layer, Standardize):
            parts.append(_U32.pack(layer.channels))
            parts.append(layer.mean.astype("<f4").tobytes())
            parts.append(layer.std.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a WFM payload raising FormatError on truncation"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, size: int, field: str) -> bytes:
        end = self.pos + size
        if end > len(self.payload):
            raise FormatError(field, f"truncated at byte {len(self.payload)}")
        chunk = self.payload[self.pos : end]
        self.pos = end
        return chunk

    def u32(self, field: str) -> int:
        return _U32.unpack(self.take(4, field))[0]

    def floats(self, count: int, field: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, field), dtype="<f4").astype(
            np.float32
        )


def decode_model(payload: bytes) -> Model:
    reader = _Reader(payload)
    magic = reader.take(4, "magic")
    if magic != WFM_MAGIC:
        raise FormatError("magic", f"expected {WFM_MAGIC!r}, found {magic!r}")
    count = reader.u32("layer_count")
    if count == 0:
        raise FormatError("layer_count", "model has no layers")

    layers: List[Layer] = []
    for pos in range(count):
        code = reader.u32(f"layer[{pos}].type")
        if code == LayerType.CONV:
            cout, cin, k = (reader.u32(f"layer[{pos}].dims") for _ in range(3))
            weight = reader.floats(cout * cin * k * k, f"layer[{pos}].weights")
            bias = reader.floats(cout, f"layer[{pos}].bias")
            layers.append(
                ConvLayer(Tensor(weight.reshape(cout, cin, k, k)), Tensor(bias))
            )
        elif code == LayerType.RELU:
            layers.append(Relu())
        elif code == LayerType.STANDARDIZE:
            channels = reader.u32(f"layer[{pos}].dims")
            mean = reader.floats(channels, f"layer[{pos}].mean")
            std = reader.floats(channels, f"layer[{pos}].std")
            layers.append(Standardize(mean, std))
        else:
            raise FormatError(f"layer[{pos}].type", f"unknown layer code {code}")
    if reader.pos != len(payload):
        raise FormatError("payload", f"{len(payload) - reader.pos} trailing bytes")

    convs = [x for x in layers if isinstance(x, ConvLayer)]
    kind = ModelKind.SCNN
    if len(convs) == 1 and convs[0].kernel_size == 1:
        kind = ModelKind.LINEAR
    try:
        return Model(kind, layers)
    except (ArgumentError, ShapeError) as ex:
        raise FormatError("layers", str(ex)) from ex


def save_model(model: Model, path) -> None:
    path = Path(path)
    path.write_bytes(encode_model(model))
    _log.info(
        "Saved model", path=str(path), kind=model.kind.name, params=count_params(model)
    )


def load_model(path) -> Model:
    path = Path(path)
    model = decode_model(path.read_bytes())
    _log.info("Loaded model", path=str(path), kind=model.kind.name)
    return model
