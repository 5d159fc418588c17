"""Model description, the ``.cdm`` container, and the plaintext reference engines.

Weights are snapped to the fixed-point grid (multiples of 2^-frac_bits_weights)
when a :class:`ModelSpec` is built, so the float engine, the integer engine
and the encrypted pipeline all evaluate the same network.
"""

import json
import logging
import math
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from cipherdenoise.ciphertensor import (
    PlainTensor,
    conv2d_array,
    conv2d_transpose_array,
)
from cipherdenoise.encoding import (
    DEFAULT_FRAC_BITS,
    FixedPointParams,
    LayerBudget,
    ScaleTag,
    dequantize_array,
    overflow_budget,
    quantize,
    quantize_array,
)
from cipherdenoise.errors import ModelFormatError, ShapeMismatchError, StorageError

logger = logging.getLogger(__name__)

CDM_MAGIC = b"CDM1"
CDM_VERSION = 1


class LayerKind(str, Enum):
    CONV = "conv"
    CONV_TRANSPOSE = "conv_transpose"
    LINEAR = "linear"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    RESIDUAL_ADD = "residual_add"

    @property
    def is_activation(self) -> bool:
        return self in (LayerKind.RELU, LayerKind.LEAKY_RELU)

    @property
    def has_weights(self) -> bool:
        return self in (LayerKind.CONV, LayerKind.CONV_TRANSPOSE, LayerKind.LINEAR)


INPUT_SOURCE = -1


@dataclass(frozen=True, eq=False)
class LayerDesc:
    """One layer. ``source`` is the residual operand: a layer index or -1 for the input.

    Conv weights are (out, in, kh, kw); transposed conv weights (in, out, kh, kw);
    linear weights (out, in_features). ``threshold`` shifts the ReLU cut-off.
    """

    kind: LayerKind
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    alpha: float = 0.0
    threshold: float = 0.0
    source: int = INPUT_SOURCE

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind.has_weights:
            if self.weight is None:
                raise ModelFormatError(f"{self.kind.value} layer needs a weight array")
            ndim = 2 if self.kind is LayerKind.LINEAR else 4
            weight = np.asarray(self.weight, dtype=np.float64)
            if weight.ndim != ndim:
                raise ModelFormatError(
                    f"{self.kind.value} weight must have {ndim} dimensions, got {weight.shape}"
                )
            object.__setattr__(self, "weight", weight)
            transposed = self.kind is LayerKind.CONV_TRANSPOSE
            out_features = weight.shape[1] if transposed else weight.shape[0]
            bias = np.zeros(out_features) if self.bias is None else self.bias
            bias = np.asarray(bias, dtype=np.float64).reshape(-1)
            if bias.shape != (out_features,):
                raise ModelFormatError(
                    f"bias of {bias.size} entries for {out_features} output channels"
                )
            object.__setattr__(self, "bias", bias)
        if self.stride < 1 or self.padding < 0:
            raise ModelFormatError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        assert self.weight is not None
        axis = 1 if self.kind is LayerKind.CONV_TRANSPOSE else 0
        return int(self.weight.shape[axis])


def _snap(values: np.ndarray, frac_bits: int) -> np.ndarray:
    return np.ldexp(np.round(np.ldexp(values, frac_bits)), -frac_bits)


@dataclass(frozen=True)
class QuantizedLayer:
    """A layer with integer weights and the scales it consumes and produces."""

    index: int
    desc: LayerDesc
    in_bits: int
    out_bits: int
    weight: PlainTensor | None = None
    bias: PlainTensor | None = None
    alpha: int = 0
    threshold: int = 0
    source_shift: int = 0
    input_shift: int = 0

    @property
    def kind(self) -> LayerKind:
        return self.desc.kind


@dataclass(frozen=True)
class QuantizedModel:
    spec: "ModelSpec"
    input_frac_bits: int
    layers: tuple[QuantizedLayer, ...]

    @property
    def output_bits(self) -> int:
        return self.layers[-1].out_bits if self.layers else self.input_frac_bits


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """An ordered layer stack plus the fixed-point layout it runs at."""

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerDesc, ...]
    frac_bits_weights: int = DEFAULT_FRAC_BITS
    frac_bits_input: int = DEFAULT_FRAC_BITS
    _plans: dict[int, QuantizedModel] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_plans", {})
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self._snapped(layer) for layer in self.layers))
        self._validate()

    def _snapped(self, layer: LayerDesc) -> LayerDesc:
        changes: dict[str, Any] = {
            "alpha": math.ldexp(
                quantize(layer.alpha, self.frac_bits_weights), -self.frac_bits_weights
            ),
            "threshold": math.ldexp(
                quantize(layer.threshold, self.frac_bits_input), -self.frac_bits_input
            ),
        }
        if layer.kind.has_weights:
            assert layer.weight is not None and layer.bias is not None
            changes["weight"] = _snap(layer.weight, self.frac_bits_weights)
            changes["bias"] = _snap(layer.bias, self.frac_bits_weights)
        return replace(layer, **changes)

    def _validate(self) -> None:
        previous_activation = False
        for index, layer in enumerate(self.layers):
            if layer.kind.is_activation and previous_activation:
                raise ModelFormatError(f"layer {index}: two activations in a row")
            previous_activation = layer.kind.is_activation
            if layer.kind is LayerKind.RESIDUAL_ADD and not INPUT_SOURCE <= layer.source < index:
                raise ModelFormatError(
                    f"layer {index}: residual source {layer.source} is not an earlier layer"
                )
        try:
            self.output_shapes(self.input_shape)
        except ShapeMismatchError as exc:
            raise ModelFormatError(str(exc)) from exc

    @property
    def linear(self) -> bool:
        """True when no layer needs the activation exchange."""
        return not any(layer.kind.is_activation for layer in self.layers)

    @property
    def activation_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind.is_activation)

    def output_shapes(self, input_shape: Sequence[int]) -> list[tuple[int, int, int]]:
        """Shape after every layer for an input of ``input_shape``."""
        shapes: list[tuple[int, int, int]] = []
        current = (int(input_shape[0]), int(input_shape[1]), int(input_shape[2]))
        for index, layer in enumerate(self.layers):
            current = _layer_output_shape(index, layer, current, shapes, tuple(input_shape))
            shapes.append(current)
        return shapes

    def quantize(self, input_frac_bits: int | None = None) -> QuantizedModel:
        """Integer weights and per-layer scales for inputs at ``input_frac_bits``."""
        bits = self.frac_bits_input if input_frac_bits is None else input_frac_bits
        plan = self._plans.get(bits)
        if plan is None:
            plan = _quantize(self, bits)
            self._plans[bits] = plan
        return plan

    def budget_trace(
        self, input_frac_bits: int, input_bound: float = 1.0, perturbance_bound: int = 1
    ) -> list[LayerBudget]:
        plan = self.quantize(input_frac_bits)
        bounds: list[float] = []
        trace: list[LayerBudget] = []
        current = input_bound
        for ql in plan.layers:
            layer = ql.desc
            peak: float
            if layer.kind.has_weights:
                assert layer.weight is not None and layer.bias is not None
                if layer.kind is LayerKind.CONV_TRANSPOSE:
                    gain = np.abs(layer.weight).sum(axis=(0, 2, 3)).max()
                else:
                    gain = np.abs(layer.weight).reshape(layer.weight.shape[0], -1).sum(axis=1).max()
                current = current * float(gain) + float(np.abs(layer.bias).max(initial=0.0))
                peak = current
            elif layer.kind is LayerKind.RELU and layer.threshold:
                # the exchange sees 2(q - t) + 1
                peak = (2 * (current + abs(layer.threshold)) + 1) * perturbance_bound
            elif layer.kind is LayerKind.RELU:
                peak = current * perturbance_bound
            elif layer.kind is LayerKind.LEAKY_RELU:
                peak = current * perturbance_bound
                current = current * max(1.0, abs(layer.alpha))
            else:
                source = input_bound if layer.source == INPUT_SOURCE else bounds[layer.source]
                current = current + source
                peak = current
            bounds.append(current)
            bits = ql.in_bits if layer.kind.is_activation else ql.out_bits
            trace.append(LayerBudget(ql.index, layer.kind.value, bits, peak))
        return trace

    def check_budget(
        self,
        n: int,
        perturbance_bound: int = 1,
        input_bound: float = 1.0,
        input_frac_bits: int | None = None,
    ) -> int:
        """Run :func:`overflow_budget` against modulus ``n``; returns max frac bits."""
        bits = self.frac_bits_input if input_frac_bits is None else input_frac_bits
        params = FixedPointParams(frac_bits=bits, n=n)
        max_bits, _ = overflow_budget(self, params, input_bound, perturbance_bound)
        return max_bits

    def with_layer(self, index: int, layer: LayerDesc) -> "ModelSpec":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


def _layer_output_shape(
    index: int,
    layer: LayerDesc,
    current: tuple[int, int, int],
    shapes: list[tuple[int, int, int]],
    input_shape: tuple[int, ...],
) -> tuple[int, int, int]:
    c, h, w = current
    if layer.kind is LayerKind.CONV:
        assert layer.weight is not None
        out_c, in_c, kh, kw = layer.weight.shape
        if in_c != c:
            raise ShapeMismatchError(f"layer {index}: conv expects {in_c} channels, gets {c}")
        oh = (h + 2 * layer.padding - kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - kw) // layer.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatchError(f"layer {index}: kernel {kh}x{kw} does not fit {h}x{w}")
        return out_c, oh, ow
    if layer.kind is LayerKind.CONV_TRANSPOSE:
        assert layer.weight is not None
        in_c, out_c, kh, kw = layer.weight.shape
        if in_c != c:
            raise ShapeMismatchError(
                f"layer {index}: conv_transpose expects {in_c} channels, gets {c}"
            )
        oh = (h - 1) * layer.stride - 2 * layer.padding + kh
        ow = (w - 1) * layer.stride - 2 * layer.padding + kw
        if oh <= 0 or ow <= 0:
            raise ShapeMismatchError(f"layer {index}: conv_transpose output is empty")
        return out_c, oh, ow
    if layer.kind is LayerKind.LINEAR:
        assert layer.weight is not None
        out_f, in_f = layer.weight.shape
        if in_f != c * h * w:
            raise ShapeMismatchError(
                f"layer {index}: linear expects {in_f} inputs, gets {c * h * w}"
            )
        return out_f, 1, 1
    if layer.kind is LayerKind.RESIDUAL_ADD:
        source = input_shape if layer.source == INPUT_SOURCE else shapes[layer.source]
        if tuple(source) != current:
            raise ShapeMismatchError(
                f"layer {index}: residual source shape {tuple(source)} != {current}"
            )
    return current


def _quantize(spec: ModelSpec, input_bits: int) -> QuantizedModel:
    wbits = spec.frac_bits_weights
    out_bits_by_layer: list[int] = []
    layers: list[QuantizedLayer] = []
    bits = input_bits
    for index, layer in enumerate(spec.layers):
        if layer.kind.has_weights:
            assert layer.weight is not None and layer.bias is not None
            out_bits = bits + wbits
            ql = QuantizedLayer(
                index=index,
                desc=layer,
                in_bits=bits,
                out_bits=out_bits,
                weight=PlainTensor.integers(quantize_array(layer.weight, wbits), wbits),
                # biases are pre-aligned to the scale they meet at runtime
                bias=PlainTensor.integers(quantize_array(layer.bias, out_bits), out_bits),
            )
        elif layer.kind is LayerKind.RELU:
            ql = QuantizedLayer(
                index, layer, bits, bits, threshold=quantize(layer.threshold, bits)
            )
        elif layer.kind is LayerKind.LEAKY_RELU:
            alpha = quantize(layer.alpha, wbits)
            ql = QuantizedLayer(index, layer, bits, bits + wbits, alpha=alpha)
        else:
            if layer.source == INPUT_SOURCE:
                source_bits = input_bits
            else:
                source_bits = out_bits_by_layer[layer.source]
            out_bits = max(bits, source_bits)
            ql = QuantizedLayer(
                index,
                layer,
                bits,
                out_bits,
                source_shift=out_bits - source_bits,
                input_shift=out_bits - bits,
            )
        layers.append(ql)
        out_bits_by_layer.append(ql.out_bits)
        bits = ql.out_bits
    return QuantizedModel(spec=spec, input_frac_bits=input_bits, layers=tuple(layers))


# Reference engines


def _as_chw(image: PlainTensor) -> np.ndarray:
    data = image.data
    if data.ndim == 2:
        data = data.reshape(1, *data.shape)
    if data.ndim != 3:
        raise ShapeMismatchError(f"images are (C, H, W) or (H, W), got {image.shape}")
    return data


def infer_plain_float(model: ModelSpec, image: PlainTensor) -> PlainTensor:
    """Float64 forward pass, the denoising-quality reference."""
    source = np.asarray(_as_chw(image), dtype=np.float64)
    model.output_shapes(source.shape)
    outputs: list[np.ndarray] = []
    x = source
    for layer in model.layers:
        x = _float_layer(layer, x, outputs, source)
        outputs.append(x)
    return PlainTensor.reals(x)


def _float_layer(
    layer: LayerDesc, x: np.ndarray, outputs: list[np.ndarray], image_input: np.ndarray
) -> np.ndarray:
    if layer.kind is LayerKind.CONV:
        assert layer.weight is not None and layer.bias is not None
        out = conv2d_array(x, layer.weight, layer.stride, layer.padding)
        return out + layer.bias[:, None, None]
    if layer.kind is LayerKind.CONV_TRANSPOSE:
        assert layer.weight is not None and layer.bias is not None
        out = conv2d_transpose_array(x, layer.weight, layer.stride, layer.padding)
        return out + layer.bias[:, None, None]
    if layer.kind is LayerKind.LINEAR:
        assert layer.weight is not None and layer.bias is not None
        return (layer.weight @ x.reshape(-1) + layer.bias).reshape(-1, 1, 1)
    if layer.kind is LayerKind.RELU:
        return np.where(x >= layer.threshold, x, 0.0)
    if layer.kind is LayerKind.LEAKY_RELU:
        return np.where(x >= 0, x, layer.alpha * x)
    source = image_input if layer.source == INPUT_SOURCE else outputs[layer.source]
    return x + source


FixedHook = Callable[[QuantizedLayer, PlainTensor], None]


def infer_plain_fixed(
    model: ModelSpec,
    image: PlainTensor,
    hook: FixedHook | None = None,
) -> PlainTensor:
    """Integer-exact forward pass mirroring the encrypted pipeline.

    ``image`` holds signed integers at the model's input scale (its
    ``scale`` field). Each layer's output is passed to ``hook`` if given.
    """
    if not image.is_integer:
        raise ShapeMismatchError("the fixed-point engine takes integer-encoded images")
    x = _as_chw(image)
    model.output_shapes(x.shape)
    plan = model.quantize(image.scale.total_frac_bits)
    outputs: list[np.ndarray] = []
    for ql in plan.layers:
        x = _fixed_layer(ql, x, outputs, _as_chw(image))
        outputs.append(x)
        if hook is not None:
            hook(ql, PlainTensor(x.shape, x, ScaleTag(ql.out_bits)))
    return PlainTensor(x.shape, x, ScaleTag(plan.output_bits))


def _fixed_layer(
    ql: QuantizedLayer, x: np.ndarray, outputs: list[np.ndarray], image_input: np.ndarray
) -> np.ndarray:
    layer = ql.desc
    if ql.kind is LayerKind.CONV:
        assert ql.weight is not None and ql.bias is not None
        out = conv2d_array(x, ql.weight.data, layer.stride, layer.padding)
        return out + ql.bias.data[:, None, None]
    if ql.kind is LayerKind.CONV_TRANSPOSE:
        assert ql.weight is not None and ql.bias is not None
        out = conv2d_transpose_array(x, ql.weight.data, layer.stride, layer.padding)
        return out + ql.bias.data[:, None, None]
    if ql.kind is LayerKind.LINEAR:
        assert ql.weight is not None and ql.bias is not None
        return (np.dot(ql.weight.data, x.reshape(-1)) + ql.bias.data).reshape(-1, 1, 1)
    out = np.empty(x.shape, dtype=object)
    if ql.kind is LayerKind.RELU:
        for idx, q in np.ndenumerate(x):
            out[idx] = q if q >= ql.threshold else 0
        return out
    if ql.kind is LayerKind.LEAKY_RELU:
        positive = 1 << (ql.out_bits - ql.in_bits)
        for idx, q in np.ndenumerate(x):
            out[idx] = q * positive if q >= 0 else q * ql.alpha
        return out
    source = image_input if layer.source == INPUT_SOURCE else outputs[layer.source]
    lifted_input = x * (1 << ql.input_shift)
    lifted_source = source * (1 << ql.source_shift)
    return lifted_input + lifted_source


def encode_image(model: ModelSpec, image: np.ndarray, frac_bits: int | None = None) -> PlainTensor:
    """Quantize a real image into the integer tensor the fixed engine and client consume."""
    bits = model.frac_bits_input if frac_bits is None else frac_bits
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr.reshape(1, *arr.shape)
    return PlainTensor(arr.shape, quantize_array(arr, bits), ScaleTag(bits))


def quantization_drift(model: ModelSpec, image: np.ndarray) -> list[float]:
    """Per-layer max |float - fixed| over a real image."""
    encoded = encode_image(model, image)
    fixed_outputs: list[np.ndarray] = []

    def collect(ql: QuantizedLayer, out: PlainTensor) -> None:
        fixed_outputs.append(dequantize_array(out.data, out.scale))

    infer_plain_fixed(model, encoded, hook=collect)
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    float_outputs: list[np.ndarray] = []
    current = x
    for layer in model.layers:
        current = _float_layer(layer, current, float_outputs, x)
        float_outputs.append(current)
    drift = [float(np.max(np.abs(f - q))) for f, q in zip(float_outputs, fixed_outputs)]
    for index, value in enumerate(drift):
        logger.debug("[cipherdenoise] layer %d drift %.3g", index, value)
    return drift


# .cdm container


def _layer_header(layer: LayerDesc) -> dict[str, Any]:
    header: dict[str, Any] = {
        "kind": layer.kind.value,
        "stride": layer.stride,
        "padding": layer.padding,
    }
    if layer.kind.has_weights:
        assert layer.weight is not None and layer.bias is not None
        header["weight_shape"] = list(layer.weight.shape)
        header["bias_shape"] = list(layer.bias.shape)
    if layer.kind is LayerKind.LEAKY_RELU:
        header["alpha"] = layer.alpha
    if layer.kind is LayerKind.RELU and layer.threshold:
        header["threshold"] = layer.threshold
    if layer.kind is LayerKind.RESIDUAL_ADD:
        header["source"] = layer.source
    return header


def save_model(model: ModelSpec, path: str | Path) -> None:
    """Magic, little-endian u32 header length, JSON header, float32 weight blob."""
    header = {
        "version": CDM_VERSION,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "frac_bits_weights": model.frac_bits_weights,
        "frac_bits_input": model.frac_bits_input,
        "layers": [_layer_header(layer) for layer in model.layers],
    }
    encoded = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blobs = []
    for layer in model.layers:
        if layer.kind.has_weights:
            assert layer.weight is not None and layer.bias is not None
            blobs.append(layer.weight.astype("<f4").tobytes())
            blobs.append(layer.bias.astype("<f4").tobytes())
    prefix = CDM_MAGIC + struct.pack("<I", len(encoded))
    try:
        Path(path).write_bytes(prefix + encoded + b"".join(blobs))
    except OSError as exc:
        raise StorageError(f"cannot write model {path}: {exc}") from exc
    logger.info("[cipherdenoise] Saved model %s to %s", model.name, path)


def _take(
    blob: memoryview, offset: int, shape: Sequence[int], index: int
) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if end > len(blob):
        raise ModelFormatError(f"layer {index}: weight blob truncated")
    values = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
    return values, end


def parse_model(data: bytes) -> ModelSpec:
    if data[:4] != CDM_MAGIC:
        raise ModelFormatError("not a .cdm model (bad magic)")
    try:
        (length,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8 : 8 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ModelFormatError(f"model header does not parse: {exc}") from exc
    blob = memoryview(data)[8 + length :]
    offset = 0
    layers: list[LayerDesc] = []
    try:
        for index, entry in enumerate(header["layers"]):
            kind = LayerKind(entry["kind"])
            weight = bias = None
            if kind.has_weights:
                weight, offset = _take(blob, offset, entry["weight_shape"], index)
                bias, offset = _take(blob, offset, entry["bias_shape"], index)
            try:
                layers.append(
                    LayerDesc(
                        kind=kind,
                        weight=weight,
                        bias=bias,
                        stride=int(entry.get("stride", 1)),
                        padding=int(entry.get("padding", 0)),
                        alpha=float(entry.get("alpha", 0.0)),
                        threshold=float(entry.get("threshold", 0.0)),
                        source=int(entry.get("source", INPUT_SOURCE)),
                    )
                )
            except ModelFormatError as exc:
                raise ModelFormatError(f"layer {index}: {exc}") from exc
        if offset != len(blob):
            raise ModelFormatError(f"{len(blob) - offset} unused bytes after the weight blob")
        return ModelSpec(
            name=str(header["name"]),
            input_shape=tuple(header["input_shape"]),  # type: ignore[arg-type]
            layers=tuple(layers),
            frac_bits_weights=int(header["frac_bits_weights"]),
            frac_bits_input=int(header.get("frac_bits_input", DEFAULT_FRAC_BITS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model header is incomplete: {exc}") from exc


def load_model(
    path: str | Path, n: int | None = None, perturbance_bound: int = 1
) -> ModelSpec:
    """Read, validate and quantize a ``.cdm`` model.

    When ``n`` is given the overflow budget is checked against it and an
    :class:`~cipherdenoise.errors.OverflowBudgetError` names the required key size.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from exc
    model = parse_model(data)
    model.quantize()
    if n is not None:
        model.check_budget(n, perturbance_bound)
    logger.info(
        "[cipherdenoise] Loaded model %s: %d layers, %d activations",
        model.name,
        len(model.layers),
        model.activation_count,
    )
    return model


# Demo architectures


def demo_model(
    seed: int = 0,
    channels: int = 8,
    input_shape: tuple[int, int, int] = (1, 32, 32),
    frac_bits: int = DEFAULT_FRAC_BITS,
) -> ModelSpec:
    """conv -> ReLU -> conv -> ReLU -> conv_transpose, plus a residual from the input."""
    rng = np.random.default_rng(seed)
    in_c = input_shape[0]
    return ModelSpec(
        name="demo-redcnn",
        input_shape=input_shape,
        frac_bits_weights=frac_bits,
        frac_bits_input=frac_bits,
        layers=(
            LayerDesc(
                LayerKind.CONV,
                weight=rng.normal(0.0, 0.3, (channels, in_c, 3, 3)),
                bias=rng.normal(0.0, 0.01, channels),
                padding=1,
            ),
            LayerDesc(LayerKind.RELU),
            LayerDesc(
                LayerKind.CONV,
                weight=rng.normal(0.0, 0.1, (channels, channels, 3, 3)),
                bias=rng.normal(0.0, 0.01, channels),
                padding=1,
            ),
            LayerDesc(LayerKind.RELU),
            LayerDesc(
                LayerKind.CONV_TRANSPOSE,
                weight=rng.normal(0.0, 0.05, (channels, in_c, 3, 3)),
                bias=rng.normal(0.0, 0.01, in_c),
                padding=1,
            ),
            LayerDesc(LayerKind.RESIDUAL_ADD, source=INPUT_SOURCE),
        ),
    )


def demo_linear_model(
    seed: int = 0,
    channels: int = 4,
    input_shape: tuple[int, int, int] = (1, 32, 32),
    frac_bits: int = DEFAULT_FRAC_BITS,
) -> ModelSpec:
    """conv -> conv_transpose plus a residual; no activation, so one round trip."""
    rng = np.random.default_rng(seed)
    in_c = input_shape[0]
    return ModelSpec(
        name="demo-linear",
        input_shape=input_shape,
        frac_bits_weights=frac_bits,
        frac_bits_input=frac_bits,
        layers=(
            LayerDesc(
                LayerKind.CONV,
                weight=rng.normal(0.0, 0.2, (channels, in_c, 3, 3)),
                bias=rng.normal(0.0, 0.01, channels),
                padding=1,
            ),
            LayerDesc(
                LayerKind.CONV_TRANSPOSE,
                weight=rng.normal(0.0, 0.05, (channels, in_c, 3, 3)),
                bias=rng.normal(0.0, 0.01, in_c),
                padding=1,
            ),
            LayerDesc(LayerKind.RESIDUAL_ADD, source=INPUT_SOURCE),
        ),
    )
