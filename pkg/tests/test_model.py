"""Unit tests for model descriptions, the .cdm container and the reference engines."""

from pathlib import Path

import numpy as np
import pytest

from cipherdenoise.ciphertensor import PlainTensor
from cipherdenoise.encoding import ScaleTag, dequantize_array
from cipherdenoise.errors import (
    ModelFormatError,
    OverflowBudgetError,
    ShapeMismatchError,
    StorageError,
)
from cipherdenoise.model import (
    CDM_MAGIC,
    INPUT_SOURCE,
    LayerDesc,
    LayerKind,
    ModelSpec,
    demo_linear_model,
    demo_model,
    encode_image,
    infer_plain_fixed,
    infer_plain_float,
    load_model,
    parse_model,
    quantization_drift,
    save_model,
)


def _conv(out_c: int, in_c: int, k: int = 3, padding: int = 1, seed: int = 0) -> LayerDesc:
    rng = np.random.default_rng(seed)
    return LayerDesc(
        LayerKind.CONV,
        weight=rng.normal(0.0, 0.3, (out_c, in_c, k, k)),
        bias=rng.normal(0.0, 0.01, out_c),
        padding=padding,
    )


class TestValidation:
    def test_two_activations_in_a_row(self) -> None:
        with pytest.raises(ModelFormatError, match="layer 2: two activations"):
            ModelSpec(
                "bad",
                (1, 4, 4),
                (_conv(2, 1), LayerDesc(LayerKind.RELU), LayerDesc(LayerKind.LEAKY_RELU)),
            )

    def test_residual_source_must_be_earlier(self) -> None:
        with pytest.raises(ModelFormatError, match="residual source"):
            ModelSpec("bad", (1, 4, 4), (_conv(1, 1), LayerDesc(LayerKind.RESIDUAL_ADD, source=1)))

    def test_residual_shape_mismatch(self) -> None:
        with pytest.raises(ModelFormatError, match="layer 1"):
            ModelSpec("bad", (1, 4, 4), (_conv(2, 1), LayerDesc(LayerKind.RESIDUAL_ADD)))

    def test_channel_mismatch(self) -> None:
        with pytest.raises(ModelFormatError, match="layer 1"):
            ModelSpec("bad", (1, 4, 4), (_conv(2, 1), _conv(2, 3)))

    def test_kernel_too_large(self) -> None:
        with pytest.raises(ModelFormatError):
            ModelSpec("bad", (1, 2, 2), (_conv(1, 1, k=5, padding=0),))

    def test_weighted_layer_needs_weight(self) -> None:
        with pytest.raises(ModelFormatError):
            LayerDesc(LayerKind.CONV)

    def test_bias_size_checked(self) -> None:
        with pytest.raises(ModelFormatError, match="bias"):
            LayerDesc(LayerKind.CONV, weight=np.ones((2, 1, 3, 3)), bias=np.ones(3))

    def test_linear_input_size(self) -> None:
        with pytest.raises(ModelFormatError, match="linear"):
            ModelSpec(
                "bad", (1, 2, 2), (LayerDesc(LayerKind.LINEAR, weight=np.ones((3, 5))),)
            )


class TestProperties:
    def test_linear_flag(self) -> None:
        assert demo_linear_model().linear
        assert not demo_model().linear
        assert demo_model().activation_count == 2
        assert demo_linear_model().activation_count == 0

    def test_weights_snapped_to_grid(self) -> None:
        model = demo_model(frac_bits=8)
        for layer in model.layers:
            if layer.weight is not None:
                scaled = layer.weight * 256
                assert np.array_equal(scaled, np.round(scaled))

    def test_quantization_plan(self) -> None:
        plan = demo_model().quantize()
        assert [ql.out_bits for ql in plan.layers] == [32, 32, 48, 48, 64, 64]
        residual = plan.layers[-1]
        assert residual.source_shift == 48
        assert residual.input_shift == 0
        assert plan.output_bits == 64

    def test_leaky_plan(self) -> None:
        model = ModelSpec(
            "leaky", (1, 4, 4), (_conv(1, 1), LayerDesc(LayerKind.LEAKY_RELU, alpha=0.25))
        )
        plan = model.quantize()
        assert plan.layers[1].in_bits == 32
        assert plan.layers[1].out_bits == 48
        assert plan.layers[1].alpha == 1 << 14

    def test_with_layer(self) -> None:
        model = demo_model(channels=2, input_shape=(1, 6, 6))
        corrupted = model.with_layer(0, _conv(2, 1, seed=99))
        assert corrupted.name == model.name
        assert not np.array_equal(corrupted.layers[0].weight, model.layers[0].weight)
        assert np.array_equal(corrupted.layers[2].weight, model.layers[2].weight)


class TestEngines:
    def test_identity_model(self) -> None:
        model = ModelSpec(
            "identity", (1, 3, 3), (LayerDesc(LayerKind.CONV, weight=np.ones((1, 1, 1, 1))),)
        )
        image = np.linspace(0.0, 1.0, 9).reshape(3, 3)
        out = infer_plain_float(model, PlainTensor.reals(image[None]))
        assert np.allclose(out.data[0], image)
        fixed = infer_plain_fixed(model, encode_image(model, image))
        assert fixed.scale == ScaleTag(32)
        assert np.allclose(dequantize_array(fixed.data, fixed.scale)[0], image, atol=2.0**-17)

    def test_zero_model(self) -> None:
        model = ModelSpec(
            "zero",
            (1, 3, 3),
            (LayerDesc(LayerKind.CONV, weight=np.zeros((1, 1, 3, 3)), padding=1),),
        )
        fixed = infer_plain_fixed(model, encode_image(model, np.ones((3, 3))))
        assert all(v == 0 for v in fixed.data.flat)

    def test_fixed_tracks_float(self, tiny_model, tiny_image) -> None:
        expected = infer_plain_float(tiny_model, PlainTensor.reals(tiny_image[None]))
        fixed = infer_plain_fixed(tiny_model, encode_image(tiny_model, tiny_image))
        assert fixed.scale == ScaleTag(64)
        error = np.max(np.abs(dequantize_array(fixed.data, fixed.scale) - expected.data))
        assert error <= 10 * 2.0**-16

    def test_fixed_engine_is_deterministic(self, tiny_model, tiny_image) -> None:
        encoded = encode_image(tiny_model, tiny_image)
        assert infer_plain_fixed(tiny_model, encoded) == infer_plain_fixed(tiny_model, encoded)

    def test_hook_sees_every_layer(self, tiny_model, tiny_image) -> None:
        seen: list[int] = []
        encoded = encode_image(tiny_model, tiny_image)
        infer_plain_fixed(tiny_model, encoded, hook=lambda ql, _: seen.append(ql.index))
        assert seen == list(range(len(tiny_model.layers)))

    def test_fixed_engine_rejects_reals(self, tiny_model, tiny_image) -> None:
        with pytest.raises(ShapeMismatchError):
            infer_plain_fixed(tiny_model, PlainTensor.reals(tiny_image[None]))

    def test_threshold_relu(self) -> None:
        model = ModelSpec(
            "threshold",
            (1, 1, 4),
            (
                LayerDesc(LayerKind.CONV, weight=np.ones((1, 1, 1, 1))),
                LayerDesc(LayerKind.RELU, threshold=0.5),
            ),
        )
        image = np.array([[0.25, 0.5, 0.75, -1.0]])
        fixed = infer_plain_fixed(model, encode_image(model, image))
        assert dequantize_array(fixed.data, fixed.scale).reshape(-1).tolist() == [
            0.0,
            0.5,
            0.75,
            0.0,
        ]
        real = infer_plain_float(model, PlainTensor.reals(image[None]))
        assert real.data.reshape(-1).tolist() == [0.0, 0.5, 0.75, 0.0]

    def test_leaky_relu(self) -> None:
        model = ModelSpec(
            "leaky",
            (1, 1, 2),
            (
                LayerDesc(LayerKind.CONV, weight=np.ones((1, 1, 1, 1))),
                LayerDesc(LayerKind.LEAKY_RELU, alpha=0.25),
            ),
        )
        image = np.array([[1.0, -1.0]])
        fixed = infer_plain_fixed(model, encode_image(model, image))
        assert dequantize_array(fixed.data, fixed.scale).reshape(-1).tolist() == [1.0, -0.25]

    def test_linear_layer(self) -> None:
        weight = np.array([[1.0, 0.0, 0.5, 0.25]])
        model = ModelSpec(
            "fc", (1, 2, 2), (LayerDesc(LayerKind.LINEAR, weight=weight, bias=[0.5]),)
        )
        image = np.array([[1.0, 2.0], [2.0, 4.0]])
        out = infer_plain_float(model, PlainTensor.reals(image[None]))
        assert out.shape == (1, 1, 1)
        assert out.data.item() == pytest.approx(3.5)

    def test_quantization_drift(self, tiny_model, tiny_image) -> None:
        drift = quantization_drift(tiny_model, tiny_image)
        assert len(drift) == len(tiny_model.layers)
        assert max(drift) <= 10 * 2.0**-16


class TestContainer:
    def test_round_trip(self, tiny_model, tmp_path: Path) -> None:
        path = tmp_path / "m.cdm"
        save_model(tiny_model, path)
        assert path.read_bytes()[:4] == CDM_MAGIC
        loaded = load_model(path)
        assert loaded.name == tiny_model.name
        assert loaded.input_shape == tiny_model.input_shape
        for a, b in zip(loaded.layers, tiny_model.layers):
            assert a.kind is b.kind
            if a.weight is not None:
                assert np.array_equal(a.weight, b.weight)
                assert np.array_equal(a.bias, b.bias)
        assert loaded.layers[-1].source == INPUT_SOURCE

    def test_threshold_and_alpha_survive(self, tmp_path: Path) -> None:
        model = ModelSpec(
            "mixed",
            (1, 4, 4),
            (
                _conv(2, 1),
                LayerDesc(LayerKind.RELU, threshold=0.125),
                _conv(2, 2, seed=1),
                LayerDesc(LayerKind.LEAKY_RELU, alpha=0.5),
            ),
        )
        save_model(model, tmp_path / "m.cdm")
        loaded = load_model(tmp_path / "m.cdm")
        assert loaded.layers[1].threshold == 0.125
        assert loaded.layers[3].alpha == 0.5

    def test_bad_magic(self) -> None:
        with pytest.raises(ModelFormatError, match="magic"):
            parse_model(b"NOPE" + b"\x00" * 16)

    def test_truncated_weights(self, tiny_model, tmp_path: Path) -> None:
        path = tmp_path / "m.cdm"
        save_model(tiny_model, path)
        with pytest.raises(ModelFormatError, match="truncated"):
            parse_model(path.read_bytes()[:-4])

    def test_trailing_weights(self, tiny_model, tmp_path: Path) -> None:
        path = tmp_path / "m.cdm"
        save_model(tiny_model, path)
        with pytest.raises(ModelFormatError, match="unused"):
            parse_model(path.read_bytes() + b"\x00" * 4)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "absent.cdm")

    def test_unwritable_path(self, tiny_model, tmp_path: Path) -> None:
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        with pytest.raises(StorageError, match="cannot write model"):
            save_model(tiny_model, blocker / "m.cdm")

    def test_load_checks_budget(self, tiny_model, tmp_path: Path) -> None:
        path = tmp_path / "m.cdm"
        save_model(tiny_model, path)
        with pytest.raises(OverflowBudgetError):
            load_model(path, n=1 << 40)
        assert load_model(path, n=1 << 127).name == tiny_model.name
