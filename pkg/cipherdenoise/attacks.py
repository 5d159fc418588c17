"""Weight-stealing experiment against the activation exchange.

A malicious client keeps every feature it decrypts during ACT requests and
fits the layer that produced them by ordinary least squares over the
im2col form of the convolution. Clean features give the weights away;
perturbed ones do not.
"""

import json
import logging
import math
import random
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from cipherdenoise.ciphertensor import PlainTensor, conv2d_array, im2col
from cipherdenoise.encoding import dequantize_array
from cipherdenoise.errors import CipherDenoiseError, StorageError
from cipherdenoise.imageio import normalize_for_display, side_by_side, write_pgm
from cipherdenoise.model import (
    LayerDesc,
    LayerKind,
    ModelSpec,
    QuantizedLayer,
    encode_image,
    infer_plain_fixed,
)
from cipherdenoise.paillier import keygen
from cipherdenoise.phantom import psnr
from cipherdenoise.protocol import (
    ClientConfig,
    InferenceClient,
    InferenceServer,
    PerturbanceMode,
    ServerConfig,
    run_nonlinear_session,
)
from cipherdenoise.protocol.activation import DEFAULT_PERTURBANCE_BOUND

logger = logging.getLogger(__name__)

CLEAN = "clean"
PERTURBED = "perturbed"


@dataclass(frozen=True)
class AttackReport:
    target_layer: int
    samples_used: int
    weight_relative_error: float
    output_psnr_db: float
    baseline_psnr_db: float
    mode: str
    underdetermined: bool = False
    rows: int = 0
    unknowns: int = 0

    def as_dict(self) -> dict[str, Any]:
        document = asdict(self)
        for key in ("output_psnr_db", "baseline_psnr_db"):
            if math.isinf(document[key]):
                document[key] = None
        return document


@dataclass(frozen=True, eq=False)
class StolenLayer:
    weight: np.ndarray
    bias: np.ndarray


def _design_rows(layer: LayerDesc, x: np.ndarray) -> np.ndarray:
    """One row per output position: the receptive field and a trailing 1 for the bias."""
    assert layer.weight is not None
    if layer.kind is LayerKind.CONV:
        _, _, kh, kw = layer.weight.shape
        cols = im2col(np.asarray(x, dtype=np.float64), kh, kw, layer.stride, layer.padding).T
    elif layer.kind is LayerKind.LINEAR:
        cols = np.asarray(x, dtype=np.float64).reshape(1, -1)
    else:
        raise CipherDenoiseError(f"cannot fit a {layer.kind.value} layer by least squares")
    return np.hstack([cols, np.ones((cols.shape[0], 1))])


def _targets(layer: LayerDesc, y: np.ndarray) -> np.ndarray:
    out = np.asarray(y, dtype=np.float64)
    return out.reshape(out.shape[0], -1).T


def _predict(layer: LayerDesc, stolen: StolenLayer, x: np.ndarray) -> np.ndarray:
    if layer.kind is LayerKind.LINEAR:
        return (stolen.weight @ x.reshape(-1) + stolen.bias).reshape(-1, 1, 1)
    out = conv2d_array(x, stolen.weight, layer.stride, layer.padding)
    return out + stolen.bias[:, None, None]


def _relative_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    norm = float(np.linalg.norm(truth))
    if not norm:
        return float(np.linalg.norm(estimate))
    return float(np.linalg.norm(estimate - truth)) / norm


def steal_layer(
    probe_inputs: Sequence[np.ndarray],
    observed_features: Sequence[np.ndarray],
    layer: LayerDesc,
    mode: str = CLEAN,
    target_layer: int = -1,
    holdout: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    seed: int = 0,
) -> tuple[StolenLayer, AttackReport]:
    """Least-squares estimate of ``layer`` from aligned (input, output) pairs.

    ``layer`` supplies the geometry and the ground truth the report scores
    against. Too few rows are reported as underdetermined, not raised.
    """
    if len(probe_inputs) != len(observed_features):
        raise CipherDenoiseError("probe inputs and observed features are not aligned")
    assert layer.weight is not None and layer.bias is not None
    out_c = layer.weight.shape[0]
    unknowns = int(np.prod(layer.weight.shape[1:])) + 1
    if probe_inputs:
        design = np.vstack([_design_rows(layer, x) for x in probe_inputs])
        targets = np.vstack([_targets(layer, y) for y in observed_features])
        solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
        rows = design.shape[0]
    else:
        solution = np.zeros((unknowns, out_c))
        rows = 0
    stolen = StolenLayer(
        weight=solution[:-1].T.reshape(layer.weight.shape), bias=solution[-1].copy()
    )
    underdetermined = rows < unknowns
    if underdetermined:
        logger.warning(
            "[cipherdenoise] Attack on layer %d is underdetermined: %d rows for %d unknowns",
            target_layer,
            rows,
            unknowns,
        )

    rng = np.random.default_rng(seed)
    baseline = StolenLayer(
        weight=rng.normal(0.0, float(np.std(layer.weight)) or 1.0, layer.weight.shape),
        bias=np.zeros(out_c),
    )
    truth = StolenLayer(layer.weight, layer.bias)
    output_psnr = baseline_psnr = math.inf
    if holdout:
        expected = np.concatenate([_predict(layer, truth, x).ravel() for x, _ in holdout])
        data_range = float(expected.max() - expected.min()) or 1.0
        predicted = np.concatenate([_predict(layer, stolen, x).ravel() for x, _ in holdout])
        guessed = np.concatenate([_predict(layer, baseline, x).ravel() for x, _ in holdout])
        output_psnr = psnr(expected, predicted, data_range)
        baseline_psnr = psnr(expected, guessed, data_range)

    report = AttackReport(
        target_layer=target_layer,
        samples_used=len(probe_inputs),
        weight_relative_error=_relative_error(stolen.weight, layer.weight),
        output_psnr_db=output_psnr,
        baseline_psnr_db=baseline_psnr,
        mode=mode,
        underdetermined=underdetermined,
        rows=rows,
        unknowns=unknowns,
    )
    return stolen, report


# End-to-end experiment


@dataclass(frozen=True)
class AttackConfig:
    probes: int = 8
    probe_size: int = 8
    holdout: int = 16
    seed: int = 0
    key_bits: int = 256
    perturbance_bound: int = DEFAULT_PERTURBANCE_BOUND
    fixed_m: bool = False
    modes: tuple[str, ...] = (CLEAN, PERTURBED)


@dataclass
class AttackResult:
    reports: dict[str, AttackReport] = field(default_factory=dict)
    stolen: dict[str, StolenLayer] = field(default_factory=dict)
    triptych: np.ndarray | None = None

    @property
    def clean(self) -> AttackReport | None:
        return self.reports.get(CLEAN)

    @property
    def perturbed(self) -> AttackReport | None:
        return self.reports.get(PERTURBED)


@dataclass(frozen=True)
class _Target:
    index: int
    layer: LayerDesc
    # activation whose payload is the target's input, or None when the input is the image
    feeding_activation: LayerDesc | None
    feeding_index: int | None


def attack_target(model: ModelSpec) -> _Target:
    """The weighted layer feeding the last activation."""
    activations = [i for i, layer in enumerate(model.layers) if layer.kind.is_activation]
    if not activations:
        raise CipherDenoiseError("a linear model exposes no intermediate features to attack")
    last = activations[-1]
    index = last - 1
    layer = model.layers[index] if index >= 0 else None
    if layer is None or layer.kind not in (LayerKind.CONV, LayerKind.LINEAR):
        raise CipherDenoiseError(f"layer {last} is not fed by a conv or linear layer")
    if index == 0:
        return _Target(index, layer, None, None)
    feeding = model.layers[index - 1]
    if not feeding.kind.is_activation:
        raise CipherDenoiseError(f"the input of layer {index} is not observable by the client")
    for candidate in (model.layers[last], feeding):
        if candidate.threshold:
            raise CipherDenoiseError("thresholded activations are not supported by the attack")
    return _Target(index, layer, feeding, index - 1)


def _activate(layer: LayerDesc, values: np.ndarray) -> np.ndarray:
    if layer.kind is LayerKind.LEAKY_RELU:
        return np.where(values >= 0, values, layer.alpha * values)
    return np.maximum(values, 0.0)


def _real(tensor: PlainTensor) -> np.ndarray:
    return dequantize_array(tensor.data, tensor.scale)


def _probe_shape(model: ModelSpec, size: int) -> tuple[int, int, int]:
    if any(layer.kind is LayerKind.LINEAR for layer in model.layers):
        return model.input_shape
    return (model.input_shape[0], size, size)


def _collect(
    model: ModelSpec,
    target: _Target,
    client: InferenceClient,
    server: InferenceServer,
    probes: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Run real sessions and keep only what the client decrypted."""
    inputs, outputs = [], []
    last = target.index + 1
    for probe in probes:
        encoded = encode_image(model, probe)
        result = run_nonlinear_session(client, server, encoded)
        observed = {index: _real(feature) for index, feature in result.observed}
        if target.feeding_activation is None:
            inputs.append(_real(encoded))
        else:
            assert target.feeding_index is not None
            inputs.append(_activate(target.feeding_activation, observed[target.feeding_index]))
        outputs.append(observed[last])
    return inputs, outputs


def _holdout_pairs(
    model: ModelSpec, target: _Target, probes: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """True (input, output) pairs of the target layer from the plaintext engine."""
    pairs = []
    for probe in probes:
        captured: dict[int, np.ndarray] = {}

        def keep(ql: QuantizedLayer, out: PlainTensor) -> None:
            captured[ql.index] = _real(out)

        encoded = encode_image(model, probe)
        infer_plain_fixed(model, encoded, hook=keep)
        source = _real(encoded) if target.index == 0 else captured[target.index - 1]
        pairs.append((source, captured[target.index]))
    return pairs


def run_attack_experiment(model: ModelSpec, config: AttackConfig | None = None) -> AttackResult:
    """Steal the target layer through live sessions in each configured mode."""
    config = config or AttackConfig()
    target = attack_target(model)
    rng = np.random.default_rng(config.seed)
    shape = _probe_shape(model, config.probe_size)
    probes = rng.uniform(-1.0, 1.0, (config.probes, *shape))
    held = rng.uniform(-1.0, 1.0, (config.holdout, *shape))
    holdout = _holdout_pairs(model, target, held)

    pk, sk = keygen(config.key_bits, random.Random(config.seed))
    client = InferenceClient(
        pk,
        sk,
        ClientConfig(seed=config.seed, frac_bits=model.frac_bits_input, retain_features=True),
    )
    result = AttackResult()
    for mode in config.modes:
        if mode == CLEAN:
            perturbance = PerturbanceMode.IDENTITY
        elif mode == PERTURBED:
            perturbance = PerturbanceMode.FIXED if config.fixed_m else PerturbanceMode.RANDOM
        else:
            raise CipherDenoiseError(f"unknown attack mode {mode!r}")
        server = InferenceServer(
            model,
            ServerConfig(
                perturbance=perturbance,
                perturbance_bound=config.perturbance_bound,
                seed=config.seed,
                fixed_seed=config.seed,
                min_key_bits=config.key_bits,
            ),
        )
        inputs, outputs = _collect(model, target, client, server, probes)
        stolen, report = steal_layer(
            inputs, outputs, target.layer, mode, target.index, holdout, config.seed
        )
        logger.info(
            "[cipherdenoise] Attack mode=%s layer=%d error=%.3g psnr=%.1f dB",
            mode,
            target.index,
            report.weight_relative_error,
            report.output_psnr_db,
        )
        result.reports[mode] = report
        result.stolen[mode] = stolen

    if holdout:
        x, truth = holdout[0]
        panels = [normalize_for_display(truth[0])]
        for mode in (CLEAN, PERTURBED):
            if mode in result.stolen:
                predicted = _predict(target.layer, result.stolen[mode], x)
                panels.append(normalize_for_display(predicted[0]))
        result.triptych = side_by_side(panels)
    return result


def write_attack_report(result: AttackResult, out_dir: str | Path) -> Path:
    """``attack_report.json`` plus ``attack_triptych.pgm`` (truth, clean, perturbed)."""
    directory = Path(out_dir)
    report_path = directory / "attack_report.json"
    document = {mode: report.as_dict() for mode, report in result.reports.items()}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write attack report to {directory}: {exc}") from exc
    if result.triptych is not None:
        write_pgm(directory / "attack_triptych.pgm", result.triptych)
    return report_path
