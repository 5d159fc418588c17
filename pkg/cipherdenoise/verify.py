"""Losslessness check: encrypted pipeline against the integer reference engine.

Both sides run on the same encoded image. The encrypted side goes through
the real client and server state machines over the loopback transport;
a layer hook on the server captures every encrypted layer output so a
failure can be pinned to the first diverging layer. Decrypting those
captures uses the client's key and happens here, outside the server.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from cipherdenoise.ciphertensor import CipherTensor, PlainTensor
from cipherdenoise.errors import VerificationError
from cipherdenoise.model import ModelSpec, QuantizedLayer, encode_image, infer_plain_fixed
from cipherdenoise.paillier import PaillierPrivateKey, PaillierPublicKey
from cipherdenoise.protocol.client import InferenceClient, decrypt_tensor
from cipherdenoise.protocol.server import InferenceServer
from cipherdenoise.protocol.session import ClientConfig, ServerConfig, SessionMetrics
from cipherdenoise.protocol.transport import run_session

logger = logging.getLogger(__name__)

Coordinate = tuple[int, ...]


@dataclass(frozen=True)
class LayerDiff:
    index: int
    kind: str
    mismatches: int
    first: Coordinate | None


@dataclass
class VerificationReport:
    model_name: str
    linear: bool
    passed: bool
    act_round_trips: int
    first_mismatch: Coordinate | None = None
    layers: list[LayerDiff] = field(default_factory=list)
    metrics: SessionMetrics | None = None

    @property
    def first_bad_layer(self) -> LayerDiff | None:
        return next((d for d in self.layers if d.mismatches), None)

    def summary(self) -> str:
        if self.passed:
            return (
                f"PASS {self.model_name}: output integer-identical, "
                f"act_round_trips={self.act_round_trips}"
            )
        lines = [f"FAIL {self.model_name}: first differing element {self.first_mismatch}"]
        if self.linear and self.act_round_trips:
            lines.append(f"linear model made {self.act_round_trips} activation round trips")
        for diff in self.layers:
            lines.append(
                f"  layer {diff.index:3d} {diff.kind:15s} mismatches={diff.mismatches}"
                + (f" first={diff.first}" if diff.first is not None else "")
            )
        return "\n".join(lines)


def _compare(expected: np.ndarray, actual: np.ndarray) -> tuple[int, Coordinate | None]:
    if expected.shape != actual.shape:
        return max(expected.size, actual.size), ()
    unequal = np.argwhere(expected != actual)
    if not len(unequal):
        return 0, None
    return len(unequal), tuple(int(i) for i in unequal[0])


def verify_model(
    model: ModelSpec,
    image: np.ndarray,
    public_key: PaillierPublicKey,
    private_key: PaillierPrivateKey,
    seed: int = 0,
    server_config: ServerConfig | None = None,
    served_model: ModelSpec | None = None,
) -> VerificationReport:
    """Run both engines on ``image`` and compare integers before decoding.

    ``served_model`` replaces the model the server evaluates while the
    reference keeps ``model``; a corrupted copy makes a negative control.
    """
    encoded = encode_image(model, image)
    expected_layers: list[tuple[QuantizedLayer, PlainTensor]] = []
    expected = infer_plain_fixed(
        model, encoded, hook=lambda ql, out: expected_layers.append((ql, out))
    )

    captured: list[CipherTensor] = []
    config = server_config or ServerConfig(seed=seed, min_key_bits=public_key.bits)
    server = InferenceServer(
        served_model or model, config, layer_hook=lambda _ql, out: captured.append(out)
    )
    client = InferenceClient(
        public_key,
        private_key,
        ClientConfig(seed=seed, frac_bits=encoded.scale.total_frac_bits),
    )
    result = run_session(client, server, encoded)
    metrics = result.client_metrics

    layers: list[LayerDiff] = []
    for (ql, reference), encrypted in zip(expected_layers, captured):
        decrypted = decrypt_tensor(public_key, private_key, encrypted)
        mismatches, first = _compare(reference.data, decrypted.data)
        layers.append(LayerDiff(ql.index, ql.kind.value, mismatches, first))

    mismatches, first = _compare(expected.data, result.output.data)
    if result.output.scale != expected.scale:
        mismatches, first = max(mismatches, 1), first or ()
    round_trips_ok = not model.linear or metrics.act_round_trips == 0
    report = VerificationReport(
        model_name=model.name,
        linear=model.linear,
        passed=mismatches == 0 and round_trips_ok,
        act_round_trips=metrics.act_round_trips,
        first_mismatch=first,
        layers=layers,
        metrics=metrics,
    )
    logger.info("[cipherdenoise] verify seed=%d %s", seed, "pass" if report.passed else "FAIL")
    return report


def check_verification(report: VerificationReport) -> None:
    """Raise :class:`VerificationError` carrying the report's summary on failure."""
    if not report.passed:
        raise VerificationError(report.summary())
