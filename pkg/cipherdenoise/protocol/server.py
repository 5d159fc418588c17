"""Keyless inference server: one state machine per session.

The server only ever holds the client's public key. Every handler works on
ciphertexts with the two homomorphic primitives and fresh encryptions.
"""

import itertools
import logging
import random
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

from cipherdenoise.ciphertensor import (
    CipherTensor,
    add_enc,
    align_scale,
    bias_add_enc,
    conv2d_enc,
    conv2d_transpose_enc,
    linear_enc,
)
from cipherdenoise.encoding import ScaleTag
from cipherdenoise.errors import (
    CipherDenoiseError,
    OverflowBudgetError,
    ProtocolError,
    ProtocolOrderError,
    ScaleMismatchError,
)
from cipherdenoise.model import INPUT_SOURCE, LayerKind, ModelSpec, QuantizedLayer, QuantizedModel
from cipherdenoise.paillier import PaillierPublicKey, default_rng
from cipherdenoise.protocol.activation import (
    PerturbanceMatrix,
    SignMatrix,
    combine_signs,
    encrypt_neg_threshold,
    identity_perturbance,
    sample_perturbance,
    server_activate_leaky,
    server_combine_and_activate,
    server_perturb,
    server_threshold_shift,
)
from cipherdenoise.protocol.session import PerturbanceMode, ServerConfig, SessionMetrics
from cipherdenoise.protocol.wire import (
    PROTOCOL_VERSION,
    Frame,
    Framework,
    HelloAck,
    MessageTag,
    decode_error,
    decode_hello,
    decode_sign_bits,
    decode_tensor_payload,
    encode_error,
    encode_hello_ack,
    encode_tensor_payload,
)

if TYPE_CHECKING:
    from cipherdenoise.ledger import SessionLedger

logger = logging.getLogger(__name__)

LayerHook = Callable[[QuantizedLayer, CipherTensor], None]


class SessionPhase(Enum):
    AWAIT_HELLO = "await_hello"
    AWAIT_IMAGE = "await_image"
    AWAIT_ACT = "await_act"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class PendingActivation:
    layer: QuantizedLayer
    feature: CipherTensor
    perturbance: PerturbanceMatrix


class InferenceServer:
    """Holds the model and hands out isolated :class:`ServerSession` objects.

    ``layer_hook`` sees every encrypted layer output; the verification
    harness uses it to locate the first diverging layer.
    """

    def __init__(
        self,
        model: ModelSpec,
        config: ServerConfig | None = None,
        ledger: "SessionLedger | None" = None,
        layer_hook: LayerHook | None = None,
    ) -> None:
        self.model = model
        self.config = config or ServerConfig()
        self.ledger = ledger
        self.layer_hook = layer_hook
        self._counter = itertools.count()
        model.quantize()

    def new_session(self) -> "ServerSession":
        index = next(self._counter)
        if self.config.seed is None:
            rng = default_rng()
        else:
            rng = random.Random(f"server:{self.config.seed}:{index}")
        return ServerSession(self, rng)

    def check_key(self, pk: PaillierPublicKey, frac_bits: int) -> None:
        """Refuse keys that are too small for policy or for the model's budget."""
        if pk.bits < self.config.min_key_bits:
            raise ProtocolError(
                f"{pk.bits}-bit key is below the server minimum of {self.config.min_key_bits}",
                ProtocolError.REFUSED,
            )
        try:
            self.model.check_budget(
                pk.n, self.config.perturbance_bound, input_frac_bits=frac_bits
            )
        except OverflowBudgetError as exc:
            raise ProtocolError(str(exc), ProtocolError.REFUSED) from exc

    def validate_startup(self, key_bits: int | None = None) -> None:
        """Check the overflow budget against the smallest key the server accepts."""
        bits = key_bits or self.config.min_key_bits
        self.model.check_budget(1 << (bits - 1), self.config.perturbance_bound)

    def perturbance_for(
        self, layer_index: int, shape: tuple[int, int, int], rng: random.Random
    ) -> PerturbanceMatrix:
        mode = self.config.perturbance
        if mode is PerturbanceMode.IDENTITY:
            return identity_perturbance(shape)
        if mode is PerturbanceMode.FIXED:
            fixed = random.Random(f"fixed:{self.config.fixed_seed}:{layer_index}")
            return sample_perturbance(shape, self.config.perturbance_bound, fixed)
        return sample_perturbance(shape, self.config.perturbance_bound, rng)

    def finish(self, metrics: SessionMetrics) -> None:
        logger.info("[cipherdenoise] %s outcome=%s", metrics.log_line(), metrics.outcome)
        if self.ledger is not None:
            self.ledger.record(metrics)


class ServerSession:
    """Strictly alternating state machine for one client session."""

    def __init__(self, server: InferenceServer, rng: random.Random) -> None:
        self.server = server
        self.rng = rng
        self.phase = SessionPhase.AWAIT_HELLO
        self.session_id: bytes | None = None
        self.metrics = SessionMetrics()
        self._pk: PaillierPublicKey | None = None
        self._plan: QuantizedModel | None = None
        self._input: CipherTensor | None = None
        self._outputs: list[CipherTensor] = []
        self._pending: PendingActivation | None = None

    @property
    def finished(self) -> bool:
        return self.phase in (SessionPhase.DONE, SessionPhase.FAILED)

    def handle(self, frame: Frame) -> list[Frame]:
        self.metrics.count(frame, upload=True)
        try:
            replies = self._dispatch(frame)
        except ProtocolError as exc:
            replies = [self._fail(exc.code, str(exc))]
        except CipherDenoiseError as exc:
            replies = [self._fail(ProtocolError.REFUSED, str(exc))]
        for reply in replies:
            self.metrics.count(reply, upload=False)
        if self.phase is SessionPhase.DONE:
            self.metrics.outcome = "ok"
            self.server.finish(self.metrics)
        return replies

    def abandon(self, reason: str) -> None:
        """Tear down after a disconnect; safe to call on finished sessions."""
        if self.finished:
            return
        logger.warning("[cipherdenoise] session=%s abandoned: %s", self.metrics.session_id, reason)
        self.phase = SessionPhase.FAILED
        self.metrics.outcome = "aborted"
        self._release()
        self.server.finish(self.metrics)

    def _fail(self, code: int, message: str) -> Frame:
        logger.warning(
            "[cipherdenoise] session=%s failed (code %d): %s",
            self.metrics.session_id,
            code,
            message,
        )
        if not self.finished:
            self.phase = SessionPhase.FAILED
            self.metrics.outcome = f"error:{code}"
            self._release()
            self.server.finish(self.metrics)
        return Frame(MessageTag.ERROR, self.session_id or bytes(16), encode_error(code, message))

    def _release(self) -> None:
        self._pending = None
        self._outputs = []
        self._input = None

    def _dispatch(self, frame: Frame) -> list[Frame]:
        if self.finished:
            raise ProtocolOrderError(f"session already {self.phase.value}")
        if self.session_id is not None and frame.session_id != self.session_id:
            raise ProtocolError("frame belongs to another session", ProtocolError.BAD_FRAME)
        if frame.tag is MessageTag.ERROR:
            code, message = decode_error(frame.payload)
            logger.warning("[cipherdenoise] client aborted session (code %d): %s", code, message)
            self.phase = SessionPhase.FAILED
            self.metrics.outcome = "aborted"
            self._release()
            self.server.finish(self.metrics)
            return []
        expected = {
            SessionPhase.AWAIT_HELLO: MessageTag.HELLO,
            SessionPhase.AWAIT_IMAGE: MessageTag.ENC_IMAGE,
            SessionPhase.AWAIT_ACT: MessageTag.ACT_RESPONSE,
        }[self.phase]
        if frame.tag is not expected:
            raise ProtocolOrderError(f"expected {expected.name}, got {frame.tag.name}")
        if frame.tag is MessageTag.HELLO:
            return [self._on_hello(frame)]
        if frame.tag is MessageTag.ENC_IMAGE:
            return [self._on_image(frame)]
        return [self._on_act_response(frame)]

    def _on_hello(self, frame: Frame) -> Frame:
        self.session_id = frame.session_id
        self.metrics.session_id = frame.session_id.hex()
        hello = decode_hello(frame.payload)
        model = self.server.model
        if hello.version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"unsupported protocol version {hello.version}", ProtocolError.REFUSED
            )
        if hello.model_name and hello.model_name != model.name:
            raise ProtocolError(
                f"model {hello.model_name!r} requested, serving {model.name!r}",
                ProtocolError.REFUSED,
            )
        if hello.framework is Framework.LINEAR and not model.linear:
            raise ProtocolError(
                f"model {model.name!r} has {model.activation_count} activations; "
                "the linear framework cannot serve it",
                ProtocolError.REFUSED,
            )
        self.server.check_key(hello.public_key, hello.frac_bits)
        self._pk = hello.public_key
        self._plan = model.quantize(hello.frac_bits)
        if hello.framework is Framework.AUTO:
            self.metrics.framework = "linear" if model.linear else "nonlinear"
        else:
            self.metrics.framework = hello.framework.name.lower()
        self.phase = SessionPhase.AWAIT_IMAGE
        logger.info(
            "[cipherdenoise] session=%s opened: %d-bit key %s, frac_bits=%d",
            self.metrics.session_id,
            hello.public_key.bits,
            hello.public_key.fingerprint[:12],
            hello.frac_bits,
        )
        ack = HelloAck(
            linear=model.linear,
            activation_count=model.activation_count,
            input_shape=model.input_shape,
            output_frac_bits=self._plan.output_bits,
        )
        return Frame(MessageTag.HELLO_ACK, frame.session_id, encode_hello_ack(ack))

    def _on_image(self, frame: Frame) -> Frame:
        assert self._pk is not None and self._plan is not None
        _, tensor = decode_tensor_payload(frame.payload, pk=self._pk)
        if tensor.scale != ScaleTag(self._plan.input_frac_bits):
            raise ScaleMismatchError(
                f"image at scale 2^{tensor.scale.total_frac_bits}, "
                f"session agreed on 2^{self._plan.input_frac_bits}"
            )
        self.server.model.output_shapes(tensor.shape)
        self._input = tensor
        return self._advance(tensor)

    def _on_act_response(self, frame: Frame) -> Frame:
        assert self._pk is not None and self._pending is not None
        pending = self._pending
        layer_index, bits = decode_sign_bits(frame.payload, pending.feature.size)
        if layer_index != pending.layer.index:
            raise ProtocolOrderError(
                f"sign matrix for layer {layer_index}, pending layer {pending.layer.index}"
            )
        s_u = SignMatrix(bits.reshape(pending.feature.shape))
        self._pending = None
        if pending.layer.kind is LayerKind.LEAKY_RELU:
            s = combine_signs(s_u, pending.perturbance)
            out = server_activate_leaky(
                self._pk,
                pending.feature,
                s,
                pending.layer.alpha,
                pending.layer.out_bits - pending.layer.in_bits,
                self.rng,
            )
        else:
            out = server_combine_and_activate(
                self._pk, pending.feature, s_u, pending.perturbance, self.rng
            )
        self._record(pending.layer, out)
        return self._advance(out)

    def _advance(self, x: CipherTensor) -> Frame:
        assert self._pk is not None and self._plan is not None and self.session_id is not None
        for ql in self._plan.layers[len(self._outputs) :]:
            if ql.kind.is_activation:
                return self._request_activation(ql, x)
            x = self._apply(ql, x)
            self._record(ql, x)
        self.phase = SessionPhase.DONE
        payload = encode_tensor_payload(self._pk, x)
        self._release()
        return Frame(MessageTag.RESULT, self.session_id, payload)

    def _record(self, ql: QuantizedLayer, out: CipherTensor) -> None:
        self._outputs.append(out)
        if self.server.layer_hook is not None:
            self.server.layer_hook(ql, out)

    def _request_activation(self, ql: QuantizedLayer, x: CipherTensor) -> Frame:
        assert self._pk is not None and self.session_id is not None
        probe = x
        if ql.kind is LayerKind.RELU and ql.threshold:
            enc_neg = encrypt_neg_threshold(self._pk, x.shape, ql.threshold, x.scale, self.rng)
            probe = server_threshold_shift(self._pk, x, enc_neg, self.rng)
        m = self.server.perturbance_for(ql.index, x.shape, self.rng)
        c_per = server_perturb(self._pk, probe, m, self.rng)
        self._pending = PendingActivation(ql, x, m)
        self.phase = SessionPhase.AWAIT_ACT
        payload = encode_tensor_payload(self._pk, c_per, ql.index)
        return Frame(MessageTag.ACT_REQUEST, self.session_id, payload)

    def _apply(self, ql: QuantizedLayer, x: CipherTensor) -> CipherTensor:
        assert self._pk is not None
        pk, layer = self._pk, ql.desc
        if ql.kind is LayerKind.CONV:
            assert ql.weight is not None and ql.bias is not None
            out = conv2d_enc(pk, x, ql.weight, layer.stride, layer.padding, self.rng)
            return bias_add_enc(pk, out, ql.bias, self.rng)
        if ql.kind is LayerKind.CONV_TRANSPOSE:
            assert ql.weight is not None and ql.bias is not None
            out = conv2d_transpose_enc(pk, x, ql.weight, layer.stride, layer.padding, self.rng)
            return bias_add_enc(pk, out, ql.bias, self.rng)
        if ql.kind is LayerKind.LINEAR:
            assert ql.weight is not None
            return linear_enc(pk, x, ql.weight, ql.bias, self.rng)
        assert self._input is not None
        source = self._input if layer.source == INPUT_SOURCE else self._outputs[layer.source]
        target = ScaleTag(ql.out_bits)
        return add_enc(pk, align_scale(pk, x, target), align_scale(pk, source, target))
