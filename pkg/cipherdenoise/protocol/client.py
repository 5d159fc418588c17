"""Key-holding client: encrypts the image, answers sign requests, decodes the result."""

import logging
import random
from enum import Enum

import numpy as np

from cipherdenoise.ciphertensor import CipherTensor, PlainTensor, encrypt_tensor
from cipherdenoise.encoding import ScaleTag, center_lift
from cipherdenoise.errors import (
    CipherDenoiseError,
    KeyMismatchError,
    ProtocolError,
    ProtocolOrderError,
    ShapeMismatchError,
)
from cipherdenoise.paillier import (
    Ciphertext,
    PaillierPrivateKey,
    PaillierPublicKey,
    decrypt_crt,
    default_rng,
)
from cipherdenoise.protocol.activation import SignMatrix
from cipherdenoise.protocol.session import ClientConfig, SessionMetrics
from cipherdenoise.protocol.wire import (
    SESSION_ID_BYTES,
    Frame,
    Framework,
    Hello,
    HelloAck,
    MessageTag,
    decode_error,
    decode_hello_ack,
    decode_tensor_payload,
    encode_error,
    encode_hello,
    encode_sign_bits,
    encode_tensor_payload,
)

logger = logging.getLogger(__name__)


def decrypt_tensor(
    pk: PaillierPublicKey, sk: PaillierPrivateKey, tensor: CipherTensor
) -> PlainTensor:
    """Decrypt and center-lift every element; the result keeps the tensor's scale."""
    if tensor.key_id != pk.fingerprint:
        raise KeyMismatchError(
            f"tensor encrypted under {tensor.key_id[:12]}, private key is for {pk.fingerprint[:12]}"
        )
    out = np.empty(tensor.shape, dtype=object)
    for idx, value in np.ndenumerate(tensor.values):
        m = decrypt_crt(pk, sk, Ciphertext(int(value), tensor.key_id))
        out[idx] = center_lift(m, pk.n)
    return PlainTensor(tensor.shape, out, tensor.scale)


def client_act(pk: PaillierPublicKey, sk: PaillierPrivateKey, c_per: CipherTensor) -> SignMatrix:
    """Sign bits of the decrypted perturbed feature: 1 iff Q_per >= 0."""
    return SignMatrix.of(decrypt_tensor(pk, sk, c_per).data)


class ClientPhase(Enum):
    START = "start"
    AWAIT_ACK = "await_ack"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class InferenceClient:
    def __init__(
        self,
        public_key: PaillierPublicKey,
        private_key: PaillierPrivateKey,
        config: ClientConfig | None = None,
    ) -> None:
        if private_key.public_key != public_key:
            raise KeyMismatchError("private key does not belong to the public key")
        self.public_key = public_key
        self.private_key = private_key
        self.config = config or ClientConfig()
        self._sessions = 0

    def new_session(
        self, image: PlainTensor, model_name: str = "", framework: Framework | None = None
    ) -> "ClientSession":
        """``image`` holds signed integers at ``config.frac_bits``."""
        index = self._sessions
        self._sessions += 1
        if self.config.seed is None:
            rng = default_rng()
        else:
            rng = random.Random(f"client:{self.config.seed}:{index}")
        chosen = self.config.framework if framework is None else framework
        return ClientSession(self, image, rng, model_name, chosen)


class ClientSession:
    def __init__(
        self,
        client: InferenceClient,
        image: PlainTensor,
        rng: random.Random,
        model_name: str,
        framework: Framework,
    ) -> None:
        if not image.is_integer:
            raise ShapeMismatchError("encode the image to fixed point before opening a session")
        if image.scale != ScaleTag(client.config.frac_bits):
            raise ShapeMismatchError(
                f"image at scale 2^{image.scale.total_frac_bits}, "
                f"client configured for 2^{client.config.frac_bits}"
            )
        self.client = client
        self.image = image
        self.rng = rng
        self.model_name = model_name
        self.framework = framework
        self.phase = ClientPhase.START
        self.session_id = rng.getrandbits(8 * SESSION_ID_BYTES).to_bytes(SESSION_ID_BYTES, "big")
        self.metrics = SessionMetrics(session_id=self.session_id.hex())
        self.ack: HelloAck | None = None
        self.result: PlainTensor | None = None
        # (layer index, decrypted perturbed feature) when retain_features is set
        self.observed: list[tuple[int, PlainTensor]] = []

    @property
    def finished(self) -> bool:
        return self.phase in (ClientPhase.DONE, ClientPhase.FAILED)

    def start(self) -> Frame:
        if self.phase is not ClientPhase.START:
            raise ProtocolOrderError("session already started")
        hello = Hello(
            public_key=self.client.public_key,
            frac_bits=self.client.config.frac_bits,
            model_name=self.model_name,
            framework=self.framework,
        )
        self.phase = ClientPhase.AWAIT_ACK
        return self._send(Frame(MessageTag.HELLO, self.session_id, encode_hello(hello)))

    def handle(self, frame: Frame) -> list[Frame]:
        """Consume one server frame; returns the frames to send back."""
        self.metrics.count(frame, upload=False)
        if frame.tag is MessageTag.ERROR:
            code, message = decode_error(frame.payload)
            phase = self.phase.value
            self.phase = ClientPhase.FAILED
            self.metrics.outcome = f"error:{code}"
            raise ProtocolError(f"server ended the session during {phase}: {message}", code)
        if frame.session_id != self.session_id:
            raise ProtocolError("frame belongs to another session", ProtocolError.BAD_FRAME)
        if self.phase is ClientPhase.AWAIT_ACK and frame.tag is MessageTag.HELLO_ACK:
            return [self._on_ack(frame)]
        if self.phase is ClientPhase.RUNNING and frame.tag is MessageTag.ACT_REQUEST:
            return [self._on_act_request(frame)]
        if self.phase is ClientPhase.RUNNING and frame.tag is MessageTag.RESULT:
            self._on_result(frame)
            return []
        raise ProtocolOrderError(f"unexpected {frame.tag.name} while {self.phase.value}")

    def error_frame(self, exc: CipherDenoiseError) -> Frame:
        """ERROR frame telling the server this client gave up."""
        self.phase = ClientPhase.FAILED
        self.metrics.outcome = "aborted"
        code = exc.code if isinstance(exc, ProtocolError) else ProtocolError.INTERNAL
        return self._send(Frame(MessageTag.ERROR, self.session_id, encode_error(code, str(exc))))

    def _send(self, frame: Frame) -> Frame:
        self.metrics.count(frame, upload=True)
        return frame

    def _on_ack(self, frame: Frame) -> Frame:
        ack = decode_hello_ack(frame.payload)
        if self.framework is Framework.LINEAR and not ack.linear:
            raise ProtocolError("server model is not linear", ProtocolError.REFUSED)
        self.ack = ack
        self.metrics.framework = (
            self.framework.name.lower()
            if self.framework is not Framework.AUTO
            else ("linear" if ack.linear else "nonlinear")
        )
        self.phase = ClientPhase.RUNNING
        pk = self.client.public_key
        encrypted = encrypt_tensor(pk, self.image, self.rng)
        return self._send(
            Frame(MessageTag.ENC_IMAGE, self.session_id, encode_tensor_payload(pk, encrypted))
        )

    def _on_act_request(self, frame: Frame) -> Frame:
        pk = self.client.public_key
        layer_index, c_per = decode_tensor_payload(frame.payload, with_layer=True, pk=pk)
        assert layer_index is not None
        pk, sk = self.client.public_key, self.client.private_key
        q_per = decrypt_tensor(pk, sk, c_per)
        if self.client.config.retain_features:
            self.observed.append((layer_index, q_per))
        s_u = SignMatrix.of(q_per.data)
        return self._send(
            Frame(MessageTag.ACT_RESPONSE, self.session_id, encode_sign_bits(layer_index, s_u.bits))
        )

    def _on_result(self, frame: Frame) -> None:
        _, tensor = decode_tensor_payload(frame.payload, pk=self.client.public_key)
        self.result = decrypt_tensor(self.client.public_key, self.client.private_key, tensor)
        self.phase = ClientPhase.DONE
        self.metrics.outcome = "ok"
        logger.info("[cipherdenoise] %s", self.metrics.log_line())
