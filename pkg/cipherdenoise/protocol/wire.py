"""Frame layout and per-tag payload codecs.

A frame is a 4-byte big-endian length, a 1-byte tag, a 16-byte session id
and the payload. The length covers everything after itself.
"""

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from cipherdenoise.ciphertensor import CipherTensor, deserialize_tensor, serialize_tensor
from cipherdenoise.errors import CipherDenoiseError, KeyMismatchError, ProtocolError
from cipherdenoise.paillier import PaillierPublicKey, int_to_bytes

PROTOCOL_VERSION = 1
SESSION_ID_BYTES = 16
MAX_FRAME_BYTES = 1 << 30

_LENGTH = struct.Struct(">I")
_FRAME_HEAD = struct.Struct(f">B{SESSION_ID_BYTES}s")
_U16 = struct.Struct(">H")
_ACT_HEAD = struct.Struct(">HB")
_HELLO_ACK = struct.Struct(">HBH3IH")

LENGTH_PREFIX_BYTES = _LENGTH.size


class MessageTag(IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    ENC_IMAGE = 3
    ACT_REQUEST = 4
    ACT_RESPONSE = 5
    RESULT = 6
    ERROR = 7


# Data frames are the ones that count toward the communication cost.
UPLOAD_TAGS = frozenset({MessageTag.ENC_IMAGE, MessageTag.ACT_RESPONSE})
DOWNLOAD_TAGS = frozenset({MessageTag.ACT_REQUEST, MessageTag.RESULT})


class Framework(IntEnum):
    """What the client asks for at HELLO."""

    AUTO = 0
    LINEAR = 1
    NONLINEAR = 2


@dataclass(frozen=True)
class Frame:
    tag: MessageTag
    session_id: bytes
    payload: bytes = b""

    def __post_init__(self) -> None:
        if len(self.session_id) != SESSION_ID_BYTES:
            raise ProtocolError("session id must be 16 bytes", ProtocolError.BAD_FRAME)

    def encode(self) -> bytes:
        body = _FRAME_HEAD.pack(int(self.tag), self.session_id) + self.payload
        return _LENGTH.pack(len(body)) + body

    @classmethod
    def decode_body(cls, body: bytes) -> "Frame":
        """Parse everything after the length prefix."""
        if len(body) < _FRAME_HEAD.size:
            raise ProtocolError(f"frame of {len(body)} bytes is too short", ProtocolError.BAD_FRAME)
        tag, session_id = _FRAME_HEAD.unpack_from(body)
        try:
            message_tag = MessageTag(tag)
        except ValueError as exc:
            raise ProtocolError(f"unknown message tag {tag}", ProtocolError.BAD_FRAME) from exc
        return cls(message_tag, session_id, bytes(body[_FRAME_HEAD.size :]))

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        length = frame_length(data[: _LENGTH.size])
        if len(data) != _LENGTH.size + length:
            raise ProtocolError(
                "frame length prefix does not match its body", ProtocolError.BAD_FRAME
            )
        return cls.decode_body(data[_LENGTH.size :])

    @property
    def wire_size(self) -> int:
        return _LENGTH.size + _FRAME_HEAD.size + len(self.payload)


def frame_length(prefix: bytes) -> int:
    if len(prefix) != _LENGTH.size:
        raise ProtocolError("truncated frame length", ProtocolError.BAD_FRAME)
    (length,) = _LENGTH.unpack(prefix)
    if not _FRAME_HEAD.size <= length <= MAX_FRAME_BYTES:
        raise ProtocolError(f"frame length {length} out of range", ProtocolError.BAD_FRAME)
    return length


def _bad(what: str, exc: Exception) -> ProtocolError:
    return ProtocolError(f"malformed {what} payload: {exc}", ProtocolError.BAD_FRAME)


# HELLO / HELLO_ACK


@dataclass(frozen=True)
class Hello:
    public_key: PaillierPublicKey
    frac_bits: int
    model_name: str = ""
    framework: Framework = Framework.AUTO
    version: int = PROTOCOL_VERSION


def _pack_blob(data: bytes, width: str) -> bytes:
    return struct.pack(f">{width}", len(data)) + data


def encode_hello(hello: Hello) -> bytes:
    """Version, model name, frac bits, n, g, then one framework byte.

    The trailing framework byte extends the base HELLO layout; a HELLO that
    ends after g decodes as Framework.AUTO.
    """
    name = hello.model_name.encode("utf-8")
    return b"".join(
        [
            _U16.pack(hello.version),
            _pack_blob(name, "H"),
            _U16.pack(hello.frac_bits),
            _pack_blob(int_to_bytes(hello.public_key.n), "I"),
            _pack_blob(int_to_bytes(hello.public_key.g), "I"),
            bytes([int(hello.framework)]),
        ]
    )


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> tuple[int, ...]:
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += struct.calcsize(fmt)
        return values

    def blob(self, width: str) -> bytes:
        (length,) = self.unpack(f">{width}")
        end = self.offset + length
        if end > len(self.data):
            raise ValueError("length-prefixed field runs past the payload")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise ValueError(f"{len(self.data) - self.offset} trailing bytes")


def decode_hello(payload: bytes) -> Hello:
    reader = _Reader(payload)
    try:
        (version,) = reader.unpack(">H")
        name = reader.blob("H").decode("utf-8")
        (frac_bits,) = reader.unpack(">H")
        n = int.from_bytes(reader.blob("I"), "big")
        g = int.from_bytes(reader.blob("I"), "big")
        framework = int(Framework.AUTO)
        if reader.offset < len(payload):
            (framework,) = reader.unpack(">B")
        reader.finish()
        return Hello(
            public_key=PaillierPublicKey(n=n, g=g),
            frac_bits=frac_bits,
            model_name=name,
            framework=Framework(framework),
            version=version,
        )
    except (struct.error, ValueError, CipherDenoiseError) as exc:
        raise _bad("HELLO", exc) from exc


@dataclass(frozen=True)
class HelloAck:
    linear: bool
    activation_count: int
    input_shape: tuple[int, int, int]
    output_frac_bits: int
    version: int = PROTOCOL_VERSION


def encode_hello_ack(ack: HelloAck) -> bytes:
    return _HELLO_ACK.pack(
        ack.version,
        int(ack.linear),
        ack.activation_count,
        *ack.input_shape,
        ack.output_frac_bits,
    )


def decode_hello_ack(payload: bytes) -> HelloAck:
    try:
        version, linear, count, c, h, w, out_bits = _HELLO_ACK.unpack(payload)
    except struct.error as exc:
        raise _bad("HELLO_ACK", exc) from exc
    return HelloAck(bool(linear), count, (c, h, w), out_bits, version)


# Tensor-carrying frames


def encode_tensor_payload(
    pk: PaillierPublicKey, tensor: CipherTensor, layer_index: int | None = None
) -> bytes:
    """ENC_IMAGE and RESULT carry a bare tensor; ACT_REQUEST prefixes the layer index."""
    body = serialize_tensor(pk, tensor)
    return body if layer_index is None else _U16.pack(layer_index) + body


def decode_tensor_payload(
    payload: bytes, with_layer: bool = False, pk: PaillierPublicKey | None = None
) -> tuple[int | None, CipherTensor]:
    """With ``pk``, a tensor under another key raises KeyMismatchError unwrapped."""
    offset = 0
    layer_index = None
    try:
        if with_layer:
            (layer_index,) = _U16.unpack_from(payload)
            offset = _U16.size
        tensor, end = deserialize_tensor(payload, offset, pk)
    except KeyMismatchError:
        raise
    except (struct.error, CipherDenoiseError) as exc:
        raise _bad("tensor", exc) from exc
    if end != len(payload):
        raise ProtocolError(
            f"{len(payload) - end} trailing bytes after tensor", ProtocolError.BAD_FRAME
        )
    return layer_index, tensor


# ACT_RESPONSE


def encode_sign_bits(layer_index: int, bits: np.ndarray) -> bytes:
    """Layer index, pad-bit count, then row-major bits packed MSB first.

    The pad-bit byte extends the base layout of layer index plus packed bits.
    """
    flat = np.asarray(bits, dtype=np.uint8).reshape(-1)
    pad = (-flat.size) % 8
    return _ACT_HEAD.pack(layer_index, pad) + np.packbits(flat).tobytes()


def decode_sign_bits(payload: bytes, element_count: int) -> tuple[int, np.ndarray]:
    try:
        layer_index, pad = _ACT_HEAD.unpack_from(payload)
    except struct.error as exc:
        raise _bad("ACT_RESPONSE", exc) from exc
    packed = np.frombuffer(payload, dtype=np.uint8, offset=_ACT_HEAD.size)
    if packed.size != (element_count + 7) // 8 or pad != (-element_count) % 8:
        raise ProtocolError(
            f"sign matrix of {packed.size} bytes (pad {pad}) for {element_count} elements",
            ProtocolError.BAD_FRAME,
        )
    return layer_index, np.unpackbits(packed)[:element_count]


# ERROR


def encode_error(code: int, message: str) -> bytes:
    return _U16.pack(code) + message.encode("utf-8")


def decode_error(payload: bytes) -> tuple[int, str]:
    try:
        (code,) = _U16.unpack_from(payload)
    except struct.error as exc:
        raise _bad("ERROR", exc) from exc
    return code, payload[_U16.size :].decode("utf-8", errors="replace")
