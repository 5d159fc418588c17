"""Encrypted tensors and the layer kernels built from the two homomorphic primitives.

Every kernel accumulates one output element at a time, multiplying scalar
powers of input ciphertexts in row-major ascending (channel, row, column)
order and reducing modulo n^2 after each factor. Results are therefore
bit-identical across runs for a fixed random source.
"""

import logging
import random
import struct
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any

import gmpy2
import numpy as np

from cipherdenoise.encoding import ScaleTag
from cipherdenoise.errors import (
    KeyMismatchError,
    MalformedCiphertextError,
    ScaleMismatchError,
    ShapeMismatchError,
    StorageError,
)
from cipherdenoise.paillier import (
    Ciphertext,
    PaillierPublicKey,
    check_ciphertext,
    default_rng,
    encrypt,
    obfuscator,
)

logger = logging.getLogger(__name__)

CTZ_MAGIC = b"CTZ1"
_HEADER_HEAD = struct.Struct(">4sB")
_HEADER_TAIL = struct.Struct(">H64sI")

Shape = tuple[int, ...]


def _object_array(values: Any, shape: Shape) -> np.ndarray:
    arr = np.empty(shape, dtype=object)
    flat = np.asarray(values, dtype=object).reshape(-1)
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError(f"{flat.size} elements do not fill shape {shape}")
    arr.reshape(-1)[:] = [int(v) for v in flat]
    return arr


@dataclass(frozen=True, eq=False)
class PlainTensor:
    """Plaintext tensor: fixed-point integers (object dtype) or reals (float64)."""

    shape: Shape
    data: np.ndarray
    scale: ScaleTag = field(default_factory=lambda: ScaleTag(0))

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if self.data.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeMismatchError(f"data of size {self.data.size} does not match {shape}")
        if self.data.shape != shape:
            object.__setattr__(self, "data", self.data.reshape(shape))

    @classmethod
    def integers(cls, values: Any, scale: ScaleTag | int = 0) -> "PlainTensor":
        arr = np.asarray(values, dtype=object)
        tag = scale if isinstance(scale, ScaleTag) else ScaleTag(scale)
        return cls(shape=arr.shape, data=_object_array(arr, arr.shape), scale=tag)

    @classmethod
    def reals(cls, values: Any) -> "PlainTensor":
        arr = np.asarray(values, dtype=np.float64)
        return cls(shape=arr.shape, data=arr.copy())

    @property
    def is_integer(self) -> bool:
        return self.data.dtype == object

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlainTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale == other.scale
            and bool(np.all(self.data == other.data))
        )


@dataclass(frozen=True, eq=False)
class CipherTensor:
    """A (channels, height, width) grid of ciphertexts sharing one scale and key.

    ``values`` holds the raw residues mod n^2 in row-major order; it is
    made read-only at construction.
    """

    shape: tuple[int, int, int]
    values: np.ndarray
    scale: ScaleTag
    key_id: str

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if len(shape) != 3:
            raise ShapeMismatchError(f"cipher tensors are (C, H, W), got {shape}")
        object.__setattr__(self, "shape", shape)
        values = _object_array(self.values, shape)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def build(
        cls, shape: Shape, values: Iterable[Any], scale: ScaleTag, key_id: str
    ) -> "CipherTensor":
        if len(shape) != 3:
            raise ShapeMismatchError(f"cipher tensors are (C, H, W), got {shape}")
        arr = values if isinstance(values, np.ndarray) else np.array(list(values), dtype=object)
        return cls(shape=(shape[0], shape[1], shape[2]), values=arr, scale=scale, key_id=key_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CipherTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale == other.scale
            and self.key_id == other.key_id
            and self.values.tolist() == other.values.tolist()
        )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __getitem__(self, index: tuple[int, int, int]) -> Ciphertext:
        return Ciphertext(value=int(self.values[index]), key_id=self.key_id)

    def ciphertexts(self) -> list[Ciphertext]:
        """Row-major list of the elements."""
        return [Ciphertext(value=int(v), key_id=self.key_id) for v in self.values.reshape(-1)]


def _check_key(pk: PaillierPublicKey, *tensors: CipherTensor) -> None:
    for tensor in tensors:
        if tensor.key_id != pk.fingerprint:
            raise KeyMismatchError(
                f"tensor encrypted under {tensor.key_id[:12]}, session key is "
                f"{pk.fingerprint[:12]}"
            )


def _int_weights(kernel: PlainTensor, ndim: int, what: str) -> np.ndarray:
    if not kernel.is_integer:
        raise ShapeMismatchError(f"{what} must be integer-encoded before use")
    if kernel.data.ndim != ndim:
        raise ShapeMismatchError(f"{what} must have {ndim} dimensions, got {kernel.shape}")
    return kernel.data


def encrypt_tensor(
    pk: PaillierPublicKey, plain: PlainTensor, rng: random.Random | None = None
) -> CipherTensor:
    """Encrypt a signed fixed-point tensor elementwise (negatives mod n)."""
    if not plain.is_integer:
        raise ShapeMismatchError("only integer-encoded tensors can be encrypted")
    rng = rng or default_rng()
    shape = plain.shape if len(plain.shape) == 3 else (1, *plain.shape)
    values = [encrypt(pk, int(v) % pk.n, rng).value for v in plain.data.reshape(-1)]
    return CipherTensor.build(shape, values, plain.scale, pk.fingerprint)


class _PowerTable:
    """Scalar powers of one padded input grid, with lazily cached inverses."""

    def __init__(self, pk: PaillierPublicKey, grid: np.ndarray) -> None:
        self.n_sq = gmpy2.mpz(pk.n_sq)
        self.grid = grid
        self._inverse: dict[tuple[int, ...], Any] = {}

    def power(self, index: tuple[int, ...], exponent: int) -> Any:
        base = self.grid[index]
        if exponent < 0:
            inv = self._inverse.get(index)
            if inv is None:
                try:
                    inv = gmpy2.invert(base, self.n_sq)
                except ZeroDivisionError as exc:
                    raise MalformedCiphertextError(f"ciphertext at {index} is not a unit") from exc
                self._inverse[index] = inv
            base, exponent = inv, -exponent
        if exponent == 1:
            return base
        return gmpy2.powmod(base, exponent, self.n_sq)


def _mpz_grid(values: np.ndarray) -> np.ndarray:
    grid = np.empty(values.shape, dtype=object)
    for idx, v in np.ndenumerate(values):
        grid[idx] = gmpy2.mpz(v)
    return grid


def _pad_encrypted(
    pk: PaillierPublicKey, values: np.ndarray, padding: int, rng: random.Random
) -> np.ndarray:
    if padding == 0:
        return _mpz_grid(values)
    c, h, w = values.shape
    padded = np.empty((c, h + 2 * padding, w + 2 * padding), dtype=object)
    for idx in np.ndindex(padded.shape):
        ch, y, x = idx
        inner_y, inner_x = y - padding, x - padding
        if 0 <= inner_y < h and 0 <= inner_x < w:
            padded[idx] = gmpy2.mpz(values[ch, inner_y, inner_x])
        else:
            padded[idx] = gmpy2.mpz(encrypt(pk, 0, rng).value)
    return padded


def _finish(
    pk: PaillierPublicKey,
    accumulators: np.ndarray,
    touched: np.ndarray,
    scale: ScaleTag,
    rng: random.Random,
) -> CipherTensor:
    # Outputs with no nonzero contribution would be the constant ciphertext 1.
    out = np.empty(accumulators.shape, dtype=object)
    for idx, acc in np.ndenumerate(accumulators):
        out[idx] = int(acc) if touched[idx] else encrypt(pk, 0, rng).value
    return CipherTensor.build(out.shape, out, scale, pk.fingerprint)


def _output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d_enc(
    pk: PaillierPublicKey,
    x: CipherTensor,
    kernel: PlainTensor,
    stride: int = 1,
    padding: int = 0,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Encrypted cross-correlation; kernel layout (out, in, kh, kw).

    Each output is the product over taps of Enc(x)^w mod n^2, so it decrypts
    to the integer convolution of Dec(x) with the kernel.
    """
    _check_key(pk, x)
    w = _int_weights(kernel, 4, "convolution kernel")
    out_c, in_c, kh, kw = w.shape
    c, h, width = x.shape
    if in_c != c:
        raise ShapeMismatchError(f"kernel expects {in_c} input channels, tensor has {c}")
    oh = _output_size(h, kh, stride, padding)
    ow = _output_size(width, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError(f"kernel {kh}x{kw} does not fit input {h}x{width}")
    rng = rng or default_rng()
    table = _PowerTable(pk, _pad_encrypted(pk, x.values, padding, rng))
    n_sq = table.n_sq
    acc = np.empty((out_c, oh, ow), dtype=object)
    touched = np.zeros((out_c, oh, ow), dtype=bool)
    for o in range(out_c):
        taps = [
            (ci, i, j, int(w[o, ci, i, j]))
            for ci in range(in_c)
            for i in range(kh)
            for j in range(kw)
            if w[o, ci, i, j] != 0
        ]
        touched[o] = bool(taps)
        for y in range(oh):
            for xx in range(ow):
                value = gmpy2.mpz(1)
                for ci, i, j, a in taps:
                    value = value * table.power((ci, y * stride + i, xx * stride + j), a) % n_sq
                acc[o, y, xx] = value
    return _finish(pk, acc, touched, x.scale.shifted(kernel.scale.total_frac_bits), rng)


def conv2d_transpose_enc(
    pk: PaillierPublicKey,
    x: CipherTensor,
    kernel: PlainTensor,
    stride: int = 1,
    padding: int = 0,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Encrypted transposed convolution; kernel layout (in, out, kh, kw).

    Computed in gather form so every output element still accumulates in a
    fixed (channel, kernel row, kernel column) order.
    """
    _check_key(pk, x)
    w = _int_weights(kernel, 4, "transposed convolution kernel")
    in_c, out_c, kh, kw = w.shape
    c, h, width = x.shape
    if in_c != c:
        raise ShapeMismatchError(f"kernel expects {in_c} input channels, tensor has {c}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (width - 1) * stride - 2 * padding + kw
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("transposed convolution output would be empty")
    rng = rng or default_rng()
    table = _PowerTable(pk, _mpz_grid(x.values))
    n_sq = table.n_sq
    acc = np.empty((out_c, oh, ow), dtype=object)
    touched = np.zeros((out_c, oh, ow), dtype=bool)
    for o in range(out_c):
        for y in range(oh):
            for xx in range(ow):
                value = gmpy2.mpz(1)
                full_y, full_x = y + padding, xx + padding
                for ci in range(in_c):
                    for i in range(kh):
                        dy = full_y - i
                        if dy < 0 or dy % stride or dy // stride >= h:
                            continue
                        for j in range(kw):
                            dx = full_x - j
                            a = int(w[ci, o, i, j])
                            if a == 0 or dx < 0 or dx % stride or dx // stride >= width:
                                continue
                            value = value * table.power((ci, dy // stride, dx // stride), a) % n_sq
                            touched[o, y, xx] = True
                acc[o, y, xx] = value
    return _finish(pk, acc, touched, x.scale.shifted(kernel.scale.total_frac_bits), rng)


def linear_enc(
    pk: PaillierPublicKey,
    x: CipherTensor,
    weight: PlainTensor,
    bias: PlainTensor | None = None,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Matrix-vector product over the flattened tensor; output shape (out, 1, 1)."""
    _check_key(pk, x)
    w = _int_weights(weight, 2, "linear weight")
    out_f, in_f = w.shape
    if in_f != x.size:
        raise ShapeMismatchError(f"weight expects {in_f} inputs, tensor has {x.size}")
    rng = rng or default_rng()
    table = _PowerTable(pk, _mpz_grid(x.values.reshape(-1)))
    acc = np.empty((out_f, 1, 1), dtype=object)
    touched = np.zeros((out_f, 1, 1), dtype=bool)
    for o in range(out_f):
        value = gmpy2.mpz(1)
        for k in range(in_f):
            a = int(w[o, k])
            if a:
                value = value * table.power((k,), a) % table.n_sq
                touched[o, 0, 0] = True
        acc[o, 0, 0] = value
    out = _finish(pk, acc, touched, x.scale.shifted(weight.scale.total_frac_bits), rng)
    if bias is not None:
        out = bias_add_enc(pk, out, bias, rng)
    return out


def add_enc(pk: PaillierPublicKey, a: CipherTensor, b: CipherTensor) -> CipherTensor:
    """Elementwise homomorphic addition."""
    _check_key(pk, a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot add {a.shape} and {b.shape}")
    if a.scale != b.scale:
        raise ScaleMismatchError(
            f"cannot add scales 2^{a.scale.total_frac_bits} and 2^{b.scale.total_frac_bits}"
        )
    n_sq = pk.n_sq
    values = [int(u) * int(v) % n_sq for u, v in zip(a.values.flat, b.values.flat)]
    return CipherTensor.build(a.shape, values, a.scale, pk.fingerprint)


def bias_add_enc(
    pk: PaillierPublicKey,
    x: CipherTensor,
    bias: PlainTensor,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Add a per-channel plaintext bias, encrypted once per channel under ``pk``."""
    _check_key(pk, x)
    b = _int_weights(bias, 1, "bias")
    if b.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"bias has {b.shape[0]} channels, tensor has {x.shape[0]}")
    if bias.scale != x.scale:
        raise ScaleMismatchError(
            f"bias at scale 2^{bias.scale.total_frac_bits}, "
            f"feature at 2^{x.scale.total_frac_bits}"
        )
    rng = rng or default_rng()
    n_sq = pk.n_sq
    out = np.empty(x.shape, dtype=object)
    for ch in range(x.shape[0]):
        enc_b = encrypt(pk, int(b[ch]) % pk.n, rng).value
        for idx in np.ndindex(x.shape[1:]):
            out[(ch, *idx)] = int(x.values[(ch, *idx)]) * enc_b % n_sq
    return CipherTensor(shape=x.shape, values=out, scale=x.scale, key_id=pk.fingerprint)


def scale_elementwise(
    pk: PaillierPublicKey,
    x: CipherTensor,
    factors: np.ndarray,
    scale_bits: int = 0,
) -> CipherTensor:
    """Raise each element to its own plaintext exponent (a Hadamard product)."""
    _check_key(pk, x)
    if factors.size != x.size:
        raise ShapeMismatchError(f"{factors.size} factors for a tensor of {x.size} elements")
    table = _PowerTable(pk, _mpz_grid(x.values))
    out = np.empty(x.shape, dtype=object)
    for idx, a in zip(np.ndindex(x.shape), factors.reshape(-1)):
        out[idx] = int(table.power(idx, int(a)))
    return CipherTensor(
        shape=x.shape, values=out, scale=x.scale.shifted(scale_bits), key_id=pk.fingerprint
    )


def align_scale(pk: PaillierPublicKey, x: CipherTensor, target: ScaleTag) -> CipherTensor:
    """Lift ``x`` to a larger scale by multiplying every element by 2^delta."""
    delta = target.total_frac_bits - x.scale.total_frac_bits
    if delta < 0:
        raise ScaleMismatchError("scales only grow; cannot lower a tensor's scale")
    if delta == 0:
        return x
    factors = np.full(x.size, 1 << delta, dtype=object)
    return scale_elementwise(pk, x, factors, scale_bits=delta)


def rerandomize_tensor(
    pk: PaillierPublicKey, x: CipherTensor, rng: random.Random | None = None
) -> CipherTensor:
    _check_key(pk, x)
    rng = rng or default_rng()
    n_sq = pk.n_sq
    values = [int(v) * obfuscator(pk, rng) % n_sq for v in x.values.flat]
    return CipherTensor.build(x.shape, values, x.scale, pk.fingerprint)


# Plaintext reference kernels (integer-exact on object arrays, float64 otherwise)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=0)
    oh = _output_size(h, kh, stride, padding)
    ow = _output_size(w, kw, stride, padding)
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(c * kh * kw, oh * ow)


def conv2d_array(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    out_c, in_c, kh, kw = w.shape
    if x.shape[0] != in_c:
        raise ShapeMismatchError(f"kernel expects {in_c} input channels, got {x.shape[0]}")
    oh = _output_size(x.shape[1], kh, stride, padding)
    ow = _output_size(x.shape[2], kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError(f"kernel {kh}x{kw} does not fit input {x.shape[1:]}")
    cols = im2col(x, kh, kw, stride, padding)
    return np.dot(w.reshape(out_c, -1), cols).reshape(out_c, oh, ow)


def conv2d_transpose_array(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    in_c, out_c, kh, kw = w.shape
    c, h, width = x.shape
    if c != in_c:
        raise ShapeMismatchError(f"kernel expects {in_c} input channels, got {c}")
    full_h = (h - 1) * stride + kh
    full_w = (width - 1) * stride + kw
    full = np.zeros((out_c, full_h, full_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            contribution = np.tensordot(w[:, :, i, j], x, axes=([0], [0]))
            rows = slice(i, i + stride * (h - 1) + 1, stride)
            cols = slice(j, j + stride * (width - 1) + 1, stride)
            full[:, rows, cols] += contribution
    oh = full_h - 2 * padding
    ow = full_w - 2 * padding
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("transposed convolution output would be empty")
    return full[:, padding : padding + oh, padding : padding + ow]


def conv2d_plain(
    x: PlainTensor, kernel: PlainTensor, stride: int = 1, padding: int = 0
) -> PlainTensor:
    """Reference convolution; integer inputs give exact integer outputs."""
    out = conv2d_array(x.data, kernel.data, stride, padding)
    return PlainTensor(out.shape, out, x.scale.shifted(kernel.scale.total_frac_bits))


def conv2d_transpose_plain(
    x: PlainTensor, kernel: PlainTensor, stride: int = 1, padding: int = 0
) -> PlainTensor:
    out = conv2d_transpose_array(x.data, kernel.data, stride, padding)
    return PlainTensor(out.shape, out, x.scale.shifted(kernel.scale.total_frac_bits))


def linear_plain(
    x: PlainTensor, weight: PlainTensor, bias: PlainTensor | None = None
) -> PlainTensor:
    flat = x.data.reshape(-1)
    if weight.data.shape[1] != flat.size:
        raise ShapeMismatchError(
            f"weight expects {weight.data.shape[1]} inputs, tensor has {flat.size}"
        )
    out = np.dot(weight.data, flat).reshape(-1, 1, 1)
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1)
    return PlainTensor(out.shape, out, x.scale.shifted(weight.scale.total_frac_bits))


# Serialization shared by the wire protocol and .ctz files


def header_size() -> int:
    return _HEADER_HEAD.size + 3 * 4 + _HEADER_TAIL.size


def serialize_tensor(pk: PaillierPublicKey, x: CipherTensor) -> bytes:
    """Header then big-endian fixed-width ciphertexts, row-major."""
    _check_key(pk, x)
    width = pk.ciphertext_bytes
    parts = [
        _HEADER_HEAD.pack(CTZ_MAGIC, len(x.shape)),
        struct.pack(">3I", *x.shape),
        _HEADER_TAIL.pack(x.scale.total_frac_bits, x.key_id.encode("ascii"), width),
    ]
    parts.extend(int(v).to_bytes(width, "big") for v in x.values.flat)
    return b"".join(parts)


def deserialize_tensor(
    data: bytes, offset: int = 0, pk: PaillierPublicKey | None = None
) -> tuple[CipherTensor, int]:
    """Parse one tensor starting at ``offset``; returns it and the end offset.

    With ``pk`` the tensor must be under that key, its width must be the key's
    ciphertext width and every element must lie in Z*_{n^2}.
    """
    try:
        magic, ndim = _HEADER_HEAD.unpack_from(data, offset)
        if magic != CTZ_MAGIC or ndim != 3:
            raise MalformedCiphertextError("not a cipher tensor (bad magic or rank)")
        offset += _HEADER_HEAD.size
        shape = struct.unpack_from(">3I", data, offset)
        offset += 12
        frac_bits, raw_key_id, width = _HEADER_TAIL.unpack_from(data, offset)
        offset += _HEADER_TAIL.size
    except struct.error as exc:
        raise MalformedCiphertextError(f"truncated cipher tensor header: {exc}") from exc
    try:
        key_id = raw_key_id.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedCiphertextError("cipher tensor key id is not ascii") from exc
    if pk is not None:
        if key_id != pk.fingerprint:
            raise KeyMismatchError(
                f"tensor was encrypted under key {key_id[:12]}, expected {pk.fingerprint[:12]}"
            )
        if width != pk.ciphertext_bytes:
            raise MalformedCiphertextError(
                f"ciphertext width {width} does not match the key's {pk.ciphertext_bytes}"
            )
    count = shape[0] * shape[1] * shape[2]
    end = offset + count * width
    if end > len(data):
        raise MalformedCiphertextError(
            f"cipher tensor body truncated: need {end - offset} bytes, have {len(data) - offset}"
        )
    values = [
        int.from_bytes(data[offset + k * width : offset + (k + 1) * width], "big")
        for k in range(count)
    ]
    if pk is not None:
        for value in values:
            check_ciphertext(pk, Ciphertext(value, key_id))
    tensor = CipherTensor.build(shape, values, ScaleTag(frac_bits), key_id)
    return tensor, end


def save_ctz(pk: PaillierPublicKey, x: CipherTensor, path: str) -> int:
    payload = serialize_tensor(pk, x)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise StorageError(f"cannot write cipher tensor {path}: {exc}") from exc
    logger.info("[cipherdenoise] Wrote %s (%d bytes, shape=%s)", path, len(payload), x.shape)
    return len(payload)


def load_ctz(path: str, pk: PaillierPublicKey | None = None) -> CipherTensor:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read cipher tensor {path}: {exc}") from exc
    tensor, end = deserialize_tensor(data, pk=pk)
    if end != len(data):
        raise MalformedCiphertextError(f"{len(data) - end} trailing bytes after tensor in {path}")
    return tensor
