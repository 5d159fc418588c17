"""Server-side halves of the activation exchange.

Nothing here can decrypt: the server perturbs a feature with a secret
nonzero matrix M, the client returns the sign bits of M * Q, and the
server recovers sign(Q) as agreement between those bits and sign(M).
"""

import random
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from cipherdenoise.ciphertensor import (
    CipherTensor,
    PlainTensor,
    add_enc,
    encrypt_tensor,
    rerandomize_tensor,
    scale_elementwise,
)
from cipherdenoise.encoding import ScaleTag
from cipherdenoise.errors import ShapeMismatchError
from cipherdenoise.paillier import PaillierPublicKey, default_rng

DEFAULT_PERTURBANCE_BOUND = 1 << 16


@dataclass(frozen=True, eq=False)
class SignMatrix:
    """Binary matrix in feature shape; 1 marks a non-negative entry."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.size and int(bits.max()) > 1:
            raise ShapeMismatchError("sign matrix entries must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def of(cls, values: np.ndarray) -> "SignMatrix":
        """sign() with sign(0) = 1."""
        out = np.empty(values.shape, dtype=np.uint8)
        for idx, v in np.ndenumerate(values):
            out[idx] = 1 if v >= 0 else 0
        return cls(out)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.bits.shape)


@dataclass(frozen=True, eq=False)
class PerturbanceMatrix:
    """Nonzero integers in [-B, -1] U [1, B]; held in server session state only."""

    values: np.ndarray
    sign_matrix_server: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.int64)
        if values.size and not np.all(values != 0):
            raise ShapeMismatchError("perturbance entries must be nonzero")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sign_matrix_server", (values >= 0).astype(np.uint8))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def bound(self) -> int:
        return int(np.abs(self.values).max(initial=0))

    def __repr__(self) -> str:
        return f"<PerturbanceMatrix shape={self.shape}>"


def sample_perturbance(
    shape: Sequence[int], bound: int = DEFAULT_PERTURBANCE_BOUND, rng: random.Random | None = None
) -> PerturbanceMatrix:
    """Uniform over [-bound, -1] U [1, bound], element by element in row-major order."""
    if bound < 1:
        raise ValueError("perturbance bound must be at least 1")
    rng = rng or default_rng()
    count = int(np.prod(shape, dtype=np.int64))
    values = [rng.randint(1, bound) * (1 if rng.getrandbits(1) else -1) for _ in range(count)]
    return PerturbanceMatrix(np.array(values, dtype=np.int64).reshape(tuple(shape)))


def identity_perturbance(shape: Sequence[int]) -> PerturbanceMatrix:
    return PerturbanceMatrix(np.ones(tuple(shape), dtype=np.int64))


def server_perturb(
    pk: PaillierPublicKey,
    c_i: CipherTensor,
    m: PerturbanceMatrix,
    rng: random.Random | None = None,
) -> CipherTensor:
    """C_per = C_i^M elementwise, rerandomized; decrypts to M * Q mod n."""
    if m.shape != c_i.shape:
        raise ShapeMismatchError(f"perturbance {m.shape} for feature {c_i.shape}")
    perturbed = scale_elementwise(pk, c_i, m.values.astype(object))
    return rerandomize_tensor(pk, perturbed, rng)


def combine_signs(s_u: SignMatrix, m: PerturbanceMatrix) -> np.ndarray:
    """S[k] = 1 iff the client's bit agrees with sign(M[k])."""
    if s_u.shape != m.shape:
        raise ShapeMismatchError(f"sign matrix {s_u.shape} for perturbance {m.shape}")
    return (s_u.bits == m.sign_matrix_server).astype(np.uint8)


def server_combine_and_activate(
    pk: PaillierPublicKey,
    c_i: CipherTensor,
    s_u: SignMatrix,
    m: PerturbanceMatrix,
    rng: random.Random | None = None,
) -> CipherTensor:
    """ReLU under encryption: C_i^S[k] per element, then fresh randomness."""
    s = combine_signs(s_u, m)
    activated = scale_elementwise(pk, c_i, s.astype(object))
    return rerandomize_tensor(pk, activated, rng)


def server_activate_leaky(
    pk: PaillierPublicKey,
    c_i: CipherTensor,
    s: np.ndarray,
    alpha_encoded: int,
    alpha_bits: int,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Multiply positives by 2^alpha_bits and negatives by alpha; the scale grows by alpha_bits."""
    if tuple(s.shape) != c_i.shape:
        raise ShapeMismatchError(f"sign matrix {tuple(s.shape)} for feature {c_i.shape}")
    positive = 1 << alpha_bits
    factors = np.empty(s.shape, dtype=object)
    for idx, bit in np.ndenumerate(s):
        factors[idx] = positive if bit else alpha_encoded
    activated = scale_elementwise(pk, c_i, factors, scale_bits=alpha_bits)
    return rerandomize_tensor(pk, activated, rng)


def encrypt_neg_threshold(
    pk: PaillierPublicKey,
    shape: tuple[int, int, int],
    threshold: int,
    scale: ScaleTag,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Enc(-t) broadcast to the feature shape; only the public key is needed."""
    values = np.full(shape, -threshold, dtype=object)
    return encrypt_tensor(pk, PlainTensor(shape, values, scale), rng)


def server_threshold_shift(
    pk: PaillierPublicKey,
    c_i: CipherTensor,
    enc_neg_threshold: CipherTensor,
    rng: random.Random | None = None,
) -> CipherTensor:
    """Encrypt 2(Q - t) + 1 so the sign exchange tests Q >= t.

    The odd lift keeps the shifted value away from zero, where a negative
    perturbance would flip the agreement.
    """
    shifted = add_enc(pk, c_i, enc_neg_threshold)
    doubled = scale_elementwise(pk, shifted, np.full(shifted.size, 2, dtype=object))
    ones = PlainTensor(c_i.shape, np.ones(c_i.shape, dtype=object), c_i.scale)
    return add_enc(pk, doubled, encrypt_tensor(pk, ones, rng))
