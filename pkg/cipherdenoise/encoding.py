import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from cipherdenoise.errors import EncodeOverflowError, OverflowBudgetError

if TYPE_CHECKING:
    from cipherdenoise.model import ModelSpec

logger = logging.getLogger(__name__)

DEFAULT_FRAC_BITS = 16


@dataclass(frozen=True)
class FixedPointParams:
    """Signed fixed-point layout over Z_n.

    Values are scaled by 2^frac_bits and rounded; negatives occupy the
    upper half of Z_n.
    """

    frac_bits: int
    n: int

    def __post_init__(self) -> None:
        if self.frac_bits < 0:
            raise ValueError("frac_bits must be non-negative")
        if (1 << self.frac_bits) * 4 >= self.n:
            raise EncodeOverflowError(
                f"2^{self.frac_bits} leaves no signed headroom under a {self.n.bit_length()}-bit n"
            )


@dataclass(frozen=True, order=True)
class ScaleTag:
    """Fractional bits accumulated by every fixed-point multiplication so far."""

    total_frac_bits: int

    def __post_init__(self) -> None:
        if self.total_frac_bits < 0:
            raise ValueError("scale must be non-negative")

    def shifted(self, bits: int) -> "ScaleTag":
        return ScaleTag(self.total_frac_bits + bits)


def quantize(v: float, frac_bits: int) -> int:
    """round(v * 2^frac_bits) with halves rounded away from zero."""
    if not math.isfinite(v):
        raise EncodeOverflowError(f"cannot encode non-finite value {v}")
    scaled = math.ldexp(abs(v), frac_bits)
    magnitude = math.floor(scaled + 0.5)
    return -magnitude if v < 0 else magnitude


def quantize_array(values: np.ndarray | Iterable[float], frac_bits: int) -> np.ndarray:
    """Elementwise :func:`quantize` into an object array of Python ints."""
    arr = np.asarray(values, dtype=np.float64)
    out = np.empty(arr.shape, dtype=object)
    for idx, v in np.ndenumerate(arr):
        out[idx] = quantize(float(v), frac_bits)
    return out


def to_residue(value: int, n: int) -> int:
    """Map a signed integer to Z_n (negatives into the upper half)."""
    return value % n


def center_lift(e: int, n: int) -> int:
    """Signed representative of ``e`` in (-n/2, n/2]."""
    e %= n
    return e - n if e > n // 2 else e


def encode(v: float, params: FixedPointParams) -> int:
    q = quantize(v, params.frac_bits)
    if 2 * abs(q) >= params.n:
        raise EncodeOverflowError(
            f"|{v}| * 2^{params.frac_bits} does not fit in a {params.n.bit_length()}-bit modulus"
        )
    return to_residue(q, params.n)


def decode(e: int, tag: ScaleTag, n: int) -> float:
    return center_lift(e, n) / (1 << tag.total_frac_bits)


def decode_array(residues: np.ndarray, tag: ScaleTag, n: int) -> np.ndarray:
    out = np.empty(residues.shape, dtype=np.float64)
    for idx, e in np.ndenumerate(residues):
        out[idx] = decode(int(e), tag, n)
    return out


def dequantize_array(values: np.ndarray, tag: ScaleTag) -> np.ndarray:
    """Signed fixed-point integers back to reals."""
    out = np.empty(values.shape, dtype=np.float64)
    for idx, v in np.ndenumerate(values):
        out[idx] = int(v) / (1 << tag.total_frac_bits)
    return out


@dataclass(frozen=True)
class LayerBudget:
    index: int
    kind: str
    frac_bits: int
    magnitude_bound: float

    @property
    def required_bits(self) -> int:
        """Smallest modulus size that keeps this layer's values center-liftable."""
        magnitude = max(self.magnitude_bound, 1.0)
        return math.ceil(math.log2(magnitude)) + self.frac_bits + 2


def overflow_budget(
    model: "ModelSpec",
    params: FixedPointParams,
    input_bound: float = 1.0,
    perturbance_bound: int = 1,
) -> tuple[int, float]:
    """Worst-case accumulated scale and magnitude across ``model``.

    ``perturbance_bound`` accounts for the perturbed features the client
    decrypts during the activation exchange.
    """
    max_bits = params.frac_bits
    max_bound = input_bound
    offending: LayerBudget | None = None
    required = 0
    for budget in model.budget_trace(params.frac_bits, input_bound, perturbance_bound):
        required = max(required, budget.required_bits)
        if offending is None and budget.magnitude_bound * 2.0**budget.frac_bits * 2 >= params.n:
            offending = budget
        max_bits = max(max_bits, budget.frac_bits)
        max_bound = max(max_bound, budget.magnitude_bound)
    if offending is not None:
        raise OverflowBudgetError(
            f"layer {offending.index} ({offending.kind}) can reach "
            f"{offending.magnitude_bound:.3g} at scale 2^{offending.frac_bits}; "
            f"the model requires a modulus of at least {required} bits, "
            f"have {params.n.bit_length()}",
            layer_index=offending.index,
            required_bits=required,
        )
    logger.debug(
        "[cipherdenoise] Overflow budget for %s: max_frac_bits=%d bound=%.3g",
        model.name,
        max_bits,
        max_bound,
    )
    return max_bits, max_bound
