"""8-bit two's-complement fixed-point weights with a bit-addressable view.

Weights are stored per tensor as signed codes in [-128, 127] and a single
positive scale, so the real value is ``scale * code``. Bit ``i`` of a code
contributes ``scale * 2**i`` for i < 7 and ``-scale * 128`` for the sign bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import ContractError, Tensor

BIT_WIDTH = 8
CODE_MIN = -(1 << (BIT_WIDTH - 1))
CODE_MAX = (1 << (BIT_WIDTH - 1)) - 1
SIGN_BIT = BIT_WIDTH - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bit_width: int = BIT_WIDTH

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ContractError(f"quantization scale must be positive and finite, got {self.scale}")
        if self.bit_width != BIT_WIDTH:
            raise ContractError(f"only {BIT_WIDTH}-bit codes are supported, got {self.bit_width}")


class BitLocation(NamedTuple):
    """One flippable bit: parameter layer, flat weight index, bit (7 = sign)."""

    layer_id: int
    weight_index: int
    bit_index: int


class QuantizedTensor:
    """Integer codes plus a per-tensor scale.

    ``codes`` is an int8 array and is treated as immutable: bit flips return
    a new QuantizedTensor with a copied code array.
    """

    __slots__ = ("codes", "params")

    def __init__(self, codes: np.ndarray, params: QuantParams):
        codes = np.asarray(codes)
        if codes.dtype != np.int8:
            if codes.size and (codes.min() < CODE_MIN or codes.max() > CODE_MAX):
                raise ContractError("codes must lie in [-128, 127]")
            codes = codes.astype(np.int8)
        self.codes = codes
        self.params = params

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def scale(self) -> float:
        return self.params.scale

    @property
    def size(self) -> int:
        return self.codes.size

    def dequantize(self) -> np.ndarray:
        return self.params.scale * self.codes.astype(np.float64)

    def copy(self) -> "QuantizedTensor":
        return QuantizedTensor(self.codes.copy(), self.params)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.params == other.params
            and self.codes.shape == other.codes.shape
            and np.array_equal(self.codes, other.codes)
        )

    def __repr__(self) -> str:
        return f"QuantizedTensor(shape={self.shape}, scale={self.scale:.6g})"


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(weights) -> QuantizedTensor:
    """Symmetric per-tensor quantization with scale = max|w| / 127.

    An all-zero tensor gets scale 1. Rounding is half away from zero and codes
    are clamped to [-128, 127].
    """
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ContractError("cannot quantize non-finite weights")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / CODE_MAX if peak > 0 else 1.0
    codes = np.clip(round_half_away(w / scale), CODE_MIN, CODE_MAX).astype(np.int8)
    return QuantizedTensor(codes, QuantParams(scale))


def dequantize(q: QuantizedTensor) -> Tensor:
    return Tensor(q.dequantize())


def _check_code(code: int) -> int:
    code = int(code)
    if code < CODE_MIN or code > CODE_MAX:
        raise ContractError(f"code {code} is not representable in {BIT_WIDTH}-bit two's complement")
    return code


def _check_bit(bit_index: int) -> int:
    bit_index = int(bit_index)
    if not 0 <= bit_index < BIT_WIDTH:
        raise ContractError(f"bit index {bit_index} outside [0, {BIT_WIDTH - 1}]")
    return bit_index


def code_to_bits(code: int) -> tuple:
    """Two's-complement bits of ``code``, most significant (sign) bit first."""
    raw = _check_code(code) & 0xFF
    return tuple((raw >> i) & 1 for i in range(BIT_WIDTH - 1, -1, -1))


def bits_to_code(bits: Sequence[int]) -> int:
    """Inverse of :func:`code_to_bits` (MSB first)."""
    if len(bits) != BIT_WIDTH or any(b not in (0, 1) for b in bits):
        raise ContractError(f"expected {BIT_WIDTH} bits in {{0,1}}, got {bits!r}")
    raw = 0
    for b in bits:
        raw = (raw << 1) | int(b)
    return raw - 256 if raw & 0x80 else raw


def bit_place_value(bit_index: int) -> int:
    """Integer weight of bit ``i`` in a two's-complement code."""
    i = _check_bit(bit_index)
    return -(1 << i) if i == SIGN_BIT else 1 << i


PLACE_VALUES = np.array([bit_place_value(i) for i in range(BIT_WIDTH)], dtype=np.float64)


def bit_weight_derivative(params: QuantParams, bit_index: int) -> float:
    """d(dequantized weight) / d(bit i)."""
    return params.scale * bit_place_value(bit_index)


def bits_of(codes: np.ndarray) -> np.ndarray:
    """Bit table of shape ``codes.shape + (8,)``; column i holds bit i."""
    raw = np.asarray(codes, dtype=np.int8).view(np.uint8)
    return ((raw[..., None] >> np.arange(BIT_WIDTH, dtype=np.uint8)) & 1).astype(np.uint8)


def flip_code_bit(code: int, bit_index: int) -> int:
    raw = (_check_code(code) & 0xFF) ^ (1 << _check_bit(bit_index))
    return raw - 256 if raw & 0x80 else raw


def flip_codes(q: QuantizedTensor, weight_index: int, bit_index: int) -> QuantizedTensor:
    """Copy of ``q`` with one bit of one code toggled."""
    _check_bit(bit_index)
    if not 0 <= weight_index < q.size:
        raise ContractError(f"weight index {weight_index} outside [0, {q.size})")
    codes = q.codes.copy()
    flat = codes.reshape(-1).view(np.uint8)
    flat[weight_index] ^= np.uint8(1 << bit_index)
    return QuantizedTensor(codes, q.params)


def xor_mask(q: QuantizedTensor, mask: np.ndarray) -> QuantizedTensor:
    """Apply ``codes XOR mask`` elementwise (mask given as uint8 per weight)."""
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != q.shape:
        raise ContractError(f"mask shape {mask.shape} does not match codes {q.shape}")
    raw = q.codes.view(np.uint8) ^ mask
    return QuantizedTensor(raw.view(np.int8), q.params)
