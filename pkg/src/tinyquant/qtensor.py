"""Affine quantization primitives and fixed-point requantization machinery.

A real tensor is mapped to integers as ``q = clamp(round(v / scale) + zero_point)``
and carried around together with its quantization parameters.  Compute kernels
produce wide (32-bit) integer accumulators; ``requantize`` brings those back to
a narrow format by multiplying with a normalized mantissa/shift pair instead of
a float, so the whole pipeline stays closed under integer arithmetic.

Rounding rule used everywhere: round half away from zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

ALLOWED_BITS = (2, 3, 4, 8, 16)

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

# Fallback scale for tensors with a degenerate (all-equal) calibration range.
DEGENERATE_SCALE = 2.0 ** -16

_MANTISSA_BITS = 31


class QuantizationError(ValueError):
    """Raised for invalid quantizer parameters or inputs."""


def int_range(bits: int) -> tuple[int, int]:
    """Representable signed range for a bit-width: [-2^(b-1), 2^(b-1)-1]."""
    if bits not in ALLOWED_BITS:
        raise QuantizationError(f"bit-width {bits} not in {ALLOWED_BITS}")
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (as float array)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rounded_rshift(value: np.ndarray, shift) -> np.ndarray:
    """Arithmetic right shift of int64 values with round-half-away-from-zero.

    Shifts larger than 56 are staged (a plain floor shift first); this can move
    the result by at most one unit, which every caller tolerates by contract.
    """
    value = np.asarray(value, dtype=np.int64)
    if isinstance(shift, (int, np.integer)):
        # scalar fast path: most requantizations use one shift per tensor
        shift = int(shift)
        if shift < 0:
            raise QuantizationError("shift must be nonnegative")
        if shift == 0:
            return value.copy()
        if shift > 56:
            return _rounded_rshift_staged(value, np.asarray(shift, np.int64))
        mag = np.abs(value)
        mag += np.int64(1) << (shift - 1)
        mag >>= shift
        np.multiply(mag, np.sign(value), out=mag)
        return mag
    shift = np.asarray(shift, dtype=np.int64)
    if shift.min() < 0:
        raise QuantizationError("shift must be nonnegative")
    return _rounded_rshift_staged(value, shift)


def _rounded_rshift_staged(value: np.ndarray, shift: np.ndarray) -> np.ndarray:
    sign = np.sign(value)
    mag = np.abs(value)
    pre = np.maximum(shift - 56, 0)
    mag = mag >> pre
    shift = shift - pre
    half = np.where(shift > 0, np.int64(1) << np.maximum(shift - 1, 0), np.int64(0))
    return sign * ((mag + half) >> shift)


def rounded_intdiv(num: np.ndarray, den: int) -> np.ndarray:
    """Integer division with round-half-away-from-zero; den must be positive."""
    if den <= 0:
        raise QuantizationError("denominator must be positive")
    num = np.asarray(num, dtype=np.int64)
    sign = np.where(num < 0, np.int64(-1), np.int64(1))
    return sign * ((np.abs(num) + den // 2) // den)


@dataclass(frozen=True)
class QuantParams:
    """Affine quantizer for one tensor or one output-channel group.

    ``scale`` is the real-valued step size (dequantized units per integer
    step), ``zero_point`` the integer that represents real zero.  Per-channel
    parameters are 1-D arrays along axis 0 of the tensor they describe.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    symmetric: bool
    granularity: str = PER_TENSOR

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        zp = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise QuantizationError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_TENSOR and (scale.size != 1 or zp.size != 1):
            raise QuantizationError("per-tensor params must be scalar")
        if scale.shape != zp.shape:
            raise QuantizationError("scale and zero_point shapes differ")
        if not np.all(scale > 0):
            raise QuantizationError("scale must be positive")
        qmin, qmax = int_range(self.bits)
        if np.any(zp < qmin) or np.any(zp > qmax):
            raise QuantizationError("zero_point outside representable range")
        if self.symmetric and np.any(zp != 0):
            raise QuantizationError("symmetric quantizer requires zero_point == 0")
        scale.setflags(write=False)
        zp.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    @property
    def qmin(self) -> int:
        return int_range(self.bits)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bits)[1]

    @property
    def scale_value(self) -> float:
        """Scalar scale; only valid for per-tensor parameters."""
        if self.granularity != PER_TENSOR:
            raise QuantizationError("per-channel params have no scalar scale")
        return float(self.scale[0])

    @property
    def zero_point_value(self) -> int:
        if self.granularity != PER_TENSOR:
            raise QuantizationError("per-channel params have no scalar zero point")
        return int(self.zero_point[0])

    def _broadcast(self, arr: np.ndarray, ndim: int) -> np.ndarray:
        # Per-channel params live on axis 0; pad trailing axes for broadcasting.
        if self.granularity == PER_TENSOR:
            return arr.reshape(())
        return arr.reshape(arr.shape + (1,) * (ndim - 1))

    def scale_for(self, data: np.ndarray) -> np.ndarray:
        return self._broadcast(self.scale, data.ndim)

    def zero_point_for(self, data: np.ndarray) -> np.ndarray:
        return self._broadcast(self.zero_point, data.ndim)


@dataclass(frozen=True)
class IntTensor:
    """Shaped signed-integer payload plus the quantizer that produced it.

    Data is stored in an int32 container regardless of the logical bit-width;
    every element must lie inside the declared bit-width's range.
    """

    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.int32)
        q = self.qparams
        if q.granularity == PER_CHANNEL:
            if data.ndim < 1 or q.scale.shape[0] != data.shape[0]:
                raise QuantizationError(
                    "per-channel params must match tensor axis 0 "
                    f"(got {q.scale.shape[0]} scales for shape {data.shape})"
                )
        if data.size:
            lo, hi = int_range(q.bits)
            if int(data.min()) < lo or int(data.max()) > hi:
                raise QuantizationError(
                    f"values outside {q.bits}-bit range [{lo}, {hi}]"
                )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


@dataclass(frozen=True)
class RequantMultiplier:
    """Fixed-point representation of a real multiplier M = mantissa * 2^-shift.

    After normalization the mantissa sits in [2^30, 2^31) so the full 31 bits
    of precision are used; mantissa == 0 encodes M == 0.
    """

    mantissa: int
    shift: int

    def __post_init__(self):
        if self.shift < 0:
            raise QuantizationError("shift must be nonnegative")
        if self.mantissa != 0 and not (1 << 30) <= self.mantissa < (1 << 31):
            raise QuantizationError("mantissa not normalized")

    def decode(self) -> float:
        return self.mantissa * 2.0 ** (-self.shift)


def encode_multiplier(m: float) -> RequantMultiplier:
    """Encode a real multiplier in (0, 1] as a normalized mantissa/shift pair."""
    if not (0.0 < m <= 1.0):
        raise QuantizationError(f"multiplier {m} outside (0, 1]")
    mantissa, shift = _encode_multiplier_arrays(np.asarray([m], dtype=np.float64))
    return RequantMultiplier(int(mantissa[0]), int(shift[0]))


def _encode_multiplier_arrays(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of encode_multiplier; accepts any positive M < 2^30."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m <= 0) or np.any(m >= float(1 << 30)):
        raise QuantizationError("multipliers must be in (0, 2^30)")
    frac, exp = np.frexp(m)  # m = frac * 2^exp, frac in [0.5, 1)
    mantissa = round_half_away(frac * float(1 << _MANTISSA_BITS)).astype(np.int64)
    exp = exp.astype(np.int64)
    overflow = mantissa == (1 << _MANTISSA_BITS)
    mantissa = np.where(overflow, np.int64(1 << 30), mantissa)
    exp = np.where(overflow, exp + 1, exp)
    shift = _MANTISSA_BITS - exp
    if np.any(shift < 0):
        raise QuantizationError("multiplier too large to normalize with shift >= 0")
    return mantissa, shift


_ENCODE_CACHE: dict = {}


def encode_multiplier_cached(m) -> tuple[np.ndarray, np.ndarray]:
    """Memoized multiplier encoding; kernels re-derive the same multipliers
    from static quantizer scales on every call."""
    arr = np.asarray(m, dtype=np.float64)
    key = (arr.shape, arr.tobytes())
    hit = _ENCODE_CACHE.get(key)
    if hit is None:
        if len(_ENCODE_CACHE) > 4096:
            _ENCODE_CACHE.clear()
        hit = _encode_multiplier_arrays(arr)
        _ENCODE_CACHE[key] = hit
    return hit


def fixed_point_scale(values: np.ndarray, mantissa, shift) -> np.ndarray:
    """Multiply int64 values by mantissa * 2^-shift in pure integer arithmetic.

    Values with magnitude above 2^31 - 1 are pre-shifted down (floor) so the
    widened product fits in 64 bits; the result may then be off by one unit,
    which is within the requantization contract.
    """
    values = np.asarray(values, dtype=np.int64)
    limit = 1 << 31
    amax = max(int(values.max(initial=0)), -int(values.min(initial=0)))
    if amax >= limit:
        excess = amax.bit_length() - 31
        shift = np.asarray(shift, dtype=np.int64) - excess
        sign = np.sign(values)
        values = sign * (np.abs(values) >> excess)
        if np.min(shift) < 0:
            raise QuantizationError("accumulator too wide for this multiplier")
    if isinstance(mantissa, (int, np.integer)) or (
            isinstance(mantissa, np.ndarray) and mantissa.ndim == 0):
        prod = values * np.int64(mantissa)
        sh = int(shift) if not isinstance(shift, np.ndarray) or shift.ndim == 0 \
            else shift
        return rounded_rshift(prod, sh)
    prod = values * np.asarray(mantissa, dtype=np.int64)
    return rounded_rshift(prod, np.asarray(shift, dtype=np.int64))


def compute_qparams(
    values: np.ndarray,
    bits: int,
    symmetric: bool = True,
    granularity: str = PER_TENSOR,
    clip_percentile: float | None = None,
) -> QuantParams:
    """Calibrate an affine quantizer from observed values.

    Uses the min/max of the calibration tensor; ``clip_percentile`` (e.g. 99.9)
    optionally clips the range to symmetric percentiles before fitting.  The
    asymmetric range is always widened to include zero so the zero point is
    representable.  Constant tensors fall back to a tiny fixed scale.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise QuantizationError("cannot calibrate an empty tensor")
    qmin, qmax = int_range(bits)

    if granularity == PER_CHANNEL:
        if values.ndim < 1:
            raise QuantizationError("per-channel calibration needs >= 1 dim")
        flat = values.reshape(values.shape[0], -1)
    else:
        flat = values.reshape(1, -1)

    if symmetric:
        if clip_percentile is not None:
            amax = np.percentile(np.abs(flat), clip_percentile, axis=1)
        else:
            amax = np.abs(flat).max(axis=1)
        scale = amax / qmax
        scale = np.where(scale > 0, scale, DEGENERATE_SCALE)
        zp = np.zeros_like(scale, dtype=np.int64)
    else:
        if clip_percentile is not None:
            lo = np.percentile(flat, 100.0 - clip_percentile, axis=1)
            hi = np.percentile(flat, clip_percentile, axis=1)
        else:
            lo = flat.min(axis=1)
            hi = flat.max(axis=1)
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        span = hi - lo
        scale = np.where(span > 0, span / (qmax - qmin), DEGENERATE_SCALE)
        zp = round_half_away(qmin - lo / scale).astype(np.int64)
        zp = np.clip(zp, qmin, qmax)

    if granularity == PER_TENSOR:
        scale, zp = scale[0], zp[0]
    return QuantParams(scale, zp, bits, symmetric, granularity)


def quantize(values: np.ndarray, q: QuantParams) -> IntTensor:
    """Map real values to the quantizer's integer grid, saturating at the ends."""
    values = np.asarray(values, dtype=np.float64)
    scale = q.scale_for(values)
    zp = q.zero_point_for(values)
    codes = round_half_away(values / scale) + zp
    codes = np.clip(codes, q.qmin, q.qmax)
    return IntTensor(codes.astype(np.int32), q)


def dequantize(t: IntTensor) -> np.ndarray:
    """Map integer codes back to real values: (q - zero_point) * scale."""
    q = t.qparams
    return (t.data.astype(np.float64) - q.zero_point_for(t.data)) * q.scale_for(t.data)


def requantize(
    acc: np.ndarray,
    m: Union[RequantMultiplier, Sequence[RequantMultiplier]],
    out_bits: int,
    out_zero_point: int = 0,
    out_scale: float = 1.0,
) -> IntTensor:
    """Rescale a 32-bit integer accumulator to a narrow output format.

    ``out = clamp(round(acc * M) + out_zero_point)`` computed as a widened
    integer multiply followed by a rounding shift.  A sequence of multipliers
    applies one per channel along the last axis.
    """
    acc = np.asarray(acc, dtype=np.int64)
    if acc.size and np.abs(acc).max() > (1 << 31) - 1:
        raise QuantizationError("accumulator exceeds 32-bit range")
    if isinstance(m, RequantMultiplier):
        mantissa = np.int64(m.mantissa)
        shift = np.int64(m.shift)
    else:
        ms = list(m)
        if acc.shape[-1] != len(ms):
            raise QuantizationError(
                f"{len(ms)} multipliers for last axis of {acc.shape[-1]}"
            )
        mantissa = np.asarray([x.mantissa for x in ms], dtype=np.int64)
        shift = np.asarray([x.shift for x in ms], dtype=np.int64)
    qmin, qmax = int_range(out_bits)
    if not (qmin <= out_zero_point <= qmax):
        raise QuantizationError("output zero_point outside representable range")
    scaled = fixed_point_scale(acc, mantissa, shift) + out_zero_point
    codes = np.clip(scaled, qmin, qmax).astype(np.int32)
    q = QuantParams(
        out_scale, out_zero_point, out_bits, symmetric=(out_zero_point == 0)
    )
    return IntTensor(codes, q)
