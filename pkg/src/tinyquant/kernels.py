"""Integer-only compute kernels for every transformer stage.

Each kernel consumes integer tensors, accumulates in 32-bit integer range and
ends in a requantization to its configured output format, so kernels compose
without any real-valued intermediate.  Matrix products are evaluated through
float64 BLAS purely as a carrier: every operand and every partial sum is an
integer below 2^31 (enforced), so the results are exact integers and identical
for any summation order or thread count.

Nonlinear kernels follow shift-and-add friendly constructions:

- exp(z) for z <= 0 decomposes into a power-of-two shift per ln2 chunk plus a
  second-order polynomial on the in-chunk remainder.
- GELU is the sigmoid form x * sigmoid(c1*x + c3*x^3) with the sigmoid built
  from the integer exp and one integer division.
- LayerNorm normalizes with an integer Newton inverse square root (two steps,
  bit-scan plus small table initialization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tinyquant.qtensor import (
    IntTensor,
    QuantizationError,
    QuantParams,
    _encode_multiplier_arrays,
    encode_multiplier_cached,
    fixed_point_scale,
    int_range,
    round_half_away,
    rounded_intdiv,
    rounded_rshift,
)

ACC_LIMIT = (1 << 31) - 1

# GELU sigmoid-form constants: gelu(x) ~= x * sigmoid(c1*x*(1 + c3*x^2))
_GELU_C1 = 2.0 * math.sqrt(2.0 / math.pi)
_GELU_C3 = 0.044715

# second-order fit of exp(p) = a*(p + b)^2 + c on p in (-ln2, 0]
_EXP_A = 0.3585
_EXP_B = 1.353
_EXP_C = 0.344

# 2^24 / sqrt(w) for w in [1, 1024): initializer table for the Newton isqrt
_ISQRT_TABLE = np.concatenate(
    [[0], np.rint(float(1 << 24) / np.sqrt(np.arange(1, 1 << 10))).astype(np.int64)]
)


class AccumulatorOverflowError(QuantizationError):
    """A matmul configuration could overflow the 32-bit accumulator."""


@dataclass(frozen=True)
class KernelConfig:
    """Quantization parameters of a kernel's endpoints plus approximation knobs."""

    out_q: QuantParams
    in_q: QuantParams | None = None
    weight_q: QuantParams | None = None
    scores_q: QuantParams | None = None
    probs_q: QuantParams | None = None
    exp_max_chunks: int = 30
    isqrt_newton_steps: int = 2

    def __post_init__(self):
        if self.out_q.bits not in (2, 3, 4, 8, 16):
            raise QuantizationError("output bits outside allowed set")


def prob_qparams(bits: int = 16) -> QuantParams:
    """Asymmetric quantizer covering [0, 1], used for attention probabilities."""
    qmin, qmax = int_range(bits)
    return QuantParams(1.0 / (qmax - qmin), qmin, bits, symmetric=False)


def quantize_bias(
    bias: np.ndarray, in_scale: float, w_scale: np.ndarray
) -> np.ndarray:
    """Convert a float bias to 32-bit integers at the accumulator scale."""
    acc_scale = in_scale * np.asarray(w_scale, dtype=np.float64)
    b = round_half_away(np.asarray(bias, dtype=np.float64) / acc_scale)
    if np.any(np.abs(b) > ACC_LIMIT):
        raise AccumulatorOverflowError("bias does not fit the 32-bit accumulator")
    return b.astype(np.int64)


def _check_multiplier_inputs(t: IntTensor, expected: QuantParams | None, name: str):
    if expected is None or expected is t.qparams:
        return
    if (
        expected.bits != t.qparams.bits
        or not np.array_equal(expected.scale, t.qparams.scale)
        or not np.array_equal(expected.zero_point, t.qparams.zero_point)
    ):
        raise QuantizationError(f"{name} qparams do not match kernel config")


def _centered(t: IntTensor) -> np.ndarray:
    q = t.qparams
    if q.granularity == "per_tensor":
        zp = int(q.zero_point[0])
        data = t.data.astype(np.int64)
        if zp:
            data -= zp
        return data
    return t.data.astype(np.int64) - q.zero_point_for(t.data)


def _rescale_finish(
    acc: np.ndarray, multiplier, out_q: QuantParams
) -> IntTensor:
    """Apply fixed-point multipliers to an accumulator and clamp to codes."""
    mant, shift = encode_multiplier_cached(multiplier)
    scaled = fixed_point_scale(acc, mant, shift)
    zp = out_q.zero_point_for(acc)
    if zp.ndim == 0:
        z = int(zp)
        if z:
            scaled += z
    else:
        scaled = scaled + zp
    codes = np.clip(scaled, out_q.qmin, out_q.qmax).astype(np.int32)
    return IntTensor(codes, out_q)


def matmul_accumulator_bound(
    w_centered: np.ndarray, in_q: QuantParams, bias: np.ndarray | None
) -> int:
    """Worst-case |accumulator| for any input in range: max|a| * max_n sum_k|w|."""
    a_max = max(abs(in_q.qmin - int(in_q.zero_point.max())),
                abs(in_q.qmax - int(in_q.zero_point.min())))
    row_l1 = np.abs(w_centered).sum(axis=1).max() if w_centered.size else 0
    bound = int(a_max) * int(row_l1)
    if bias is not None and bias.size:
        bound += int(np.abs(bias).max())
    return bound


def int_matmul(
    a: IntTensor, w: IntTensor, bias: np.ndarray | None, cfg: KernelConfig
) -> IntTensor:
    """Integer matmul a @ w.T with 32-bit accumulation and requantization.

    ``a`` has shape (..., K); ``w`` is (N, K) with optional per-output-channel
    quantization along N.  ``bias`` is a 32-bit integer vector at the
    accumulator scale (in_scale * w_scale).
    """
    if a.shape[-1] != w.shape[-1]:
        raise QuantizationError(
            f"inner dimensions disagree: {a.shape} @ {w.shape}"
        )
    _check_multiplier_inputs(a, cfg.in_q, "input")
    _check_multiplier_inputs(w, cfg.weight_q, "weight")
    a64 = _centered(a)
    w64 = _centered(w)
    if matmul_accumulator_bound(w64, a.qparams, bias) > ACC_LIMIT:
        raise AccumulatorOverflowError(
            "matmul accumulator may exceed 32-bit range for this shape"
        )
    acc = (a64.astype(np.float64) @ w64.T.astype(np.float64)).astype(np.int64)
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64)
    s_in = a.qparams.scale_value
    s_w = w.qparams.scale.astype(np.float64)
    m = s_in * s_w / cfg.out_q.scale.astype(np.float64)
    if w.qparams.granularity == "per_tensor":
        m = m[0]
    return _rescale_finish(acc, m, cfg.out_q)


def _guard_bits(scale: float) -> int:
    """Extra resolution bits so integer exp constants stay accurate and in range."""
    return int(np.clip(28 + math.floor(math.log2(scale)), 0, 28))


def _int_exp_nonpos(z: np.ndarray, scale: float, max_chunks: int) -> np.ndarray:
    """exp(z * scale) for integer z <= 0, returned at scale _EXP_A * scale^2.

    Decomposes z*scale = -q*ln2 + r with r in (-ln2, 0], evaluates the
    second-order polynomial on r and shifts right by q chunks.
    """
    if scale < 2.0 ** -30:
        raise QuantizationError("scale too fine for the integer exp")
    z = np.asarray(z, dtype=np.int64)
    x0 = int(round_half_away(np.asarray(math.log(2.0) / scale)))  # ln2 in steps
    if x0 < 1:
        raise QuantizationError("scale too coarse for the integer exp")
    qchunk = (-z) // x0
    r = z + qchunk * x0  # in (-x0, 0]
    b_int = np.int64(round(_EXP_B / scale))
    c_int = np.int64(round(_EXP_C / (_EXP_A * scale * scale)))
    poly = (r + b_int) ** 2 + c_int
    qchunk = np.minimum(qchunk, max_chunks)
    out = poly >> qchunk
    return np.where(qchunk >= max_chunks, np.int64(0), out)


def int_softmax(
    x: IntTensor,
    cfg: KernelConfig,
    mask: np.ndarray | None = None,
) -> IntTensor:
    """Integer softmax over the last axis.

    Optional boolean ``mask`` (broadcastable to x) marks positions that
    participate; excluded positions get exactly zero probability.  Output
    probabilities land on ``cfg.out_q`` (16-bit [0, 1] by default usage).
    """
    _check_multiplier_inputs(x, cfg.in_q, "input")
    if x.qparams.granularity != "per_tensor":
        raise QuantizationError("softmax expects per-tensor input quantization")
    data = x.data.astype(np.int64)
    length = data.shape[-1]
    if mask is None:
        kept = np.ones(data.shape, dtype=bool)
    else:
        kept = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)

    scale = x.qparams.scale_value
    g = _guard_bits(scale)
    low = np.int64(np.iinfo(np.int64).min // 4)
    masked = np.where(kept, data, low)
    rowmax = masked.max(axis=-1, keepdims=True)
    z = np.where(kept, (data - rowmax) << g, np.int64(0))
    e = _int_exp_nonpos(z, scale * 2.0 ** -g, cfg.exp_max_chunks)
    e = np.where(kept, e, np.int64(0))

    # keep the row sum and the per-element << 24 inside int64
    emax = int(e.max(initial=0))
    tshift = max(0, emax.bit_length() + int(length).bit_length() - 62)
    e >>= tshift
    denom = e.sum(axis=-1, keepdims=True)
    dmax = int(denom.max(initial=0))
    if dmax > 0:
        _, dexp = np.frexp(denom.astype(np.float64))
        u = np.maximum(dexp.astype(np.int64) - 38, 0)
        e = e >> u
        denom = denom >> u
    p24 = (e << 24) // np.maximum(denom, 1)

    out_q = cfg.out_q
    m = 2.0 ** -24 / out_q.scale_value
    return _rescale_finish(p24, m, out_q)


def int_gelu(x: IntTensor, cfg: KernelConfig) -> IntTensor:
    """Integer GELU via the sigmoid form with an integer exp and division."""
    _check_multiplier_inputs(x, cfg.in_q, "input")
    if x.qparams.granularity != "per_tensor":
        raise QuantizationError("gelu expects per-tensor input quantization")
    x64 = _centered(x)
    scale = x.qparams.scale_value
    g = _guard_bits(scale)
    s_u = scale * 2.0 ** -g

    # u = c1*x + c1*c3*x^3 at scale s_u, both terms via fixed-point multipliers
    m1, sh1 = encode_multiplier_cached(_GELU_C1 * 2.0 ** g)
    term1 = fixed_point_scale(x64, m1, sh1)
    c3 = _GELU_C1 * _GELU_C3 * scale * scale * 2.0 ** g
    m3, sh3 = encode_multiplier_cached(c3)
    term3 = fixed_point_scale(x64 * x64 * x64, m3, sh3)
    u = term1 + term3

    e_raw = _int_exp_nonpos(-np.abs(u), s_u, cfg.exp_max_chunks)
    m_e, sh_e = encode_multiplier_cached(_EXP_A * s_u * s_u * float(1 << 14))
    e14 = fixed_point_scale(e_raw, m_e, sh_e)  # exp(-|u|) at scale 2^-14
    denom = np.int64(1 << 14) + e14
    sig14 = np.where(
        u >= 0,
        np.int64(1 << 28) // denom,
        (e14 << 14) // denom,
    )
    acc = x64 * sig14  # x * sigmoid at scale (scale * 2^-14)
    m_out = scale * 2.0 ** -14 / cfg.out_q.scale_value
    return _rescale_finish(acc, m_out, cfg.out_q)


def _int_inv_sqrt(v: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """R ~= 2^k / sqrt(v) for positive int64 v; returns (R, k) with per-row k.

    Initialized from the leading ten bits via a fixed table, then refined with
    Newton iterations r <- r*(3*2^k - (v*r^2 >> k)) >> (k+1).
    """
    v = np.asarray(v, dtype=np.int64)
    if np.any(v <= 0):
        raise QuantizationError("inverse sqrt needs positive values")
    _, e = np.frexp(v.astype(np.float64))
    e = e.astype(np.int64)  # bit length of v
    k = 14 + e // 2
    s = np.maximum(e - 10, 0)
    s = s + (s & 1)  # keep the normalization shift even
    w = v >> s
    r = _ISQRT_TABLE[w] >> (24 + s // 2 - k)
    for _ in range(steps):
        p1 = v * r  # v <= 2^53, r <= 2^16: fits
        m = np.maximum(e + 32 - 62, 0)
        t = ((p1 >> m) * r) >> (k - m)
        r = (r * (3 * (np.int64(1) << k) - t)) >> (k + 1)
    return r, k


def int_layernorm(
    x: IntTensor,
    gamma: IntTensor,
    beta: np.ndarray,
    cfg: KernelConfig,
) -> IntTensor:
    """Integer LayerNorm over the last axis with quantized affine parameters.

    Mean and variance use 32-bit-style integer accumulation at six guard bits;
    the inverse square root is the integer Newton iteration; ``beta`` enters as
    an integer bias at the accumulator scale.  The variance gets a +1
    stabilizer so constant rows are well defined.
    """
    _check_multiplier_inputs(x, cfg.in_q, "input")
    n = x.shape[-1]
    if n < 2:
        raise QuantizationError("layernorm needs rows of length >= 2")
    if gamma.qparams.granularity != "per_tensor":
        raise QuantizationError("gamma must be per-tensor quantized")
    x64 = _centered(x)
    guard = 6
    d = x64 << guard
    mean = rounded_intdiv(d.sum(axis=-1, keepdims=True), n)
    d = d - mean
    var = rounded_intdiv((d * d).sum(axis=-1, keepdims=True), n) + 1
    r, k = _int_inv_sqrt(var, cfg.isqrt_newton_steps)
    y14 = rounded_rshift(d * r, k - 14)  # normalized rows at scale 2^-14
    y12 = rounded_rshift(y14, 2)

    g64 = _centered(gamma)
    acc = y12 * g64
    s_gamma = gamma.qparams.scale_value
    acc_scale = s_gamma * 2.0 ** -12
    bias = round_half_away(np.asarray(beta, dtype=np.float64) / acc_scale)
    if np.any(np.abs(bias) > ACC_LIMIT):
        raise AccumulatorOverflowError("beta does not fit the accumulator scale")
    acc = acc + bias.astype(np.int64)
    m_out = acc_scale / cfg.out_q.scale_value
    return _rescale_finish(acc, m_out, cfg.out_q)


def int_add(a: IntTensor, b: IntTensor, out_q: QuantParams) -> IntTensor:
    """Requantizing integer add (residual connections), with guard bits."""
    if a.shape != b.shape:
        raise QuantizationError(f"add shapes disagree: {a.shape} vs {b.shape}")
    guard = 8
    out_scale = out_q.scale_value
    terms = []
    for t in (a, b):
        m, sh = encode_multiplier_cached(
            t.qparams.scale_value * (1 << guard) / out_scale)
        terms.append(fixed_point_scale(_centered(t), m, sh))
    acc = rounded_rshift(terms[0] + terms[1], guard) + out_q.zero_point_value
    codes = np.clip(acc, out_q.qmin, out_q.qmax).astype(np.int32)
    return IntTensor(codes, out_q)


def causal_mask(n_query: int, n_key: int, past_len: int = 0) -> np.ndarray:
    """Boolean (n_query, n_key) mask; query i sees keys j <= i + past_len."""
    q = np.arange(n_query)[:, None]
    j = np.arange(n_key)[None, :]
    return j <= q + past_len


def int_attention(
    q: IntTensor,
    k: IntTensor,
    v: IntTensor,
    cfg: KernelConfig,
    causal: bool = True,
    past_len: int = 0,
) -> IntTensor:
    """Integer scaled dot-product attention.

    Inputs are (..., seq, d_head) integer tensors with per-tensor params.  The
    1/sqrt(d_head) factor is folded into the score requantization multiplier.
    Scores and probabilities use ``cfg.scores_q`` / ``cfg.probs_q``.
    """
    for t, name in ((q, "q"), (k, "k"), (v, "v")):
        if t.qparams.granularity != "per_tensor":
            raise QuantizationError(f"{name} must be per-tensor quantized")
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise QuantizationError(
            f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}"
        )
    if cfg.scores_q is None or cfg.probs_q is None:
        raise QuantizationError("attention needs scores_q and probs_q")
    d_head = q.shape[-1]
    q64 = _centered(q)
    k64 = _centered(k)
    v64 = _centered(v)

    n_query, n_key = q.shape[-2], k.shape[-2]
    bound = int(np.abs(q64).max(initial=0)) * int(
        np.abs(k64).sum(axis=-1).max(initial=0)
    )
    if bound > ACC_LIMIT:
        raise AccumulatorOverflowError("attention score accumulator too wide")
    scores_acc = np.matmul(q64.astype(np.float64), k64.astype(np.float64).swapaxes(-1, -2)).astype(np.int64)
    m_scores = (
        q.qparams.scale_value
        * k.qparams.scale_value
        / (math.sqrt(d_head) * cfg.scores_q.scale_value)
    )
    scores = _rescale_finish(scores_acc, m_scores, cfg.scores_q)

    mask = causal_mask(n_query, n_key, past_len) if causal else None
    probs_cfg = KernelConfig(out_q=cfg.probs_q, exp_max_chunks=cfg.exp_max_chunks)
    probs = int_softmax(scores, probs_cfg, mask=mask)

    p64 = _centered(probs)
    # probability mass per row is ~1/scale, which bounds the accumulator
    p_total = int(np.abs(p64).sum(axis=-1).max(initial=0))
    if p_total * int(np.abs(v64).max(initial=0)) > ACC_LIMIT:
        raise AccumulatorOverflowError("attention context accumulator too wide")
    ctx_acc = np.matmul(p64.astype(np.float64), v64.astype(np.float64)).astype(np.int64)
    m_ctx = (
        probs.qparams.scale_value * v.qparams.scale_value / cfg.out_q.scale_value
    )
    return _rescale_finish(ctx_acc, m_ctx, cfg.out_q)
