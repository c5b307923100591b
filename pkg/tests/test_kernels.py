"""Integer kernels vs float oracles."""

import numpy as np
import pytest
from scipy.special import erf

from tinyquant.kernels import (
    AccumulatorOverflowError,
    KernelConfig,
    causal_mask,
    int_add,
    int_attention,
    int_gelu,
    int_layernorm,
    int_matmul,
    int_softmax,
    prob_qparams,
    quantize_bias,
)
from tinyquant.qtensor import (
    IntTensor,
    QuantizationError,
    QuantParams,
    compute_qparams,
    dequantize,
    quantize,
)


def gelu_ref(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax_ref(x, mask=None):
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_ref(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var) * gamma + beta


def attention_ref(q, k, v, causal=True):
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    mask = causal_mask(q.shape[-2], k.shape[-2]) if causal else None
    p = softmax_ref(scores, mask)
    return p @ v


def q8(lo, hi):
    return compute_qparams(np.array([lo, hi]), bits=8, symmetric=False)


class TestIntMatmul:
    def test_one_by_one(self):
        a = IntTensor(np.array([[2]], dtype=np.int32), QuantParams(1.0, 0, 8, True))
        w = IntTensor(np.array([[3]], dtype=np.int32), QuantParams(1.0, 0, 8, True))
        cfg = KernelConfig(out_q=QuantParams(1.0, 0, 8, True))
        out = int_matmul(a, w, None, cfg)
        assert out.data[0, 0] == 6

    def test_identity_weight(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(4, 16))
        in_q = compute_qparams(x, 8, symmetric=False)
        a = quantize(x, in_q)
        w_q = QuantParams(1.0 / 127, 0, 8, True)
        w = quantize(np.eye(16), w_q)
        cfg = KernelConfig(out_q=in_q)
        out = int_matmul(a, w, None, cfg)
        assert np.abs(out.data.astype(int) - a.data.astype(int)).max() <= 1

    def test_random_vs_float_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=(8, 8))
        wf = rng.uniform(-0.5, 0.5, size=(8, 8))
        bf = rng.uniform(-0.2, 0.2, size=8)
        in_q = compute_qparams(x, 8, symmetric=False)
        w_q = compute_qparams(wf, 8, symmetric=True, granularity="per_channel")
        a = quantize(x, in_q)
        w = quantize(wf, w_q)
        bias = quantize_bias(bf, in_q.scale_value, w_q.scale)
        ref = dequantize(a) @ dequantize(w).T + bf
        out_q = compute_qparams(ref, 8, symmetric=False)
        cfg = KernelConfig(out_q=out_q)
        out = int_matmul(a, w, bias, cfg)
        err_codes = np.abs(dequantize(out) - ref) / out_q.scale_value
        assert err_codes.max() <= 1.0 + 1e-9

    def test_shape_mismatch(self):
        a = IntTensor(np.zeros((2, 3), np.int32), QuantParams(1.0, 0, 8, True))
        w = IntTensor(np.zeros((4, 5), np.int32), QuantParams(1.0, 0, 8, True))
        with pytest.raises(QuantizationError):
            int_matmul(a, w, None, KernelConfig(out_q=QuantParams(1.0, 0, 8, True)))

    def test_overflow_rejected(self):
        # 16-bit weights saturated on a long inner dim exceed the 31-bit bound
        n = 4096
        w_q = QuantParams(1.0, 0, 16, True)
        w = IntTensor(np.full((1, n), 32767, np.int32), w_q)
        a = IntTensor(np.full((1, n), 127, np.int32), QuantParams(1.0, 0, 8, True))
        with pytest.raises(AccumulatorOverflowError):
            int_matmul(a, w, None, KernelConfig(out_q=QuantParams(1.0, 0, 16, True)))


class TestIntSoftmax:
    def _cfg(self):
        return KernelConfig(out_q=prob_qparams(16))

    def test_uniform_row(self):
        q = QuantParams(0.05, 0, 8, True)
        x = IntTensor(np.full((1, 4), 17, np.int32), q)
        out = dequantize(int_softmax(x, self._cfg()))
        assert np.allclose(out, 0.25, atol=1e-3)

    def test_saturated_winner(self):
        q = QuantParams(0.5, 0, 8, True)
        x = IntTensor(np.array([[127, -128, -128, -128]], np.int32), q)
        out = dequantize(int_softmax(x, self._cfg()))
        assert out[0, 0] == pytest.approx(1.0, abs=1e-3)
        assert out[0, 1:].max() <= 1e-3

    def test_random_rows_vs_oracle(self):
        rng = np.random.default_rng(2)
        q = QuantParams(0.08, 3, 8, False)
        codes = rng.integers(-128, 128, size=(1000, 16)).astype(np.int32)
        x = IntTensor(codes, q)
        out = dequantize(int_softmax(x, self._cfg()))
        ref = softmax_ref(dequantize(x))
        assert np.abs(out - ref).max() <= 0.01
        sums = out.sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 0.01
        assert np.array_equal(np.argmax(out, -1), np.argmax(ref, -1))

    def test_mask_zeroes_probability(self):
        q = QuantParams(0.1, 0, 8, True)
        x = IntTensor(np.array([[5, 1, 3]], np.int32), q)
        mask = np.array([[True, False, True]])
        out = dequantize(int_softmax(x, self._cfg(), mask=mask))
        assert out[0, 1] == 0.0
        ref = softmax_ref(dequantize(x), mask)
        assert np.abs(out - ref).max() <= 0.01

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        q = QuantParams(0.02, -11, 8, False)
        codes = rng.integers(-128, 128, size=(64, 9)).astype(np.int32)
        out = dequantize(int_softmax(IntTensor(codes, q), self._cfg()))
        assert out.min() >= 0.0


class TestIntGelu:
    def test_exhaustive_int8_sweep(self):
        scale = 4.0 / 127
        q = QuantParams(scale, 0, 8, True)
        codes = np.arange(-128, 128, dtype=np.int32)
        x = IntTensor(codes, q)
        ref = gelu_ref(dequantize(x))
        out_q = compute_qparams(ref, 8, symmetric=False)
        out = dequantize(int_gelu(x, KernelConfig(out_q=out_q)))
        assert np.abs(out - ref).max() <= 0.02

    def test_zero(self):
        q = QuantParams(0.03, 0, 8, True)
        out_q = q8(-0.2, 3.0)
        out = dequantize(int_gelu(IntTensor(np.array([0], np.int32), q),
                                  KernelConfig(out_q=out_q)))
        assert abs(out[0]) <= float(out_q.scale[0]) / 2

    def test_identity_tail(self):
        scale = 6.0 / 127
        q = QuantParams(scale, 0, 8, True)
        codes = np.array([85, 100, 127], np.int32)  # >= 4.0 in real units
        x = IntTensor(codes, q)
        out_q = q8(-0.3, 6.0)
        out = dequantize(int_gelu(x, KernelConfig(out_q=out_q)))
        ref = dequantize(x)
        assert np.abs(out - ref).max() <= 0.03

    def test_16bit_input(self):
        scale = 8.0 / 32767
        q = QuantParams(scale, 0, 16, True)
        codes = np.arange(-32768, 32768, 64, dtype=np.int32)
        x = IntTensor(codes, q)
        ref = gelu_ref(dequantize(x))
        out_q = compute_qparams(ref, 16, symmetric=False)
        out = dequantize(int_gelu(x, KernelConfig(out_q=out_q)))
        assert np.abs(out - ref).max() <= 0.02


class TestIntLayernorm:
    def _gamma_beta(self, n, rng):
        gamma = rng.uniform(0.7, 1.3, size=n)
        beta = rng.uniform(-0.3, 0.3, size=n)
        g_q = compute_qparams(gamma, 16, symmetric=True)
        return quantize(gamma, g_q), beta, gamma

    def test_constant_row_gives_beta(self):
        rng = np.random.default_rng(4)
        g_int, beta, _ = self._gamma_beta(8, rng)
        q = QuantParams(0.04, -5, 8, False)
        x = IntTensor(np.full((1, 8), 23, np.int32), q)
        out_q = q8(-1.5, 1.5)
        out = dequantize(int_layernorm(x, g_int, beta, KernelConfig(out_q=out_q)))
        assert np.abs(out - beta).max() <= 0.02

    def test_antisymmetric_pair(self):
        rng = np.random.default_rng(5)
        gamma = np.array([1.1, 0.9])
        g_q = compute_qparams(gamma, 16, symmetric=True)
        g_int = quantize(gamma, g_q)
        q = QuantParams(0.02, 0, 8, True)
        x = IntTensor(np.array([[-50, 50]], np.int32), q)
        out_q = q8(-1.5, 1.5)
        out = dequantize(int_layernorm(x, g_int, np.zeros(2),
                                       KernelConfig(out_q=out_q)))
        assert out[0, 0] == pytest.approx(-1.1, abs=0.02)
        assert out[0, 1] == pytest.approx(0.9, abs=0.02)

    def test_random_rows_vs_oracle(self):
        rng = np.random.default_rng(6)
        n = 64
        g_int, beta, gamma = self._gamma_beta(n, rng)
        xr = rng.normal(0.3, 1.0, size=(1000, n))
        in_q = compute_qparams(xr, 8, symmetric=False)
        x = quantize(xr, in_q)
        ref = layernorm_ref(dequantize(x), dequantize(g_int), beta)
        out_q = compute_qparams(ref, 8, symmetric=False)
        out = dequantize(int_layernorm(x, g_int, beta, KernelConfig(out_q=out_q)))
        assert np.abs(out - ref).max() <= 0.02

    def test_short_row_rejected(self):
        q = QuantParams(1.0, 0, 8, True)
        x = IntTensor(np.ones((1, 1), np.int32), q)
        g = IntTensor(np.ones(1, np.int32), QuantParams(1.0, 0, 8, True))
        with pytest.raises(QuantizationError):
            int_layernorm(x, g, np.zeros(1), KernelConfig(out_q=q))


class TestIntAttention:
    def _cfg(self, out_q, scores_q, probs_bits=16):
        return KernelConfig(out_q=out_q, scores_q=scores_q,
                            probs_q=prob_qparams(probs_bits))

    def test_single_position_returns_v(self):
        rng = np.random.default_rng(7)
        v_q = QuantParams(0.9 / 127, 0, 8, True)
        q_q = QuantParams(0.02, 0, 8, True)
        qt = IntTensor(rng.integers(-100, 100, (1, 8)).astype(np.int32), q_q)
        kt = IntTensor(rng.integers(-100, 100, (1, 8)).astype(np.int32), q_q)
        vt = IntTensor(rng.integers(-100, 100, (1, 8)).astype(np.int32), v_q)
        out = int_attention(qt, kt, vt, self._cfg(v_q, q8(-3, 3)))
        assert np.array_equal(out.data, vt.data)

    def test_identical_keys_average_v(self):
        v_q = QuantParams(1.0 / 127, 0, 8, True)
        q_q = QuantParams(0.02, 0, 8, True)
        qt = IntTensor(np.full((4, 4), 11, np.int32), q_q)
        kt = IntTensor(np.full((4, 4), 7, np.int32), q_q)
        v = np.array([[10, -10, 40, 0]] * 4, np.int32).T * 2
        vt = IntTensor(np.ascontiguousarray(v), v_q)
        out = int_attention(qt, kt, vt, self._cfg(v_q, q8(-3, 3)), causal=False)
        ref = attention_ref(dequantize(qt), dequantize(kt), dequantize(vt),
                            causal=False)
        assert np.abs(dequantize(out) - ref).max() <= 0.03

    def test_random_multihead_vs_oracle(self):
        rng = np.random.default_rng(8)
        heads, seq, dh = 4, 16, 8
        qr = rng.uniform(-1, 1, (heads, seq, dh))
        kr = rng.uniform(-1, 1, (heads, seq, dh))
        vr = rng.uniform(-1, 1, (heads, seq, dh))
        q_q = compute_qparams(qr, 8, symmetric=False)
        k_q = compute_qparams(kr, 8, symmetric=False)
        v_q = compute_qparams(vr, 8, symmetric=False)
        qt, kt, vt = quantize(qr, q_q), quantize(kr, k_q), quantize(vr, v_q)
        ref = attention_ref(dequantize(qt), dequantize(kt), dequantize(vt))
        scores = dequantize(qt) @ np.swapaxes(dequantize(kt), -1, -2) / np.sqrt(dh)
        scores_q = compute_qparams(scores, 16, symmetric=False)
        out_q = compute_qparams(ref, 8, symmetric=False)
        out = int_attention(qt, kt, vt, self._cfg(out_q, scores_q))
        assert np.abs(dequantize(out) - ref).max() <= 0.03

    def test_shape_mismatch(self):
        q = QuantParams(1.0, 0, 8, True)
        a = IntTensor(np.zeros((2, 4), np.int32), q)
        b = IntTensor(np.zeros((2, 5), np.int32), q)
        with pytest.raises(QuantizationError):
            int_attention(a, b, a, self._cfg(q, q))


class TestIntAdd:
    def test_requantizing_add(self):
        a_q = QuantParams(0.01, 3, 8, False)
        b_q = QuantParams(0.02, -5, 8, False)
        rng = np.random.default_rng(9)
        a = IntTensor(rng.integers(-128, 128, 100).astype(np.int32), a_q)
        b = IntTensor(rng.integers(-128, 128, 100).astype(np.int32), b_q)
        ref = dequantize(a) + dequantize(b)
        out_q = compute_qparams(ref, 8, symmetric=False)
        out = int_add(a, b, out_q)
        assert np.abs(dequantize(out) - ref).max() <= out_q.scale_value * 1.01


class TestDeterminism:
    def test_kernels_bit_identical_across_runs(self):
        rng = np.random.default_rng(10)
        q = QuantParams(0.07, 1, 8, False)
        codes = rng.integers(-128, 128, size=(32, 16)).astype(np.int32)
        x = IntTensor(codes, q)
        cfg = KernelConfig(out_q=prob_qparams(16))
        first = int_softmax(x, cfg).data
        for _ in range(3):
            assert np.array_equal(int_softmax(x, cfg).data, first)
