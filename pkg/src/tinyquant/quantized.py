"""Integer-only execution of the toy transformer.

``calibrate`` runs the float model over a pinned calibration slice and records
the observed range of every intermediate tensor.  ``QuantizedModel.build``
then quantizes weights per block according to a precision assignment (weights
symmetric per-output-channel, activations asymmetric per-tensor at fixed 8
bits), converts biases to 32-bit integers at the accumulator scales, and wires
one kernel config per stage.  The resulting forward pass is integer end to
end: embedding lookup, layernorm, matmuls, attention, GELU and every residual
add produce integer tensors, each followed by a requantization.

Attention probabilities and the final logits are requantized at 16 bits; all
other activations are 8-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tinyquant import corpus as corpus_mod
from tinyquant.kernels import (
    ACC_LIMIT,
    AccumulatorOverflowError,
    KernelConfig,
    int_add,
    int_attention,
    int_gelu,
    int_layernorm,
    int_matmul,
    matmul_accumulator_bound,
    prob_qparams,
    quantize_bias,
)
from tinyquant.model import (
    KVCache,
    Model,
    ModelError,
    _forward_trace,
    greedy_pick,
)
from tinyquant.qtensor import (
    IntTensor,
    QuantParams,
    compute_qparams,
    dequantize,
    quantize,
)

ACTIVATION_BITS = 8
PROB_BITS = 16
LOGIT_BITS = 16
SCORE_BITS = 16      # pre-softmax scores stay wide, like the 32-bit accumulators
FFN_PRE_BITS = 16    # GELU consumes the wide matmul result before requantizing


class CalibrationError(ModelError):
    pass


@dataclass(frozen=True)
class CalibrationStats:
    """Observed (lo, hi) range per activation stage, from the pinned slice."""

    ranges: dict
    fingerprint: str
    clip_percentile: float | None = None

    def range_of(self, stage: str) -> tuple[float, float]:
        try:
            return self.ranges[stage]
        except KeyError:
            raise CalibrationError(f"no calibration range for stage {stage!r}")


def calibrate(
    model: Model,
    sequences: list[np.ndarray],
    clip_percentile: float | None = None,
) -> CalibrationStats:
    """Collect activation ranges over a calibration slice.

    With ``clip_percentile`` (e.g. 99.9), each sequence contributes its
    percentile range and the widest per-sequence range is kept; otherwise the
    global min/max is used.
    """
    if not sequences:
        raise CalibrationError("calibration slice is empty")
    if model.token_drop is not None and model.token_drop.keep_fraction < 1.0:
        raise CalibrationError("cannot calibrate a token-drop model")
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for seq in sequences:
        trace = _forward_trace(model, np.asarray(seq), collect=True)
        for stage, arr in trace["stages"].items():
            if clip_percentile is None:
                s_lo, s_hi = float(arr.min()), float(arr.max())
            else:
                s_lo = float(np.percentile(arr, 100.0 - clip_percentile))
                s_hi = float(np.percentile(arr, clip_percentile))
            lo[stage] = min(lo.get(stage, s_lo), s_lo)
            hi[stage] = max(hi.get(stage, s_hi), s_hi)
    ranges = {k: (lo[k], hi[k]) for k in lo}
    return CalibrationStats(
        ranges=ranges,
        fingerprint=corpus_mod.fingerprint(sequences),
        clip_percentile=clip_percentile,
    )


def _act_qparams(calib: CalibrationStats, stage: str, bits: int) -> QuantParams:
    lo, hi = calib.range_of(stage)
    return compute_qparams(np.array([lo, hi]), bits=bits, symmetric=False)


@dataclass
class _QuantLinear:
    w: IntTensor
    bias: np.ndarray
    cfg: KernelConfig

    def __call__(self, x: IntTensor) -> IntTensor:
        return int_matmul(x, self.w, self.bias, self.cfg)


@dataclass
class _QuantBlock:
    ln1_gamma: IntTensor
    ln1_beta: np.ndarray
    ln1_cfg: KernelConfig
    q_proj: _QuantLinear
    k_proj: _QuantLinear
    v_proj: _QuantLinear
    attn_cfg: KernelConfig
    o_proj: _QuantLinear
    res1_q: QuantParams
    ln2_gamma: IntTensor
    ln2_beta: np.ndarray
    ln2_cfg: KernelConfig
    up_proj: _QuantLinear
    gelu_cfg: KernelConfig
    down_proj: _QuantLinear
    res2_q: QuantParams


def _quant_weight(w: np.ndarray, bits: int, per_channel: bool = True) -> IntTensor:
    qp = compute_qparams(
        w, bits=bits, symmetric=True,
        granularity="per_channel" if per_channel else "per_tensor",
    )
    return quantize(w, qp)


def _quant_linear(
    w: np.ndarray,
    b: np.ndarray,
    bits: int,
    in_q: QuantParams,
    out_q: QuantParams,
) -> _QuantLinear:
    w_q = _quant_weight(w, bits)
    bias = quantize_bias(b, in_q.scale_value, w_q.qparams.scale)
    w64 = w_q.data.astype(np.int64)
    if matmul_accumulator_bound(w64, in_q, bias) > ACC_LIMIT:
        raise AccumulatorOverflowError(
            "configured shapes could overflow the 32-bit accumulator"
        )
    cfg = KernelConfig(out_q=out_q, in_q=in_q, weight_q=w_q.qparams)
    return _QuantLinear(w=w_q, bias=bias, cfg=cfg)


class QuantizedModel:
    """Integer-pipeline view of a float model under a precision assignment."""

    def __init__(self, model, assignment, calib, blocks, parts):
        self.float_model = model
        self.config = model.config
        self.assignment = assignment
        self.calibration = calib
        self._blocks = blocks
        for k, v in parts.items():
            setattr(self, k, v)

    @classmethod
    def build(
        cls,
        model: Model,
        assignment,
        calib: CalibrationStats | None,
        scores_bits: int = SCORE_BITS,
    ) -> "QuantizedModel":
        if calib is None:
            raise CalibrationError(
                "integer execution requires a calibrated model")
        if model.token_drop is not None and model.token_drop.keep_fraction < 1.0:
            raise ModelError("integer path does not support token drop")
        cfg = model.config
        bits_of = _assignment_lookup(assignment, cfg)

        emb_bits = bits_of("embedding")
        tok_q = _quant_weight(model.tok_emb, emb_bits, per_channel=False)
        pos_q = _quant_weight(model.pos_emb, emb_bits, per_channel=False)
        emb_out_q = _act_qparams(calib, "emb.out", ACTIVATION_BITS)

        blocks = []
        res_in_q = emb_out_q
        for i, b in enumerate(model.blocks):
            bb = bits_of(f"transformer:{i}")
            s = f"b{i}."
            ln1_out = _act_qparams(calib, s + "ln1", ACTIVATION_BITS)
            q_out = _act_qparams(calib, s + "q", ACTIVATION_BITS)
            k_out = _act_qparams(calib, s + "k", ACTIVATION_BITS)
            v_out = _act_qparams(calib, s + "v", ACTIVATION_BITS)
            scores_q = _act_qparams(calib, s + "scores", scores_bits)
            ctx_q = _act_qparams(calib, s + "ctx", ACTIVATION_BITS)
            attn_out_q = _act_qparams(calib, s + "attn_out", ACTIVATION_BITS)
            res1_q = _act_qparams(calib, s + "res1", ACTIVATION_BITS)
            ln2_out = _act_qparams(calib, s + "ln2", ACTIVATION_BITS)
            ffn_pre_q = _act_qparams(calib, s + "ffn_pre", FFN_PRE_BITS)
            ffn_act_q = _act_qparams(calib, s + "ffn_act", ACTIVATION_BITS)
            ffn_out_q = _act_qparams(calib, s + "ffn_out", ACTIVATION_BITS)
            res2_q = _act_qparams(calib, s + "res2", ACTIVATION_BITS)

            blocks.append(_QuantBlock(
                ln1_gamma=_quant_weight(b.ln1_gamma, bb, per_channel=False),
                ln1_beta=b.ln1_beta.astype(np.float64),
                ln1_cfg=KernelConfig(out_q=ln1_out, in_q=res_in_q),
                q_proj=_quant_linear(b.attn.wq, b.attn.bq, bb, ln1_out, q_out),
                k_proj=_quant_linear(b.attn.wk, b.attn.bk, bb, ln1_out, k_out),
                v_proj=_quant_linear(b.attn.wv, b.attn.bv, bb, ln1_out, v_out),
                attn_cfg=KernelConfig(
                    out_q=ctx_q, scores_q=scores_q, probs_q=prob_qparams(PROB_BITS),
                ),
                o_proj=_quant_linear(b.attn.wo, b.attn.bo, bb, ctx_q, attn_out_q),
                res1_q=res1_q,
                ln2_gamma=_quant_weight(b.ln2_gamma, bb, per_channel=False),
                ln2_beta=b.ln2_beta.astype(np.float64),
                ln2_cfg=KernelConfig(out_q=ln2_out, in_q=res1_q),
                up_proj=_quant_linear(b.mlp.w1, b.mlp.b1, bb, ln2_out, ffn_pre_q),
                gelu_cfg=KernelConfig(out_q=ffn_act_q, in_q=ffn_pre_q),
                down_proj=_quant_linear(b.mlp.w2, b.mlp.b2, bb, ffn_act_q,
                                        ffn_out_q),
                res2_q=res2_q,
            ))
            res_in_q = res2_q

        head_bits = bits_of("output_head")
        lnf_out = _act_qparams(calib, "final.ln", ACTIVATION_BITS)
        logits_q = _act_qparams(calib, "logits", LOGIT_BITS)
        parts = {
            "tok_emb": tok_q,
            "pos_emb": pos_q,
            "emb_out_q": emb_out_q,
            "ln_f_gamma": _quant_weight(model.ln_f_gamma, head_bits,
                                        per_channel=False),
            "ln_f_beta": model.ln_f_beta.astype(np.float64),
            "ln_f_cfg": KernelConfig(out_q=lnf_out, in_q=res_in_q),
            "head": _quant_linear(model.w_head, model.b_head, head_bits,
                                  lnf_out, logits_q),
        }
        return cls(model, assignment, calib, blocks, parts)

    # -- forward passes ----------------------------------------------------

    def _embed(self, tokens: np.ndarray, start: int) -> IntTensor:
        cfg = self.config
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ModelError("token id out of range")
        tok_rows = IntTensor(self.tok_emb.data[tokens], self.tok_emb.qparams)
        pos_rows = IntTensor(
            self.pos_emb.data[start:start + tokens.size], self.pos_emb.qparams)
        return int_add(tok_rows, pos_rows, self.emb_out_q)

    def _heads(self, t: IntTensor) -> IntTensor:
        n_heads = self.config.n_heads
        seq, d = t.data.shape
        data = t.data.reshape(seq, n_heads, d // n_heads).transpose(1, 0, 2)
        return IntTensor(np.ascontiguousarray(data), t.qparams)

    def _merge(self, t: IntTensor) -> IntTensor:
        h, seq, dh = t.data.shape
        data = t.data.transpose(1, 0, 2).reshape(seq, h * dh)
        return IntTensor(np.ascontiguousarray(data), t.qparams)

    def _run_block(self, qb: _QuantBlock, x: IntTensor, past_len: int,
                   cache: KVCache | None, block_idx: int) -> IntTensor:
        h1 = int_layernorm(x, qb.ln1_gamma, qb.ln1_beta, qb.ln1_cfg)
        q = self._heads(qb.q_proj(h1))
        k = self._heads(qb.k_proj(h1))
        v = self._heads(qb.v_proj(h1))
        if cache is not None:
            cache.append(block_idx, k, v)
            k, v = cache.keys[block_idx], cache.values[block_idx]
        ctx = int_attention(q, k, v, qb.attn_cfg, causal=True, past_len=past_len)
        attn_out = qb.o_proj(self._merge(ctx))
        res1 = int_add(x, attn_out, qb.res1_q)
        h2 = int_layernorm(res1, qb.ln2_gamma, qb.ln2_beta, qb.ln2_cfg)
        act = int_gelu(qb.up_proj(h2), qb.gelu_cfg)
        ffn_out = qb.down_proj(act)
        return int_add(res1, ffn_out, qb.res2_q)

    def logits(self, tokens, last_only: bool = False) -> IntTensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ModelError("expected a non-empty 1-D token sequence")
        if tokens.size > self.config.max_seq_len:
            raise ModelError("sequence exceeds max_seq_len")
        x = self._embed(tokens, 0)
        for i, qb in enumerate(self._blocks):
            x = self._run_block(qb, x, past_len=0, cache=None, block_idx=i)
        if last_only:
            x = IntTensor(x.data[-1:], x.qparams)
        hf = int_layernorm(x, self.ln_f_gamma, self.ln_f_beta, self.ln_f_cfg)
        return self.head(hf)

    def logits_with_positions(self, tokens):
        tokens = np.asarray(tokens)
        out = self.logits(tokens)
        return dequantize(out), np.arange(tokens.size, dtype=np.int64)

    def new_cache(self) -> KVCache:
        return KVCache.empty(self.config.n_blocks, "int")

    def _forward_cached(self, tokens: np.ndarray, cache: KVCache) -> IntTensor:
        if cache.mode != "int":
            raise ModelError("integer model requires an int-mode cache")
        tokens = np.asarray(tokens, dtype=np.int64)
        past = cache.length
        if past + tokens.size > self.config.max_seq_len:
            from tinyquant.model import ContextOverflowError
            raise ContextOverflowError("cache growth exceeds max_seq_len")
        x = self._embed(tokens, past)
        for i, qb in enumerate(self._blocks):
            x = self._run_block(qb, x, past_len=past, cache=cache, block_idx=i)
        hf = int_layernorm(IntTensor(x.data[-1:], x.qparams),
                           self.ln_f_gamma, self.ln_f_beta, self.ln_f_cfg)
        return self.head(hf)

    def prefill(self, tokens, cache: KVCache) -> IntTensor:
        return self._forward_cached(np.asarray(tokens), cache)

    def step(self, token: int, cache: KVCache) -> IntTensor:
        return self._forward_cached(np.asarray([token]), cache)


def _assignment_lookup(assignment, config):
    """Accepts a PrecisionAssignment or a {block: bits} mapping."""
    if hasattr(assignment, "bits_for"):
        table = {str(b): assignment.bits_for(b)
                 for b in config.assignable_blocks()}
    else:
        table = {str(k): int(v) for k, v in dict(assignment).items()}

    def bits_of(name: str) -> int:
        if name not in table:
            raise ModelError(f"assignment missing block {name!r}")
        return table[name]

    return bits_of


def forward_int(model: Model, tokens, assignment,
                calibration: CalibrationStats | None) -> IntTensor:
    """One-shot integer forward pass (builds the quantized model each call)."""
    qm = QuantizedModel.build(model, assignment, calibration)
    return qm.logits(np.asarray(tokens))
