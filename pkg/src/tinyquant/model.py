"""Toy decoder-only transformer with an explicit block hierarchy.

The model is a plain container of numpy float32 parameters organized as
embedding -> N pre-norm transformer blocks -> output head.  The float forward
pass here is the reference oracle for the integer pipeline; it runs in float64
and supports full-sequence evaluation, KV-cached incremental decoding, and the
token-drop structural mode.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy.special import erf


class ModelError(ValueError):
    pass


class ContextOverflowError(ModelError):
    """Decoding or evaluation would exceed max_seq_len."""


_BLOCK_KINDS = ("embedding", "transformer", "output_head")


@dataclass(frozen=True)
class BlockId:
    """Identifier of one assignable block in the model hierarchy."""

    kind: str
    index: int | None = None

    def __post_init__(self):
        if self.kind not in _BLOCK_KINDS:
            raise ModelError(f"unknown block kind {self.kind!r}")
        if (self.kind == "transformer") != (self.index is not None):
            raise ModelError("transformer blocks carry an index; others do not")
        if self.index is not None and self.index < 0:
            raise ModelError("block index must be nonnegative")

    @classmethod
    def embedding(cls) -> "BlockId":
        return cls("embedding")

    @classmethod
    def transformer(cls, index: int) -> "BlockId":
        return cls("transformer", index)

    @classmethod
    def output_head(cls) -> "BlockId":
        return cls("output_head")

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        if text == "embedding":
            return cls.embedding()
        if text == "output_head":
            return cls.output_head()
        if text.startswith("transformer:"):
            return cls.transformer(int(text.split(":", 1)[1]))
        raise ModelError(f"cannot parse block id {text!r}")

    def sort_key(self) -> tuple[int, int]:
        order = {"embedding": 0, "transformer": 1, "output_head": 2}
        return (order[self.kind], self.index if self.index is not None else -1)

    def __str__(self) -> str:
        if self.kind == "transformer":
            return f"transformer:{self.index}"
        return self.kind


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("n_blocks", "d_model", "n_heads", "d_ff", "vocab_size",
                     "max_seq_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def assignable_blocks(self) -> list[BlockId]:
        return (
            [BlockId.embedding()]
            + [BlockId.transformer(i) for i in range(self.n_blocks)]
            + [BlockId.output_head()]
        )

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }


@dataclass
class AttentionParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class MlpParams:
    w1: np.ndarray  # (d_ff, d_model)
    b1: np.ndarray
    w2: np.ndarray  # (d_model, d_ff)
    b2: np.ndarray


@dataclass
class TransformerBlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    mlp: MlpParams


@dataclass(frozen=True)
class TokenDropConfig:
    """Drop low-attention tokens after one block boundary."""

    after_block: int
    keep_fraction: float

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ModelError("keep_fraction must be in (0, 1]")
        if self.after_block < 0:
            raise ModelError("after_block must be nonnegative")


@dataclass
class Model:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[TransformerBlockParams]
    ln_f_gamma: np.ndarray
    ln_f_beta: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray
    token_drop: TokenDropConfig | None = None

    def logits(self, tokens: np.ndarray, last_only: bool = False) -> np.ndarray:
        return forward_float(self, tokens, last_only=last_only)

    def logits_with_positions(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        trace = _forward_trace(self, np.asarray(tokens))
        return trace["logits"], trace["positions"]

    def new_cache(self) -> "KVCache":
        return KVCache.empty(self.config.n_blocks, "float")

    def prefill(self, tokens: np.ndarray, cache: "KVCache") -> np.ndarray:
        return _forward_cached(self, np.asarray(tokens), cache)

    def step(self, token: int, cache: "KVCache") -> np.ndarray:
        return _forward_cached(self, np.asarray([token]), cache)


def init_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Random (untrained) model with GPT-style initialization."""
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def lin(out_f, in_f, scale=0.02):
        return rng.normal(0.0, scale, size=(out_f, in_f)).astype(np.float32)

    blocks = []
    proj_scale = 0.02 / math.sqrt(2 * config.n_blocks)
    for _ in range(config.n_blocks):
        blocks.append(
            TransformerBlockParams(
                ln1_gamma=np.ones(d, np.float32),
                ln1_beta=np.zeros(d, np.float32),
                attn=AttentionParams(
                    wq=lin(d, d), bq=np.zeros(d, np.float32),
                    wk=lin(d, d), bk=np.zeros(d, np.float32),
                    wv=lin(d, d), bv=np.zeros(d, np.float32),
                    wo=lin(d, d, proj_scale), bo=np.zeros(d, np.float32),
                ),
                ln2_gamma=np.ones(d, np.float32),
                ln2_beta=np.zeros(d, np.float32),
                mlp=MlpParams(
                    w1=lin(dff, d), b1=np.zeros(dff, np.float32),
                    w2=lin(d, dff, proj_scale), b2=np.zeros(d, np.float32),
                ),
            )
        )
    return Model(
        config=config,
        tok_emb=rng.normal(0.0, 0.02, size=(v, d)).astype(np.float32),
        pos_emb=rng.normal(0.0, 0.01, size=(config.max_seq_len, d)).astype(np.float32),
        blocks=blocks,
        ln_f_gamma=np.ones(d, np.float32),
        ln_f_beta=np.zeros(d, np.float32),
        w_head=lin(v, d),
        b_head=np.zeros(v, np.float32),
    )


def copy_model(model: Model) -> Model:
    return copy.deepcopy(model)


def param_items(model: Model) -> list[tuple[str, np.ndarray]]:
    """Stable (name, array) listing of every parameter."""
    items = [("tok_emb", model.tok_emb), ("pos_emb", model.pos_emb)]
    for i, b in enumerate(model.blocks):
        p = f"blocks.{i}."
        items += [
            (p + "ln1.gamma", b.ln1_gamma), (p + "ln1.beta", b.ln1_beta),
            (p + "attn.wq", b.attn.wq), (p + "attn.bq", b.attn.bq),
            (p + "attn.wk", b.attn.wk), (p + "attn.bk", b.attn.bk),
            (p + "attn.wv", b.attn.wv), (p + "attn.bv", b.attn.bv),
            (p + "attn.wo", b.attn.wo), (p + "attn.bo", b.attn.bo),
            (p + "ln2.gamma", b.ln2_gamma), (p + "ln2.beta", b.ln2_beta),
            (p + "mlp.w1", b.mlp.w1), (p + "mlp.b1", b.mlp.b1),
            (p + "mlp.w2", b.mlp.w2), (p + "mlp.b2", b.mlp.b2),
        ]
    items += [
        ("ln_f.gamma", model.ln_f_gamma), ("ln_f.beta", model.ln_f_beta),
        ("head.weight", model.w_head), ("head.bias", model.b_head),
    ]
    return items


def block_of_param(name: str) -> BlockId:
    if name in ("tok_emb", "pos_emb"):
        return BlockId.embedding()
    if name.startswith("blocks."):
        return BlockId.transformer(int(name.split(".")[1]))
    return BlockId.output_head()


def params_of_block(model: Model, block: BlockId) -> list[tuple[str, np.ndarray]]:
    return [(n, a) for n, a in param_items(model) if block_of_param(n) == block]


def parameter_count(model: Model, block: BlockId | None = None) -> int:
    items = param_items(model) if block is None else params_of_block(model, block)
    return int(sum(a.size for _, a in items))


# ---------------------------------------------------------------------------
# float reference forward pass

def _layernorm_f(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * gamma + beta


def _gelu_f(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _block_attention(x, block, n_heads, past_k=None, past_v=None):
    a = block.attn
    q = x @ a.wq.T.astype(np.float64) + a.bq
    k = x @ a.wk.T.astype(np.float64) + a.bk
    v = x @ a.wv.T.astype(np.float64) + a.bv
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    if past_k is not None:
        kh_all = np.concatenate([past_k, kh], axis=1)
        vh_all = np.concatenate([past_v, vh], axis=1)
    else:
        kh_all, vh_all = kh, vh
    past_len = kh_all.shape[1] - qh.shape[1]
    d_head = qh.shape[-1]
    scores = qh @ kh_all.swapaxes(-1, -2) / math.sqrt(d_head)
    i = np.arange(qh.shape[1])[:, None]
    j = np.arange(kh_all.shape[1])[None, :]
    scores = np.where(j <= i + past_len, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(probs @ vh_all)
    out = ctx @ a.wo.T.astype(np.float64) + a.bo
    return out, probs, kh, vh


def _token_keep_indices(probs, keep_fraction):
    """Positions to keep, ranked by attention received (column mass, head mean)."""
    received = probs.sum(axis=1).mean(axis=0)  # (keys,)
    t = received.shape[0]
    n_keep = int(math.ceil(keep_fraction * t))
    order = np.argsort(-received, kind="stable")
    chosen = set(order[:n_keep].tolist())
    chosen.add(t - 1)  # the decoder always needs the final position
    if len(chosen) > n_keep:
        drop = [i for i in order[:n_keep] if i != t - 1][-1]
        chosen.discard(drop)
    return np.array(sorted(chosen), dtype=np.int64)


def _forward_trace(model: Model, tokens: np.ndarray, last_only: bool = False,
                   collect: bool = False) -> dict:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ModelError("trace forward expects a 1-D token sequence")
    cfg = model.config
    if tokens.size == 0:
        raise ModelError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    if tokens.size > cfg.max_seq_len:
        raise ContextOverflowError(
            f"sequence of {tokens.size} exceeds max_seq_len {cfg.max_seq_len}"
        )
    x = (model.tok_emb[tokens].astype(np.float64)
         + model.pos_emb[: tokens.size].astype(np.float64))
    positions = np.arange(tokens.size, dtype=np.int64)
    stages: dict[str, np.ndarray] = {}
    if collect:
        stages["emb.out"] = x
    drop = model.token_drop
    attn_probs = []
    for i, block in enumerate(model.blocks):
        h1 = _layernorm_f(x, block.ln1_gamma.astype(np.float64),
                          block.ln1_beta.astype(np.float64))
        attn_out, probs, kh, vh = _block_attention(h1, block, cfg.n_heads)
        res1 = x + attn_out
        h2 = _layernorm_f(res1, block.ln2_gamma.astype(np.float64),
                          block.ln2_beta.astype(np.float64))
        ffn_pre = h2 @ block.mlp.w1.T.astype(np.float64) + block.mlp.b1
        ffn_act = _gelu_f(ffn_pre)
        ffn_out = ffn_act @ block.mlp.w2.T.astype(np.float64) + block.mlp.b2
        x = res1 + ffn_out
        if collect:
            b = f"b{i}."
            a = block.attn
            stages[b + "ln1"] = h1
            stages[b + "q"] = h1 @ a.wq.T.astype(np.float64) + a.bq
            stages[b + "k"] = h1 @ a.wk.T.astype(np.float64) + a.bk
            stages[b + "v"] = h1 @ a.wv.T.astype(np.float64) + a.bv
            d_head = cfg.d_head
            qh = _split_heads(stages[b + "q"], cfg.n_heads)
            khs = _split_heads(stages[b + "k"], cfg.n_heads)
            stages[b + "scores"] = (qh @ khs.swapaxes(-1, -2)
                                    / math.sqrt(d_head))
            stages[b + "ctx"] = _merge_heads(probs @ _split_heads(
                stages[b + "v"], cfg.n_heads))
            stages[b + "attn_out"] = attn_out
            stages[b + "res1"] = res1
            stages[b + "ln2"] = h2
            stages[b + "ffn_pre"] = ffn_pre
            stages[b + "ffn_act"] = ffn_act
            stages[b + "ffn_out"] = ffn_out
            stages[b + "res2"] = x
        attn_probs.append(probs if (collect or (drop and drop.after_block == i))
                          else None)
        if drop is not None and drop.after_block == i and x.shape[0] > 1:
            keep = _token_keep_indices(probs, drop.keep_fraction)
            x = x[keep]
            positions = positions[keep]
    hf = _layernorm_f(x, model.ln_f_gamma.astype(np.float64),
                      model.ln_f_beta.astype(np.float64))
    if last_only:
        hf = hf[-1:]
        positions = positions[-1:]
    logits = hf @ model.w_head.T.astype(np.float64) + model.b_head
    if collect:
        stages["final.ln"] = hf
        stages["logits"] = logits
    return {
        "logits": logits,
        "positions": positions,
        "attn_probs": attn_probs,
        "stages": stages,
    }


def forward_float(model: Model, tokens, last_only: bool = False) -> np.ndarray:
    """Float64 reference logits; accepts (T,) or (B, T) token arrays.

    For token-drop models the returned rows correspond to the kept positions
    (see ``Model.logits_with_positions`` for the position mapping).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        return np.stack(
            [_forward_trace(model, row, last_only)["logits"] for row in tokens]
        )
    return _forward_trace(model, tokens, last_only)["logits"]


# ---------------------------------------------------------------------------
# KV cache and greedy decoding

@dataclass
class KVCache:
    """Per-block key/value tensors of already-processed positions."""

    mode: str
    keys: list
    values: list

    @classmethod
    def empty(cls, n_blocks: int, mode: str) -> "KVCache":
        if mode not in ("float", "int"):
            raise ModelError(f"unknown cache mode {mode!r}")
        return cls(mode=mode, keys=[None] * n_blocks, values=[None] * n_blocks)

    @property
    def length(self) -> int:
        k = self.keys[0]
        return 0 if k is None else (k.shape[1] if self.mode == "float"
                                    else k.data.shape[1])

    def append(self, block: int, k, v):
        if self.keys[block] is None:
            self.keys[block] = k
            self.values[block] = v
        elif self.mode == "float":
            self.keys[block] = np.concatenate([self.keys[block], k], axis=1)
            self.values[block] = np.concatenate([self.values[block], v], axis=1)
        else:
            from tinyquant.qtensor import IntTensor
            self.keys[block] = IntTensor(
                np.concatenate([self.keys[block].data, k.data], axis=1),
                k.qparams)
            self.values[block] = IntTensor(
                np.concatenate([self.values[block].data, v.data], axis=1),
                v.qparams)


def _forward_cached(model: Model, tokens: np.ndarray, cache: KVCache) -> np.ndarray:
    """Run new tokens through the model, extending the cache; returns last logits."""
    if cache.mode != "float":
        raise ModelError("float model requires a float-mode cache")
    if model.token_drop is not None and model.token_drop.keep_fraction < 1.0:
        raise ModelError("token-drop models do not support cached decoding")
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    past = cache.length
    if past + tokens.size > cfg.max_seq_len:
        raise ContextOverflowError(
            f"cache of {past} plus {tokens.size} exceeds max_seq_len"
        )
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    x = (model.tok_emb[tokens].astype(np.float64)
         + model.pos_emb[past:past + tokens.size].astype(np.float64))
    for i, block in enumerate(model.blocks):
        h1 = _layernorm_f(x, block.ln1_gamma.astype(np.float64),
                          block.ln1_beta.astype(np.float64))
        attn_out, _, kh, vh = _block_attention(
            h1, block, cfg.n_heads, cache.keys[i], cache.values[i])
        cache.append(i, kh, vh)
        x = x + attn_out
        h2 = _layernorm_f(x, block.ln2_gamma.astype(np.float64),
                          block.ln2_beta.astype(np.float64))
        ffn_act = _gelu_f(h2 @ block.mlp.w1.T.astype(np.float64) + block.mlp.b1)
        x = x + ffn_act @ block.mlp.w2.T.astype(np.float64) + block.mlp.b2
    hf = _layernorm_f(x[-1:], model.ln_f_gamma.astype(np.float64),
                      model.ln_f_beta.astype(np.float64))
    return (hf @ model.w_head.T.astype(np.float64) + model.b_head)[0]


def greedy_pick(logits) -> int:
    """Deterministic argmax with first-index tie rule, shared by both modes."""
    from tinyquant.qtensor import IntTensor
    if isinstance(logits, IntTensor):
        return int(np.argmax(logits.data[-1] if logits.data.ndim == 2
                             else logits.data))
    arr = np.asarray(logits)
    return int(np.argmax(arr[-1] if arr.ndim == 2 else arr))


def decode_greedy(model, prompt, n_steps: int, cache: KVCache | None = None
                  ) -> np.ndarray:
    """Greedy continuation of ``prompt`` for ``n_steps`` tokens.

    With a cache the prompt is prefilled once and each step feeds one token;
    without a cache every step recomputes the full sequence.  Both paths are
    exact and produce identical continuations.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise ModelError("prompt must be non-empty")
    if n_steps < 0:
        raise ModelError("n_steps must be nonnegative")
    max_len = model.config.max_seq_len
    if prompt.size + n_steps > max_len:
        raise ContextOverflowError(
            f"prompt {prompt.size} + {n_steps} steps exceeds max_seq_len {max_len}"
        )
    out = []
    if n_steps == 0:
        return np.asarray(out, dtype=np.int64)
    if cache is not None:
        logits = model.prefill(prompt, cache)
        nxt = greedy_pick(logits)
        out.append(nxt)
        for _ in range(n_steps - 1):
            logits = model.step(nxt, cache)
            nxt = greedy_pick(logits)
            out.append(nxt)
    else:
        seq = prompt
        for _ in range(n_steps):
            logits = model.logits(seq, last_only=True)
            nxt = greedy_pick(logits)
            out.append(nxt)
            seq = np.concatenate([seq, [nxt]])
    return np.asarray(out, dtype=np.int64)
