"""Compression passes: per-block PTQ, sensitivity scan, structural pruning.

Every pass returns a new model and never mutates its input.  Block-wise
quantization here is weight-only simulation (quantize then dequantize back to
float) so compressed candidates are evaluated with the float forward pass;
the integer execution path applies the same per-block weight quantizers for
real.  16 bits is the uncompressed baseline and is an exact no-op.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from tinyquant import corpus as corpus_mod
from tinyquant.explore import BASELINE_BITS, PRECISION_SET
from tinyquant.model import (
    BlockId,
    Model,
    ModelError,
    TokenDropConfig,
    copy_model,
)
from tinyquant.qtensor import compute_qparams, dequantize, quantize

SCAN_PRECISIONS = PRECISION_SET + (BASELINE_BITS,)


class CompressError(ModelError):
    pass


def _fake_quant(arr: np.ndarray, bits: int, per_channel: bool) -> np.ndarray:
    qp = compute_qparams(
        arr, bits=bits, symmetric=True,
        granularity="per_channel" if per_channel else "per_tensor",
    )
    return dequantize(quantize(arr, qp)).astype(np.float32)


def quantize_block(model: Model, block: BlockId, bits: int) -> Model:
    """Simulate weight quantization of one block at the given bit-width.

    Weight matrices use symmetric per-output-channel quantization, embeddings
    and layernorm gains per-tensor symmetric; biases and layernorm shifts stay
    float (the integer path carries them at accumulator precision).  All other
    blocks are untouched, and 16 bits returns a byte-identical copy.
    """
    if bits not in SCAN_PRECISIONS:
        raise CompressError(f"bit-width {bits} not in {SCAN_PRECISIONS}")
    if block not in model.config.assignable_blocks():
        raise CompressError(f"unknown block {block}")
    out = copy_model(model)
    if bits == BASELINE_BITS:
        return out
    if block.kind == "embedding":
        out.tok_emb = _fake_quant(model.tok_emb, bits, per_channel=False)
        out.pos_emb = _fake_quant(model.pos_emb, bits, per_channel=False)
    elif block.kind == "output_head":
        out.ln_f_gamma = _fake_quant(model.ln_f_gamma, bits, per_channel=False)
        out.w_head = _fake_quant(model.w_head, bits, per_channel=True)
    else:
        src = model.blocks[block.index]
        dst = out.blocks[block.index]
        dst.ln1_gamma = _fake_quant(src.ln1_gamma, bits, per_channel=False)
        dst.ln2_gamma = _fake_quant(src.ln2_gamma, bits, per_channel=False)
        for name in ("wq", "wk", "wv", "wo"):
            setattr(dst.attn, name,
                    _fake_quant(getattr(src.attn, name), bits, per_channel=True))
        dst.mlp.w1 = _fake_quant(src.mlp.w1, bits, per_channel=True)
        dst.mlp.w2 = _fake_quant(src.mlp.w2, bits, per_channel=True)
    return out


def apply_assignment(model: Model, assignment) -> Model:
    """Weight-only quantization of every block per a precision assignment."""
    out = model
    for block in model.config.assignable_blocks():
        bits = assignment.bits_for(block)
        if bits != BASELINE_BITS:
            out = quantize_block(out, block, bits)
    return out if out is not model else copy_model(model)


@dataclass(frozen=True)
class ScanEntry:
    metric: float
    delta: float


@dataclass
class SensitivityProfile:
    """Per-(block, bits) metric from the one-block-at-a-time scan."""

    entries: dict  # (BlockId, bits) -> ScanEntry
    baseline_metric: float
    corpus_fingerprint: str
    precision_set: tuple

    def delta(self, block: BlockId, bits: int) -> float:
        return self.entries[(block, bits)].delta

    def to_dict(self) -> dict:
        rows = []
        for (block, bits), entry in sorted(
                self.entries.items(),
                key=lambda kv: (kv[0][0].sort_key(), kv[0][1])):
            rows.append({
                "block": str(block),
                "bits": bits,
                "metric": entry.metric,
                "delta": entry.delta,
            })
        return {
            "baseline_metric": self.baseline_metric,
            "corpus_fingerprint": self.corpus_fingerprint,
            "precision_set": sorted(self.precision_set),
            "entries": rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityProfile":
        data = json.loads(text)
        entries = {}
        for row in data["entries"]:
            entries[(BlockId.parse(row["block"]), int(row["bits"]))] = ScanEntry(
                metric=float(row["metric"]), delta=float(row["delta"]))
        return cls(
            entries=entries,
            baseline_metric=float(data["baseline_metric"]),
            corpus_fingerprint=data["corpus_fingerprint"],
            precision_set=tuple(data["precision_set"]),
        )


def sensitivity_scan(
    model: Model,
    sequences,
    evaluate,
    precision_set=SCAN_PRECISIONS,
) -> SensitivityProfile:
    """Quantize one block at a time and record the metric per grid point.

    ``evaluate(model, sequences) -> float`` supplies the metric (perplexity on
    the pinned validation slice).  The baseline entry is the unmodified model;
    16-bit grid points reuse it as an exact, zero-delta evaluation.
    """
    if not sequences:
        raise CompressError("empty corpus slice")
    precisions = sorted(set(int(p) for p in precision_set))
    baseline = evaluate(model, sequences)
    entries = {}
    for block in model.config.assignable_blocks():
        for bits in precisions:
            if bits == BASELINE_BITS:
                entries[(block, bits)] = ScanEntry(metric=baseline, delta=0.0)
                continue
            try:
                metric = evaluate(quantize_block(model, block, bits), sequences)
            except Exception as exc:
                raise CompressError(
                    f"evaluation failed for block {block} at {bits} bits: {exc}"
                ) from exc
            entries[(block, bits)] = ScanEntry(
                metric=metric, delta=metric - baseline)
    return SensitivityProfile(
        entries=entries,
        baseline_metric=baseline,
        corpus_fingerprint=corpus_mod.fingerprint(sequences),
        precision_set=tuple(precisions),
    )


def prune_mlp_channels(model: Model, block: BlockId | int, keep: int,
                       criterion: str = "l2") -> Model:
    """Keep the top-``keep`` MLP hidden channels of one block.

    Channels are ranked by the L2 norm of their paired in/out weight vectors
    (row of w1 and column of w2); kept channels preserve their order.  The
    block's output shape is unchanged.
    """
    if isinstance(block, int):
        block = BlockId.transformer(block)
    if block.kind != "transformer" or block.index >= model.config.n_blocks:
        raise CompressError(f"not a prunable transformer block: {block}")
    if criterion != "l2":
        raise CompressError(f"unknown pruning criterion {criterion!r}")
    src = model.blocks[block.index]
    d_ff = src.mlp.w1.shape[0]
    if not (1 <= keep <= d_ff):
        raise CompressError(f"keep={keep} outside [1, {d_ff}]")
    out = copy_model(model)
    if keep == d_ff:
        return out
    scores = np.sqrt((src.mlp.w1.astype(np.float64) ** 2).sum(axis=1)
                     + (src.mlp.w2.astype(np.float64) ** 2).sum(axis=0))
    order = np.argsort(-scores, kind="stable")[:keep]
    kept = np.sort(order)
    dst = out.blocks[block.index]
    dst.mlp.w1 = np.ascontiguousarray(src.mlp.w1[kept])
    dst.mlp.b1 = np.ascontiguousarray(src.mlp.b1[kept])
    dst.mlp.w2 = np.ascontiguousarray(src.mlp.w2[:, kept])
    return out


def remove_blocks(model: Model, indices) -> Model:
    """Drop whole transformer blocks; the remainder rewires in order."""
    indices = sorted(set(int(i) for i in indices))
    n = model.config.n_blocks
    for i in indices:
        if not (0 <= i < n):
            raise CompressError(f"block index {i} out of range")
    if len(indices) >= n:
        raise CompressError("cannot remove every transformer block")
    out = copy_model(model)
    out.blocks = [b for i, b in enumerate(out.blocks) if i not in indices]
    cfg = model.config.to_dict()
    cfg["n_blocks"] = n - len(indices)
    from tinyquant.model import ModelConfig
    out.config = ModelConfig(**cfg)
    if out.token_drop is not None and out.token_drop.after_block >= out.config.n_blocks:
        raise CompressError("token drop boundary removed by block removal")
    return out


def token_drop(model: Model, keep_fraction: float, after_block: int) -> Model:
    """Configure attention-scored token dropping after one block boundary.

    Tokens are ranked by attention received (column mass of the block's
    attention probabilities, averaged over heads); the final position always
    survives.  ``keep_fraction == 1`` is an exact no-op configuration.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise CompressError("keep_fraction must be in (0, 1]")
    if not (0 <= after_block < model.config.n_blocks):
        raise CompressError(f"after_block {after_block} out of range")
    out = copy_model(model)
    out.token_drop = TokenDropConfig(after_block=after_block,
                                     keep_fraction=float(keep_fraction))
    return out


@dataclass
class StructuralPlan:
    """A bundle of structural passes, JSON-serializable for the CLI.

    Block indices refer to the original (pre-removal) model; pruning or token
    drop on a removed block is rejected.
    """

    blocks_removed: tuple = ()
    mlp_channels_kept: dict = field(default_factory=dict)  # index -> keep
    token_drop: dict | None = None  # {"after_block": i, "keep_fraction": f}

    def __post_init__(self):
        self.blocks_removed = tuple(sorted(set(int(i) for i in self.blocks_removed)))
        self.mlp_channels_kept = {int(k): int(v)
                                  for k, v in self.mlp_channels_kept.items()}
        if self.token_drop is not None:
            self.token_drop = {
                "after_block": int(self.token_drop["after_block"]),
                "keep_fraction": float(self.token_drop["keep_fraction"]),
            }

    def to_dict(self) -> dict:
        out: dict = {}
        if self.blocks_removed:
            out["blocks_removed"] = list(self.blocks_removed)
        if self.mlp_channels_kept:
            out["mlp_channels_kept"] = {
                str(k): v for k, v in sorted(self.mlp_channels_kept.items())}
        if self.token_drop is not None:
            out["token_drop"] = self.token_drop
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StructuralPlan":
        data = json.loads(text)
        known = {"blocks_removed", "mlp_channels_kept", "token_drop"}
        unknown = set(data) - known
        if unknown:
            raise CompressError(f"unknown plan field {sorted(unknown)[0]!r}")
        return cls(
            blocks_removed=tuple(data.get("blocks_removed", ())),
            mlp_channels_kept=data.get("mlp_channels_kept", {}),
            token_drop=data.get("token_drop"),
        )


def apply_structural_plan(model: Model, plan: StructuralPlan) -> Model:
    """Apply removal, channel pruning and token drop in one deterministic order."""
    removed = set(plan.blocks_removed)
    for idx in plan.mlp_channels_kept:
        if idx in removed:
            raise CompressError(f"plan prunes removed block {idx}")
    if plan.token_drop is not None and plan.token_drop["after_block"] in removed:
        raise CompressError("plan drops tokens after a removed block")

    def remap(idx: int) -> int:
        return idx - sum(1 for r in removed if r < idx)

    out = remove_blocks(model, removed) if removed else copy_model(model)
    for idx, keep in sorted(plan.mlp_channels_kept.items()):
        out = prune_mlp_channels(out, remap(idx), keep)
    if plan.token_drop is not None:
        out = token_drop(out, plan.token_drop["keep_fraction"],
                         remap(plan.token_drop["after_block"]))
    return out
