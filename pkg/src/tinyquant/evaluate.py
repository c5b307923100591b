"""Metrics and measurement: perplexity, accuracy, agreement, MAC profiling.

Wall-clock numbers are reported but never asserted; matmul MAC counts are the
machine-independent efficiency proxy and are computed in closed form from the
model structure (so block removal, channel pruning and token drop reductions
are integer-exact).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from tinyquant import corpus as corpus_mod
from tinyquant.model import Model, ModelError, greedy_pick


class EvalError(ModelError):
    pass


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_sum(model_like, seq: np.ndarray) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and prediction count."""
    seq = np.asarray(seq)
    if seq.size < 2:
        raise EvalError("sequences need at least two tokens")
    logits, positions = model_like.logits_with_positions(seq)
    keep = positions < seq.size - 1
    logits = np.asarray(logits, dtype=np.float64)[keep]
    targets = seq[positions[keep] + 1]
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(targets)), targets].sum()), int(len(targets))


def perplexity(model_like, sequences) -> float:
    """exp(mean NLL) over next-token predictions of the given slice."""
    if not sequences:
        raise EvalError("empty corpus slice")
    total, count = 0.0, 0
    for seq in sequences:
        s, c = nll_sum(model_like, seq)
        total += s
        count += c
    return float(math.exp(total / count))


def accuracy(model_like, labeled_set) -> float:
    """Fraction of (tokens, label) pairs whose greedy next token matches."""
    labeled_set = list(labeled_set)
    if not labeled_set:
        raise EvalError("empty labeled set")
    hits = 0
    for tokens, label in labeled_set:
        pred = greedy_pick(model_like.logits(np.asarray(tokens), last_only=True))
        hits += int(pred == int(label))
    return hits / len(labeled_set)


def agreement(model_a, model_b, sequences) -> float:
    """Fraction of positions where the two models' argmax tokens agree."""
    if not sequences:
        raise EvalError("empty corpus slice")
    same = 0
    total = 0
    for seq in sequences:
        la, pa = model_a.logits_with_positions(np.asarray(seq))
        lb, pb = model_b.logits_with_positions(np.asarray(seq))
        if not np.array_equal(pa, pb):
            raise EvalError("models evaluate different positions")
        ia = np.argmax(np.asarray(la, dtype=np.float64), axis=-1)
        ib = np.argmax(np.asarray(lb, dtype=np.float64), axis=-1)
        same += int((ia == ib).sum())
        total += ia.size
    return same / total


# ---------------------------------------------------------------------------
# MAC accounting

def _block_macs(t: int, d: int, d_ff: int) -> int:
    attn_proj = 4 * t * d * d
    attn_matmuls = 2 * t * t * d  # scores and probs @ v, summed over heads
    mlp = 2 * t * d * d_ff
    return attn_proj + attn_matmuls + mlp


def macs_for_sequence(model: Model, seq_len: int,
                      last_only_head: bool = False) -> int:
    """Closed-form matmul MAC count of one forward pass.

    Token drop shrinks the sequence seen by later blocks to ceil(f * t); the
    output head costs t_final * d_model * vocab (or one row when decoding).
    """
    cfg = model.config
    t = int(seq_len)
    if t < 1:
        raise EvalError("sequence length must be >= 1")
    total = 0
    drop = model.token_drop
    for i, block in enumerate(model.blocks):
        d_ff = block.mlp.w1.shape[0]
        total += _block_macs(t, cfg.d_model, d_ff)
        if drop is not None and drop.after_block == i and t > 1:
            t = max(1, math.ceil(drop.keep_fraction * t))
    t_head = 1 if last_only_head else t
    total += t_head * cfg.d_model * cfg.vocab_size
    return total


def kernel_invocations(model: Model) -> dict:
    n = model.config.n_blocks
    return {
        "matmul": 6 * n + 1,
        "attention": n,
        "softmax": n,
        "gelu": n,
        "layernorm": 2 * n + 1,
        "add": 2 * n + 1,
    }


@dataclass
class EvalReport:
    metric_kind: str
    value: float
    corpus_fingerprint: str
    descriptor: str
    mac_count: int
    kernel_invocations: dict
    wall_clock_s: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise EvalError("metric value must be finite")

    def to_dict(self) -> dict:
        return {
            "metric_kind": self.metric_kind,
            "value": self.value,
            "corpus_fingerprint": self.corpus_fingerprint,
            "descriptor": self.descriptor,
            "mac_count": self.mac_count,
            "kernel_invocations": dict(sorted(self.kernel_invocations.items())),
            "wall_clock_s": self.wall_clock_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def reports_to_csv(reports) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["descriptor", "metric_kind", "value", "mac_count",
                     "wall_clock_s", "corpus_fingerprint"])
    for r in reports:
        writer.writerow([r.descriptor, r.metric_kind, repr(r.value),
                         r.mac_count,
                         "" if r.wall_clock_s is None else repr(r.wall_clock_s),
                         r.corpus_fingerprint])
    return buf.getvalue()


def profile_run(model_like, sequences, descriptor: str = "",
                structure_model: Model | None = None,
                measure_wall_clock: bool = True) -> EvalReport:
    """Perplexity plus analytic MACs and (reported-only) wall clock.

    ``structure_model`` supplies the architecture for MAC accounting when
    ``model_like`` is not itself a float Model (e.g. the integer pipeline).
    """
    structure = structure_model
    if structure is None:
        if isinstance(model_like, Model):
            structure = model_like
        elif hasattr(model_like, "float_model"):
            structure = model_like.float_model
        else:
            raise EvalError("cannot derive MAC structure; pass structure_model")
    macs = sum(macs_for_sequence(structure, len(seq)) for seq in sequences)
    wall = None
    if measure_wall_clock:
        nll_sum(model_like, sequences[0])  # warmup
        t0 = time.perf_counter()
    value = perplexity(model_like, sequences)
    if measure_wall_clock:
        wall = time.perf_counter() - t0
    return EvalReport(
        metric_kind="perplexity",
        value=value,
        corpus_fingerprint=corpus_mod.fingerprint(sequences),
        descriptor=descriptor,
        mac_count=int(macs),
        kernel_invocations=kernel_invocations(structure),
        wall_clock_s=wall,
    )
