"""Operation-level decoding optimizations: speculative decoding and cascading.

Speculative decoding uses greedy exact-match acceptance: the draft proposes a
run of tokens, the target verifies them in one forward pass, and the longest
prefix matching the target's own greedy choices is kept followed by the
target's next token.  Under this rule the output is identical, token for
token, to decoding with the target alone; the draft only changes how many
target calls it takes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from tinyquant.model import ContextOverflowError, ModelError, greedy_pick
from tinyquant.qtensor import IntTensor


class DecodeError(ModelError):
    pass


@dataclass
class SpecDecodeStats:
    proposed: int = 0
    accepted: int = 0
    target_calls: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def to_dict(self) -> dict:
        return {
            "proposed": self.proposed,
            "accepted": self.accepted,
            "target_calls": self.target_calls,
            "acceptance_rate": self.acceptance_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _greedy_rows(logits) -> np.ndarray:
    """Per-position argmax with the shared first-index tie rule."""
    if isinstance(logits, IntTensor):
        return np.argmax(logits.data, axis=-1)
    return np.argmax(np.asarray(logits, dtype=np.float64), axis=-1)


def speculative_decode(
    draft,
    target,
    prompt,
    n_steps: int,
    draft_len: int = 4,
) -> tuple[np.ndarray, SpecDecodeStats]:
    """Greedy speculative decoding of ``n_steps`` tokens.

    Returns the continuation (identical to the target's own greedy decode) and
    the proposal/acceptance statistics.
    """
    if draft_len < 1:
        raise DecodeError("draft_len must be >= 1")
    if n_steps < 0:
        raise DecodeError("n_steps must be nonnegative")
    if draft.config.vocab_size != target.config.vocab_size:
        raise DecodeError("draft and target must share a vocabulary")
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise DecodeError("prompt must be non-empty")
    max_len = min(draft.config.max_seq_len, target.config.max_seq_len)
    if prompt.size + n_steps > max_len:
        raise ContextOverflowError(
            f"prompt {prompt.size} + {n_steps} steps exceeds max_seq_len")

    stats = SpecDecodeStats()
    seq = prompt
    emitted = 0
    while emitted < n_steps:
        gamma = min(draft_len, max_len - seq.size - 1, n_steps - emitted)
        proposals = []
        dseq = seq
        for _ in range(gamma):
            nxt = greedy_pick(draft.logits(dseq, last_only=True))
            proposals.append(nxt)
            dseq = np.concatenate([dseq, [nxt]])
        stats.proposed += len(proposals)

        # one target pass over prompt + proposals verifies every position
        verify_seq = np.concatenate([seq, proposals]) if proposals else seq
        logits = target.logits(verify_seq)
        choices = _greedy_rows(logits)[seq.size - 1:]
        accepted = 0
        for j, tok in enumerate(proposals):
            if int(choices[j]) == int(tok):
                accepted += 1
            else:
                break
        stats.accepted += accepted
        stats.target_calls += 1
        new_tokens = list(proposals[:accepted]) + [int(choices[accepted])]
        seq = np.concatenate([seq, new_tokens])
        emitted += len(new_tokens)
    continuation = seq[prompt.size:prompt.size + n_steps]
    return np.asarray(continuation, dtype=np.int64), stats


# ---------------------------------------------------------------------------
# model cascading

SELF_TESTS = ("max_prob", "entropy")


@dataclass(frozen=True)
class CascadePolicy:
    """When to trust the small model and when to escalate to the large one."""

    confidence_threshold: float = 0.7
    self_test: str = "max_prob"
    escalation_budget: int | None = None

    def __post_init__(self):
        if self.confidence_threshold <= 0.0:
            raise DecodeError("confidence_threshold must be positive "
                              "(> 1 means always escalate)")
        if self.self_test not in SELF_TESTS:
            raise DecodeError(f"unknown self test {self.self_test!r}")
        if self.escalation_budget is not None and self.escalation_budget < 0:
            raise DecodeError("escalation budget must be >= 0")


def self_test(logits, variant: str = "max_prob") -> float:
    """Lightweight confidence score in [0, 1] from one logit row."""
    if isinstance(logits, IntTensor):
        from tinyquant.qtensor import dequantize
        logits = dequantize(logits)
    row = np.asarray(logits, dtype=np.float64)
    if row.ndim == 2:
        row = row[-1]
    if row.ndim != 1 or row.size < 2:
        raise DecodeError("self test expects one logit row")
    shifted = row - row.max()
    p = np.exp(shifted)
    p /= p.sum()
    if variant == "max_prob":
        return float(p.max())
    if variant == "entropy":
        h = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
        return 1.0 - h / math.log(row.size)
    raise DecodeError(f"unknown self test {variant!r}")


@dataclass
class CascadeDecision:
    answer: int
    escalated: bool
    confidence: float


def cascade_route(small, large, tokens, policy: CascadePolicy,
                  budget_left: int | None = None) -> CascadeDecision:
    """Answer with the small model unless its self-test falls below threshold."""
    tokens = np.asarray(tokens)
    small_logits = small.logits(tokens, last_only=True)
    conf = self_test(small_logits, policy.self_test)
    escalate = conf < policy.confidence_threshold
    if escalate and budget_left is not None and budget_left <= 0:
        escalate = False
    if escalate:
        answer = greedy_pick(large.logits(tokens, last_only=True))
    else:
        answer = greedy_pick(small_logits)
    return CascadeDecision(answer=answer, escalated=escalate, confidence=conf)


@dataclass
class CascadeStats:
    total: int
    escalated: int
    escalation_rate: float
    accuracy: float | None

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "escalated": self.escalated,
            "escalation_rate": self.escalation_rate,
            "accuracy": self.accuracy,
        }


def cascade_run(small, large, inputs, policy: CascadePolicy,
                labels=None) -> tuple[list[CascadeDecision], CascadeStats]:
    """Route a batch through the cascade, honoring the escalation budget."""
    inputs = list(inputs)
    budget = policy.escalation_budget
    decisions = []
    for tokens in inputs:
        left = None if budget is None else budget
        d = cascade_route(small, large, tokens, policy, budget_left=left)
        if d.escalated and budget is not None:
            budget -= 1
        decisions.append(d)
    escalated = sum(1 for d in decisions if d.escalated)
    acc = None
    if labels is not None:
        labels = list(labels)
        if len(labels) != len(decisions):
            raise DecodeError("labels and inputs differ in length")
        acc = sum(1 for d, y in zip(decisions, labels)
                  if d.answer == int(y)) / len(decisions)
    stats = CascadeStats(
        total=len(decisions),
        escalated=escalated,
        escalation_rate=escalated / len(decisions) if decisions else 0.0,
        accuracy=acc,
    )
    return decisions, stats
