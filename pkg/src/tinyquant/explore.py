"""Mixed-precision exploration: assignments, memory accounting, Pareto search.

An assignment maps every block of the hierarchy to a bit-width.  Exploration
evaluates assignments by weight-only quantization of the float model (the same
per-block quantization the sensitivity scan uses) and trades the resulting
perplexity against the packed weight footprint.  Small grids are enumerated
exhaustively; past the cap a sensitivity-guided greedy descent takes over.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from tinyquant import corpus as corpus_mod
from tinyquant.model import BlockId, Model, ModelConfig, ModelError, params_of_block

PRECISION_SET = (2, 3, 4, 8)
BASELINE_BITS = 16
EXHAUSTIVE_CAP = 4096


class ExploreError(ModelError):
    pass


class ExhaustiveCapExceeded(ExploreError):
    """Grid too large to enumerate; use greedy_search instead."""


class NoFeasiblePoint(ExploreError):
    pass


@dataclass(frozen=True)
class PrecisionAssignment:
    """Map from block to bit-width; the unit of the search space."""

    bits_by_block: tuple  # sorted tuple of (BlockId, bits)

    @classmethod
    def from_dict(cls, mapping) -> "PrecisionAssignment":
        items = []
        for block, bits in mapping.items():
            if isinstance(block, str):
                block = BlockId.parse(block)
            bits = int(bits)
            if bits not in PRECISION_SET and bits != BASELINE_BITS:
                raise ExploreError(f"bit-width {bits} not allowed")
            items.append((block, bits))
        items.sort(key=lambda kv: kv[0].sort_key())
        return cls(tuple(items))

    @classmethod
    def uniform(cls, config: ModelConfig, bits: int) -> "PrecisionAssignment":
        return cls.from_dict({b: bits for b in config.assignable_blocks()})

    def bits_for(self, block: BlockId) -> int:
        for b, bits in self.bits_by_block:
            if b == block:
                return bits
        raise ExploreError(f"assignment missing block {block}")

    def blocks(self) -> list[BlockId]:
        return [b for b, _ in self.bits_by_block]

    def with_bits(self, block: BlockId, bits: int) -> "PrecisionAssignment":
        return PrecisionAssignment.from_dict(
            {**dict(self.bits_by_block), block: bits})

    def completed(self, config: ModelConfig,
                  default: int = BASELINE_BITS) -> "PrecisionAssignment":
        table = dict(self.bits_by_block)
        return PrecisionAssignment.from_dict(
            {b: table.get(b, default) for b in config.assignable_blocks()})

    def is_total(self, config: ModelConfig) -> bool:
        return self.blocks() == config.assignable_blocks()

    def to_dict(self) -> dict:
        return {str(b): bits for b, bits in self.bits_by_block}

    def key(self) -> str:
        return ";".join(f"{b}={bits}" for b, bits in self.bits_by_block)

    def __str__(self) -> str:
        return self.key()


def packed_bytes(numel: int, bits: int) -> int:
    """Packed size of one tensor: ceil(numel * bits / 8)."""
    return (numel * bits + 7) // 8


def memory_footprint(model_or_config, assignment: PrecisionAssignment,
                     model: Model | None = None) -> int:
    """Weight memory in bytes under an assignment, per-tensor packed.

    Accepts a Model (counts actual tensors, so pruned models are exact) or a
    ModelConfig (closed-form parameter counts).
    """
    if isinstance(model_or_config, Model):
        model = model_or_config
        config = model.config
    else:
        config = model_or_config
    if not assignment.is_total(config):
        raise ExploreError("assignment must cover every block")
    total = 0
    if model is not None:
        for block in config.assignable_blocks():
            bits = assignment.bits_for(block)
            for _, arr in params_of_block(model, block):
                total += packed_bytes(arr.size, bits)
        return total
    d, dff, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    emb_tensors = [v * d, s * d]
    block_tensors = (
        [d, d]                      # ln1
        + [d * d, d] * 4            # wq/bq wk/bk wv/bv wo/bo
        + [d, d]                    # ln2
        + [dff * d, dff, d * dff, d]
    )
    head_tensors = [d, d, v * d, v]
    for block in config.assignable_blocks():
        bits = assignment.bits_for(block)
        if block.kind == "embedding":
            sizes = emb_tensors
        elif block.kind == "transformer":
            sizes = block_tensors
        else:
            sizes = head_tensors
        total += sum(packed_bytes(n, bits) for n in sizes)
    return total


def baseline_footprint(model_or_config) -> int:
    config = (model_or_config.config if isinstance(model_or_config, Model)
              else model_or_config)
    baseline = PrecisionAssignment.uniform(config, BASELINE_BITS)
    return memory_footprint(model_or_config, baseline)


def enumerate_assignments(blocks: list[BlockId], precision_set,
                          cap: int = EXHAUSTIVE_CAP):
    """All |precisions|^|blocks| assignments over the given blocks, in a
    deterministic order.  Raises ExhaustiveCapExceeded past the cap."""
    precisions = sorted(set(int(p) for p in precision_set))
    if not blocks or not precisions:
        raise ExploreError("need at least one block and one precision")
    count = len(precisions) ** len(blocks)
    if count > cap:
        raise ExhaustiveCapExceeded(
            f"{count} assignments exceed the exhaustive cap ({cap}); "
            "use greedy_search"
        )
    for combo in itertools.product(precisions, repeat=len(blocks)):
        yield PrecisionAssignment.from_dict(dict(zip(blocks, combo)))


@dataclass
class ParetoPoint:
    assignment: PrecisionAssignment
    memory_bytes: int
    memory_saving: float
    metric: float
    on_front: bool = False

    def to_dict(self) -> dict:
        return {
            "assignment": self.assignment.to_dict(),
            "memory_bytes": self.memory_bytes,
            "memory_saving": self.memory_saving,
            "metric": self.metric,
            "on_front": self.on_front,
        }


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """a dominates b when a is no worse on both axes and better on one."""
    return (a.memory_bytes <= b.memory_bytes and a.metric <= b.metric
            and (a.memory_bytes < b.memory_bytes or a.metric < b.metric))


def pareto_front(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Maximal non-dominated subset; exact ties on both axes are all kept."""
    if not points:
        raise ExploreError("pareto_front needs at least one point")
    order = sorted(range(len(points)),
                   key=lambda i: (points[i].memory_bytes, points[i].metric))
    front: list[ParetoPoint] = []
    best = math.inf
    i = 0
    while i < len(order):
        j = i
        mem = points[order[i]].memory_bytes
        while j < len(order) and points[order[j]].memory_bytes == mem:
            j += 1
        group = [points[k] for k in order[i:j]]
        group_min = min(p.metric for p in group)
        if group_min < best:
            front.extend(p for p in group if p.metric == group_min)
            best = group_min
        i = j
    return front


@dataclass
class ParetoReport:
    points: list[ParetoPoint]
    front: list[ParetoPoint]
    baseline: ParetoPoint
    strategy: str
    corpus_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "corpus_fingerprint": self.corpus_fingerprint,
            "baseline": self.baseline.to_dict(),
            "points": [p.to_dict() for p in
                       sorted(self.points, key=lambda p: p.assignment.key())],
            "front": [p.to_dict() for p in
                      sorted(self.front, key=lambda p: p.memory_bytes)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["assignment", "memory_bytes", "memory_saving", "metric", "on_front"])
        for p in sorted(self.points, key=lambda p: p.assignment.key()):
            writer.writerow([p.assignment.key(), p.memory_bytes,
                             repr(p.memory_saving), repr(p.metric),
                             int(p.on_front)])
        return buf.getvalue()


def _make_point(model, assignment, metric, base_bytes) -> ParetoPoint:
    mem = memory_footprint(model, assignment)
    return ParetoPoint(
        assignment=assignment,
        memory_bytes=mem,
        memory_saving=1.0 - mem / base_bytes,
        metric=metric,
    )


def _finish_report(model, points, strategy, fingerprint, baseline_point):
    front = pareto_front(points)
    front_ids = {id(p) for p in front}
    for p in points:
        p.on_front = id(p) in front_ids
    return ParetoReport(
        points=points,
        front=sorted(front, key=lambda p: p.memory_bytes),
        baseline=baseline_point,
        strategy=strategy,
        corpus_fingerprint=fingerprint,
    )


def explore_exhaustive(
    model: Model,
    sequences,
    evaluate,
    blocks: list[BlockId] | None = None,
    precision_set=PRECISION_SET + (BASELINE_BITS,),
    cap: int = EXHAUSTIVE_CAP,
) -> ParetoReport:
    """Evaluate every assignment over ``blocks`` (others stay at baseline).

    ``evaluate(model, assignment, sequences) -> metric`` supplies the quality
    metric; unlisted blocks are pinned to the 16-bit baseline.
    """
    config = model.config
    if blocks is None:
        blocks = config.assignable_blocks()
    base_bytes = baseline_footprint(model)
    fingerprint = corpus_mod.fingerprint(sequences)
    points = []
    baseline_point = None
    baseline_assignment = PrecisionAssignment.uniform(config, BASELINE_BITS)
    for partial in enumerate_assignments(blocks, precision_set, cap):
        assignment = partial.completed(config)
        metric = evaluate(model, assignment, sequences)
        points.append(_make_point(model, assignment, metric, base_bytes))
        if assignment == baseline_assignment:
            baseline_point = points[-1]
    if baseline_point is None:
        metric = evaluate(model, baseline_assignment, sequences)
        baseline_point = _make_point(model, baseline_assignment, metric,
                                     base_bytes)
    return _finish_report(model, points, "exhaustive", fingerprint,
                          baseline_point)


def greedy_search(
    model: Model,
    sequences,
    evaluate,
    budget: int,
    precision_set=PRECISION_SET + (BASELINE_BITS,),
    profile=None,
    quality_floor: float | None = None,
) -> ParetoReport:
    """Sensitivity-guided greedy descent from the all-16-bit baseline.

    Each round evaluates single-block one-notch-down candidates (ordered by
    the sensitivity profile when given) and commits the best memory-per-metric
    step.  ``budget`` caps candidate evaluations; every evaluated point is
    reported, dominated or not.
    """
    if budget < 0:
        raise ExploreError("budget must be nonnegative")
    config = model.config
    precisions = sorted(set(int(p) for p in precision_set))
    base_bytes = baseline_footprint(model)
    fingerprint = corpus_mod.fingerprint(sequences)

    current = PrecisionAssignment.uniform(config, BASELINE_BITS)
    metric = evaluate(model, current, sequences)
    baseline_point = _make_point(model, current, metric, base_bytes)
    points = [baseline_point]
    current_point = baseline_point
    evals = 0

    def next_lower(bits: int) -> int | None:
        lower = [p for p in precisions if p < bits]
        return max(lower) if lower else None

    def profile_delta(block, bits):
        if profile is None:
            return 0.0
        entry = profile.entries.get((block, bits))
        return entry.delta if entry is not None else 0.0

    while evals < budget:
        candidates = []
        for block in config.assignable_blocks():
            target = next_lower(current.bits_for(block))
            if target is not None:
                candidates.append((profile_delta(block, target),
                                   block.sort_key(), block, target))
        if not candidates:
            break
        candidates.sort(key=lambda c: (c[0], c[1]))
        best = None
        for _, _, block, target in candidates:
            if evals >= budget:
                break
            cand = current.with_bits(block, target)
            cand_metric = evaluate(model, cand, sequences)
            evals += 1
            point = _make_point(model, cand, cand_metric, base_bytes)
            points.append(point)
            d_mem = current_point.memory_bytes - point.memory_bytes
            d_metric = point.metric - current_point.metric
            ratio = math.inf if d_metric <= 0 else d_mem / d_metric
            score = (ratio, d_mem)
            if best is None or score > best[0]:
                best = (score, point)
        if best is None:
            break
        _, best_point = best
        if quality_floor is not None and best_point.metric > quality_floor:
            break
        current = best_point.assignment
        current_point = best_point
    return _finish_report(model, points, "greedy", fingerprint, baseline_point)


def select_under_constraint(report: ParetoReport,
                            max_metric_degradation: float) -> ParetoPoint:
    """Max-saving front point with metric within (1 + degradation) of baseline."""
    if not report.front:
        raise ExploreError("report has an empty front")
    allowed = report.baseline.metric * (1.0 + max_metric_degradation)
    feasible = [p for p in report.front if p.metric <= allowed]
    if not feasible:
        raise NoFeasiblePoint(
            f"no front point within {max_metric_degradation:.3%} of baseline")
    return max(feasible, key=lambda p: (p.memory_saving, -p.metric))
