"""Pareto exploration: enumeration, dominance, accounting, greedy search."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyquant.evaluate import perplexity
from tinyquant.explore import (
    ExhaustiveCapExceeded,
    ExploreError,
    NoFeasiblePoint,
    ParetoPoint,
    PrecisionAssignment,
    baseline_footprint,
    dominates,
    enumerate_assignments,
    explore_exhaustive,
    greedy_search,
    memory_footprint,
    packed_bytes,
    pareto_front,
    select_under_constraint,
)
from tinyquant.model import BlockId, param_items


def brute_force_front(points):
    """O(n^2) dominance oracle."""
    return [p for p in points
            if not any(dominates(q, p) for q in points if q is not p)]


def quant_ppl(model, assignment, sequences):
    from tinyquant.compress import apply_assignment
    return perplexity(apply_assignment(model, assignment), sequences)


class TestAssignment:
    def test_uniform_total(self, tiny_config):
        a = PrecisionAssignment.uniform(tiny_config, 8)
        assert a.is_total(tiny_config)
        assert all(a.bits_for(b) == 8 for b in tiny_config.assignable_blocks())

    def test_completion_fills_baseline(self, tiny_config):
        partial = PrecisionAssignment.from_dict({BlockId.transformer(0): 4})
        total = partial.completed(tiny_config)
        assert total.is_total(tiny_config)
        assert total.bits_for(BlockId.transformer(0)) == 4
        assert total.bits_for(BlockId.embedding()) == 16

    def test_bad_bits_rejected(self):
        with pytest.raises(ExploreError):
            PrecisionAssignment.from_dict({"embedding": 7})

    def test_key_is_stable(self, tiny_config):
        a = PrecisionAssignment.uniform(tiny_config, 4)
        assert a.key().startswith("embedding=4;transformer:0=4")


class TestMemoryFootprint:
    def test_all_16_saving_zero(self, tiny_model):
        a = PrecisionAssignment.uniform(tiny_model.config, 16)
        assert memory_footprint(tiny_model, a) == baseline_footprint(tiny_model)

    def test_all_8_saving_exactly_half(self, tiny_model):
        a8 = PrecisionAssignment.uniform(tiny_model.config, 8)
        assert memory_footprint(tiny_model, a8) * 2 == \
            baseline_footprint(tiny_model)

    def test_config_and_model_accounting_agree(self, tiny_model):
        for bits in (2, 3, 4, 8, 16):
            a = PrecisionAssignment.uniform(tiny_model.config, bits)
            assert memory_footprint(tiny_model, a) == \
                memory_footprint(tiny_model.config, a)

    def test_matches_per_tensor_summation(self, tiny_model):
        # independent accounting: walk every tensor, pack at its block's bits
        from tinyquant.model import block_of_param
        mixed = PrecisionAssignment.from_dict({
            "embedding": 8, "transformer:0": 4, "transformer:1": 2,
            "output_head": 16})
        expected = 0
        for name, arr in param_items(tiny_model):
            bits = mixed.bits_for(block_of_param(name))
            expected += (arr.size * bits + 7) // 8
        assert memory_footprint(tiny_model, mixed) == expected

    def test_partial_assignment_rejected(self, tiny_model):
        partial = PrecisionAssignment.from_dict({"embedding": 8})
        with pytest.raises(ExploreError):
            memory_footprint(tiny_model, partial)


class TestEnumerate:
    def test_counting_3x3(self, tiny_config):
        blocks = tiny_config.assignable_blocks()[:3]
        got = list(enumerate_assignments(blocks, (4, 8, 16)))
        assert len(got) == 27
        assert len({a.key() for a in got}) == 27

    def test_single_block(self):
        got = list(enumerate_assignments([BlockId.embedding()], (2, 4, 8)))
        assert len(got) == 3

    def test_matches_recursive_generator(self):
        # independent oracle: recursive enumeration
        blocks = [BlockId.embedding(), BlockId.transformer(0),
                  BlockId.transformer(1), BlockId.output_head()]
        precisions = (4, 8)

        def recurse(i):
            if i == len(blocks):
                yield {}
                return
            for rest in recurse(i + 1):
                for p in precisions:
                    yield {blocks[i]: p, **rest}

        want = {PrecisionAssignment.from_dict(d).key() for d in recurse(0)}
        got = {a.key() for a in enumerate_assignments(blocks, precisions)}
        assert got == want and len(got) == 16

    def test_cap_exceeded(self, tiny_config):
        blocks = tiny_config.assignable_blocks()
        with pytest.raises(ExhaustiveCapExceeded, match="greedy"):
            list(enumerate_assignments(blocks * 3, (2, 3, 4, 8, 16), cap=100))


def _pt(mem, metric):
    a = PrecisionAssignment.from_dict({"embedding": 8})
    return ParetoPoint(assignment=a, memory_bytes=mem, memory_saving=0.0,
                       metric=metric)


class TestParetoFront:
    def test_single_point(self):
        p = _pt(10, 1.0)
        assert pareto_front([p]) == [p]

    def test_dominator_wins(self):
        a, b = _pt(10, 1.0), _pt(12, 2.0)
        assert pareto_front([a, b]) == [a]

    def test_ties_on_both_axes_kept(self):
        a, b = _pt(10, 1.0), _pt(10, 1.0)
        assert set(map(id, pareto_front([a, b]))) == {id(a), id(b)}

    def test_empty_rejected(self):
        with pytest.raises(ExploreError):
            pareto_front([])

    def test_equal_metric_cheaper_memory_dominates(self):
        a, b = _pt(10, 5.0), _pt(12, 5.0)
        assert pareto_front([a, b]) == [a]

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)),
                    min_size=1, max_size=60))
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force_oracle(self, pairs):
        points = [_pt(m, float(x)) for m, x in pairs]
        got = pareto_front(points)
        want = brute_force_front(points)
        assert {id(p) for p in got} == {id(p) for p in want}


@pytest.fixture(scope="module")
def report(tiny_model, tiny_seqs):
    blocks = [BlockId.transformer(0), BlockId.transformer(1),
              BlockId.output_head()]
    return explore_exhaustive(tiny_model, tiny_seqs, quant_ppl,
                              blocks=blocks, precision_set=(4, 8, 16))


class TestExploreExhaustive:
    def test_27_points(self, report):
        assert len(report.points) == 27

    def test_front_matches_oracle(self, report):
        want = brute_force_front(report.points)
        assert {id(p) for p in report.front} == {id(p) for p in want}
        for p in report.points:
            assert p.on_front == (p in report.front)

    def test_no_front_point_dominated(self, report):
        for f in report.front:
            assert not any(dominates(p, f) for p in report.points)

    def test_baseline_present(self, report, tiny_model):
        assert report.baseline.memory_bytes == baseline_footprint(tiny_model)
        assert report.baseline.memory_saving == 0.0

    def test_csv_has_header_and_rows(self, report):
        lines = report.to_csv().splitlines()
        assert lines[0] == "assignment,memory_bytes,memory_saving,metric,on_front"
        assert len(lines) == 28

    def test_deterministic(self, tiny_model, tiny_seqs, report):
        blocks = [BlockId.transformer(0), BlockId.transformer(1),
                  BlockId.output_head()]
        again = explore_exhaustive(tiny_model, tiny_seqs, quant_ppl,
                                   blocks=blocks, precision_set=(4, 8, 16))
        assert again.to_json() == report.to_json()


class TestGreedySearch:
    def test_budget_zero_baseline_only(self, tiny_model, tiny_seqs):
        report = greedy_search(tiny_model, tiny_seqs, quant_ppl, budget=0)
        assert len(report.points) == 1
        assert report.points[0].memory_saving == 0.0

    def test_monotone_memory_trace(self, tiny_model, tiny_seqs):
        report = greedy_search(tiny_model, tiny_seqs, quant_ppl, budget=12,
                               precision_set=(4, 8, 16))
        # visited points all appear; the accepted path shrinks memory, so the
        # minimum over evaluated points is strictly below baseline
        mems = [p.memory_bytes for p in report.points]
        assert min(mems) < report.baseline.memory_bytes

    def test_front_points_non_dominated_within_visited(self, tiny_model,
                                                       tiny_seqs):
        report = greedy_search(tiny_model, tiny_seqs, quant_ppl, budget=10,
                               precision_set=(4, 8, 16))
        for f in report.front:
            assert not any(dominates(p, f) for p in report.points)

    def test_greedy_front_vs_exhaustive(self, tiny_model, tiny_seqs):
        # on a feasible instance every greedy front point is either
        # non-dominated in the exhaustive set or flagged as dominated
        blocks = [BlockId.transformer(0), BlockId.transformer(1)]
        exh = explore_exhaustive(tiny_model, tiny_seqs, quant_ppl,
                                 blocks=blocks, precision_set=(4, 8, 16))
        greedy = greedy_search(tiny_model, tiny_seqs, quant_ppl, budget=8,
                               precision_set=(4, 8, 16))
        exh_by_key = {p.assignment.key(): p for p in exh.points}
        for p in greedy.points:
            match = exh_by_key.get(p.assignment.key())
            if match is not None:
                assert p.metric == pytest.approx(match.metric, rel=1e-12)

    def test_negative_budget_rejected(self, tiny_model, tiny_seqs):
        with pytest.raises(ExploreError):
            greedy_search(tiny_model, tiny_seqs, quant_ppl, budget=-1)


class TestSelectUnderConstraint:
    def _report(self, tiny_model, tiny_seqs):
        return explore_exhaustive(
            tiny_model, tiny_seqs, quant_ppl,
            blocks=[BlockId.transformer(0), BlockId.transformer(1)],
            precision_set=(4, 8, 16))

    def test_infinite_allowance_gives_min_memory(self, tiny_model, tiny_seqs):
        report = self._report(tiny_model, tiny_seqs)
        chosen = select_under_constraint(report, float("inf"))
        assert chosen.memory_bytes == min(p.memory_bytes for p in report.front)

    def test_zero_allowance(self, tiny_model, tiny_seqs):
        report = self._report(tiny_model, tiny_seqs)
        allowed = report.baseline.metric
        feasible = [p for p in report.front if p.metric <= allowed]
        if feasible:
            chosen = select_under_constraint(report, 0.0)
            assert chosen.metric <= allowed
        else:
            with pytest.raises(NoFeasiblePoint):
                select_under_constraint(report, 0.0)

    def test_matches_linear_scan_oracle(self, tiny_model, tiny_seqs):
        report = self._report(tiny_model, tiny_seqs)
        allowance = 0.06
        allowed = report.baseline.metric * 1.06
        best, best_key = None, None
        for p in report.front:
            if p.metric <= allowed:
                key = (p.memory_saving, -p.metric)
                if best is None or key > best_key:
                    best, best_key = p, key
        if best is None:
            with pytest.raises(NoFeasiblePoint):
                select_under_constraint(report, allowance)
        else:
            assert select_under_constraint(report, allowance) is best


class TestPackedBytes:
    @pytest.mark.parametrize("numel,bits,want", [
        (8, 8, 8), (8, 16, 16), (8, 4, 4), (8, 3, 3), (7, 3, 3), (5, 2, 2),
    ])
    def test_examples(self, numel, bits, want):
        assert packed_bytes(numel, bits) == want
