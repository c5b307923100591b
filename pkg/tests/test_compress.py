"""Compression passes: locality, identity no-ops, scan shape, pruning accounting."""

import numpy as np
import pytest

from tinyquant.compress import (
    CompressError,
    SensitivityProfile,
    StructuralPlan,
    apply_structural_plan,
    prune_mlp_channels,
    quantize_block,
    remove_blocks,
    sensitivity_scan,
    token_drop,
)
from tinyquant.evaluate import perplexity
from tinyquant.model import BlockId, forward_float, param_items, parameter_count


def params_bytes(model):
    return {name: arr.tobytes() for name, arr in param_items(model)}


def assert_models_identical(a, b):
    pa, pb = params_bytes(a), params_bytes(b)
    assert pa.keys() == pb.keys()
    for name in pa:
        assert pa[name] == pb[name], name


class TestQuantizeBlock:
    def test_16_bit_is_byte_identical(self, tiny_model):
        out = quantize_block(tiny_model, BlockId.transformer(0), 16)
        assert_models_identical(tiny_model, out)

    def test_locality(self, tiny_model):
        out = quantize_block(tiny_model, BlockId.transformer(1), 4)
        before = params_bytes(tiny_model)
        after = params_bytes(out)
        for name in before:
            if name.startswith("blocks.1."):
                continue
            assert before[name] == after[name], name
        changed = [n for n in before
                   if n.startswith("blocks.1.") and before[n] != after[n]]
        assert changed  # weights of the target block actually moved

    def test_biases_untouched(self, tiny_model):
        out = quantize_block(tiny_model, BlockId.transformer(0), 2)
        assert out.blocks[0].attn.bq.tobytes() == \
            tiny_model.blocks[0].attn.bq.tobytes()
        assert out.blocks[0].ln1_beta.tobytes() == \
            tiny_model.blocks[0].ln1_beta.tobytes()

    def test_commutativity_on_disjoint_blocks(self, tiny_model):
        ij = quantize_block(quantize_block(tiny_model, BlockId.transformer(0), 4),
                            BlockId.transformer(1), 8)
        ji = quantize_block(quantize_block(tiny_model, BlockId.transformer(1), 8),
                            BlockId.transformer(0), 4)
        assert_models_identical(ij, ji)

    def test_unknown_block(self, tiny_model):
        with pytest.raises(CompressError):
            quantize_block(tiny_model, BlockId.transformer(9), 4)

    def test_bad_bits(self, tiny_model):
        with pytest.raises(CompressError):
            quantize_block(tiny_model, BlockId.embedding(), 5)


@pytest.fixture(scope="module")
def profile(tiny_model, tiny_seqs):
    return sensitivity_scan(tiny_model, tiny_seqs,
                            lambda m, s: perplexity(m, s),
                            precision_set=(4, 8, 16))


class TestSensitivityScan:
    def test_full_grid_coverage(self, tiny_model, profile):
        blocks = tiny_model.config.assignable_blocks()
        assert set(profile.entries) == {
            (b, bits) for b in blocks for bits in (4, 8, 16)}

    def test_16_bit_column_zero_delta(self, tiny_model, profile):
        for b in tiny_model.config.assignable_blocks():
            assert profile.entries[(b, 16)].delta == 0.0

    def test_baseline_matches_direct_eval(self, tiny_model, tiny_seqs, profile):
        assert profile.baseline_metric == pytest.approx(
            perplexity(tiny_model, tiny_seqs), rel=1e-12)

    def test_order_independence(self, tiny_model, tiny_seqs, profile):
        again = sensitivity_scan(tiny_model, tiny_seqs,
                                 lambda m, s: perplexity(m, s),
                                 precision_set=(16, 8, 4))
        assert again.to_json() == profile.to_json()

    def test_json_roundtrip(self, profile):
        back = SensitivityProfile.from_json(profile.to_json())
        assert back.to_json() == profile.to_json()

    def test_empty_corpus_rejected(self, tiny_model):
        with pytest.raises(CompressError):
            sensitivity_scan(tiny_model, [], lambda m, s: 0.0)


class TestPruneMlpChannels:
    def test_keep_all_is_identical(self, tiny_model):
        out = prune_mlp_channels(tiny_model, 0, tiny_model.config.d_ff)
        assert_models_identical(tiny_model, out)

    def test_zeroed_channel_is_dropped_logits_unchanged(self, tiny_model):
        from tinyquant.model import copy_model
        poked = copy_model(tiny_model)
        ch = 7
        poked.blocks[0].mlp.w1[ch] = 0.0
        poked.blocks[0].mlp.b1[ch] = 0.0
        poked.blocks[0].mlp.w2[:, ch] = 0.0
        d_ff = poked.config.d_ff
        pruned = prune_mlp_channels(poked, 0, d_ff - 1)
        assert pruned.blocks[0].mlp.w1.shape[0] == d_ff - 1
        toks = np.arange(12) % poked.config.vocab_size
        assert np.allclose(forward_float(poked, toks),
                           forward_float(pruned, toks), atol=1e-12)

    def test_parameter_accounting(self, tiny_model):
        keep = tiny_model.config.d_ff // 2
        pruned = prune_mlp_channels(tiny_model, 1, keep)
        d = tiny_model.config.d_model
        removed = (tiny_model.config.d_ff - keep) * (2 * d + 1)
        assert parameter_count(pruned) == parameter_count(tiny_model) - removed

    def test_out_of_range_keep(self, tiny_model):
        with pytest.raises(CompressError):
            prune_mlp_channels(tiny_model, 0, 0)
        with pytest.raises(CompressError):
            prune_mlp_channels(tiny_model, 0, tiny_model.config.d_ff + 1)

    def test_perplexity_recorded_after_halving(self, tiny_model, tiny_seqs):
        pruned = prune_mlp_channels(tiny_model, 0, tiny_model.config.d_ff // 2)
        assert np.isfinite(perplexity(pruned, tiny_seqs))


class TestRemoveBlocks:
    def test_empty_set_identical(self, tiny_model):
        assert_models_identical(tiny_model, remove_blocks(tiny_model, []))

    def test_accounting(self, tiny_model):
        removed = remove_blocks(tiny_model, [0])
        delta = parameter_count(tiny_model, BlockId.transformer(0))
        assert parameter_count(removed) == parameter_count(tiny_model) - delta
        assert removed.config.n_blocks == tiny_model.config.n_blocks - 1

    def test_survivors_keep_weights(self, tiny_model):
        removed = remove_blocks(tiny_model, [0])
        assert removed.blocks[0].attn.wq.tobytes() == \
            tiny_model.blocks[1].attn.wq.tobytes()

    def test_cannot_remove_everything(self, tiny_model):
        with pytest.raises(CompressError):
            remove_blocks(tiny_model, range(tiny_model.config.n_blocks))

    def test_out_of_range(self, tiny_model):
        with pytest.raises(CompressError):
            remove_blocks(tiny_model, [99])


class TestTokenDrop:
    def test_keep_one_is_noop(self, tiny_model):
        dropped = token_drop(tiny_model, 1.0, 0)
        toks = np.arange(16) % tiny_model.config.vocab_size
        assert np.array_equal(forward_float(dropped, toks),
                              forward_float(tiny_model, toks))

    def test_seq_len_one_never_drops(self, tiny_model):
        dropped = token_drop(tiny_model, 0.25, 0)
        logits, positions = dropped.logits_with_positions(np.array([3]))
        assert positions.tolist() == [0]
        assert logits.shape[0] == 1

    def test_positions_shrink_and_keep_last(self, tiny_model):
        dropped = token_drop(tiny_model, 0.5, 0)
        toks = np.arange(16) % tiny_model.config.vocab_size
        logits, positions = dropped.logits_with_positions(toks)
        assert len(positions) == 8
        assert positions[-1] == 15
        assert logits.shape[0] == 8

    def test_bad_fraction(self, tiny_model):
        with pytest.raises(CompressError):
            token_drop(tiny_model, 0.0, 0)
        with pytest.raises(CompressError):
            token_drop(tiny_model, 1.5, 0)

    def test_bad_boundary(self, tiny_model):
        with pytest.raises(CompressError):
            token_drop(tiny_model, 0.5, tiny_model.config.n_blocks)


class TestStructuralPlan:
    def test_json_roundtrip(self):
        plan = StructuralPlan(blocks_removed=(1,),
                              mlp_channels_kept={0: 32},
                              token_drop={"after_block": 0,
                                          "keep_fraction": 0.5})
        back = StructuralPlan.from_json(plan.to_json())
        assert back.to_json() == plan.to_json()

    def test_unknown_field_rejected(self):
        with pytest.raises(CompressError):
            StructuralPlan.from_json('{"trim_heads": 2}')

    def test_apply_remaps_indices(self, tiny_model):
        # remove block 0; prune original block 1 (remapped to 0)
        plan = StructuralPlan(blocks_removed=(0,),
                              mlp_channels_kept={1: 16})
        out = apply_structural_plan(tiny_model, plan)
        assert out.config.n_blocks == 1
        assert out.blocks[0].mlp.w1.shape[0] == 16

    def test_pruning_removed_block_rejected(self, tiny_model):
        plan = StructuralPlan(blocks_removed=(0,), mlp_channels_kept={0: 16})
        with pytest.raises(CompressError):
            apply_structural_plan(tiny_model, plan)
