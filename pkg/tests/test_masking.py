import itertools
from math import comb
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcafusion.errors import InvalidSchemaError
from mcafusion.masking import (
    ChannelSet,
    MaskCache,
    apply_padding,
    block_structure,
    build_attention_mask,
    build_token_layout,
    channel_availability,
    embedding_channels,
    enumerate_channels,
    mask_from_text,
    mask_to_text,
)

GOLDEN = Path(__file__).parent / "golden"


def rule(layout, q, k):
    """Attention rule evaluated pair by pair, independent of the mask builder."""
    qk, qo, _ = layout.locate(q)
    kk, ko, _ = layout.locate(k)
    if qk == "modality" and kk == "modality":
        return qo == ko
    if qk == "fusion" and kk == "modality":
        return ko.members[0] in qo.members
    if qk == "fusion" and kk == "fusion":
        return qo == ko
    return False


class TestChannelSet:
    def test_equality_by_members(self):
        assert ChannelSet((0, 2)) == ChannelSet((2, 0))
        assert hash(ChannelSet((1, 0))) == hash(ChannelSet((0, 1)))

    def test_empty_rejected(self):
        with pytest.raises(InvalidSchemaError):
            ChannelSet(())


class TestEnumerateChannels:
    def test_four_modalities_mca(self):
        assert len(enumerate_channels(4, "MCA")) == 11

    def test_two_modalities_mca(self):
        assert enumerate_channels(2, "MCA") == [ChannelSet((0, 1))]

    def test_three_modalities_mca(self):
        got = enumerate_channels(3, "MCA")
        assert got == [ChannelSet(c) for c in [(0, 1), (0, 2), (1, 2), (0, 1, 2)]]

    def test_eao_subsets(self):
        got = enumerate_channels(4, "EAO")
        assert len(got) == 4 + comb(4, 2)
        assert all(c.size in (1, 2) for c in got)

    def test_zorro_single_channel(self):
        assert enumerate_channels(5, "Zorro") == [ChannelSet(tuple(range(5)))]

    @pytest.mark.parametrize("M", range(2, 9))
    def test_channel_count_law(self, M):
        chans = enumerate_channels(M, "MCA")
        assert len(chans) == 2**M - M - 1
        brute = {frozenset(s) for k in range(2, M + 1) for s in itertools.combinations(range(M), k)}
        assert {frozenset(c.members) for c in chans} == brute

    def test_canonical_order(self):
        chans = enumerate_channels(4, "MCA")
        keys = [(c.size, c.members) for c in chans]
        assert keys == sorted(keys)

    def test_too_few_modalities(self):
        with pytest.raises(InvalidSchemaError):
            enumerate_channels(1, "MCA")

    def test_embedding_channels_unimodal_first(self):
        chans = embedding_channels(4, "MCA")
        assert len(chans) == 15
        assert [c.members for c in chans[:4]] == [(0,), (1,), (2,), (3,)]
        assert len(embedding_channels(4, "Zorro")) == 5


class TestTokenLayout:
    def test_mca_fusion_tokens(self):
        layout = build_token_layout([5, 5, 5, 5], 8, "MCA")
        assert len(layout.fusion_blocks) == 11
        assert layout.n_fusion_tokens == 88

    def test_zorro_parity_block(self):
        layout = build_token_layout([5, 5, 5, 5], 8, "Zorro")
        assert [b.length for b in layout.fusion_blocks] == [88]

    def test_two_modalities(self):
        layout = build_token_layout([3, 4], 8, "MCA")
        assert [b.length for b in layout.fusion_blocks] == [8]
        assert layout.total_tokens == 15

    def test_eao_has_no_fusion_blocks(self):
        assert build_token_layout([3, 4, 2], 8, "EAO").fusion_blocks == ()

    @pytest.mark.parametrize("mode", ["MCA", "Zorro", "EAO"])
    def test_blocks_cover_contiguously(self, mode):
        layout = build_token_layout([2, 3, 1, 4], 3, mode)
        pos = 0
        for b in layout.blocks:
            assert b.offset == pos
            pos = b.stop
        assert pos == layout.total_tokens

    def test_empty_block_rejected(self):
        with pytest.raises(InvalidSchemaError):
            build_token_layout([2, 0], 2, "MCA")

    def test_locate(self):
        layout = build_token_layout([2, 2], 2, "MCA")
        assert layout.locate(3) == ("modality", ChannelSet((1,)), 1)
        assert layout.locate(4) == ("fusion", ChannelSet((0, 1)), 0)


class TestAttentionMask:
    def test_golden_two_modalities(self):
        layout = build_token_layout([2, 2], 2, "MCA")
        mask = build_attention_mask(layout)
        assert mask_to_text(mask) == (GOLDEN / "mca_m2_t2.txt").read_text()
        assert mask.sum() == 20

    def test_text_roundtrip(self):
        layout = build_token_layout([2, 1, 3], 2, "MCA")
        mask = build_attention_mask(layout)
        assert np.array_equal(mask_from_text(mask_to_text(mask)), mask)

    def test_examples(self):
        layout = build_token_layout([2, 2, 2], 2, "MCA")
        mask = build_attention_mask(layout)
        f = {b.owner: b for b in layout.fusion_blocks}
        m0, m1 = layout.modality_blocks[0], layout.modality_blocks[1]
        assert not mask[m0.offset, m1.offset]
        assert mask[f[ChannelSet((0, 1))].offset, m0.offset]
        assert not mask[f[ChannelSet((0, 1))].offset, f[ChannelSet((0, 2))].offset]
        assert not mask[m0.offset, f[ChannelSet((0, 1))].offset]

    @pytest.mark.parametrize("mode", ["MCA", "Zorro"])
    def test_exhaustive_rule(self, mode):
        layout = build_token_layout([2, 1, 3], 2, mode)
        mask = build_attention_mask(layout)
        T = layout.total_tokens
        expected = np.array([[rule(layout, q, k) for k in range(T)] for q in range(T)])
        assert np.array_equal(mask, expected)

    @pytest.mark.parametrize("mode", ["MCA", "Zorro"])
    def test_no_mixed_blocks(self, mode):
        layout = build_token_layout([2, 3, 1, 2], 2, mode)
        assert (block_structure(build_attention_mask(layout), layout) >= 0).all()

    def test_zorro_is_mca_restricted_to_full_channel(self):
        mca = build_token_layout([2, 3, 2], 2, "MCA")
        zorro = build_token_layout([2, 3, 2], 2, "Zorro")
        bm = block_structure(build_attention_mask(mca), mca)
        bz = block_structure(build_attention_mask(zorro), zorro)
        full = [i for i, b in enumerate(mca.blocks) if b.owner == ChannelSet((0, 1, 2))]
        keep = list(range(3)) + full
        assert np.array_equal(bm[np.ix_(keep, keep)], bz)


class TestPadding:
    def test_all_present_unchanged(self):
        layout = build_token_layout([2, 2, 3], 2, "MCA")
        mask = build_attention_mask(layout)
        assert np.array_equal(apply_padding(mask, layout, [True] * 3), mask)

    def test_missing_modality(self):
        layout = build_token_layout([2, 2], 2, "MCA")
        padded = apply_padding(build_attention_mask(layout), layout, [True, False])
        fusion = layout.fusion_blocks[0]
        m0, m1 = layout.modality_blocks
        row = padded[fusion.offset]
        assert row[m0.slice].all() and row[fusion.slice].all()
        assert not row[m1.slice].any()
        for p in range(m1.offset, m1.stop):
            assert padded[p].sum() == 1 and padded[p, p]

    def test_all_absent(self):
        layout = build_token_layout([2, 2, 1], 2, "MCA")
        padded = apply_padding(build_attention_mask(layout), layout, [False] * 3)
        for f in layout.fusion_blocks:
            row = padded[f.offset]
            assert row[f.slice].all() and row.sum() == f.length

    def test_no_real_query_sees_pad(self):
        layout = build_token_layout([2, 2, 2], 1, "MCA")
        presence = [True, False, True]
        padded = apply_padding(build_attention_mask(layout), layout, presence)
        pad = np.zeros(layout.total_tokens, bool)
        pad[layout.modality_blocks[1].slice] = True
        assert not padded[np.ix_(~pad, pad)].any()

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.booleans(), min_size=3, max_size=3), st.sampled_from(["MCA", "Zorro", "EAO"]))
    def test_idempotent_and_monotone(self, presence, mode):
        layout = build_token_layout([2, 1, 2], 2, mode)
        base = build_attention_mask(layout)
        once = apply_padding(base, layout, presence)
        twice = apply_padding(once, layout, presence)
        assert np.array_equal(once, twice)
        flipped_on = once & ~base
        assert np.array_equal(np.flatnonzero(flipped_on), np.flatnonzero(flipped_on & np.eye(len(base), dtype=bool)))

    def test_cache(self):
        layout = build_token_layout([2, 2, 2], 1, "MCA")
        cache = MaskCache(layout)
        a = cache.get([True, False, True])
        b = cache.get((True, False, True))
        assert a is b and len(cache) == 1
        assert np.array_equal(a, apply_padding(build_attention_mask(layout), layout, [True, False, True]))


class TestAvailability:
    def test_examples(self):
        chans = [ChannelSet((0,)), ChannelSet((1,)), ChannelSet((0, 1))]
        assert channel_availability([True, False], chans).tolist() == [True, False, True]
        assert channel_availability([False, False], chans).tolist() == [False, False, False]
        assert channel_availability([True, True], chans).all()

    @given(st.lists(st.booleans(), min_size=4, max_size=4), st.integers(0, 3))
    def test_monotone(self, presence, extra):
        chans = embedding_channels(4, "MCA")
        before = channel_availability(presence, chans)
        more = list(presence)
        more[extra] = True
        after = channel_availability(more, chans)
        assert not (before & ~after).any()
