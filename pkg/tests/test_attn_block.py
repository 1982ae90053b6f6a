import numpy as np
import pytest

from bigbird.attn_block import (
    FLOP_CONVENTION,
    GLOBAL,
    RANDOM,
    WINDOW,
    assemble_compact,
    attn_block_sparse,
    block_layout,
    blockify,
    flop_count,
    gather_random_blocks,
    roll_key_blocks,
    unblockify,
)
from bigbird.attn_ref import Hardmax, HeadParams, Softmax, attn_dense
from bigbird.pattern import BlockPatternConfig, Mode, build_bigbird, expand_to_tokens


def dense_ref(X, heads, cfg, kind):
    return attn_dense(X, heads, expand_to_tokens(build_bigbird(cfg), cfg.block_size), kind)


class TestLayout:
    def test_blockify_roundtrip(self, rng):
        M = rng.standard_normal((12, 3))
        B = blockify(M, 4)
        assert B.shape == (3, 4, 3)
        np.testing.assert_array_equal(B[1, 2], M[6])
        np.testing.assert_array_equal(unblockify(B), M)

    def test_blockify_rejects_ragged(self):
        with pytest.raises(ValueError):
            blockify(np.zeros((10, 2)), 4)

    def test_roll_order(self):
        K = np.arange(5)[:, None, None] * np.ones((5, 2, 1))
        copies = roll_key_blocks(K, 3)
        # copy t holds block (j + o) mod 5 with o = -1, 0, 1
        assert [int(c[0, 0, 0]) for c in copies] == [4, 0, 1]
        assert [int(c[4, 0, 0]) for c in copies] == [3, 4, 0]

    def test_gather(self):
        K = np.arange(4)[:, None, None] * np.ones((4, 2, 1))
        G = gather_random_blocks(K, [[1, 3], [0, 2], [0, 1], [2, 2]])
        assert G.shape == (4, 4, 1)
        np.testing.assert_array_equal(G[0, :, 0], [1, 1, 3, 3])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            gather_random_blocks(np.zeros((3, 2, 1)), [[3], [0], [1]])

    def test_compact_origins_match_mask(self):
        cfg = BlockPatternConfig(8 * 2, 2, 3, 2, 1, seed=4)
        layout = block_layout(cfg)
        K = blockify(np.random.default_rng(0).standard_normal((16, 3)), 2)
        ck = assemble_compact(K, K, layout)
        mask = build_bigbird(cfg)
        for j in range(1, 8):
            assert set(ck.origin[j][~ck.duplicate_mask[j]]) == set(mask.neighbors(j))
            assert list(ck.category[j]) == [GLOBAL] + [WINDOW] * 3 + [RANDOM] * 2
            for s, src in enumerate(ck.origin[j]):
                np.testing.assert_array_equal(ck.keys[j, s * 2 : (s + 1) * 2], K[src])

    def test_duplicates_flagged(self):
        # 3 blocks, window 3 wraps onto the global block
        cfg = BlockPatternConfig(6, 2, 3, 0, 0)
        layout = block_layout(cfg)
        ck = assemble_compact(np.zeros((3, 2, 1)), np.zeros((3, 2, 1)), layout)
        assert not ck.duplicate_mask.any()
        cfg = BlockPatternConfig(8, 2, 3, 0, 1)
        ck = assemble_compact(np.zeros((4, 2, 1)), np.zeros((4, 2, 1)), block_layout(cfg))
        # row 1 window {0,1,2} repeats global block 0
        assert ck.duplicate_mask[1].tolist() == [False, True, False, False]
        assert ck.token_valid()[1].tolist() == [True, True, False, False, True, True, True, True]


class TestEquivalence:
    @pytest.mark.parametrize(
        "cfg",
        [
            BlockPatternConfig(64, 4, 3, 2, 1, seed=1),
            BlockPatternConfig(64, 8, 1, 0, 0),
            BlockPatternConfig(96, 8, 5, 3, 2, seed=2),
            BlockPatternConfig(64, 4, 3, 2, 2, Mode.ETC, seed=3),
            BlockPatternConfig(32, 8, 3, 0, 1, Mode.ETC),
            BlockPatternConfig(24, 8, 3, 0, 0),
        ],
    )
    @pytest.mark.parametrize("kind", [Softmax(), Softmax(0.3), Hardmax()])
    def test_matches_dense(self, rng, backend, cfg, kind):
        X = rng.standard_normal((cfg.total_tokens, 6))
        heads = [HeadParams.random(6, 4, rng, 0.5) for _ in range(2)]
        got = attn_block_sparse(X, heads, cfg, kind)
        ref = dense_ref(X, heads, cfg, kind)
        assert np.abs(got - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_value_width_may_differ(self, rng):
        cfg = BlockPatternConfig(32, 4, 3, 1, 1, seed=5)
        X = rng.standard_normal((32, 5))
        h = HeadParams.random(5, 3, rng, dv=7)
        np.testing.assert_allclose(attn_block_sparse(X, h, cfg), dense_ref(X, [h], cfg, Softmax()), atol=1e-12)

    def test_etc_needs_global_rows(self, rng):
        cfg = BlockPatternConfig(32, 4, 3, 1, 1, Mode.ETC)
        with pytest.raises(ValueError):
            attn_block_sparse(rng.standard_normal((32, 4)), HeadParams.random(4, 4, rng), cfg)


class TestFlops:
    def test_dense_doubling_ratio_is_four(self):
        reps = [flop_count(BlockPatternConfig(n, 64, 3, 3, 2), 64) for n in (512, 1024, 2048, 4096)]
        for a, b in zip(reps, reps[1:]):
            assert b.dense_flops == 4 * a.dense_flops

    def test_sparse_affine(self):
        reps = [flop_count(BlockPatternConfig(n, 64, 3, 3, 2), 64) for n in (512, 1024, 2048, 4096)]
        slopes = {(r.sparse_flops - r.sparse_intercept) // r.n_tokens for r in reps}
        assert len(slopes) == 1
        for r in reps:
            assert (r.sparse_flops - r.sparse_intercept) % r.n_tokens == 0

    def test_pair_count_oracle(self):
        # attended pairs from the expanded mask, plus the duplicate compact slots the convention counts
        cfg = BlockPatternConfig(64, 4, 3, 2, 2, seed=8)
        pairs = int(expand_to_tokens(build_bigbird(cfg), 4).adjacency.sum())
        ck = assemble_compact(np.zeros((16, 4, 1)), np.zeros((16, 4, 1)), block_layout(cfg))
        dup_pairs = int(ck.duplicate_mask[2:].sum()) * 4 * 4
        assert dup_pairs > 0
        rep = flop_count(cfg, 8, heads=2, m=4)
        per = 2 * 4 + 4 + 2 * 8
        assert rep.sparse_flops == 2 * per * (pairs + dup_pairs)
        assert rep.dense_flops == 2 * per * 64 * 64

    def test_report(self):
        rep = flop_count(BlockPatternConfig(4096, 64, 3, 3, 2), 64)
        assert rep.dense_flops == 4362076160 and rep.sparse_flops == 664535040
        assert rep.ratio == pytest.approx(0.15234375)
        assert rep.to_dict()["convention"] == FLOP_CONVENTION
