import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairmae import tensor as T
from pairmae import tokenizer as tok
from pairmae.corpus import FramePair


def make_pair(size=64, seed=0):
    rng = np.random.default_rng(seed)
    return FramePair(
        rng.random((size, size, 3)).astype(np.float32),
        rng.random((size, size, 3)).astype(np.float32),
        gap=1,
    )


def make_params(patch_dim, dim, grid, seed=0):
    return tok.EmbedParams.create(
        patch_dim, dim, grid, np.random.default_rng(seed), dtype=np.float64
    )


class TestPatchify:
    def test_64px_patch8(self):
        patches, layout = tok.patchify(make_pair(64), 8)
        assert patches.shape == (128, 192)
        assert layout.total_tokens == 128
        assert layout.grid == (8, 8)

    def test_224px_patch16(self):
        patches, layout = tok.patchify(make_pair(224), 16)
        assert layout.total_tokens == 392

    def test_constant_frames(self):
        pair = make_pair(32)
        pair = FramePair(np.full_like(pair.frame_a[:32, :32], 0.3),
                         np.full_like(pair.frame_a[:32, :32], 0.3), 1)
        patches, _ = tok.patchify(pair, 8)
        assert np.allclose(patches, patches[0])

    def test_non_divisible(self):
        rng = np.random.default_rng(0)
        pair = FramePair(rng.random((60, 60, 3)), rng.random((60, 60, 3)), 1)
        with pytest.raises(ValueError):
            tok.patchify(pair, 8)

    def test_row_major_frame_order(self):
        pair = make_pair(16, seed=3)
        patches, layout = tok.patchify(pair, 8)
        # token 1 of frame A is the top-right patch of frame_a
        assert np.allclose(patches[1], pair.frame_a[:8, 8:16].reshape(-1))
        # frame B occupies the second half in the same order
        half = layout.tokens_per_frame
        assert np.allclose(patches[half], pair.frame_b[:8, :8].reshape(-1))

    def test_unpatchify_round_trip(self):
        pair = make_pair(32, seed=4)
        patches, layout = tok.patchify(pair, 8)
        back = tok.unpatchify(patches[: layout.tokens_per_frame], layout, 8)
        assert np.allclose(back, pair.frame_a)


class TestSampleMask:
    def test_counts_128(self):
        layout = tok.FrameLayout(64, (8, 8))
        m = tok.sample_mask(layout, 0.75, np.random.default_rng(0))
        assert len(m.masked) == 96
        assert len(m.visible(128)) == 32

    def test_counts_392(self):
        layout = tok.FrameLayout(196, (14, 14))
        m = tok.sample_mask(layout, 0.75, np.random.default_rng(0))
        assert len(m.masked) == 294

    def test_partition(self):
        layout = tok.FrameLayout(8, (2, 4))
        m = tok.sample_mask(layout, 0.5, np.random.default_rng(1))
        joined = np.sort(np.concatenate([m.masked, m.visible(16)]))
        assert np.array_equal(joined, np.arange(16))

    def test_empirical_frequency(self):
        layout = tok.FrameLayout(64, (8, 8))
        rng = np.random.default_rng(2)
        counts = np.zeros(128)
        n = 10**4
        for _ in range(n):
            counts[tok.sample_mask(layout, 0.75, rng).masked] += 1
        freq = counts / n
        assert np.all(np.abs(freq - 0.75) < 0.02)

    def test_ratio_bounds(self):
        layout = tok.FrameLayout(8, (2, 4))
        for ratio in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                tok.sample_mask(layout, ratio, np.random.default_rng(0))


class TestEmbed:
    def setup_method(self):
        self.pair = make_pair(16, seed=5)
        self.patches, self.layout = tok.patchify(self.pair, 8)
        self.patches = self.patches.astype(np.float64)

    def test_zero_params_zero_embeddings(self):
        params = make_params(192, 32, (2, 2))
        for t in (params.proj_w, params.proj_b, params.mask_token, params.frame_ident):
            t.data = np.zeros_like(t.data)
        params.pos_table = np.zeros_like(params.pos_table)
        mask = tok.sample_mask(self.layout, 0.5, np.random.default_rng(0))
        out = tok.embed(self.patches, mask, params, self.layout, "encoder")
        assert np.allclose(out.data, 0.0)

    def test_identity_toggle(self):
        pair = FramePair(self.pair.frame_a, self.pair.frame_a, 0)
        patches, layout = tok.patchify(pair, 8)
        params = make_params(192, 32, layout.grid)
        mask = tok.MaskSet(masked=np.array([0]), ratio=0.25)
        off = tok.embed(patches, mask, params, layout, "encoder", use_identity=False)
        on = tok.embed(patches, mask, params, layout, "encoder", use_identity=True)
        half = layout.tokens_per_frame
        vis = mask.visible(layout.total_tokens)
        # token index 1 visible in both frames at the same grid cell
        i1 = np.where(vis == 1)[0][0]
        i2 = np.where(vis == 1 + half)[0][0]
        assert np.allclose(off.data[i1], off.data[i2])
        assert not np.allclose(on.data[i1], on.data[i2])

    def test_encoder_row_count(self):
        params = make_params(192, 32, self.layout.grid)
        mask = tok.sample_mask(self.layout, 0.75, np.random.default_rng(0))
        out = tok.embed(self.patches, mask, params, self.layout, "encoder")
        n = self.layout.total_tokens
        assert out.shape[0] == n - int(np.floor(0.75 * n))

    def test_decoder_uses_mask_token(self):
        params = make_params(192, 32, self.layout.grid)
        params.pos_table = np.zeros_like(params.pos_table)
        mask = tok.sample_mask(self.layout, 0.5, np.random.default_rng(3))
        out = tok.embed(self.patches, mask, params, self.layout, "decoder",
                        use_identity=False)
        assert out.shape[0] == self.layout.total_tokens
        for i in mask.masked:
            assert np.allclose(out.data[i], params.mask_token.data)

    def test_positional_shared_between_frames(self):
        table = tok.sincos_pos_table((4, 4), 32)
        layout = tok.FrameLayout(16, (4, 4))
        full = np.concatenate([table, table], axis=0)
        for i in range(16):
            assert np.allclose(full[i], full[i + layout.tokens_per_frame])

    @given(st.integers(0, 10**6))
    @settings(max_examples=10, deadline=None)
    def test_permutation_consistency(self, seed):
        params = make_params(192, 32, self.layout.grid)
        mask = tok.sample_mask(self.layout, 0.75, np.random.default_rng(seed))
        out = tok.embed(self.patches, mask, params, self.layout, "encoder")
        # embedding row k corresponds to the k-th visible token, so permuting
        # the visible list permutes rows identically
        vis = mask.visible(self.layout.total_tokens)
        perm = np.random.default_rng(seed).permutation(len(vis))
        rows = {v: out.data[k] for k, v in enumerate(vis)}
        for k, v in enumerate(vis[perm]):
            assert np.array_equal(rows[v], out.data[perm[k]])


class TestNormalizeTargets:
    def test_hand_case(self):
        patches = np.array([[0.0, 1.0, 0.0, 1.0], [9.0, 9.0, 9.0, 9.0]])
        mask = tok.MaskSet(masked=np.array([0]), ratio=0.5)
        out = tok.normalize_targets(patches, mask)
        assert np.allclose(out, [[-1, 1, -1, 1]], atol=1e-5)

    def test_constant_patch(self):
        patches = np.full((2, 8), 0.7)
        mask = tok.MaskSet(masked=np.array([1]), ratio=0.5)
        out = tok.normalize_targets(patches, mask)
        assert np.max(np.abs(out)) < 1e-6

    def test_zero_mean(self):
        patches = np.random.default_rng(0).random((10, 48))
        mask = tok.MaskSet(masked=np.arange(7), ratio=0.7)
        out = tok.normalize_targets(patches, mask)
        assert np.max(np.abs(out.mean(axis=1))) < 1e-6
