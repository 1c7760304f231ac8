import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairmae import corpus as cp


SPEC = cp.SceneSpec(canvas=64, patch=8, n_sprites=2, sprite=16,
                    velocities=((2, 0), (0, 8)), length=20)


class TestGenerateClip:
    def test_deterministic(self):
        a = cp.generate_clip(SPEC, 5)
        b = cp.generate_clip(SPEC, 5)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.sprite_pos, b.sprite_pos)

    def test_seed_changes_content(self):
        a = cp.generate_clip(SPEC, 5)
        b = cp.generate_clip(SPEC, 6)
        assert not np.array_equal(a.frames, b.frames)

    def test_pixels_in_unit_range(self):
        clip = cp.generate_clip(SPEC, 1)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    def test_sprite_too_large(self):
        with pytest.raises(ValueError):
            cp.SceneSpec(canvas=32, patch=8, n_sprites=1, sprite=64,
                         velocities=((0, 0),), length=4)

    def test_velocity_grid_shift(self):
        # 2 px/frame over 4 frames = 8 px = one patch column
        spec = cp.SceneSpec(canvas=64, patch=8, n_sprites=1, sprite=16,
                            velocities=((2, 0),), length=10)
        clip = cp.generate_clip(spec, 3)
        corr = clip.correspondence(0, 4)
        assert corr  # sprite fully on canvas somewhere
        for (r, c), (r2, c2) in corr.items():
            assert (r2, c2) == (r, c + 1)

    def test_zero_velocity_identity(self):
        spec = cp.SceneSpec(canvas=64, patch=8, n_sprites=1, sprite=16,
                            velocities=((0, 0),), length=10)
        clip = cp.generate_clip(spec, 3)
        corr = clip.correspondence(0, 7)
        assert corr
        assert all(src == dst for src, dst in corr.items())

    @given(st.integers(0, 1000), st.integers(0, 15), st.integers(0, 15))
    @settings(max_examples=20, deadline=None)
    def test_correspondence_round_trip(self, seed, t1, t2):
        clip = cp.generate_clip(SPEC, seed)
        fwd = clip.correspondence(t1, t2)
        back = clip.correspondence(t2, t1)
        for src, dst in fwd.items():
            assert back[dst] == src


class TestSampleFramePair:
    def test_max_gap_one(self):
        clip = cp.generate_clip(SPEC, 0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert cp.sample_frame_pair(clip, 1, rng).gap == 1

    def test_gap_coverage(self):
        spec = cp.SceneSpec(canvas=16, patch=8, n_sprites=1, sprite=8,
                            velocities=((0, 0),), length=100)
        clip = cp.generate_clip(spec, 0)
        rng = np.random.default_rng(1)
        gaps = {cp.sample_frame_pair(clip, 50, rng).gap for _ in range(10**5)}
        assert min(gaps) >= 1 and max(gaps) <= 50
        assert len(gaps) >= 45

    def test_static_mode(self):
        clip = cp.generate_clip(SPEC, 2)
        pair = cp.sample_frame_pair(clip, 50, np.random.default_rng(0), static=True)
        assert pair.gap == 0
        assert np.array_equal(pair.frame_a, pair.frame_b)

    def test_short_clip_rejected(self):
        clip = cp.VideoClip(frames=np.zeros((1, 8, 8, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            cp.sample_frame_pair(clip, 5, np.random.default_rng(0))


class TestSharedCrop:
    def test_shared_window_keeps_alignment(self):
        clip = cp.generate_clip(SPEC, 4)
        pair = cp.FramePair(clip.frames[0], clip.frames[0], 0)
        out = cp.shared_random_resized_crop(pair, 32, np.random.default_rng(0))
        assert out.frame_a.shape == (32, 32, 3)
        assert np.array_equal(out.frame_a, out.frame_b)

    def test_full_scale_is_resize_only(self):
        clip = cp.generate_clip(SPEC, 4)
        pair = cp.FramePair(clip.frames[0], clip.frames[1], 1)
        out = cp.shared_random_resized_crop(
            pair, 64, np.random.default_rng(0), scale=(1.0, 1.0)
        )
        assert np.array_equal(out.frame_a, pair.frame_a)


class TestLoadFramesDir:
    def _write_clip(self, tmp_path, name, frames):
        from PIL import Image

        d = tmp_path / name
        d.mkdir()
        for i, f in enumerate(frames):
            Image.fromarray((f * 255).astype(np.uint8)).save(d / f"f{i:03d}.png")
        return d

    def test_round_trip(self, tmp_path):
        frame = np.full((64, 64, 3), 0.5, dtype=np.float32)
        self._write_clip(tmp_path, "clipA", [frame] * 3)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("# comment\nclipA\n")
        clips = cp.load_frames_dir(str(manifest))
        assert len(clips) == 1 and len(clips[0]) == 3
        assert np.allclose(clips[0].frames[0], clips[0].frames[2])
        assert abs(clips[0].frames.mean() - 0.5) < 0.01

    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("\n# nothing\n")
        assert cp.load_frames_dir(str(manifest)) == []

    def test_inconsistent_dimensions(self, tmp_path):
        self._write_clip(
            tmp_path, "clipB",
            [np.zeros((64, 64, 3)), np.zeros((32, 32, 3))],
        )
        manifest = tmp_path / "m.txt"
        manifest.write_text("clipB\n")
        with pytest.raises(cp.IngestionError) as exc:
            cp.load_frames_dir(str(manifest))
        assert "clipB" in str(exc.value)

    def test_missing_directory_named(self, tmp_path):
        manifest = tmp_path / "m.txt"
        manifest.write_text("nope\n")
        with pytest.raises(cp.IngestionError) as exc:
            cp.load_frames_dir(str(manifest))
        assert "nope" in str(exc.value)

    def test_ppm_supported(self, tmp_path):
        from PIL import Image

        d = tmp_path / "clipC"
        d.mkdir()
        arr = (np.random.default_rng(0).random((16, 16, 3)) * 255).astype(np.uint8)
        for i in range(2):
            Image.fromarray(arr).save(d / f"f{i}.ppm")
        manifest = tmp_path / "m.txt"
        manifest.write_text("clipC\n")
        clips = cp.load_frames_dir(str(manifest))
        assert clips[0].frames.shape == (2, 16, 16, 3)
