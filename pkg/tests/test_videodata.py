import numpy as np
import pytest
import torch

from framepred import videodata as vd


def small_spec(**kw):
    base = dict(family="drift", num_clips=2, num_frames=8, height=32,
                width=32, num_sprites=1, sprite_size=8, patch_size=8)
    base.update(kw)
    return vd.GeneratorSpec(**base)


class TestGeneration:
    def test_static_frames_constant(self):
        clip = vd.generate_clip(small_spec(family="static"), seed=3, index=0)
        for t in range(clip.frames.shape[0]):
            np.testing.assert_array_equal(clip.frames[t], clip.frames[0])

    def test_spec_echo_frame_count(self):
        spec = small_spec(num_frames=16)
        ds = vd.generate_synthetic_dataset(spec, seed=0)
        assert all(c.frames.shape[0] == 16 for c in ds.clips)

    def test_branch_choice_frequency(self):
        # Empirical fraction of clips choosing branch 0, binomial CI.
        spec = small_spec(family="branch", num_frames=2, height=16, width=16,
                          sprite_size=4, branch_frame=1, branch_fanout=2)
        count0 = 0
        n = 10000
        for i in range(n):
            clip = vd.generate_clip(spec, seed=11, index=i)
            count0 += clip.meta["branch_choices"][0] == 0
        assert 0.47 <= count0 / n <= 0.53

    def test_reproducible_bitwise(self):
        spec = small_spec(family="branch", branch_frame=2)
        a = vd.generate_synthetic_dataset(spec, seed=5)
        b = vd.generate_synthetic_dataset(spec, seed=5)
        for ca, cb in zip(a.clips, b.clips):
            np.testing.assert_array_equal(ca.frames, cb.frames)
            np.testing.assert_array_equal(ca.labels, cb.labels)

    def test_labels_match_and_contiguous(self):
        spec = small_spec(num_sprites=3, sprite_size=6)
        clip = vd.generate_clip(spec, seed=1, index=0)
        assert clip.labels.shape == clip.frames.shape[:1] + clip.frames.shape[2:]
        ids = np.unique(clip.labels)
        assert ids.max() <= 3 and set(ids) <= set(range(4))

    def test_indivisible_resolution_rejected(self):
        with pytest.raises(vd.ConfigurationError):
            small_spec(height=30).validate()

    def test_zero_sprites_rejected(self):
        with pytest.raises(vd.ConfigurationError):
            small_spec(num_sprites=0).validate()

    def test_branch_modes_cover_fanout(self):
        spec = small_spec(family="branch", branch_frame=2, branch_fanout=2)
        modes = vd.clip_branch_modes(spec, seed=7, index=0)
        assert len(modes) == 2
        # Modes share the pre-branch segment and diverge afterwards.
        np.testing.assert_array_equal(modes[0].frames[:2], modes[1].frames[:2])
        assert np.abs(modes[0].frames[-1] - modes[1].frames[-1]).max() > 0

    def test_branch_exhaustive_enumerates_modes(self):
        spec = small_spec(family="branch", num_clips=6, branch_frame=2,
                          branch_fanout=2, branch_exhaustive=True)
        ds = vd.generate_synthetic_dataset(spec, seed=7)
        assert len(ds.clips) == 6
        for base in range(3):
            a, b = ds.clips[2 * base], ds.clips[2 * base + 1]
            assert a.meta["index"] == b.meta["index"] == base
            assert {a.meta["branch_choices"][0],
                    b.meta["branch_choices"][0]} == {0, 1}
            # Identical pasts, diverging futures: the future is irreducibly
            # stochastic given the past even under training-set memorization.
            np.testing.assert_array_equal(a.frames[:2], b.frames[:2])
            assert np.abs(a.frames[-1] - b.frames[-1]).max() > 0

    def test_branch_exhaustive_validation(self):
        with pytest.raises(vd.ConfigurationError):
            small_spec(family="branch", num_clips=5, branch_frame=2,
                       branch_exhaustive=True).validate()
        with pytest.raises(vd.ConfigurationError):
            small_spec(family="drift", branch_exhaustive=True).validate()


class TestDiskFormat:
    def test_save_load_roundtrip(self, tmp_path):
        ds = vd.generate_synthetic_dataset(small_spec(), seed=9)
        vd.save_dataset(ds, str(tmp_path / "d"))
        loaded = vd.load_dataset(str(tmp_path / "d"))
        assert loaded.spec == ds.spec
        for ca, cb in zip(ds.clips, loaded.clips):
            np.testing.assert_array_equal(ca.frames, cb.frames)
            np.testing.assert_array_equal(ca.labels, cb.labels)
        np.testing.assert_allclose(loaded.pixel_mean, ds.pixel_mean)

    def test_byte_identical_directories(self, tmp_path):
        ds = vd.generate_synthetic_dataset(small_spec(), seed=4)
        for name in ("a", "b"):
            vd.save_dataset(ds, str(tmp_path / name))
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestPairSampling:
    def test_only_valid_pair(self):
        rng = np.random.default_rng(0)
        assert vd.sample_frame_pair(2, (1, 1), rng) == (0, 1)

    def test_gap_within_range(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            t, k = vd.sample_frame_pair(64, (4, 48), rng)
            assert 4 <= k <= 48
            assert 0 <= t and t + k <= 63

    def test_gap_frequencies_uniform(self):
        rng = np.random.default_rng(2)
        counts = {g: 0 for g in (2, 3, 4, 5)}
        n = 10000
        for _ in range(n):
            _, k = vd.sample_frame_pair(256, (2, 5), rng)
            counts[k] += 1
        for g in counts:
            assert abs(counts[g] / n - 0.25) <= 0.02

    def test_too_short_clip(self):
        with pytest.raises(vd.SamplingError):
            vd.sample_frame_pair(3, (4, 8), np.random.default_rng(0))


class TestAugmentation:
    def _frames(self, rng, shape=(3, 64, 64)):
        return rng.random(shape, dtype=np.float32)

    def test_identity_transform(self):
        rng = np.random.default_rng(0)
        cur, fut = self._frames(rng), self._frames(rng)
        params = vd.AugmentParams(crop_scale=(1.0, 1.0), hflip_prob=0.0,
                                  noise_sigma=0.0)
        pair = vd.augment_pair(cur, fut, 1, params, np.random.default_rng(1))
        np.testing.assert_array_equal(pair.current, cur)
        np.testing.assert_array_equal(pair.future_clean, fut)
        np.testing.assert_array_equal(pair.future_perturbed, fut)

    def test_determinism_from_seed(self):
        rng = np.random.default_rng(3)
        cur, fut = self._frames(rng), self._frames(rng)
        params = vd.AugmentParams()
        p1 = vd.augment_pair(cur, fut, 2, params, np.random.default_rng(7))
        p2 = vd.augment_pair(cur, fut, 2, params, np.random.default_rng(7))
        assert p1.aug_record == p2.aug_record
        np.testing.assert_array_equal(p1.current, p2.current)
        np.testing.assert_array_equal(p1.future_perturbed, p2.future_perturbed)

    def test_noise_magnitude_half_normal(self):
        # E|N(0, 0.5)| = 0.5 * sqrt(2/pi) ~= 0.399
        rng = np.random.default_rng(5)
        cur = self._frames(rng, (3, 128, 128))
        fut = self._frames(rng, (3, 128, 128))
        params = vd.AugmentParams(crop_scale=(1.0, 1.0), hflip_prob=0.0,
                                  noise_sigma=0.5)
        pair = vd.augment_pair(cur, fut, 1, params, np.random.default_rng(6))
        mean_abs = np.abs(pair.future_perturbed - pair.future_clean).mean()
        assert abs(mean_abs - 0.5 * np.sqrt(2 / np.pi)) < 0.01

    def test_same_geometry_replay(self):
        rng = np.random.default_rng(9)
        draws = np.random.default_rng(10)
        params = vd.AugmentParams()
        for _ in range(50):
            cur, fut = self._frames(rng), self._frames(rng)
            pair = vd.augment_pair(cur, fut, 1, params, draws)
            replayed = vd.replay_augment(pair.aug_record, cur, fut, 1)
            np.testing.assert_array_equal(replayed.current, pair.current)
            np.testing.assert_array_equal(replayed.future_clean, pair.future_clean)
            np.testing.assert_array_equal(replayed.future_perturbed,
                                          pair.future_perturbed)

    def test_current_never_perturbed_and_sigma_zero(self):
        rng = np.random.default_rng(11)
        cur, fut = self._frames(rng), self._frames(rng)
        params = vd.AugmentParams(noise_sigma=0.0)
        pair = vd.augment_pair(cur, fut, 1, params, np.random.default_rng(2))
        np.testing.assert_array_equal(pair.future_perturbed, pair.future_clean)
        np.testing.assert_array_equal(
            pair.current, vd.apply_geometry(pair.aug_record, cur)
        )

    def test_degenerate_crop_rejected(self):
        params = vd.AugmentParams(crop_scale=(0.001, 0.001))
        with pytest.raises(vd.AugmentationError):
            vd.draw_augment_record((64, 64), params, seed=0, min_size=8)


class TestPatchGrids:
    def test_counts_64(self):
        grid = vd.patchify(torch.rand(3, 64, 64), 8)
        assert grid.patches.shape == (64, 8 * 8 * 3)
        assert grid.grid == (8, 8)

    def test_counts_224(self):
        grid = vd.patchify(torch.rand(3, 224, 224), 16)
        assert grid.patches.shape[0] == 196

    def test_roundtrip_bitwise(self):
        x = torch.rand(3, 64, 64)
        back = vd.unpatchify(vd.patchify(x, 8))
        assert torch.equal(back, x)

    def test_indivisible_rejected(self):
        with pytest.raises(vd.ConfigurationError):
            vd.patchify(torch.rand(3, 60, 60), 8)

    def test_normalize_constant_patch(self):
        grid = vd.patchify(torch.full((3, 16, 16), 0.25), 8)
        out = vd.normalize_patches(grid)
        assert torch.all(out.patches == 0)

    def test_normalize_stats(self):
        grid = vd.patchify(torch.rand(3, 64, 64), 8)
        out = vd.normalize_patches(grid)
        means = out.patches.mean(dim=-1)
        stds = out.patches.std(dim=-1, unbiased=False)
        assert means.abs().max() < 1e-5
        assert ((stds - 1).abs() < 1e-4).all()

    def test_normalize_affine_invariance(self):
        rng = torch.Generator().manual_seed(0)
        patch = torch.rand(1, 192, generator=rng).double()
        affine = 3.0 * patch + 0.7
        g1 = vd.PatchGrid(patches=patch, grid=(1, 1), patch_size=8, channels=3)
        g2 = vd.PatchGrid(patches=affine, grid=(1, 1), patch_size=8, channels=3)
        n1 = vd.normalize_patches(g1).patches
        n2 = vd.normalize_patches(g2).patches
        assert (n1 - n2).abs().max() < 1e-5
