"""Normalized similarity maps, soft masks, weighted features, background probe."""

import numpy as np
import pytest

from mixloc import (
    AudioEmbedding,
    DegenerateNormalizationError,
    FeatureGrid,
    SarlConfig,
    SoftMask,
    negative_vector,
    self_similarity_maps,
    sim_map,
    soft_mask,
    soft_masks,
    sound_assoc_features,
)
from mixloc.similarity import background_cells

from reference import ref_sim_plane


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def grid_with_cosines(raw_cosines, audio_vec):
    """Build 2-channel cells whose cosine against ``audio_vec`` is as given."""
    a = unit(audio_vec)
    perp = np.array([-a[1], a[0]])
    cells = [c * a + np.sqrt(1.0 - c * c) * perp for c in raw_cosines]
    return np.array(cells)


class TestSimMap:
    def test_single_cell_normalizes_to_one(self):
        visual = FeatureGrid(np.array([[[[2.0, 1.0]]]]))
        audio = AudioEmbedding(np.array([[1.0, 1.0]]))
        plane = sim_map(visual, audio, 0, 0)
        assert plane[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_two_cell_arithmetic(self):
        # raw cosines 0.6 and 0.2 normalize to 0.75 and 0.25
        audio_vec = np.array([1.0, 0.0])
        cells = grid_with_cosines([0.6, 0.2], audio_vec)
        visual = FeatureGrid(cells.reshape(1, 1, 2, 2))
        audio = AudioEmbedding(audio_vec[None])
        plane = sim_map(visual, audio, 0, 0)
        np.testing.assert_allclose(plane[0], [0.75, 0.25], atol=1e-12)

    def test_cross_pair_matches_literal_formula(self):
        rng = np.random.default_rng(42)
        data = rng.standard_normal((2, 3, 4, 5))
        audio = rng.standard_normal((2, 5))
        visual = FeatureGrid(data)
        emb = AudioEmbedding(audio)
        for n in range(2):
            for m in range(2):
                got = sim_map(visual, emb, n, m)
                np.testing.assert_allclose(got, ref_sim_plane(data, audio, n, m), atol=1e-12)

    def test_degenerate_denominator_raises(self):
        # two cells with opposite alignment: cosines +1 and -1 sum to 0
        audio_vec = np.array([1.0, 0.0])
        cells = np.array([audio_vec, -audio_vec])
        visual = FeatureGrid(cells.reshape(1, 1, 2, 2))
        audio = AudioEmbedding(audio_vec[None])
        with pytest.raises(DegenerateNormalizationError):
            sim_map(visual, audio, 0, 0)

    def test_self_planes_sum_to_one(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            data = rng.standard_normal((3, 4, 4, 6)) + 0.5
            maps = self_similarity_maps(FeatureGrid(data), AudioEmbedding(rng.standard_normal((3, 6)) + 0.5))
            sums = maps.data.reshape(3, -1).sum(axis=1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_argmax_invariant_under_feature_rescale(self):
        rng = np.random.default_rng(21)
        data = rng.standard_normal((1, 5, 5, 4)) + 0.3
        audio = AudioEmbedding(rng.standard_normal((1, 4)))
        base = sim_map(FeatureGrid(data), audio, 0, 0)
        scaled = sim_map(FeatureGrid(3.7 * data), audio, 0, 0)
        assert np.argmax(base) == np.argmax(scaled)
        np.testing.assert_allclose(base, scaled, atol=1e-12)


class TestSoftMask:
    def test_midpoint_at_alpha(self):
        cfg = SarlConfig()
        assert soft_mask(np.array([[0.65]]), cfg)[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_one_omega_above_alpha(self):
        cfg = SarlConfig(alpha=0.4, omega=0.05)
        value = soft_mask(np.array([[0.45]]), cfg)[0, 0]
        assert value == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-12)

    def test_reference_hyperparameters(self):
        # alpha 0.65, omega 0.03 map s = 0.68 to sigmoid(1)
        cfg = SarlConfig()
        assert cfg.alpha == 0.65 and cfg.omega == 0.03
        value = soft_mask(np.array([[0.68]]), cfg)[0, 0]
        assert value == pytest.approx(0.731059, abs=1e-6)

    def test_strictly_monotone_and_in_open_interval(self):
        cfg = SarlConfig(alpha=0.2, omega=0.1)
        s = np.linspace(-3.0, 3.0, 501)[None]
        m = soft_mask(s, cfg)[0]
        assert np.all(np.diff(m) > 0)
        assert np.all((m > 0) & (m < 1))

    def test_soft_masks_wrapper_validates(self):
        with pytest.raises(ValueError):
            SoftMask(np.array([[[1.5]]]))
        rng = np.random.default_rng(2)
        maps = self_similarity_maps(
            FeatureGrid(rng.standard_normal((2, 3, 3, 4)) + 0.4),
            AudioEmbedding(rng.standard_normal((2, 4)) + 0.4),
        )
        masks = soft_masks(maps, SarlConfig())
        assert masks.data.shape == (2, 3, 3)


class TestSoundAssocFeatures:
    def test_zero_map_annihilates(self):
        rng = np.random.default_rng(1)
        visual = FeatureGrid(rng.standard_normal((1, 2, 2, 3)))
        from mixloc import SimilarityMap

        out = sound_assoc_features(visual, SimilarityMap(np.zeros((1, 2, 2))))
        np.testing.assert_allclose(out.data, 0.0, atol=0)

    def test_unit_map_is_identity(self):
        rng = np.random.default_rng(2)
        visual = FeatureGrid(rng.standard_normal((1, 2, 2, 3)))
        from mixloc import SimilarityMap

        out = sound_assoc_features(visual, SimilarityMap(np.ones((1, 2, 2))))
        np.testing.assert_allclose(out.data, visual.data, atol=0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        from mixloc import SimilarityMap

        data = rng.standard_normal((2, 3, 3, 4))
        smap = rng.standard_normal((2, 3, 3))
        out = sound_assoc_features(FeatureGrid(data), SimilarityMap(smap))
        naive = np.empty_like(data)
        for b in range(2):
            for i in range(3):
                for j in range(3):
                    naive[b, i, j] = smap[b, i, j] * data[b, i, j]
        np.testing.assert_allclose(out.data, naive, atol=1e-12)

    def test_norm_scales_with_map_value(self):
        rng = np.random.default_rng(4)
        from mixloc import SimilarityMap

        data = rng.standard_normal((1, 3, 3, 5))
        smap = rng.standard_normal((1, 3, 3))
        out = sound_assoc_features(FeatureGrid(data), SimilarityMap(smap))
        got = np.linalg.norm(out.data, axis=-1)
        want = np.abs(smap) * np.linalg.norm(data, axis=-1)
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestNegativeVector:
    def _maps_with_mask(self, mask_values, cfg):
        # invert the sigmoid to plant exact mask values in a similarity plane
        mask_values = np.asarray(mask_values, dtype=float)
        from mixloc import SimilarityMap

        s = cfg.alpha + cfg.omega * np.log(mask_values / (1.0 - mask_values))
        return SimilarityMap(s[None])

    def test_all_background_constant_field(self):
        cfg = SarlConfig()
        u = np.array([1.0, 2.0, 3.0])
        visual = FeatureGrid(np.tile(u, (1, 2, 2, 1)))
        maps = self._maps_with_mask(np.full((2, 2), 0.1), cfg)
        probe = negative_vector(visual, maps, cfg)
        np.testing.assert_allclose(probe.vectors[0], u, atol=1e-12)
        assert not probe.empty[0]

    def test_single_background_cell(self):
        cfg = SarlConfig()
        rng = np.random.default_rng(5)
        data = rng.standard_normal((1, 2, 2, 3))
        mask = np.array([[0.9, 0.9], [0.9, 0.2]])
        probe = negative_vector(FeatureGrid(data), self._maps_with_mask(mask, cfg), cfg)
        np.testing.assert_allclose(probe.vectors[0], data[0, 1, 1], atol=1e-12)

    def test_empty_background_flag(self):
        cfg = SarlConfig()
        rng = np.random.default_rng(6)
        data = rng.standard_normal((1, 2, 2, 3))
        probe = negative_vector(FeatureGrid(data), self._maps_with_mask(np.full((2, 2), 0.9), cfg), cfg)
        assert probe.empty[0]
        np.testing.assert_allclose(probe.vectors[0], 0.0, atol=0)

    def test_matches_masked_mean_oracle(self):
        cfg = SarlConfig(alpha=0.3, omega=0.2)
        rng = np.random.default_rng(7)
        from mixloc import SimilarityMap

        data = rng.standard_normal((2, 4, 4, 5))
        smap = rng.standard_normal((2, 4, 4))
        maps = SimilarityMap(smap)
        probe = negative_vector(FeatureGrid(data), maps, cfg)
        bg = background_cells(maps, cfg)
        for b in range(2):
            picked = [data[b, i, j] for i in range(4) for j in range(4) if bg[b, i, j]]
            if picked:
                want = np.mean(picked, axis=0)
                np.testing.assert_allclose(probe.vectors[b], want, atol=1e-12)

    def test_probe_inside_coordinatewise_hull(self):
        cfg = SarlConfig(alpha=0.0, omega=0.5)
        rng = np.random.default_rng(8)
        from mixloc import SimilarityMap

        data = rng.standard_normal((1, 3, 3, 4))
        maps = SimilarityMap(rng.standard_normal((1, 3, 3)))
        probe = negative_vector(FeatureGrid(data), maps, cfg)
        bg = background_cells(maps, cfg)
        picked = data[0][bg[0]]
        if picked.size and not probe.empty[0]:
            assert np.all(probe.vectors[0] >= picked.min(axis=0) - 1e-12)
            assert np.all(probe.vectors[0] <= picked.max(axis=0) + 1e-12)


class TestSarlConfig:
    def test_defaults_are_reference_values(self):
        cfg = SarlConfig()
        assert cfg.alpha == 0.65
        assert cfg.omega == 0.03
        assert cfg.background_cut == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            SarlConfig(omega=0.0)
        with pytest.raises(ValueError):
            SarlConfig(background_cut=1.0)
