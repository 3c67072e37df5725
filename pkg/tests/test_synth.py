"""Scene generation, persistence, and pipeline-vs-reference equivalence."""

import numpy as np
import pytest

from mixloc import (
    ConfigError,
    SynthConfig,
    cosine_sim,
    generate_batch,
    generate_scene,
    localize_batch,
    reference_identify,
)
from mixloc.synth import load_scene, rle_decode, rle_encode, save_scene, scene_seed


class TestGeneration:
    def test_noiseless_cells_equal_prototypes(self):
        cfg = SynthConfig(count_values=(1,), count_weights=(1.0,))
        features, audio, truth = generate_scene(cfg, seed=5)
        assert truth.count == 1
        inside = features.data[0][truth.masks[0]]
        np.testing.assert_array_equal(inside, np.tile(truth.prototypes[0], (inside.shape[0], 1)))
        outside = features.data[0][~truth.masks[0]]
        np.testing.assert_array_equal(outside, np.tile(truth.background, (outside.shape[0], 1)))

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(noise_sigma=0.15)
        a = generate_scene(cfg, seed=123)
        b = generate_scene(cfg, seed=123)
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)
        assert a[2].count == b[2].count
        for ma, mb in zip(a[2].masks, b[2].masks):
            assert np.array_equal(ma, mb)

    def test_different_seeds_differ(self):
        cfg = SynthConfig(noise_sigma=0.1)
        a = generate_scene(cfg, seed=1)
        b = generate_scene(cfg, seed=2)
        assert not np.array_equal(a[0].data, b[0].data)

    def test_margins_hold_between_sources(self):
        cfg = SynthConfig(count_values=(2,), count_weights=(1.0,))
        features, _, truth = generate_scene(cfg, seed=9)
        cells_a = features.data[0][truth.masks[0]]
        cells_b = features.data[0][truth.masks[1]]
        for va in cells_a:
            for vb in cells_b:
                assert abs(cosine_sim(va, vb)) <= cfg.source_cos_max + 1e-12
        for va in cells_a:
            assert cosine_sim(va, truth.background) <= cfg.background_cos_max + 1e-12

    def test_masks_disjoint_and_nonempty(self):
        cfg = SynthConfig(count_values=(3,), count_weights=(1.0,))
        for seed in range(20):
            _, _, truth = generate_scene(cfg, seed=seed)
            total = np.zeros((cfg.height, cfg.width), dtype=int)
            for mask in truth.masks:
                assert mask.sum() >= 1
                total += mask.astype(int)
            assert total.max() <= 1

    def test_audio_is_mean_of_components(self):
        cfg = SynthConfig(count_values=(2,), count_weights=(1.0,))
        _, audio, truth = generate_scene(cfg, seed=3)
        np.testing.assert_allclose(audio.data[0], truth.prototypes.mean(axis=0), atol=1e-15)

    def test_empty_scene_audio_is_background(self):
        cfg = SynthConfig(count_values=(0,), count_weights=(1.0,))
        _, audio, truth = generate_scene(cfg, seed=4)
        assert truth.count == 0
        np.testing.assert_array_equal(audio.data[0], truth.background)

    def test_infeasible_configs_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(channels=3, count_values=(3,), count_weights=(1.0,))
        with pytest.raises(ConfigError):
            SynthConfig(source_cos_max=-0.1)
        with pytest.raises(ConfigError):
            SynthConfig(rect_min=5, rect_max=4)
        with pytest.raises(ConfigError):
            SynthConfig(noise_sigma=-1.0)

    def test_batch_uses_per_scene_seeds(self):
        cfg = SynthConfig()
        scenes = generate_batch(cfg, 3, base_seed=7)
        regenerated = generate_scene(cfg, scene_seed(7, 1))
        assert np.array_equal(scenes[1][0].data, regenerated[0].data)


class TestRecovery:
    def test_noiseless_single_source(self):
        cfg = SynthConfig(count_values=(1,), count_weights=(1.0,))
        features, audio, truth = generate_scene(cfg, seed=11)
        grouping = localize_batch(features, audio).groupings[0]
        assert grouping.count == 1
        np.testing.assert_array_equal(grouping.objects[0].fused_map, truth.masks[0])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_noiseless_recovery_all_counts(self, k):
        cfg = SynthConfig(count_values=(k,), count_weights=(1.0,))
        for seed in range(10):
            features, audio, truth = generate_scene(cfg, seed=seed)
            grouping = localize_batch(features, audio).groupings[0]
            assert grouping.count == k
            predicted = sorted(o.fused_map.tobytes() for o in grouping.objects)
            wanted = sorted(m.tobytes() for m in truth.masks)
            assert predicted == wanted

    def test_empty_scene_yields_zero_objects(self):
        cfg = SynthConfig(count_values=(0,), count_weights=(1.0,))
        features, audio, _ = generate_scene(cfg, seed=2)
        grouping = localize_batch(features, audio).groupings[0]
        assert grouping.count == 0


class TestReferenceEquivalence:
    def _assert_same(self, got, want):
        assert got.count == want.count
        assert got.discarded == want.discarded
        for a, b in zip(got.objects, want.objects):
            assert a.member_records == b.member_records
            assert a.anchor_record == b.anchor_record
            np.testing.assert_array_equal(a.fused_map, b.fused_map)

    def test_reference_recovers_noiseless_truth(self):
        for k in (1, 2):
            cfg = SynthConfig(count_values=(k,), count_weights=(1.0,))
            features, audio, truth = generate_scene(cfg, seed=21)
            grouping = reference_identify(features, audio)
            assert grouping.count == k
            predicted = sorted(o.fused_map.tobytes() for o in grouping.objects)
            assert predicted == sorted(m.tobytes() for m in truth.masks)

    def test_reference_empty_scene(self):
        cfg = SynthConfig(count_values=(0,), count_weights=(1.0,))
        features, audio, _ = generate_scene(cfg, seed=22)
        assert reference_identify(features, audio).count == 0

    @pytest.mark.parametrize("sigma", [0.0, 0.1, 0.25])
    def test_pipeline_matches_reference(self, sigma):
        cfg = SynthConfig(
            height=5, width=5, channels=8, noise_sigma=sigma,
            count_values=(0, 1, 2, 3), count_weights=(1.0, 1.0, 1.0, 1.0),
        )
        for seed in range(25):
            features, audio, _ = generate_scene(cfg, seed=1000 + seed)
            got = localize_batch(features, audio).groupings[0]
            want = reference_identify(features, audio)
            self._assert_same(got, want)


class TestPersistence:
    def test_rle_round_trip(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            mask = rng.random((4, 6)) > 0.5
            assert np.array_equal(rle_decode(rle_encode(mask), 6), mask)

    def test_scene_round_trip(self, tmp_path):
        cfg = SynthConfig(noise_sigma=0.05)
        features, audio, truth = generate_scene(cfg, seed=8)
        save_scene(tmp_path / "scene", features, audio, truth)
        loaded_f, loaded_a, loaded_t = load_scene(tmp_path / "scene")
        np.testing.assert_allclose(
            loaded_f.data, features.data.astype(np.float32).astype(np.float64), atol=0
        )
        assert loaded_t.count == truth.count
        assert loaded_t.seed == truth.seed
        for ma, mb in zip(loaded_t.masks, truth.masks):
            assert np.array_equal(ma, mb)
        np.testing.assert_allclose(loaded_t.prototypes, truth.prototypes, atol=0)
