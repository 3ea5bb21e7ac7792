"""Synthetic scene generation and stand-in features."""

import json

import numpy as np
import pytest

from compsearch import cten
from compsearch.composition import (
    Box, QueryTransform, SceneAnnotation, apply_transform, input_transformation,
    rasterize, read_manifest,
)
from compsearch.synthetic import (
    CategoryProjector, SynthConfig, calibration_report, gen_dataset,
    generate_scenes, split, synth_features,
)


def pooled_oracle(scene, c, grid, hw):
    # independent average pool: explicit cell loops over floor/ceil bounds
    m = rasterize(scene, c, grid)
    out = np.zeros((hw[0], hw[1], c))
    for i in range(hw[0]):
        for j in range(hw[1]):
            r0, r1 = (i * grid) // hw[0], -((-(i + 1) * grid) // hw[0])
            c0, c1 = (j * grid) // hw[1], -((-(j + 1) * grid) // hw[1])
            out[i, j] = m[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


class TestGenerateScenes:
    def test_deterministic(self):
        cfg = SynthConfig(n_scenes=40, seed=7)
        a, b = generate_scenes(cfg), generate_scenes(cfg)
        assert a == b

    def test_seed_changes_output(self):
        assert (generate_scenes(SynthConfig(n_scenes=40, seed=0))
                != generate_scenes(SynthConfig(n_scenes=40, seed=1)))

    def test_count_and_object_budget(self):
        cfg = SynthConfig(n_scenes=53, max_objects=4)
        scenes = generate_scenes(cfg)
        assert len(scenes) == 53
        assert all(1 <= len(s.objects) <= 4 for s in scenes)

    def test_ids_unique_and_ordered(self):
        scenes = generate_scenes(SynthConfig(n_scenes=30))
        ids = [s.id for s in scenes]
        assert ids == sorted(set(ids))

    def test_intra_cluster_overlap_is_graded(self):
        # clusters must produce a real spread: >= 10% of same-cluster pairs
        # fall strictly inside [0.2, 0.8] rather than piling up at 0 or 1
        cfg = SynthConfig(n_scenes=96, seed=3)
        scenes = generate_scenes(cfg)
        maps = [rasterize(s, cfg.c, cfg.grid) for s in scenes]
        interior = total = 0
        for start in range(0, len(scenes), cfg.cluster_size):
            for i in range(start, start + cfg.cluster_size):
                for j in range(i + 1, start + cfg.cluster_size):
                    ti = input_transformation(maps[i], maps[j])
                    interior += 0.2 <= ti <= 0.8
                    total += 1
        assert interior / total >= 0.10

    def test_cross_cluster_overlap_lower_than_intra(self):
        cfg = SynthConfig(n_scenes=64, seed=5)
        scenes = generate_scenes(cfg)
        maps = [rasterize(s, cfg.c, cfg.grid) for s in scenes]
        rng = np.random.default_rng(0)
        intra, cross = [], []
        for _ in range(300):
            i = int(rng.integers(0, 64))
            j = int(rng.integers(0, 64))
            if i == j:
                continue
            ti = input_transformation(maps[i], maps[j])
            (intra if i // 8 == j // 8 else cross).append(ti)
        assert np.mean(intra) > np.mean(cross) + 0.15

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_scenes=1)
        with pytest.raises(ValueError):
            SynthConfig(max_objects=7)
        with pytest.raises(ValueError):
            SynthConfig(noise_std=-0.1)
        with pytest.raises(ValueError):
            SynthConfig(cluster_size=1)


class TestFeatures:
    def test_projector_deterministic(self):
        a = CategoryProjector.create(0, 8, 64)
        b = CategoryProjector.create(0, 8, 64)
        assert np.array_equal(a.matrix, b.matrix)
        assert a.matrix.shape == (8, 64)
        assert not np.array_equal(a.matrix,
                                  CategoryProjector.create(1, 8, 64).matrix)

    def test_shape_and_dtype(self):
        scene = SceneAnnotation("s", (Box(2, 0.2, 0.2, 0.4, 0.4),))
        f = synth_features(scene, CategoryProjector.create(0, 8, 32), 0.1, 9)
        assert f.shape == (7, 7, 32) and f.dtype == np.float32

    def test_noiseless_matches_pooled_oracle(self):
        proj = CategoryProjector.create(3, 6, 24)
        scene = SceneAnnotation("s", (Box(1, 0.1, 0.3, 0.35, 0.3),
                                      Box(4, 0.5, 0.5, 0.3, 0.4)))
        want = pooled_oracle(scene, 6, 32, (7, 7)) @ proj.matrix
        got = synth_features(scene, proj, 0.0, 123)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_noiseless_ignores_seed(self):
        proj = CategoryProjector.create(0, 8, 16)
        scene = SceneAnnotation("s", (Box(0, 0.2, 0.2, 0.3, 0.3),))
        assert np.array_equal(synth_features(scene, proj, 0.0, 1),
                              synth_features(scene, proj, 0.0, 2))

    def test_noise_is_seeded(self):
        proj = CategoryProjector.create(0, 8, 16)
        scene = SceneAnnotation("s", (Box(0, 0.2, 0.2, 0.3, 0.3),))
        a = synth_features(scene, proj, 0.2, 5)
        b = synth_features(scene, proj, 0.2, 5)
        c = synth_features(scene, proj, 0.2, 6)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_two_cell_translate_beats_random_scene(self):
        # features must respect geometry: a scene is closer (dot product)
        # to its own 2-cell translate than to an unrelated scene >= 90%
        cfg = SynthConfig(n_scenes=60, seed=11, noise_std=0.1)
        proj = CategoryProjector.create(cfg.seed, cfg.c, cfg.din)
        rng = np.random.default_rng(0)
        scenes = generate_scenes(cfg)
        wins = trials = 0
        for k in range(len(scenes)):
            base = scenes[k]
            delta = (2 / cfg.grid, 0.0)
            try:
                moved = apply_transform(
                    base, QueryTransform("translate", (delta,) * len(base.objects)))
            except Exception:
                continue
            other = scenes[(k + 17) % len(scenes)]
            fb = synth_features(base, proj, cfg.noise_std, int(rng.integers(1 << 31))).ravel()
            fm = synth_features(moved, proj, cfg.noise_std, int(rng.integers(1 << 31))).ravel()
            fo = synth_features(other, proj, cfg.noise_std, int(rng.integers(1 << 31))).ravel()
            wins += float(fb @ fm) > float(fb @ fo)
            trials += 1
        assert trials >= 40
        assert wins / trials >= 0.90


class TestSplit:
    def test_exact_sizes_and_disjoint(self):
        scenes = generate_scenes(SynthConfig(n_scenes=100))
        parts = split(scenes, (0.5, 0.3, 0.2), seed=0)
        assert [len(parts[k]) for k in ("train", "gallery", "query")] == [50, 30, 20]
        ids = [s.id for p in parts.values() for s in p]
        assert len(ids) == len(set(ids)) == 100

    def test_deterministic_and_shuffled(self):
        scenes = generate_scenes(SynthConfig(n_scenes=100))
        a = split(scenes, (0.5, 0.3, 0.2), seed=4)
        b = split(scenes, (0.5, 0.3, 0.2), seed=4)
        assert {k: [s.id for s in v] for k, v in a.items()} == \
               {k: [s.id for s in v] for k, v in b.items()}
        assert [s.id for s in a["train"]] != [s.id for s in scenes[:50]]

    def test_rejects_bad_fractions(self):
        scenes = generate_scenes(SynthConfig(n_scenes=10))
        with pytest.raises(ValueError):
            split(scenes, (0.8, 0.3, 0.2), seed=0)
        with pytest.raises(ValueError):
            split(scenes, (0.5, 0.3, 0.01), seed=0)   # empty query split


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = SynthConfig(n_scenes=60, c=6, din=24, seed=2)
    report = gen_dataset(cfg, out)
    return cfg, out, report


class TestGenDataset:
    def test_files_exist(self, dataset):
        _, out, _ = dataset
        for name in ("train.jsonl", "gallery.jsonl", "query.jsonl",
                     "report.json", "categories.json"):
            assert (out / name).exists()

    def test_manifests_parse_with_headers(self, dataset):
        cfg, out, _ = dataset
        total = 0
        seen = set()
        for name in ("train", "gallery", "query"):
            scenes, feats, header = read_manifest(out / f"{name}.jsonl")
            assert header["C"] == cfg.c and header["split"] == name
            assert header["objectRule"] == "largest-area-first"
            assert all(f is not None for f in feats)
            seen.update(s.id for s in scenes)
            total += len(scenes)
        assert total == len(seen) == 60

    def test_features_load_and_match_recompute(self, dataset):
        cfg, out, _ = dataset
        scenes, feats, _ = read_manifest(out / "gallery.jsonl")
        arr = cten.load_tensor(out / feats[0])
        assert arr.shape == (7, 7, cfg.din)
        # noiseless recompute of the deterministic part differs only by noise
        proj = CategoryProjector.create(cfg.seed, cfg.c, cfg.din)
        base = synth_features(scenes[0], proj, 0.0, 0)
        assert np.abs(arr - base).max() < cfg.noise_std * 6

    def test_report_calibration(self, dataset):
        _, out, report = dataset
        cal = report["calibration"]
        assert cal["spearmanTiFeatureDot"] >= 0.3
        assert cal["interiorPairFraction"] >= 0.10
        assert json.loads((out / "report.json").read_text()) == report

    def test_regeneration_identical(self, dataset, tmp_path):
        cfg, out, _ = dataset
        gen_dataset(cfg, tmp_path)
        for name in ("train.jsonl", "gallery.jsonl", "query.jsonl"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
        _, feats, _ = read_manifest(out / "gallery.jsonl")
        assert (tmp_path / feats[0]).read_bytes() == (out / feats[0]).read_bytes()


def test_calibration_report_standalone():
    cfg = SynthConfig(n_scenes=48, c=6, din=24, seed=9)
    scenes = generate_scenes(cfg)
    proj = CategoryProjector.create(cfg.seed, cfg.c, cfg.din)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(scenes))
    feats = np.stack([synth_features(s, proj, cfg.noise_std, int(seeds[i]))
                      for i, s in enumerate(scenes)])
    cal = calibration_report(scenes, feats, cfg, n_pairs=800)
    assert 0.3 <= cal["spearmanTiFeatureDot"] <= 1.0
    assert cal["sampledPairs"] <= 800
