"""Seeded synthetic scenes and correlated stand-in backbone features.

Scenes come in clusters: a base arrangement plus translated or
category-swapped variants, so pairwise map overlap spans the whole (0,1)
range instead of collapsing to {0,1}. Features are the scene's own pooled
occupancy grid pushed through a fixed random per-category projection plus
seeded noise: informative enough to learn from, noisy enough that learning
is not a no-op.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import cten
from .autodiff import adaptive_avg_pool_array
from .composition import (
    Box, QueryTransform, SceneAnnotation, TransformError, apply_transform,
    rasterize, ti_matrix, write_manifest,
)


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 100
    c: int = 8
    din: int = 64
    grid: int = 32
    max_objects: int = 6
    noise_std: float = 0.1
    seed: int = 0
    cluster_size: int = 8
    translate_max: float = 0.3

    def __post_init__(self):
        if self.n_scenes < 2:
            raise ValueError("n_scenes must be >= 2")
        if not 1 <= self.max_objects <= 6:
            raise ValueError("max_objects must be in 1..6")
        if self.cluster_size < 2:
            raise ValueError("cluster_size must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class CategoryProjector:
    """Fixed random occupancy-to-feature projection, one row per category."""

    matrix: np.ndarray      # [C, Din]

    @classmethod
    def create(cls, seed: int, c: int, din: int) -> "CategoryProjector":
        rng = np.random.default_rng([seed, c, din])
        return cls((rng.standard_normal((c, din)) / math.sqrt(c)).astype(np.float32))


def _random_box(rng, c: int) -> Box:
    w = float(rng.uniform(0.12, 0.5))
    h = float(rng.uniform(0.12, 0.5))
    return Box(int(rng.integers(0, c)),
               float(rng.uniform(0, 1 - w)), float(rng.uniform(0, 1 - h)), w, h)


def _base_scene(rng, cfg: SynthConfig, sid: str) -> SceneAnnotation:
    n = int(rng.integers(1, cfg.max_objects + 1))
    return SceneAnnotation(sid, tuple(_random_box(rng, cfg.c) for _ in range(n)))


def _variant(rng, cfg: SynthConfig, base: SceneAnnotation, sid: str) -> SceneAnnotation:
    for _ in range(100):
        try:
            if rng.random() < 0.75:
                # one shared magnitude per variant, random direction per
                # object: small magnitudes stay near the base, large ones
                # drift away, so cluster overlap covers the whole range
                mag = float(rng.uniform(0.01, cfg.translate_max))
                angles = rng.uniform(0, 2 * math.pi, size=len(base.objects))
                deltas = tuple((mag * math.cos(a), mag * math.sin(a))
                               for a in angles)
                moved = apply_transform(base, QueryTransform("translate", deltas))
            else:
                cats = sorted(base.categories())
                victim = cats[int(rng.integers(0, len(cats)))]
                mapping = {victim: int(rng.integers(0, cfg.c))}
                moved = apply_transform(base, QueryTransform("categorySwap",
                                                             mapping=mapping))
            return SceneAnnotation(sid, moved.objects)
        except TransformError:
            continue
    return SceneAnnotation(sid, base.objects)      # keep the cluster populated


def generate_scenes(cfg: SynthConfig) -> list[SceneAnnotation]:
    """Clustered scenes, fully determined by cfg.seed."""
    root = np.random.SeedSequence(cfg.seed)
    n_clusters = math.ceil(cfg.n_scenes / cfg.cluster_size)
    scenes: list[SceneAnnotation] = []
    for ck, child in enumerate(root.spawn(n_clusters)):
        rng = np.random.default_rng(child)
        base = _base_scene(rng, cfg, f"s{len(scenes):05d}")
        scenes.append(base)
        while len(scenes) < cfg.n_scenes and len(scenes) % cfg.cluster_size:
            scenes.append(_variant(rng, cfg, base, f"s{len(scenes):05d}"))
        if len(scenes) >= cfg.n_scenes:
            break
    return scenes


def synth_features(scene: SceneAnnotation, projector: CategoryProjector,
                   noise_std: float, seed: int, grid: int = 32,
                   feat_hw: tuple[int, int] = (7, 7)) -> np.ndarray:
    """[7,7,Din]: pooled occupancy through the projector, plus seeded noise."""
    c = projector.matrix.shape[0]
    pooled = adaptive_avg_pool_array(rasterize(scene, c, grid), feat_hw)
    feats = pooled @ projector.matrix
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        feats = feats + noise_std * rng.standard_normal(feats.shape)
    return feats.astype(np.float32)


def split(scenes: list[SceneAnnotation], fractions: tuple[float, float, float],
          seed: int) -> dict[str, list[SceneAnnotation]]:
    """Disjoint {train, gallery, query} by seeded shuffle; sizes floored."""
    if sum(fractions) > 1 + 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, must be <= 1")
    n = len(scenes)
    sizes = [int(f * n) for f in fractions]
    if any(s == 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} include an empty split")
    order = np.random.default_rng(seed).permutation(n)
    out, pos = {}, 0
    for name, size in zip(("train", "gallery", "query"), sizes):
        out[name] = [scenes[i] for i in order[pos:pos + size]]
        pos += size
    return out


def calibration_report(scenes: list[SceneAnnotation], features: np.ndarray,
                       cfg: SynthConfig, n_pairs: int = 2000) -> dict:
    """Corpus statistics: overlap/feature-dot Spearman, interior-pair mass."""
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(scenes)
    ii = rng.integers(0, n, size=n_pairs)
    jj = rng.integers(0, n, size=n_pairs)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    maps = [rasterize(s, cfg.c, cfg.grid) for s in scenes]
    flat = features.reshape(n, -1).astype(np.float64)
    tis = np.array([float(((maps[a] != 0) & (maps[b] != 0)).sum()
                          / max(((maps[a] != 0) | (maps[b] != 0)).sum(), 1))
                    for a, b in zip(ii, jj)])
    dots = np.einsum("ij,ij->i", flat[ii], flat[jj])
    rho = float(spearmanr(tis, dots).statistic)

    # intra-cluster interior mass: consecutive blocks of cluster_size
    interior = total = 0
    for start in range(0, n, cfg.cluster_size):
        block = range(start, min(start + cfg.cluster_size, n))
        sub = ti_matrix([maps[i] for i in block])
        off = sub[~np.eye(len(sub), dtype=bool)]
        interior += int(((off >= 0.2) & (off <= 0.8)).sum())
        total += off.size
    return {
        "spearmanTiFeatureDot": rho,
        "interiorPairFraction": interior / max(total, 1),
        "sampledPairs": int(len(ii)),
    }


def gen_dataset(cfg: SynthConfig, out_dir: str | Path,
                fractions: tuple[float, float, float] = (0.5, 0.3, 0.2)) -> dict:
    """Write manifests, per-scene CTEN features, and a generation report."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    scenes = generate_scenes(cfg)
    projector = CategoryProjector.create(cfg.seed, cfg.c, cfg.din)
    feat_seeds = np.random.SeedSequence(cfg.seed).generate_state(len(scenes))
    features = np.stack([
        synth_features(s, projector, cfg.noise_std, int(feat_seeds[i]), cfg.grid)
        for i, s in enumerate(scenes)])

    order = {s.id: i for i, s in enumerate(scenes)}
    header_base = {
        "C": cfg.c, "din": cfg.din, "grid": cfg.grid,
        "noiseStd": cfg.noise_std, "seed": cfg.seed,
        "objectRule": "largest-area-first",
    }
    for i, scene in enumerate(scenes):
        cten.save_tensor(feat_dir / f"{scene.id}.cten", features[i])
    parts = split(scenes, fractions, cfg.seed)
    for name, subset in parts.items():
        write_manifest(out_dir / f"{name}.jsonl", subset,
                       [f"features/{s.id}.cten" for s in subset],
                       header={**header_base, "split": name})
    categories = [f"category{i}" for i in range(cfg.c)]
    (out_dir / "categories.json").write_text(json.dumps(categories) + "\n")

    report = {
        "config": asdict(cfg),
        "splitSizes": {k: len(v) for k, v in parts.items()},
        "calibration": calibration_report(scenes, features, cfg),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
