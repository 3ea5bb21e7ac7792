"""Gallery embedding index, exact top-k search, and retrieval baselines.

The index is a flat matrix of flattened embeddings scanned exhaustively.
Scores are computed per row as (row * q).sum(), so the values are identical
no matter how the scan is chunked; candidate merging then only has to sort
(-score, id) pairs, which makes the whole path deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cten
from .autodiff import Tensor
from .composition import (
    SceneAnnotation, rasterize, read_manifest, scene_from_record,
    scene_to_record,
)
from .model import (
    ModelConfig, encode_query, flatten_embedding, head_forward,
    load_checkpoint,
)

INDEX_MAGIC = b"CIDX"


class GalleryError(Exception):
    pass


@dataclass(frozen=True)
class RankedItem:
    image_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedResult:
    items: tuple[RankedItem, ...]
    k_requested: int
    truncated: bool = False      # set when k exceeded the gallery size

    def ids(self) -> list[str]:
        return [it.image_id for it in self.items]

    def scores(self) -> list[float]:
        return [it.score for it in self.items]


@dataclass
class GalleryIndex:
    ids: list[str]
    matrix: np.ndarray                      # [N, L] float32
    fingerprint: dict
    category_sets: list[frozenset[int]] = field(default_factory=list)
    scenes: list[SceneAnnotation] | None = None

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise GalleryError(
                f"matrix rows {self.matrix.shape} != id count {len(self.ids)}")

    @property
    def size(self) -> int:
        return len(self.ids)


def checkpoint_fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_features(manifest: str | Path, on_missing: str = "abort"):
    scenes, feats, header = read_manifest(manifest)
    if not scenes:
        raise GalleryError(f"manifest {manifest} is empty")
    base = Path(manifest).parent
    kept_scenes, arrays = [], []
    for scene, rel in zip(scenes, feats):
        path = base / rel if rel else None
        if path is None or not path.exists():
            if on_missing == "skip":
                warnings.warn(f"missing feature for {scene.id}, skipped")
                continue
            raise GalleryError(f"missing feature file for {scene.id}: {path}")
        kept_scenes.append(scene)
        arrays.append(cten.load_tensor(path))
    return kept_scenes, np.stack(arrays), header


def build_index(manifest: str | Path, checkpoint: str | Path,
                mode: str = "eval", on_missing: str = "abort",
                batch: int = 64) -> GalleryIndex:
    """Embed every gallery item once with the trained head."""
    head, _, config = load_checkpoint(checkpoint)
    scenes, features, _ = _load_features(manifest, on_missing)
    if features.shape[1:] != (*config.feat_hw, config.din):
        raise GalleryError(
            f"features {features.shape[1:]} != expected {(*config.feat_hw, config.din)}")
    rows = []
    for start in range(0, len(scenes), batch):
        x = Tensor(features[start:start + batch].astype(np.float32))
        emb = flatten_embedding(head_forward(x, head, mode))
        rows.append(emb.data)
    return GalleryIndex(
        ids=[s.id for s in scenes],
        matrix=np.concatenate(rows).astype(np.float32),
        fingerprint={"checkpoint": checkpoint_fingerprint(checkpoint),
                     "dout": config.dout, "c": config.c, "kind": "embedding"},
        category_sets=[frozenset(s.categories()) for s in scenes],
        scenes=scenes,
    )


def build_raw_index(manifest: str | Path, on_missing: str = "abort") -> GalleryIndex:
    """Baseline index over un-embedded flattened backbone features."""
    scenes, features, header = _load_features(manifest, on_missing)
    return GalleryIndex(
        ids=[s.id for s in scenes],
        matrix=features.reshape(len(scenes), -1).astype(np.float32),
        fingerprint={"kind": "rawFeature", "din": int(features.shape[-1])},
        category_sets=[frozenset(s.categories()) for s in scenes],
        scenes=scenes,
    )


def _rank(ids: np.ndarray, scores: np.ndarray, k: int,
          k_requested: int, truncated: bool) -> RankedResult:
    # lexsort: last key is primary -> (-score, then id ascending)
    order = np.lexsort((ids, -scores))[:k]
    items = tuple(RankedItem(str(ids[i]), float(scores[i]), r + 1)
                  for r, i in enumerate(order))
    return RankedResult(items, k_requested, truncated)


def search(index: GalleryIndex, query_embedding: np.ndarray, k: int,
           chunk_size: int = 1024) -> RankedResult:
    """Exact top-k by dot product over the whole gallery."""
    q = np.asarray(query_embedding, dtype=np.float32).ravel()
    if q.size != index.matrix.shape[1]:
        raise GalleryError(
            f"query length {q.size} != index dim {index.matrix.shape[1]}")
    if k < 1:
        raise GalleryError("k must be >= 1")
    truncated = k > index.size
    if truncated:
        warnings.warn(f"k={k} exceeds gallery size {index.size}")
    k_eff = min(k, index.size)

    ids = np.asarray(index.ids)
    cand_ids, cand_scores = [], []
    for start in range(0, index.size, chunk_size):
        block = index.matrix[start:start + chunk_size]
        scores = (block * q).sum(axis=1, dtype=np.float64)
        # per-chunk selection must honor the (-score, id) order too, or a
        # tie straddling the cut would surface the wrong candidate
        keep = np.lexsort((ids[start:start + chunk_size], -scores))[:k_eff]
        cand_ids.append(ids[start:start + chunk_size][keep])
        cand_scores.append(scores[keep])
    return _rank(np.concatenate(cand_ids), np.concatenate(cand_scores),
                 k_eff, k, truncated)


def search_canvas(index: GalleryIndex, annotation: SceneAnnotation, k: int,
                  checkpoint: str | Path) -> RankedResult:
    """End-to-end user path: raster the canvas, encode it, scan the index."""
    fp = checkpoint_fingerprint(checkpoint)
    if index.fingerprint.get("checkpoint") not in (None, fp):
        raise GalleryError("index was built with a different checkpoint")
    _, qenc, config = load_checkpoint(checkpoint)
    cmap = rasterize(annotation, config.c, config.grid)
    emb = flatten_embedding(encode_query(cmap, qenc, feat_hw=config.feat_hw))
    return search(index, emb.data[0], k)


def textual_search(index: GalleryIndex, category_set, k: int) -> RankedResult:
    """Position-blind baseline: Jaccard similarity of category sets."""
    cats = frozenset(int(c) for c in category_set)
    if not cats:
        raise GalleryError("category set is empty")
    if not index.category_sets:
        raise GalleryError("index was built without annotations")
    if k < 1:
        raise GalleryError("k must be >= 1")
    truncated = k > index.size
    if truncated:
        warnings.warn(f"k={k} exceeds gallery size {index.size}")
    scores = np.array([len(cats & s) / len(cats | s) for s in index.category_sets],
                      dtype=np.float64)
    return _rank(np.asarray(index.ids), scores, min(k, index.size), k, truncated)


def raw_feature_search(index_or_manifest, query_feature: np.ndarray,
                       k: int) -> RankedResult:
    """Image-as-query baseline over raw features; accepts a prebuilt index."""
    if isinstance(index_or_manifest, GalleryIndex):
        index = index_or_manifest
    else:
        index = build_raw_index(index_or_manifest)
    q = np.asarray(query_feature, dtype=np.float32).ravel()
    if q.size != index.matrix.shape[1]:
        raise GalleryError(
            f"query feature length {q.size} != index dim {index.matrix.shape[1]}")
    return search(index, q, k)


def save_index(index: GalleryIndex, path: str | Path) -> None:
    """Header JSON (ids, fingerprint, annotations) then the CTEN matrix."""
    header = {
        "version": 1,
        "n": index.size,
        "dim": int(index.matrix.shape[1]),
        "ids": index.ids,
        "fingerprint": index.fingerprint,
        "categorySets": [sorted(s) for s in index.category_sets],
        "scenes": ([scene_to_record(s) for s in index.scenes]
                   if index.scenes is not None else None),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        cten.write_tensor(fh, index.matrix)


def load_index(path: str | Path) -> GalleryIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise GalleryError(f"{path} is not an index file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        matrix = cten.read_tensor(fh)
    if header.get("version") != 1:
        raise GalleryError(f"unsupported index version {header.get('version')}")
    scenes = (None if header["scenes"] is None
              else [scene_from_record(r) for r in header["scenes"]])
    return GalleryIndex(
        ids=list(header["ids"]), matrix=matrix,
        fingerprint=header["fingerprint"],
        category_sets=[frozenset(s) for s in header["categorySets"]],
        scenes=scenes,
    )
