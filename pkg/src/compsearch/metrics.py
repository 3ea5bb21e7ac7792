"""Retrieval quality metrics and the evaluation report.

cNDCG keeps the gain as 2^r verbatim rather than the more common 2^r - 1,
so an item with zero relevance still contributes 1 to the DCG; the oracle
(descending ground-truth) ordering therefore normalizes to exactly 1.
AP@k divides by min(totalRelevant, k) so a perfect short ranking reaches 1.
Queries with no relevant gallery item at all are excluded from the mAP mean
and listed separately in the report.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .composition import SceneAnnotation, rasterize, relevance_matrix
from .gallery import GalleryIndex, search, textual_search
from .losses import RELEVANCE_THRESHOLD
from .model import encode_query, flatten_embedding, load_checkpoint

MAP_KS = (1, 10, 50)
CNDCG_KS = (1, 50, 100)
MREL_KS = (1, 5, 20)


class MetricError(Exception):
    pass


def _check_relevances(rel, name: str) -> np.ndarray:
    arr = np.asarray(rel, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise MetricError(f"{name} must be a non-empty 1-D sequence")
    if arr.min() < 0 or arr.max() > 1:
        raise MetricError(f"{name} values must lie in [0, 1]")
    return arr


def average_precision(ranked_relevances, k: int, total_relevant: int,
                      threshold: float = RELEVANCE_THRESHOLD) -> float:
    """AP@k over binarized relevances; 0.0 when nothing is relevant."""
    rel = _check_relevances(ranked_relevances, "ranked_relevances")
    if k < 1:
        raise MetricError("k must be >= 1")
    denom = min(total_relevant, k)
    if denom == 0:
        return 0.0
    hits = rel[:k] >= threshold
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float((cum[hits] / ranks[hits]).sum() / denom)


def cndcg(ranked_relevances, ideal_relevances, k: int) -> float:
    """Continuous NDCG with gain 2^r and log2(rank+1) discount."""
    rel = _check_relevances(ranked_relevances, "ranked_relevances")
    ideal = _check_relevances(ideal_relevances, "ideal_relevances")
    if np.any(np.diff(ideal) > 1e-12):
        raise MetricError("ideal_relevances must be sorted descending")
    if k < 1:
        raise MetricError("k must be >= 1")
    k_eff = min(k, len(rel), len(ideal))
    disc = np.log2(np.arange(2, k_eff + 2))
    dcg = (2.0 ** rel[:k_eff] / disc).sum()
    z = (2.0 ** ideal[:k_eff] / disc).sum()
    return float(dcg / z)


def mrel(ranked_relevances, k: int) -> float:
    """Mean ground-truth relevance of the top-k retrieved items."""
    rel = _check_relevances(ranked_relevances, "ranked_relevances")
    if k < 1:
        raise MetricError("k must be >= 1")
    return float(rel[:min(k, len(rel))].mean())


def oracle_metrics(relevance_row, mrel_ks=MREL_KS, cndcg_ks=CNDCG_KS) -> dict:
    """Upper bound: metrics of the descending ground-truth ordering."""
    row = _check_relevances(relevance_row, "relevance_row")
    desc = np.sort(row)[::-1]
    out = {f"mREL@{k}": mrel(desc, k) for k in mrel_ks}
    out.update({f"cNDCG@{k}": cndcg(desc, desc, k) for k in cndcg_ks})
    return out


def _encode_queries(queries, checkpoint, batch: int = 32) -> np.ndarray:
    _, qenc, config = load_checkpoint(checkpoint)
    maps = np.stack([rasterize(q, config.c, config.grid) for q in queries])
    rows = []
    for start in range(0, len(queries), batch):
        emb = encode_query(maps[start:start + batch], qenc,
                           feat_hw=config.feat_hw)
        rows.append(flatten_embedding(emb).data)
    return np.concatenate(rows)


def evaluate(index: GalleryIndex, queries: list[SceneAnnotation],
             checkpoint: str | Path | None = None, mode: str = "cal",
             query_features: np.ndarray | None = None,
             map_ks=MAP_KS, cndcg_ks=CNDCG_KS, mrel_ks=MREL_KS,
             threshold: float = RELEVANCE_THRESHOLD,
             chunk_size: int = 1024) -> dict:
    """Rank every query against the index and reduce to the metric report.

    mode "cal" encodes query canvases with the checkpoint's query encoder,
    "textual" ranks by category-set Jaccard, "raw" ranks by dot product of
    the supplied query_features against a raw-feature index.
    """
    if index.scenes is None:
        raise MetricError("index carries no annotations; rebuild with scenes")
    if not queries:
        raise MetricError("query list is empty")
    rel = relevance_matrix(queries, index.scenes)
    col = {image_id: j for j, image_id in enumerate(index.ids)}
    max_k = min(max(*map_ks, *cndcg_ks, *mrel_ks), index.size)

    if mode == "cal":
        if checkpoint is None:
            raise MetricError("mode 'cal' needs a checkpoint")
        embs = _encode_queries(queries, checkpoint)
        results = [search(index, embs[i], max_k, chunk_size)
                   for i in range(len(queries))]
    elif mode == "textual":
        results = [textual_search(index, q.categories(), max_k)
                   for q in queries]
    elif mode == "raw":
        if query_features is None:
            raise MetricError("mode 'raw' needs query_features")
        results = [search(index, query_features[i].ravel(), max_k, chunk_size)
                   for i in range(len(queries))]
    else:
        raise MetricError(f"unknown mode {mode!r}")

    per_query, excluded = [], []
    for i, (q, res) in enumerate(zip(queries, results)):
        row = rel[i]
        ranked = np.array([row[col[r]] for r in res.ids()])
        ideal = np.sort(row)[::-1]
        total_relevant = int((row >= threshold).sum())
        entry = {"id": q.id, "totalRelevant": total_relevant}
        for k in map_ks:
            entry[f"mAP@{k}"] = average_precision(ranked, k, total_relevant,
                                                  threshold)
        for k in cndcg_ks:
            entry[f"cNDCG@{k}"] = cndcg(ranked, ideal, k)
        for k in mrel_ks:
            entry[f"mREL@{k}"] = mrel(ranked, k)
        entry["oracle"] = oracle_metrics(row, mrel_ks, cndcg_ks)
        if total_relevant == 0:
            excluded.append(q.id)
        per_query.append(entry)

    means: dict[str, float] = {}
    included = [e for e in per_query if e["totalRelevant"] > 0]
    for k in map_ks:
        means[f"mAP@{k}"] = (float(np.mean([e[f"mAP@{k}"] for e in included]))
                             if included else 0.0)
    for k in cndcg_ks:
        means[f"cNDCG@{k}"] = float(np.mean([e[f"cNDCG@{k}"] for e in per_query]))
    for k in mrel_ks:
        means[f"mREL@{k}"] = float(np.mean([e[f"mREL@{k}"] for e in per_query]))
    for key in per_query[0]["oracle"]:
        means[f"oracle_{key}"] = float(np.mean([e["oracle"][key]
                                                for e in per_query]))
    return {
        "config": {
            "mode": mode, "threshold": threshold,
            "mapKs": list(map_ks), "cndcgKs": list(cndcg_ks),
            "mrelKs": list(mrel_ks),
            "nQueries": len(queries), "gallerySize": index.size,
            "fingerprint": index.fingerprint,
        },
        "means": means,
        "excludedFromMap": excluded,
        "perQuery": per_query,
    }


def write_report(report: dict, json_path: str | Path,
                 csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True)
                               + "\n")
    if csv_path is None:
        return
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "metric", "k", "value"])
        for entry in report["perQuery"]:
            for key, value in entry.items():
                if key in ("id", "oracle", "totalRelevant"):
                    continue
                metric, k = key.split("@")
                writer.writerow([entry["id"], metric, k, repr(value)])
