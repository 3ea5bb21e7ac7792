"""Metric formulas against naive references, plus end-to-end evaluation."""

import json
import math

import numpy as np
import pytest

from compsearch.composition import read_manifest, relevance_matrix
from compsearch.gallery import GalleryIndex, build_raw_index
from compsearch.metrics import (
    MetricError, average_precision, cndcg, evaluate, mrel, oracle_metrics,
    write_report,
)


# independent references: direct formulas, no shared code with the module
def naive_ap(rels, k, total_relevant, thr=0.30):
    denom = min(total_relevant, k)
    if denom == 0:
        return 0.0
    score, hits = 0.0, 0
    for r, rel in enumerate(rels[:k], start=1):
        if rel >= thr:
            hits += 1
            score += hits / r
    return score / denom


def naive_cndcg(rels, ideal, k):
    k = min(k, len(rels), len(ideal))
    dcg = sum(2 ** r / math.log2(i + 2) for i, r in enumerate(rels[:k]))
    z = sum(2 ** r / math.log2(i + 2) for i, r in enumerate(ideal[:k]))
    return dcg / z


class TestAveragePrecision:
    def test_worked_example(self):
        assert average_precision([1, 0, 1], 3, 2) == pytest.approx((1 + 2 / 3) / 2)

    def test_perfect_prefix(self):
        assert average_precision([0.9, 0.8, 0.7, 0.1], 3, 5) == 1.0

    def test_zero_relevant_returns_zero(self):
        assert average_precision([0.1, 0.2], 2, 0) == 0.0

    def test_threshold_is_inclusive(self):
        assert average_precision([0.30], 1, 1) == 1.0
        assert average_precision([0.2999], 1, 1) == 0.0

    def test_denominator_capped_at_k(self):
        # 1 relevant retrieved at rank 1, 100 relevant in gallery, k=1
        assert average_precision([1.0], 1, 100) == 1.0

    def test_validation(self):
        with pytest.raises(MetricError):
            average_precision([], 1, 1)
        with pytest.raises(MetricError):
            average_precision([1.5], 1, 1)
        with pytest.raises(MetricError):
            average_precision([0.5], 0, 1)


class TestCndcg:
    def test_worked_value(self):
        got = cndcg([0.5, 1.0], [1.0, 0.5], 2)
        want = (2 ** 0.5 + 2 / math.log2(3)) / (2 + 2 ** 0.5 / math.log2(3))
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.9253, abs=1e-4)

    def test_ideal_ordering_gives_one(self):
        row = [0.9, 0.7, 0.3, 0.0]
        assert cndcg(row, row, 4) == 1.0

    def test_k1_top_item_maximal(self):
        assert cndcg([0.8, 0.1], [0.8, 0.5], 1) == 1.0

    def test_k_truncates_to_gallery(self):
        assert cndcg([0.5, 0.4], [0.5, 0.4], 100) == 1.0

    def test_zero_relevance_contributes_one(self):
        # gain kept as 2^r verbatim, so r=0 adds 2^0 = 1 to the DCG
        got = cndcg([0.0], [1.0], 1)
        assert got == pytest.approx(1 / 2)

    def test_unsorted_ideal_rejected(self):
        with pytest.raises(MetricError, match="descending"):
            cndcg([0.5], [0.1, 0.9], 1)


class TestMrel:
    def test_worked_values(self):
        assert mrel([1.0, 0.5], 2) == 0.75
        assert mrel([1.0, 1.0, 1.0], 3) == 1.0
        assert mrel([0.3, 0.9], 1) == 0.3

    def test_k_truncates(self):
        assert mrel([0.5, 0.7], 10) == pytest.approx(0.6)

    def test_permutation_invariant_within_topk(self):
        rng = np.random.default_rng(0)
        row = rng.uniform(size=8)
        perm = row.copy()
        rng.shuffle(perm[:5])
        assert mrel(row, 5) == pytest.approx(mrel(perm, 5), abs=1e-12)


class TestOracle:
    def test_cndcg_is_exactly_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            row = rng.uniform(size=30)
            out = oracle_metrics(row)
            assert all(out[f"cNDCG@{k}"] == 1.0 for k in (1, 50, 100))

    def test_mrel_values(self):
        out = oracle_metrics([0.9, 0.1, 0, 0, 0, 0])
        assert out["mREL@1"] == 0.9
        assert out["mREL@5"] == pytest.approx(0.2)

    def test_mrel_monotone_nonincreasing_in_k(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            row = rng.uniform(size=40)
            out = oracle_metrics(row, mrel_ks=(1, 5, 20))
            assert out["mREL@1"] >= out["mREL@5"] >= out["mREL@20"]


class TestAgainstNaiveReferences:
    def test_hundred_random_rows(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(3, 51))
            row = rng.uniform(size=n)
            ideal = np.sort(row)[::-1]
            ranked = row[rng.permutation(n)]
            total = int((row >= 0.30).sum())
            for k in (1, 3, 10, 50):
                assert average_precision(ranked, k, total) == pytest.approx(
                    naive_ap(list(ranked), k, total), abs=1e-9)
                assert cndcg(ranked, ideal, k) == pytest.approx(
                    naive_cndcg(list(ranked), list(ideal), k), abs=1e-9)
                assert mrel(ranked, k) == pytest.approx(
                    float(np.mean(ranked[:min(k, n)])), abs=1e-9)


class TestEvaluate:
    def test_self_retrieval_raw_mode(self, workspace):
        # gallery as its own query set through raw features: every query's
        # best match is itself (relevance 1), so mREL@1 == 1 exactly
        index = build_raw_index(workspace["gallery_manifest"])
        report = evaluate(index, index.scenes, mode="raw",
                          query_features=index.matrix)
        assert report["means"]["mREL@1"] == 1.0
        assert report["means"]["mAP@1"] == 1.0
        assert report["config"]["nQueries"] == index.size

    def test_means_match_per_query_dump(self, workspace):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        report = evaluate(workspace["index"], scenes,
                          checkpoint=workspace["checkpoint"], mode="cal")
        per = report["perQuery"]
        included = [e for e in per if e["totalRelevant"] > 0]
        for key, mean in report["means"].items():
            if key.startswith("oracle_"):
                vals = [e["oracle"][key[len("oracle_"):]] for e in per]
            elif key.startswith("mAP"):
                vals = [e[key] for e in included]
            else:
                vals = [e[key] for e in per]
            assert mean == pytest.approx(float(np.mean(vals)), abs=1e-12)

    def test_oracle_dominates(self, workspace):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        report = evaluate(workspace["index"], scenes,
                          checkpoint=workspace["checkpoint"], mode="cal")
        means = report["means"]
        for k in (1, 5, 20):
            assert means[f"oracle_mREL@{k}"] >= means[f"mREL@{k}"] - 1e-12
        for k in (1, 50, 100):
            assert means[f"oracle_cNDCG@{k}"] >= means[f"cNDCG@{k}"] - 1e-12

    def test_textual_mode_runs(self, workspace):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        report = evaluate(workspace["index"], scenes, mode="textual")
        assert 0.0 <= report["means"]["mREL@1"] <= 1.0
        assert report["config"]["mode"] == "textual"

    def test_all_metrics_in_unit_interval(self, workspace):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        report = evaluate(workspace["index"], scenes,
                          checkpoint=workspace["checkpoint"], mode="cal")
        for key, value in report["means"].items():
            assert 0.0 <= value <= 1.0, key

    def test_zero_relevant_query_excluded(self):
        from compsearch.composition import Box, SceneAnnotation
        scenes = [SceneAnnotation(f"g{i}", (Box(0, 0.1, 0.1, 0.3, 0.3),))
                  for i in range(3)]
        index = GalleryIndex(
            ids=[s.id for s in scenes],
            matrix=np.eye(3, 4, dtype=np.float32),
            fingerprint={}, category_sets=[frozenset({0})] * 3,
            scenes=scenes)
        # query category 7 never appears: relevance row is all zero
        ghost = SceneAnnotation("ghost", (Box(7, 0.4, 0.4, 0.2, 0.2),))
        report = evaluate(index, [ghost], mode="raw",
                          query_features=np.zeros((1, 4), dtype=np.float32))
        assert report["excludedFromMap"] == ["ghost"]
        assert report["means"]["mAP@1"] == 0.0
        assert report["perQuery"][0]["totalRelevant"] == 0

    def test_report_files(self, workspace, tmp_path):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        report = evaluate(workspace["index"], scenes[:4],
                          checkpoint=workspace["checkpoint"], mode="cal")
        write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
        assert json.loads((tmp_path / "r.json").read_text()) == report
        rows = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert rows[0] == "query,metric,k,value"
        assert len(rows) == 1 + 4 * 9      # 3 metrics x 3 k values per query

    def test_validation(self, workspace):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        index = workspace["index"]
        with pytest.raises(MetricError, match="empty"):
            evaluate(index, [], checkpoint=workspace["checkpoint"])
        with pytest.raises(MetricError, match="needs a checkpoint"):
            evaluate(index, scenes, mode="cal")
        with pytest.raises(MetricError, match="needs query_features"):
            evaluate(index, scenes, mode="raw")
        with pytest.raises(MetricError, match="unknown mode"):
            evaluate(index, scenes, mode="psychic")
        bare = GalleryIndex(ids=["a"], matrix=np.zeros((1, 4), np.float32),
                            fingerprint={})
        with pytest.raises(MetricError, match="no annotations"):
            evaluate(bare, scenes, mode="textual")
