"""Exit codes and artifact round trips for every subcommand."""

import json

import pytest

from compsearch.cli import main
from compsearch.composition import read_manifest, scene_to_record
from compsearch.gallery import load_index


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsageErrors:
    def test_no_subcommand(self, capsys):
        code, _, err = run(capsys, )
        assert code == 1 and "usage" in err.lower()

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "gen-data", "--out", "x", "--bogus")
        assert code == 1 and "usage" in err.lower()

    def test_unknown_subcommand(self, capsys):
        code, _, _ = run(capsys, "transmogrify")
        assert code == 1

    def test_cal_search_without_checkpoint(self, capsys, workspace, tmp_path):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        canvas = tmp_path / "q.json"
        canvas.write_text(json.dumps(scene_to_record(scenes[0])))
        code, _, err = run(capsys, "search", "--index",
                           str(workspace["index_path"]),
                           "--canvas", str(canvas), "--mode", "cal")
        assert code == 1 and "checkpoint" in err

    def test_runtime_failure_is_exit_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "search", "--index",
                           str(tmp_path / "missing.cidx"),
                           "--canvas", str(tmp_path / "missing.json"),
                           "--mode", "textual")
        assert code == 2 and "error:" in err


class TestGenData:
    def test_generates_and_reports(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                           "--n-scenes", "40", "--categories", "6",
                           "--din", "12", "--seed", "1")
        assert code == 0
        summary = json.loads(out)
        assert summary["splitSizes"] == {"train": 20, "gallery": 12, "query": 8}
        assert "spearmanTiFeatureDot" in summary["calibration"]
        assert (tmp_path / "d" / "train.jsonl").exists()

    def test_custom_fractions(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                           "--n-scenes", "50", "--categories", "6",
                           "--din", "12", "--fractions", "0.2,0.6,0.2")
        assert code == 0
        assert json.loads(out)["splitSizes"] == {"train": 10, "gallery": 30,
                                                 "query": 10}


@pytest.fixture(scope="module")
def cli_train_dir(tmp_path_factory, workspace):
    out = tmp_path_factory.mktemp("cli_train")
    cfg = out / "config.json"
    cfg.write_text(json.dumps({
        "model": {"dout": 4, "head_hidden": [6, 5], "qenc_hidden": [4, 5, 6]},
        "train": {"epochs": 1, "batch_anchors": 12, "seed": 0},
    }))
    return out, cfg


class TestTrain:
    def test_train_writes_checkpoint(self, capsys, workspace, cli_train_dir):
        out, cfg = cli_train_dir
        code, stdout, _ = run(capsys, "train",
                              "--data", str(workspace["train_manifest"]),
                              "--out", str(out / "run1"),
                              "--config", str(cfg))
        assert code == 0
        summary = json.loads(stdout)
        assert summary["epochs"] == 1
        assert (out / "run1" / "model.cten").exists()
        assert (out / "run1" / "train_log.jsonl").exists()

    def test_same_seed_identical_checkpoints(self, capsys, workspace,
                                             cli_train_dir):
        out, cfg = cli_train_dir
        for name in ("run2", "run3"):
            code, _, _ = run(capsys, "train",
                             "--data", str(workspace["train_manifest"]),
                             "--out", str(out / name), "--config", str(cfg))
            assert code == 0
        assert (out / "run2" / "model.cten").read_bytes() == \
               (out / "run3" / "model.cten").read_bytes()

    def test_config_data_mismatch_is_usage_error(self, capsys, workspace,
                                                 tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {"din": 999}}))
        code, _, err = run(capsys, "train",
                           "--data", str(workspace["train_manifest"]),
                           "--out", str(tmp_path / "x"), "--config", str(cfg))
        assert code == 1 and "din" in err


class TestIndexSearchEvaluate:
    def test_index_subcommand(self, capsys, workspace, tmp_path):
        out = tmp_path / "g.cidx"
        code, stdout, _ = run(capsys, "index",
                              "--data", str(workspace["gallery_manifest"]),
                              "--checkpoint", str(workspace["checkpoint"]),
                              "--out", str(out))
        assert code == 0
        summary = json.loads(stdout)
        index = load_index(out)
        assert summary["n"] == index.size

    def test_search_cal_prints_ranked_json(self, capsys, workspace, tmp_path):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        canvas = tmp_path / "q.json"
        canvas.write_text(json.dumps(scene_to_record(scenes[0])))
        code, out, _ = run(capsys, "search",
                           "--index", str(workspace["index_path"]),
                           "--canvas", str(canvas), "--k", "5",
                           "--checkpoint", str(workspace["checkpoint"]))
        assert code == 0
        body = json.loads(out)
        assert [r["rank"] for r in body["results"]] == [1, 2, 3, 4, 5]
        assert body["kRequested"] == 5 and body["truncated"] is False

    def test_search_textual_mode(self, capsys, workspace, tmp_path):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        canvas = tmp_path / "q.json"
        canvas.write_text(json.dumps(scene_to_record(scenes[1])))
        code, out, _ = run(capsys, "search",
                           "--index", str(workspace["index_path"]),
                           "--canvas", str(canvas), "--k", "3",
                           "--mode", "textual")
        assert code == 0
        assert len(json.loads(out)["results"]) == 3

    @pytest.mark.filterwarnings("ignore:k=.*exceeds gallery size")
    def test_search_k_above_gallery_truncates(self, capsys, workspace, tmp_path):
        scenes, _, _ = read_manifest(workspace["query_manifest"])
        canvas = tmp_path / "q.json"
        canvas.write_text(json.dumps(scene_to_record(scenes[0])))
        code, out, _ = run(capsys, "search",
                           "--index", str(workspace["index_path"]),
                           "--canvas", str(canvas), "--k", "999",
                           "--mode", "textual")
        assert code == 0
        body = json.loads(out)
        assert body["truncated"] is True
        assert len(body["results"]) == load_index(workspace["index_path"]).size

    def test_evaluate_writes_report_and_csv(self, capsys, workspace, tmp_path):
        report_path = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        code, out, _ = run(capsys, "evaluate",
                           "--index", str(workspace["index_path"]),
                           "--queries", str(workspace["query_manifest"]),
                           "--checkpoint", str(workspace["checkpoint"]),
                           "--out", str(report_path), "--csv", str(csv_path))
        assert code == 0
        report = json.loads(report_path.read_text())
        assert "mREL@1" in report["means"]
        assert json.loads(out)["means"] == report["means"]
        assert csv_path.read_text().startswith("query,metric,k,value")

    def test_evaluate_raw_mode(self, capsys, workspace, tmp_path):
        code, out, _ = run(capsys, "evaluate",
                           "--index", str(workspace["index_path"]),
                           "--queries", str(workspace["query_manifest"]),
                           "--mode", "raw",
                           "--out", str(tmp_path / "r.json"))
        # raw features (7*7*12) do not match embedding dim (7*7*4): exit 2
        assert code == 2

    def test_evaluate_raw_mode_against_raw_index(self, capsys, workspace,
                                                 tmp_path):
        from compsearch.gallery import build_raw_index, save_index
        raw_path = tmp_path / "raw.cidx"
        save_index(build_raw_index(workspace["gallery_manifest"]), raw_path)
        code, out, _ = run(capsys, "evaluate",
                           "--index", str(raw_path),
                           "--queries", str(workspace["query_manifest"]),
                           "--mode", "raw",
                           "--out", str(tmp_path / "r.json"))
        assert code == 0
        assert 0.0 <= json.loads(out)["means"]["mREL@1"] <= 1.0
