"""Umbrella command line: gen-data, train, index, search, evaluate, serve.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .composition import read_manifest, scene_from_record
from .model import ModelConfig
from .synthetic import SynthConfig, gen_dataset
from .training import TrainConfig, TrainData, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):          # argparse defaults to exit code 2
        raise UsageError(message)


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def build_parser() -> _Parser:
    parser = _Parser(prog="compsearch",
                     description="Compositional visual search pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=2500)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--din", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-objects", type=int, default=6)
    p.add_argument("--cluster-size", type=int, default=8)
    p.add_argument("--fractions", type=_fractions, default=(0.5, 0.3, 0.2),
                   help="train,gallery,query fractions (e.g. 0.12,0.8,0.08)")

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True, help="training manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with {model: {...}, train: {...}}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["cal", "euclidean"])
    p.add_argument("--lr0", type=float)
    p.add_argument("--dout", type=int)
    p.add_argument("--head-hidden", type=_int_tuple)
    p.add_argument("--qenc-hidden", type=_int_tuple)
    p.add_argument("--query-weight", type=float)

    p = sub.add_parser("index", help="embed a gallery into an index file")
    p.add_argument("--data", required=True, help="gallery manifest (JSONL)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--on-missing", choices=["abort", "skip"], default="abort")

    p = sub.add_parser("search", help="query an index with a canvas JSON")
    p.add_argument("--index", required=True)
    p.add_argument("--canvas", required=True,
                   help="JSON file with {objects: [{category, bbox}]}")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["cal", "textual"], default="cal")

    p = sub.add_parser("evaluate", help="run the metric suite over a query set")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query manifest (JSONL)")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional per-query CSV path")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["cal", "textual", "raw"], default="cal")

    p = sub.add_parser("serve", help="start the HTTP search service")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--categories", required=True)
    p.add_argument("--thumbs")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--max-k", type=int, default=100)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = SynthConfig(n_scenes=args.n_scenes, c=args.categories, din=args.din,
                      noise_std=args.noise_std, seed=args.seed,
                      max_objects=args.max_objects,
                      cluster_size=args.cluster_size)
    report = gen_dataset(cfg, args.out, args.fractions)
    print(json.dumps({"out": str(args.out),
                      "splitSizes": report["splitSizes"],
                      "calibration": report["calibration"]}, indent=2))
    return 0


def _cmd_train(args) -> int:
    file_cfg = {"model": {}, "train": {}}
    if args.config:
        file_cfg.update(json.loads(Path(args.config).read_text()))

    data = TrainData.load(args.data)
    din = data.features.shape[-1]
    c = data.maps.shape[-1]

    model_kw = {"din": din, "c": c, "dout": 16,
                "head_hidden": (32, 24), "qenc_hidden": (12, 16, 24)}
    model_kw.update(file_cfg.get("model", {}))
    for key, value in (("dout", args.dout), ("head_hidden", args.head_hidden),
                       ("qenc_hidden", args.qenc_hidden)):
        if value is not None:
            model_kw[key] = value
    for key in ("head_hidden", "qenc_hidden", "feat_hw"):
        if key in model_kw:
            model_kw[key] = tuple(model_kw[key])
    if model_kw["din"] != din or model_kw["c"] != c:
        raise UsageError(f"config expects din={model_kw['din']}, C={model_kw['c']} "
                         f"but data has din={din}, C={c}")

    train_kw = dict(file_cfg.get("train", {}))
    for key, value in (("epochs", args.epochs), ("loss", args.loss),
                       ("lr0", args.lr0), ("query_weight", args.query_weight)):
        if value is not None:
            train_kw[key] = value
    if args.seed is not None:
        train_kw["seed"] = args.seed
        model_kw["seed"] = args.seed

    model_cfg = ModelConfig(**model_kw)
    train_cfg = TrainConfig(**train_kw)
    _, _, log = train(data, model_cfg, train_cfg, args.out)
    final = log.epochs[-1] if log.epochs else {}
    print(json.dumps({"checkpoint": str(Path(args.out) / "model.cten"),
                      "epochs": len(log.epochs),
                      "finalLoss": final.get("meanLoss")}, indent=2))
    return 0


def _cmd_index(args) -> int:
    from .gallery import build_index, save_index

    index = build_index(args.data, args.checkpoint, on_missing=args.on_missing)
    save_index(index, args.out)
    print(json.dumps({"out": str(args.out), "n": index.size,
                      "dim": int(index.matrix.shape[1])}, indent=2))
    return 0


def _cmd_search(args) -> int:
    from .gallery import load_index, search_canvas, textual_search

    index = load_index(args.index)
    rec = json.loads(Path(args.canvas).read_text())
    scene = scene_from_record({"id": rec.get("id", "query"),
                               "objects": rec["objects"]})
    if args.mode == "textual":
        result = textual_search(index, scene.categories(), args.k)
    else:
        if not args.checkpoint:
            raise UsageError("--mode cal requires --checkpoint")
        result = search_canvas(index, scene, args.k, args.checkpoint)
    print(json.dumps({
        "results": [{"id": it.image_id, "score": it.score, "rank": it.rank}
                    for it in result.items],
        "kRequested": result.k_requested,
        "truncated": result.truncated,
    }, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    from . import cten
    from .gallery import load_index
    from .metrics import evaluate, write_report

    index = load_index(args.index)
    queries, feats, _ = read_manifest(args.queries)
    query_features = None
    if args.mode == "raw":
        base = Path(args.queries).parent
        query_features = np.stack([cten.load_tensor(base / f) for f in feats])
    if args.mode == "cal" and not args.checkpoint:
        raise UsageError("--mode cal requires --checkpoint")
    report = evaluate(index, queries, checkpoint=args.checkpoint,
                      mode=args.mode, query_features=query_features)
    write_report(report, args.out, args.csv)
    print(json.dumps({"out": str(args.out), "means": report["means"]}, indent=2))
    return 0


def _cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    serve(ServiceConfig(index_path=args.index, checkpoint_path=args.checkpoint,
                        categories_path=args.categories, thumb_dir=args.thumbs,
                        max_k=args.max_k, host=args.host, port=args.port))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "index": _cmd_index,
    "search": _cmd_search,
    "evaluate": _cmd_evaluate,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:           # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
