"""Shared fixtures: a tiny generated dataset with a usable checkpoint."""

import numpy as np
import pytest

from compsearch.gallery import build_index, save_index
from compsearch.model import ModelConfig, init_head, init_query_encoder, save_checkpoint
from compsearch.synthetic import SynthConfig, gen_dataset
from compsearch.training import TrainData, warmup_batch_norm


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Dataset on disk plus an untrained (but BN-warmed) checkpoint and index.

    Keys: root, synth_cfg, model_cfg, checkpoint, index_path, index,
    manifests train/gallery/query, categories.
    """
    root = tmp_path_factory.mktemp("ws")
    synth_cfg = SynthConfig(n_scenes=48, c=6, din=12, seed=3)
    gen_dataset(synth_cfg, root)

    model_cfg = ModelConfig(din=12, dout=4, c=6,
                            head_hidden=(6, 5), qenc_hidden=(4, 5, 6), seed=1)
    head = init_head(model_cfg)
    qenc = init_query_encoder(model_cfg)
    train = TrainData.load(root / "train.jsonl")
    warmup_batch_norm(head, train.features, seed=0, batches=5, batch_size=12)
    checkpoint = root / "model.cten"
    save_checkpoint(checkpoint, head, qenc, model_cfg)

    index = build_index(root / "gallery.jsonl", checkpoint)
    index_path = root / "gallery.cidx"
    save_index(index, index_path)
    return {
        "root": root,
        "synth_cfg": synth_cfg,
        "model_cfg": model_cfg,
        "checkpoint": checkpoint,
        "index": index,
        "index_path": index_path,
        "train_manifest": root / "train.jsonl",
        "gallery_manifest": root / "gallery.jsonl",
        "query_manifest": root / "query.jsonl",
        "categories": root / "categories.json",
    }
