"""SGD training loop for the embedding head and query encoder.

Each step samples a relevance-aware batch, embeds its features and
composition maps, forms the output-transformation matrices, and descends
the selected loss. Momentum 0.9, decoupled weight decay on conv kernels,
learning rate decayed exponentially per epoch, checkpoint per epoch.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cten
from .autodiff import Tensor
from .composition import SceneAnnotation, rasterize, read_manifest, ti_matrix
from .losses import LOSSES, RelevanceIndex, build_batch
from .model import (
    HeadParams, ModelConfig, QueryEncoderParams, encode_query,
    flatten_embedding, head_forward, init_head, init_query_encoder,
    output_transformation, save_checkpoint,
)


class TrainError(RuntimeError):
    """Training aborted; carries the offending batch ids when known."""

    def __init__(self, msg, batch_ids=None):
        super().__init__(msg)
        self.batch_ids = list(batch_ids) if batch_ids is not None else None


@dataclass
class TrainConfig:
    epochs: int = 20
    lr0: float = 1e-2
    lr_decay: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 0.005
    batch_anchors: int = 36
    loss: str = "cal"
    query_weight: float = 1.0
    seed: int = 0
    steps_per_epoch: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_anchors <= 0:
            raise ValueError("batch_anchors must be positive")
        # lr0 == 0 is allowed: a zero-lr run is the no-op-update check
        for name in ("lr0", "lr_decay", "momentum", "weight_decay", "query_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}, have {sorted(LOSSES)}")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * math.exp(-cfg.lr_decay * epoch)


@dataclass
class TrainData:
    """In-memory training set: one feature tensor and one map per scene."""

    ids: list[str]
    features: np.ndarray        # [N, 7, 7, Din]
    maps: np.ndarray            # [N, grid, grid, C]
    ti: np.ndarray              # [N, N] pairwise input transformation

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_scenes(cls, scenes: list[SceneAnnotation], features: np.ndarray,
                    C: int, grid: int = 32) -> "TrainData":
        maps = np.stack([rasterize(s, C, grid) for s in scenes])
        return cls([s.id for s in scenes], np.asarray(features, dtype=np.float32),
                   maps, ti_matrix(list(maps)))

    @classmethod
    def load(cls, manifest_path: str | Path) -> "TrainData":
        manifest_path = Path(manifest_path)
        scenes, feat_paths, header = read_manifest(manifest_path)
        if "C" not in header:
            raise TrainError(f"manifest {manifest_path} lacks a header with C")
        feats = []
        for scene, rel in zip(scenes, feat_paths):
            if rel is None:
                raise TrainError(f"scene {scene.id} has no feature file")
            feats.append(cten.load_tensor(manifest_path.parent / rel))
        return cls.from_scenes(scenes, np.stack(feats), header["C"],
                               header.get("grid", 32))


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"_meta": self.meta}) + "\n")
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if "_meta" in rec:
                    log.meta = rec["_meta"]
                elif "meanLoss" in rec:
                    log.epochs.append(rec)
                else:
                    log.steps.append(rec)
        return log

    def epoch_mean(self, epoch: int) -> float:
        vals = [r["loss"] for r in self.steps if r["epoch"] == epoch]
        return float(np.mean(vals))


class SGD:
    """Momentum SGD with decoupled weight decay on a designated subset."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_params: list[Tensor] = ()):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_ids = {id(p) for p in decay_params}
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def clip_grads(self, max_norm: float):
        total = math.sqrt(sum(float((p.grad ** 2).sum())
                              for p in self.params if p.grad is not None))
        if total > max_norm:
            scale = max_norm / total
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.dtype)
            if self.weight_decay and id(p) in self.decay_ids:
                p.data -= (self.lr * self.weight_decay) * p.data


def _step_loss(data: TrainData, batch, head: HeadParams, qenc: QueryEncoderParams,
               model_cfg: ModelConfig, cfg: TrainConfig, dropout_seed: int):
    feats = Tensor(data.features[batch.indices])
    img = flatten_embedding(head_forward(feats, head, "train", dropout_seed))
    loss_fn = LOSSES[cfg.loss]
    to_img = output_transformation(img, img, model_cfg.to_scale)
    loss = loss_fn(batch.ti, to_img)
    if cfg.query_weight > 0:
        q = flatten_embedding(encode_query(Tensor(data.maps[batch.indices]), qenc,
                                           feat_hw=model_cfg.feat_hw))
        to_q = output_transformation(q, img, model_cfg.to_scale)
        loss = ad.add(loss, ad.mul(loss_fn(batch.ti, to_q),
                                   np.asarray(cfg.query_weight, dtype=loss.dtype)))
    return loss


def train(data: TrainData, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path) -> tuple[HeadParams, QueryEncoderParams, TrainLog]:
    if data.features.shape[-1] != model_cfg.din:
        raise TrainError(f"feature Din {data.features.shape[-1]} != config {model_cfg.din}")
    if data.maps.shape[-1] != model_cfg.c:
        raise TrainError(f"map C {data.maps.shape[-1]} != config {model_cfg.c}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    head = init_head(model_cfg)
    qenc = init_query_encoder(model_cfg)
    index = RelevanceIndex.from_ti_matrix(data.ti)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    opt = SGD(head.parameters() + qenc.parameters(), lr_schedule(0, cfg),
              cfg.momentum, cfg.weight_decay,
              head.conv_kernels() + qenc.conv_kernels())
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(data) // cfg.batch_anchors)
    log = TrainLog(meta={
        "lrRule": "lr0*exp(-lr_decay*epoch)",
        "weightDecay": "decoupled, conv kernels only",
        "config": asdict(cfg),
        "channels": list(model_cfg.head_channels),
    })

    global_step = 0
    for epoch in range(cfg.epochs):
        opt.lr = lr_schedule(epoch, cfg)
        t0 = time.monotonic()
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = build_batch(data.ti, index, rng, cfg.batch_anchors)
            opt.zero_grad()
            try:
                loss = _step_loss(data, batch, head, qenc, model_cfg, cfg,
                                  dropout_seed=cfg.seed * 1_000_003 + global_step)
                ad.backward(loss)
            except ad.NonFiniteError as err:
                ids = [data.ids[i] for i in batch.indices]
                raise TrainError(
                    f"non-finite loss at step {global_step} (op {err.op}); "
                    f"batch ids: {ids}", batch_ids=ids) from err
            if cfg.grad_clip is not None:
                opt.clip_grads(cfg.grad_clip)
            opt.step()
            val = float(loss.data)
            log.steps.append({"step": global_step, "epoch": epoch, "loss": val})
            epoch_losses.append(val)
            global_step += 1
        ckpt = out_dir / f"epoch{epoch:03d}.cten"
        save_checkpoint(ckpt, head, qenc, model_cfg)
        log.epochs.append({
            "epoch": epoch, "meanLoss": float(np.mean(epoch_losses)),
            "lr": opt.lr, "wallSec": round(time.monotonic() - t0, 3),
            "checkpoint": ckpt.name,
        })
    final = out_dir / "model.cten"
    save_checkpoint(final, head, qenc, model_cfg)
    log.meta["finalCheckpoint"] = str(final)
    log.save(out_dir / "train_log.jsonl")
    return head, qenc, log


def warmup_batch_norm(head: HeadParams, features: np.ndarray,
                      seed: int = 0, batches: int = 10, batch_size: int = 36) -> None:
    """Populate batch-norm running stats without touching any weights.

    Gives an untrained head a usable eval mode (eval before any train-mode
    pass is an error by contract).
    """
    n = len(features)
    if n < 2:
        raise TrainError("batch-norm warmup needs at least 2 items")
    rng = np.random.default_rng(seed)
    for b in range(batches):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        head_forward(Tensor(features[idx]), head, "train", dropout_seed=seed + b)


def binary_entropy(ti: np.ndarray) -> np.ndarray:
    """H(t) with the 0*log(0) = 0 convention; the CAL per-entry lower bound."""
    t = np.clip(np.asarray(ti, dtype=np.float64), 0.0, 1.0)
    out = np.zeros_like(t)
    interior = (t > 0) & (t < 1)
    ti_ = t[interior]
    out[interior] = -(ti_ * np.log(ti_) + (1 - ti_) * np.log1p(-ti_))
    return out


def overfit_probe(data: TrainData, model_cfg: ModelConfig, cfg: TrainConfig,
                  max_steps: int = 500, tol: float = 0.05) -> dict:
    """Drive the loss to its Ti-entropy floor on a tiny set; a gap flags a
    gradient defect."""
    if len(data) > 8:
        raise TrainError("overfit probe expects at most 8 scenes")
    head = init_head(model_cfg)
    qenc = init_query_encoder(model_cfg)
    index = RelevanceIndex.from_ti_matrix(data.ti)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(head.parameters() + qenc.parameters(), cfg.lr0, cfg.momentum,
              weight_decay=0.0)
    anchors = min(len(data), cfg.batch_anchors)

    report = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")           # tiny-set batch warning
        for step in range(max_steps):
            batch = build_batch(data.ti, index, rng, anchors)
            opt.zero_grad()
            loss = _step_loss(data, batch, head, qenc, model_cfg, cfg,
                              dropout_seed=cfg.seed + step)
            ad.backward(loss)
            opt.clip_grads(cfg.grad_clip if cfg.grad_clip is not None else 10.0)
            opt.step()
            bound = float(binary_entropy(batch.ti).mean())
            feats = Tensor(data.features[batch.indices])
            img = flatten_embedding(head_forward(feats, head, "eval"))
            li = float(LOSSES[cfg.loss](batch.ti, output_transformation(
                img, img, model_cfg.to_scale)).data)
            q = flatten_embedding(encode_query(Tensor(data.maps[batch.indices]),
                                               qenc, feat_hw=model_cfg.feat_hw))
            lq = float(LOSSES[cfg.loss](batch.ti, output_transformation(
                q, img, model_cfg.to_scale)).data)
            report = {
                "steps": step + 1, "bound": bound,
                "finalLossImg": li, "finalLossQuery": lq,
                "gapImg": li - bound, "gapQuery": lq - bound,
            }
            if report["gapImg"] <= tol and report["gapQuery"] <= tol:
                break
    report["converged"] = report["gapImg"] <= tol and report["gapQuery"] <= tol
    return report
