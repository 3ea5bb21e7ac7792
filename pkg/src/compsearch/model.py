"""Embedding head over frozen backbone features, plus the canvas encoder.

The head g(x) is a 3-layer CNN (blur, conv, batch-norm, LeakyReLU, dropout
for the first two layers; blur and a 1x1 conv at the output) that keeps the
7x7 spatial layout so translations of the input stay translations of the
output. The query encoder maps a 32x32xC composition map into the same
7x7xDout space so canvases can be compared against image embeddings with a
plain dot product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cten
from .autodiff import BatchNormState, Tensor

LEAKY_SLOPE = 0.2
DROPOUT_P = 0.5


@dataclass(frozen=True)
class ModelConfig:
    din: int = 2048
    dout: int = 256
    c: int = 80
    grid: int = 32
    feat_hw: tuple[int, int] = (7, 7)
    head_hidden: tuple[int, int] = (1024, 512)
    qenc_hidden: tuple[int, int, int] = (64, 128, 256)
    to_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("din", "dout", "c", "grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if len(self.head_hidden) != 2 or len(self.qenc_hidden) != 3:
            raise ValueError("head needs 2 hidden widths, query encoder 3")

    @property
    def head_channels(self) -> tuple[int, ...]:
        return (self.din, *self.head_hidden, self.dout)

    @property
    def qenc_channels(self) -> tuple[int, ...]:
        return (self.c, *self.qenc_hidden, self.dout)

    @property
    def embedding_len(self) -> int:
        return self.feat_hw[0] * self.feat_hw[1] * self.dout


@dataclass
class HeadParams:
    conv1_w: Tensor
    conv1_b: Tensor
    bn1: BatchNormState
    conv2_w: Tensor
    conv2_b: Tensor
    bn2: BatchNormState
    conv3_w: Tensor
    conv3_b: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.conv1_w, self.conv1_b, self.bn1.gamma, self.bn1.beta,
                self.conv2_w, self.conv2_b, self.bn2.gamma, self.bn2.beta,
                self.conv3_w, self.conv3_b]

    def conv_kernels(self) -> list[Tensor]:
        return [self.conv1_w, self.conv2_w, self.conv3_w]


@dataclass
class QueryEncoderParams:
    convs: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # (w, b) x4

    def parameters(self) -> list[Tensor]:
        return [t for w, b in self.convs for t in (w, b)]

    def conv_kernels(self) -> list[Tensor]:
        return [w for w, _ in self.convs]


@dataclass(frozen=True)
class Embedding:
    id: str
    vec: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.vec).all():
            raise ValueError(f"non-finite embedding for {self.id!r}")


def _kaiming_conv(rng, kh, kw, cin, cout, dtype):
    std = np.sqrt(2.0 / (kh * kw * cin))
    w = ad.parameter(rng.normal(0.0, std, size=(kh, kw, cin, cout)), dtype)
    b = ad.parameter(np.zeros(cout), dtype)
    return w, b


def init_head(config: ModelConfig, dtype=np.float32) -> HeadParams:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    c0, c1, c2, c3 = config.head_channels
    w1, b1 = _kaiming_conv(rng, 3, 3, c0, c1, dtype)
    w2, b2 = _kaiming_conv(rng, 3, 3, c1, c2, dtype)
    w3, b3 = _kaiming_conv(rng, 1, 1, c2, c3, dtype)
    return HeadParams(w1, b1, BatchNormState.create(c1, dtype),
                      w2, b2, BatchNormState.create(c2, dtype), w3, b3)


def init_query_encoder(config: ModelConfig, dtype=np.float32) -> QueryEncoderParams:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed + 1).spawn(1)[0])
    chain = config.qenc_channels
    convs = [_kaiming_conv(rng, 3, 3, chain[i], chain[i + 1], dtype)
             for i in range(4)]
    return QueryEncoderParams(convs)


def head_param_count(config: ModelConfig) -> int:
    c0, c1, c2, c3 = config.head_channels
    conv = (9 * c0 * c1 + c1) + (9 * c1 * c2 + c2) + (1 * c2 * c3 + c3)
    bn = 2 * c1 + 2 * c2
    return conv + bn


def qenc_param_count(config: ModelConfig) -> int:
    chain = config.qenc_channels
    return sum(9 * chain[i] * chain[i + 1] + chain[i + 1] for i in range(4))


def count_parameters(params) -> int:
    return sum(t.data.size for t in params.parameters())


def head_forward(x: Tensor, params: HeadParams, mode: str,
                 dropout_seed: int | None = None, bn_bypass: bool = False,
                 update_running: bool = True) -> Tensor:
    """g(x): [*,7,7,Din] -> [*,7,7,Dout]; train mode needs a dropout seed."""
    if x.shape[-1] != params.conv1_w.shape[2]:
        raise ad.GraphError(
            f"input channels {x.shape[-1]} != head Din {params.conv1_w.shape[2]}")
    if mode == "train" and dropout_seed is None:
        raise ad.GraphError("train mode requires a dropout seed")
    squeeze = x.data.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1, *x.shape))
    seeds = (np.random.SeedSequence(dropout_seed).generate_state(2)
             if mode == "train" else (0, 0))

    h = ad.conv2d(ad.gaussian_blur(x), params.conv1_w, params.conv1_b)
    if not bn_bypass:
        h = ad.batch_norm(h, params.bn1, mode, update_running)
    h = ad.leaky_relu(h, LEAKY_SLOPE)
    h = ad.dropout(h, DROPOUT_P, int(seeds[0]), mode)

    h = ad.conv2d(ad.gaussian_blur(h), params.conv2_w, params.conv2_b)
    if not bn_bypass:
        h = ad.batch_norm(h, params.bn2, mode, update_running)
    h = ad.leaky_relu(h, LEAKY_SLOPE)
    h = ad.dropout(h, DROPOUT_P, int(seeds[1]), mode)

    h = ad.conv2d(ad.gaussian_blur(h), params.conv3_w, params.conv3_b)
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def encode_query(c, params: QueryEncoderParams, mode: str = "eval",
                 feat_hw: tuple[int, int] = (7, 7)) -> Tensor:
    """Composition map [*,32,32,C] -> [*,7,7,Dout], same space as g(x)."""
    x = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
    if x.shape[-1] != params.convs[0][0].shape[2]:
        raise ad.GraphError(
            f"map channels {x.shape[-1]} != encoder C {params.convs[0][0].shape[2]}")
    h = x
    for i, (w, b) in enumerate(params.convs):
        h = ad.leaky_relu(ad.conv2d(ad.gaussian_blur(h), w, b), LEAKY_SLOPE)
        if i < 2:
            h = ad.avg_pool2x2(h)
    return ad.adaptive_avg_pool(h, feat_hw)


def flatten_embedding(t: Tensor) -> Tensor:
    """[B,H,W,D] -> [B, H*W*D]; [H,W,D] -> [1, H*W*D]."""
    if t.data.ndim == 3:
        return ad.reshape(t, (1, t.data.size))
    return ad.reshape(t, (t.shape[0], t.data.size // t.shape[0]))


def output_transformation(f, f2, scale: float = 1.0):
    """T_o = scale * f f2^T over flattened embedding batches.

    Tensor inputs stay in the graph; numpy inputs get a numpy result.
    """
    if isinstance(f, Tensor) or isinstance(f2, Tensor):
        if f.shape[1] != f2.shape[1]:
            raise ad.GraphError(f"embedding lengths {f.shape[1]} != {f2.shape[1]}")
        out = ad.matmul(f, ad.transpose2d(f2))
        return out if scale == 1.0 else ad.mul(out, np.asarray(scale, dtype=f.dtype))
    f = np.asarray(f)
    f2 = np.asarray(f2)
    if f.shape[1] != f2.shape[1]:
        raise ValueError(f"embedding lengths {f.shape[1]} != {f2.shape[1]}")
    return scale * (f @ f2.T)


# ---------------------------------------------------------------------------
# checkpoints: CTEN container plus JSON sidecar

def _sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path: str | Path, head: HeadParams,
                    qenc: QueryEncoderParams, config: ModelConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for i, (w, b, bn) in enumerate(
            [(head.conv1_w, head.conv1_b, head.bn1),
             (head.conv2_w, head.conv2_b, head.bn2),
             (head.conv3_w, head.conv3_b, None)], start=1):
        tensors[f"head.conv{i}.w"] = w.data
        tensors[f"head.conv{i}.b"] = b.data
        if bn is not None:
            tensors[f"head.bn{i}.gamma"] = bn.gamma.data
            tensors[f"head.bn{i}.beta"] = bn.beta.data
            tensors[f"head.bn{i}.mean"] = bn.running_mean
            tensors[f"head.bn{i}.var"] = bn.running_var
    for i, (w, b) in enumerate(qenc.convs, start=1):
        tensors[f"qenc.conv{i}.w"] = w.data
        tensors[f"qenc.conv{i}.b"] = b.data
    cten.save_toc(path, tensors)
    sidecar = {
        "channels": list(config.head_channels),
        "qencChannels": list(config.qenc_channels),
        "Dout": config.dout,
        "C": config.c,
        "grid": config.grid,
        "featHW": list(config.feat_hw),
        "to_scale": config.to_scale,
        "seeds": {"init": config.seed},
        "bnInitialized": bool(head.bn1.initialized and head.bn2.initialized),
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[HeadParams, QueryEncoderParams, ModelConfig]:
    meta = json.loads(_sidecar_path(path).read_text())
    chain = meta["channels"]
    qchain = meta["qencChannels"]
    config = ModelConfig(
        din=chain[0], dout=chain[-1], c=meta["C"], grid=meta["grid"],
        feat_hw=tuple(meta.get("featHW", (7, 7))),
        head_hidden=tuple(chain[1:3]), qenc_hidden=tuple(qchain[1:4]),
        to_scale=meta["to_scale"], seed=meta["seeds"]["init"],
    )
    t = cten.load_toc(path)

    def bn(i, channels):
        state = BatchNormState.create(channels)
        state.gamma = ad.parameter(t[f"head.bn{i}.gamma"])
        state.beta = ad.parameter(t[f"head.bn{i}.beta"])
        state.running_mean = t[f"head.bn{i}.mean"]
        state.running_var = t[f"head.bn{i}.var"]
        state.initialized = meta.get("bnInitialized", False)
        return state

    head = HeadParams(
        ad.parameter(t["head.conv1.w"]), ad.parameter(t["head.conv1.b"]),
        bn(1, chain[1]),
        ad.parameter(t["head.conv2.w"]), ad.parameter(t["head.conv2.b"]),
        bn(2, chain[2]),
        ad.parameter(t["head.conv3.w"]), ad.parameter(t["head.conv3.b"]),
    )
    qenc = QueryEncoderParams(
        [(ad.parameter(t[f"qenc.conv{i}.w"]), ad.parameter(t[f"qenc.conv{i}.b"]))
         for i in range(1, 5)])
    return head, qenc, config


def config_with(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
