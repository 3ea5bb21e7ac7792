"""ResNet-50 stage features for gallery export.

The default cut is after the fourth residual stage: a 224x224 input
yields a 7x7x2048 grid, saved channels-last to match the gallery
feature layout.
"""

import numpy as np
import torch
from torch import nn
from torchvision import models

IMAGE_SIZE = 224
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# output channels after each residual stage at 224x224 input
STAGE_SHAPES = {1: (56, 56, 256), 2: (28, 28, 512),
                3: (14, 14, 1024), 4: (7, 7, 2048)}


class BackboneError(RuntimeError):
    pass


def build_backbone(layer: int = 4, weights: str = "pretrained",
                   seed: int = 0) -> nn.Module:
    """Frozen eval-mode trunk of ResNet-50 up to the given stage."""
    if layer not in STAGE_SHAPES:
        raise BackboneError(f"layer must be one of {sorted(STAGE_SHAPES)}, got {layer}")
    if weights == "pretrained":
        try:
            net = models.resnet50(weights=models.ResNet50_Weights.IMAGENET1K_V2)
        except Exception as exc:
            raise BackboneError(
                f"pretrained weights unavailable ({exc}); "
                "pass --weights random for a smoke run") from exc
    elif weights == "random":
        torch.manual_seed(seed)
        net = models.resnet50(weights=None)
    else:
        raise BackboneError(f"unknown weights mode {weights!r}")
    stages = [net.conv1, net.bn1, net.relu, net.maxpool]
    stages += [getattr(net, f"layer{i}") for i in range(1, layer + 1)]
    trunk = nn.Sequential(*stages)
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


def preprocess(rgb: np.ndarray) -> torch.Tensor:
    """HWC uint8 RGB -> normalized 1CHW float tensor."""
    arr = rgb.astype(np.float32) / 255.0
    arr = (arr - MEAN) / STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


@torch.no_grad()
def extract(trunk: nn.Module, batch: torch.Tensor) -> np.ndarray:
    """[B,3,224,224] -> [B,H,W,C] float32, channels last."""
    out = trunk(batch)
    return out.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)
