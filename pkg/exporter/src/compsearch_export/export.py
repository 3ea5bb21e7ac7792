"""Convert an annotated image folder into a compsearch gallery.

Input annotations use the COCO instances layout (images / annotations /
categories). Output is the shared manifest schema: one CTEN feature file
per image plus manifest.jsonl and categories.json in the output folder.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from compsearch import cten
from compsearch.composition import (
    MAX_OBJECTS, AnnotationError, Box, SceneAnnotation, scene_to_record,
)

from .backbone import IMAGE_SIZE, STAGE_SHAPES, build_backbone, extract, preprocess

log = logging.getLogger("compsearch_export")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    images: Path
    annotations: Path
    out: Path
    layer: int = 4
    weights: str = "pretrained"
    batch_size: int = 8
    seed: int = 0


@dataclass
class ExportResult:
    manifest: Path
    exported: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def _load_coco(path: Path) -> tuple[list[dict], dict[int, list[dict]], list[dict]]:
    doc = json.loads(path.read_text())
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ExportError(f"annotation file missing {key!r}")
    per_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        per_image.setdefault(ann["image_id"], []).append(ann)
    return doc["images"], per_image, doc["categories"]


def _category_index(categories: list[dict]) -> tuple[dict[int, int], list[str]]:
    """COCO category ids are sparse; remap to contiguous 0..C-1 by id order."""
    ordered = sorted(categories, key=lambda c: c["id"])
    return ({c["id"]: i for i, c in enumerate(ordered)},
            [c["name"] for c in ordered])


def _to_scene(info: dict, anns: list[dict], cat_map: dict[int, int]) -> SceneAnnotation | None:
    width, height = info["width"], info["height"]
    boxes = []
    for ann in anns:
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0 or ann["category_id"] not in cat_map:
            continue
        boxes.append((w * h, Box(cat_map[ann["category_id"]],
                                 min(max(x / width, 0.0), 1.0),
                                 min(max(y / height, 0.0), 1.0),
                                 min(w / width, 1.0), min(h / height, 1.0))))
    if not boxes:
        return None
    boxes.sort(key=lambda t: -t[0])
    kept = tuple(b for _, b in boxes[:MAX_OBJECTS])
    stem = Path(info["file_name"]).stem
    try:
        return SceneAnnotation(stem, kept)
    except AnnotationError as exc:
        log.warning("skipping %s: %s", info["file_name"], exc)
        return None


def _load_rgb(path: Path) -> np.ndarray | None:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE),
                                            Image.BILINEAR)
            return np.asarray(rgb)
    except (OSError, ValueError) as exc:
        log.warning("unreadable image %s: %s", path, exc)
        return None


def _save_atomic(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    cten.save_tensor(tmp, arr)
    os.replace(tmp, path)


def export(job: ExportJob) -> ExportResult:
    if not job.images.is_dir():
        raise ExportError(f"image folder not found: {job.images}")
    images, per_image, categories = _load_coco(job.annotations)
    cat_map, names = _category_index(categories)
    trunk = build_backbone(job.layer, job.weights, job.seed)

    feat_dir = job.out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    result = ExportResult(manifest=job.out / "manifest.jsonl")

    scenes: list[SceneAnnotation] = []
    paths: list[str] = []
    pending: list[tuple[SceneAnnotation, np.ndarray]] = []

    def flush():
        if not pending:
            return
        import torch

        batch = torch.cat([preprocess(rgb) for _, rgb in pending])
        feats = extract(trunk, batch)
        for (scene, _), feat in zip(pending, feats):
            rel = f"features/{scene.id}.cten"
            _save_atomic(job.out / rel, feat)
            scenes.append(scene)
            paths.append(rel)
            result.exported.append(scene.id)
        pending.clear()

    for info in sorted(images, key=lambda i: i["file_name"]):
        scene = _to_scene(info, per_image.get(info["id"], []), cat_map)
        if scene is None:
            result.skipped.append(info["file_name"])
            continue
        rgb = _load_rgb(job.images / info["file_name"])
        if rgb is None:
            result.skipped.append(info["file_name"])
            continue
        pending.append((scene, rgb))
        if len(pending) >= job.batch_size:
            flush()
    flush()

    if not scenes:
        raise ExportError("no exportable images")
    header = {"C": len(names), "source": str(job.annotations.name),
              "backbone": f"resnet50-layer{job.layer}",
              "featureShape": list(STAGE_SHAPES[job.layer])}
    from compsearch.composition import write_manifest

    tmp = result.manifest.with_suffix(".jsonl.tmp")
    write_manifest(tmp, scenes, paths, header=header)
    os.replace(tmp, result.manifest)
    (job.out / "categories.json").write_text(json.dumps(names, indent=2))
    return result
