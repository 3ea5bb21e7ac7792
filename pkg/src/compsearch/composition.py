"""Box-and-category scene annotations, composition maps, and relevance.

A scene is a handful of category-labelled boxes in the normalized unit
square. Rasterizing a scene onto a 32x32xC binary grid gives a composition
map; the continuous overlap of two maps (intersection over union of set
cells) is the soft training label, and box-geometry mean-IoU is the
ground-truth relevance used for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID = 32
MAX_OBJECTS = 6


class AnnotationError(ValueError):
    """Invalid scene annotation (bad box, bad category, wrong count)."""


class TransformError(ValueError):
    """A query transform would produce an invalid annotation."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, normalized: x,y top-left corner, w,h extents."""

    category: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.category < 0:
            raise AnnotationError(f"negative category {self.category}")
        if self.w <= 0 or self.h <= 0:
            raise AnnotationError(f"non-positive box extent {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > 1 + 1e-9 or self.y + self.h > 1 + 1e-9:
            raise AnnotationError(
                f"box [{self.x},{self.y},{self.w},{self.h}] leaves the unit square")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class SceneAnnotation:
    id: str
    objects: tuple[Box, ...]

    def __post_init__(self):
        objects = tuple(self.objects)
        object.__setattr__(self, "objects", objects)
        if not 1 <= len(objects) <= MAX_OBJECTS:
            raise AnnotationError(
                f"scene {self.id!r} has {len(objects)} objects, allowed 1..{MAX_OBJECTS}")

    def categories(self) -> set[int]:
        return {b.category for b in self.objects}


@dataclass(frozen=True)
class QueryTransform:
    """Either translate every object by its own (dx,dy), or remap categories."""

    kind: str
    delta: tuple[tuple[float, float], ...] | None = None
    mapping: dict[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("translate", "categorySwap"):
            raise TransformError(f"unknown transform kind {self.kind!r}")
        if self.kind == "translate" and self.delta is None:
            raise TransformError("translate requires per-object deltas")
        if self.kind == "categorySwap" and self.mapping is None:
            raise TransformError("categorySwap requires a mapping")


# ---------------------------------------------------------------------------
# rasterization and the input-space transformation

def rasterize(ann: SceneAnnotation, C: int, grid: int = GRID) -> np.ndarray:
    """Binary [grid, grid, C] map; union over same-category objects.

    A cell is set when its center falls inside the box; a box too small to
    cover any center still sets the one cell containing its own center.
    """
    out = np.zeros((grid, grid, C), dtype=np.float32)
    centers = (np.arange(grid) + 0.5) / grid
    for box in ann.objects:
        if box.category >= C:
            raise AnnotationError(f"category {box.category} out of range [0,{C})")
        cols = (centers >= box.x) & (centers < box.x + box.w)
        rows = (centers >= box.y) & (centers < box.y + box.h)
        if cols.any() and rows.any():
            out[np.ix_(rows.nonzero()[0], cols.nonzero()[0], [box.category])] = 1.0
        else:
            ci = min(int((box.x + box.w / 2) * grid), grid - 1)
            ri = min(int((box.y + box.h / 2) * grid), grid - 1)
            out[ri, ci, box.category] = 1.0
    return out


def input_transformation(c: np.ndarray, c2: np.ndarray) -> float:
    """Set-cell IoU of two composition maps; 0 when both are empty."""
    if c.shape != c2.shape:
        raise AnnotationError(f"map shape mismatch {c.shape} vs {c2.shape}")
    a = c != 0
    b = c2 != 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(a & b))
    return float(np.float64(inter) / np.float64(union))


def ti_matrix(maps_a: list[np.ndarray], maps_b: list[np.ndarray] | None = None) -> np.ndarray:
    """Pairwise input_transformation, exact: counts via 0/1 float64 matmul."""
    if maps_b is None:
        maps_b = maps_a
    fa = np.stack([(m != 0).reshape(-1) for m in maps_a]).astype(np.float64)
    fb = np.stack([(m != 0).reshape(-1) for m in maps_b]).astype(np.float64)
    inter = fa @ fb.T                                  # integer-exact in f64
    union = fa.sum(axis=1)[:, None] + fb.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


# ---------------------------------------------------------------------------
# box-geometry relevance

def _box_arrays(ann: SceneAnnotation):
    cats = np.array([b.category for b in ann.objects], dtype=np.int64)
    corners = np.array([[b.x, b.y, b.x + b.w, b.y + b.h] for b in ann.objects],
                       dtype=np.float64)
    return cats, corners


def _pair_iou(qgeom: np.ndarray, igeom: np.ndarray) -> np.ndarray:
    """IoU for every (query box, image box) pair; [nq, ni] float64.

    Areas are derived from corners so identical boxes give IoU exactly 1.
    """
    qx0, qy0, qx1, qy1 = (qgeom[:, k][:, None] for k in range(4))
    ix0, iy0, ix1, iy1 = (igeom[:, k][None, :] for k in range(4))
    ox = np.maximum(0.0, np.minimum(qx1, ix1) - np.maximum(qx0, ix0))
    oy = np.maximum(0.0, np.minimum(qy1, iy1) - np.maximum(qy0, iy0))
    inter = ox * oy
    union = (qx1 - qx0) * (qy1 - qy0) + (ix1 - ix0) * (iy1 - iy0) - inter
    return inter / union


def miou_relevance(query: SceneAnnotation, image: SceneAnnotation) -> float:
    """Mean over query boxes of the best same-category IoU in the image.

    Each query box maximizes independently; image boxes may be re-used.
    No same-category partner contributes 0 for that query box.
    """
    if not query.objects:
        raise AnnotationError("empty query")
    qcats, qgeom = _box_arrays(query)
    icats, igeom = _box_arrays(image)
    iou = _pair_iou(qgeom, igeom)
    iou[qcats[:, None] != icats[None, :]] = 0.0
    return float(np.sum(iou.max(axis=1)) / len(query.objects))


def relevance_matrix(queries: list[SceneAnnotation], gallery: list[SceneAnnotation]) -> np.ndarray:
    """Entry (i,j) = miou_relevance(queries[i], gallery[j])."""
    if not queries or not gallery:
        raise AnnotationError("empty query or gallery list")
    qprep = [_box_arrays(q) for q in queries]
    iprep = [_box_arrays(g) for g in gallery]
    out = np.empty((len(queries), len(gallery)), dtype=np.float64)
    for i, (qcats, qgeom) in enumerate(qprep):
        nq = len(qcats)
        for j, (icats, igeom) in enumerate(iprep):
            iou = _pair_iou(qgeom, igeom)
            iou[qcats[:, None] != icats[None, :]] = 0.0
            out[i, j] = np.sum(iou.max(axis=1)) / nq
    return out


# ---------------------------------------------------------------------------
# query transforms

def apply_transform(ann: SceneAnnotation, t: QueryTransform) -> SceneAnnotation:
    """Translate (then clip) boxes or remap categories; result must stay valid."""
    if t.kind == "translate":
        if len(t.delta) != len(ann.objects):
            raise TransformError(
                f"{len(t.delta)} deltas for {len(ann.objects)} objects")
        moved = []
        for box, (dx, dy) in zip(ann.objects, t.delta):
            x0 = min(max(box.x + dx, 0.0), 1.0)
            y0 = min(max(box.y + dy, 0.0), 1.0)
            x1 = min(max(box.x + box.w + dx, 0.0), 1.0)
            y1 = min(max(box.y + box.h + dy, 0.0), 1.0)
            if x1 - x0 <= 0 or y1 - y0 <= 0:
                raise TransformError("translation clipped a box to nothing")
            moved.append(Box(box.category, x0, y0, x1 - x0, y1 - y0))
        return SceneAnnotation(ann.id, tuple(moved))
    mapped = [Box(t.mapping.get(b.category, b.category), b.x, b.y, b.w, b.h)
              for b in ann.objects]
    return SceneAnnotation(ann.id, tuple(mapped))


# ---------------------------------------------------------------------------
# manifest and category-name files

def scene_to_record(ann: SceneAnnotation, feature: str | None = None) -> dict:
    return {
        "id": ann.id,
        "feature": feature,
        "objects": [{"category": b.category, "bbox": [b.x, b.y, b.w, b.h]}
                    for b in ann.objects],
    }


def scene_from_record(rec: dict) -> SceneAnnotation:
    boxes = tuple(Box(o["category"], *o["bbox"]) for o in rec["objects"])
    return SceneAnnotation(rec["id"], boxes)


def write_manifest(path: str | Path, scenes: list[SceneAnnotation],
                   features: list[str | None] | None = None,
                   header: dict | None = None) -> None:
    """One JSON object per line; optional {"_header": ...} first line."""
    if features is None:
        features = [None] * len(scenes)
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}) + "\n")
        for ann, feat in zip(scenes, features):
            fh.write(json.dumps(scene_to_record(ann, feat)) + "\n")


def read_manifest(path: str | Path) -> tuple[list[SceneAnnotation], list[str | None], dict]:
    """Returns (scenes, feature paths, header dict or {})."""
    scenes: list[SceneAnnotation] = []
    features: list[str | None] = []
    header: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_header" in rec:
                if lineno != 0:
                    raise AnnotationError("manifest header must be the first line")
                header = rec["_header"]
                continue
            scenes.append(scene_from_record(rec))
            features.append(rec.get("feature"))
    return scenes, features, header


def load_categories(path: str | Path) -> list[str]:
    names = json.loads(Path(path).read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise AnnotationError("category file must be a JSON array of strings")
    return names
