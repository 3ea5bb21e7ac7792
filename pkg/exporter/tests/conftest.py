import json

import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Three readable images, one corrupt file, COCO-style annotations."""
    root = tmp_path_factory.mktemp("corpus")
    img_dir = root / "images"
    img_dir.mkdir()
    rng = np.random.default_rng(7)
    for name in ("a.png", "b.png", "c.png"):
        arr = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
        Image.fromarray(arr).save(img_dir / name)
    (img_dir / "broken.png").write_bytes(b"not a png at all")

    # category ids deliberately sparse; image "a" carries 8 boxes so the
    # largest-area-first cap at 6 is exercised
    anns = []
    for i in range(8):
        anns.append({"id": i + 1, "image_id": 1, "category_id": 11,
                     "bbox": [2.0 * i, 3.0, 4.0 + i, 5.0 + i]})
    anns.append({"id": 20, "image_id": 2, "category_id": 35,
                 "bbox": [10, 10, 30, 20]})
    anns.append({"id": 21, "image_id": 2, "category_id": 11,
                 "bbox": [0, 0, 64, 48]})
    anns.append({"id": 22, "image_id": 3, "category_id": 35,
                 "bbox": [5, 5, 20, 20]})
    anns.append({"id": 23, "image_id": 4, "category_id": 11,
                 "bbox": [1, 1, 10, 10]})
    coco = {
        "images": [
            {"id": 1, "file_name": "a.png", "width": 64, "height": 48},
            {"id": 2, "file_name": "b.png", "width": 64, "height": 48},
            {"id": 3, "file_name": "c.png", "width": 64, "height": 48},
            {"id": 4, "file_name": "broken.png", "width": 64, "height": 48},
        ],
        "annotations": anns,
        "categories": [{"id": 35, "name": "bench"}, {"id": 11, "name": "dog"}],
    }
    ann_path = root / "instances.json"
    ann_path.write_text(json.dumps(coco))
    return {"images": img_dir, "annotations": ann_path}
