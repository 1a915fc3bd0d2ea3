"""Synthetic sparse image datasets: class-distinguishing striped textures
rendered into an object region over an exactly-black background, with
selection-label pyramids derived from the object boxes.

corner-quarter mode fills the top-left H/2 x W/2 quadrant (object ratio
25%); random-box samples a box covering 10-25% of the image.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .selection import derive_select_labels
from .types import SelectLabelPyramid

MODES = ("corner-quarter", "random-box")

# per-class RGB emphasis; cycled when there are more classes than entries
_PALETTE = np.array(
    [
        [1.0, 0.35, 0.35],
        [0.35, 1.0, 0.35],
        [0.35, 0.35, 1.0],
        [1.0, 1.0, 0.3],
        [0.3, 1.0, 1.0],
        [1.0, 0.3, 1.0],
        [0.9, 0.6, 0.3],
        [0.5, 0.5, 1.0],
    ]
)


@dataclass
class SparseSample:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]; background exactly 0
    class_id: int
    objects: list  # boxes (x0, y0, x1, y1)
    pyramid: SelectLabelPyramid


def _texture(class_id: int, num_classes: int, bh: int, bw: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented striped pattern distinguishing the class; values in [0, 1]."""
    angle = np.pi * class_id / num_classes
    freq = 3.0 + 2.0 * (class_id % 3)
    phase = rng.uniform(-0.4, 0.4)
    yy, xx = np.meshgrid(np.linspace(0, 1, bh, endpoint=False), np.linspace(0, 1, bw, endpoint=False), indexing="ij")
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    base = 0.55 + 0.4 * wave
    color = _PALETTE[class_id % len(_PALETTE)]
    img = base[:, :, None] * color[None, None, :]
    img += rng.uniform(-0.05, 0.05, size=img.shape)
    return np.clip(img, 0.02, 1.0).astype(np.float32)


def _sample_box(height: int, width: int, rng: np.random.Generator) -> tuple:
    """A box whose area fraction lies in [0.10, 0.25]."""
    for _ in range(64):
        frac = rng.uniform(0.10, 0.25)
        aspect = rng.uniform(0.6, 1.6)
        bw = int(round(np.sqrt(frac * width * height * aspect)))
        bh = int(round(frac * width * height / max(bw, 1)))
        bw, bh = min(max(bw, 8), width), min(max(bh, 8), height)
        if 0.10 <= (bw * bh) / (width * height) <= 0.25:
            x0 = int(rng.integers(0, width - bw + 1))
            y0 = int(rng.integers(0, height - bh + 1))
            return x0, y0, x0 + bw, y0 + bh
    # fall back to an exactly-20% centered box
    bw = int(round(np.sqrt(0.2) * width))
    bh = int(round(0.2 * width * height / bw))
    return (width - bw) // 2, (height - bh) // 2, (width - bw) // 2 + bw, (height - bh) // 2 + bh


def make_sample(index: int, num_classes: int, height: int, width: int, mode: str, seed: int) -> SparseSample:
    rng = np.random.default_rng([seed, index])
    class_id = int(rng.integers(0, num_classes))
    if mode == "corner-quarter":
        box = (0, 0, width // 2, height // 2)
    elif mode == "random-box":
        box = _sample_box(height, width, rng)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    x0, y0, x1, y1 = box
    image = np.zeros((height, width, 3), dtype=np.float32)
    image[y0:y1, x0:x1] = _texture(class_id, num_classes, y1 - y0, x1 - x0, rng)
    return SparseSample(image, class_id, [box], derive_select_labels([box], height, width))


def gen_sparse_dataset(
    n: int,
    num_classes: int,
    height: int,
    width: int,
    mode: str = "corner-quarter",
    seed: int = 0,
    workers: int = 1,
) -> list:
    """Deterministic per (seed, index); samples are independent, so workers
    only change wall time, never content."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: make_sample(i, num_classes, height, width, mode, seed), range(n)))
    return [make_sample(i, num_classes, height, width, mode, seed) for i in range(n)]


def batch_arrays(samples) -> tuple:
    """(images [B,H,W,3], class ids [B], stacked label levels)."""
    x = np.stack([s.image for s in samples])
    y = np.array([s.class_id for s in samples], dtype=np.int64)
    labels = [np.stack([s.pyramid.level(k) for s in samples]).astype(np.float32) for k in range(3)]
    return x, y, labels


# ---------------------------------------------------------------------------
# On-disk cache: one fixture tensor + one annotation file per sample, plus
# an index CSV (sample_id, class_id, annotation).


def save_dataset(samples, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        sid = f"sample_{i:05d}"
        nm.save_tensor(os.path.join(out_dir, sid + ".spt"), s.image)
        ann = sid + ".boxes.txt"
        with open(os.path.join(out_dir, ann), "w", encoding="utf-8") as fh:
            for x0, y0, x1, y1 in s.objects:
                fh.write(f"box {x0} {y0} {x1} {y1}\n")
        rows.append((sid, s.class_id, ann))
    with open(os.path.join(out_dir, "index.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id", "annotation"])
        writer.writerows(rows)


def load_annotation(path, height: int, width: int):
    """Boxes from a text annotation, or a binary mask from a fixture tensor."""
    if str(path).endswith(".spt"):
        return nm.load_tensor(path).reshape(height, width)
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "box" or len(parts) != 5:
                raise ValueError(f"{path}: bad annotation line {line!r}")
            boxes.append(tuple(int(v) for v in parts[1:]))
    return boxes


def load_dataset(dir_path) -> list:
    index = os.path.join(dir_path, "index.csv")
    samples = []
    with open(index, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            image = nm.load_tensor(os.path.join(dir_path, row["sample_id"] + ".spt"))
            h, w = image.shape[:2]
            objects = load_annotation(os.path.join(dir_path, row["annotation"]), h, w)
            pyramid = derive_select_labels(objects, h, w)
            boxes = objects if isinstance(objects, list) else []
            samples.append(SparseSample(image, int(row["class_id"]), boxes, pyramid))
    return samples
