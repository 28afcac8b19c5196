"""Synthetic multi-task scenes, task definitions, losses and metrics.

Each scene is a 64x64 grayscale image with one to three shapes of distinct
classes. Four tasks read it: reconstruction, label-edge regression,
semantic segmentation and shape counting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mtnas import numerics as nx
from mtnas.errors import ArgumentError
from mtnas.persistence import read_container, write_container
from mtnas.search_space import HeadSpec

IMAGE_SIDE = 64
N_SEG_CLASSES = 4
N_COUNT_CLASSES = 4
DATASET_MAGIC = b"MTNASDS1"

_CLASS_INTENSITY = {1: 0.45, 2: 0.7, 3: 0.95}
_BACKGROUND = 0.15


@dataclass(frozen=True)
class Scene:
    image: np.ndarray          # (64, 64, 1) in [0, 1]
    seg_labels: np.ndarray     # (64, 64) ints in 0..3
    edge_map: np.ndarray       # (64, 64) in [0, 1]
    shape_count_class: int


def sobel_magnitude(labels: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with edge-replicated borders, scaled to max 1."""
    p = np.pad(labels.astype(np.float64), 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def _place_shapes(rng: np.random.Generator, n_shapes: int):
    boxes = []
    while len(boxes) < n_shapes:
        for _ in range(100):
            kind = "rect" if rng.random() < 0.5 else "circle"
            if kind == "rect":
                h, w = int(rng.integers(8, 21)), int(rng.integers(8, 21))
            else:
                h = w = 2 * int(rng.integers(4, 10)) + 1
            top = int(rng.integers(1, IMAGE_SIDE - h - 1))
            left = int(rng.integers(1, IMAGE_SIDE - w - 1))
            box = (top, left, h, w)
            # 2-pixel gap keeps shapes separate
            if all(top + h + 2 <= t or t + bh + 2 <= top or left + w + 2 <= lft or lft + bw + 2 <= left
                   for (_, (t, lft, bh, bw)) in boxes):
                boxes.append((kind, box))
                break
        else:
            boxes = []
    return boxes


def make_scene(rng: np.random.Generator) -> Scene:
    n_shapes = int(rng.integers(1, 4))
    classes = rng.choice([1, 2, 3], size=n_shapes, replace=False)
    labels = np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=np.int64)
    yy, xx = np.mgrid[:IMAGE_SIDE, :IMAGE_SIDE]
    for (kind, (top, left, h, w)), cls in zip(_place_shapes(rng, n_shapes), classes):
        if kind == "rect":
            labels[top:top + h, left:left + w] = cls
        else:
            r = h // 2
            labels[((yy - top - r) ** 2 + (xx - left - r) ** 2) <= r * r] = cls
    intensity = np.full(labels.shape, _BACKGROUND)
    for cls, val in _CLASS_INTENSITY.items():
        intensity[labels == cls] = val + rng.uniform(-0.05, 0.05)
    image = np.clip(intensity + rng.normal(0.0, 0.03, size=labels.shape), 0.0, 1.0)
    return Scene(image[..., None], labels, sobel_magnitude(labels), n_shapes)


def generate_dataset(n: int, seed: int) -> list[Scene]:
    if n < 1:
        raise ArgumentError("dataset size must be >= 1")
    return [make_scene(np.random.default_rng([seed, i])) for i in range(n)]


def split_dataset(scenes: Sequence[Scene]) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """70/15/15 split by index."""
    n = len(scenes)
    a = int(0.7 * n)
    b = a + int(0.15 * n)
    return list(scenes[:a]), list(scenes[a:b]), list(scenes[b:])


@dataclass(frozen=True)
class Batch:
    image: np.ndarray      # (B, 64, 64, 1)
    seg: np.ndarray        # (B, 64, 64)
    edge: np.ndarray       # (B, 64, 64, 1)
    count: np.ndarray      # (B,)

    def __len__(self):
        return len(self.count)


def collate(scenes: Sequence[Scene]) -> Batch:
    if not scenes:
        raise ArgumentError("empty batch")
    return Batch(
        image=np.stack([s.image for s in scenes]),
        seg=np.stack([s.seg_labels for s in scenes]),
        edge=np.stack([s.edge_map for s in scenes])[..., None],
        count=np.array([s.shape_count_class for s in scenes], dtype=np.int64),
    )


def save_dataset(path, scenes: Sequence[Scene], split: str = "all") -> None:
    b = collate(scenes)
    write_container(path, DATASET_MAGIC, {"kind": "dataset", "split": split, "n": len(scenes)},
                    {"image": b.image, "seg": b.seg, "edge": b.edge, "count": b.count})


def load_dataset(path) -> list[Scene]:
    _, a = read_container(path, DATASET_MAGIC)
    return [Scene(a["image"][i], a["seg"][i].astype(np.int64), a["edge"][i, ..., 0], int(a["count"][i]))
            for i in range(len(a["count"]))]


# ---------------------------------------------------------------- tasks


@dataclass(frozen=True)
class MetricSpec:
    task: str
    name: str
    lower_is_better: bool


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str        # dense_seg | dense_regress | point_class
    loss: str        # cross_entropy | l1
    weight: float
    head: HeadSpec
    target: str      # attribute of Batch holding the label

    def __post_init__(self):
        if self.weight <= 0:
            raise ArgumentError(f"task {self.id}: loss weight must be positive")

    @property
    def metrics(self) -> tuple[MetricSpec, ...]:
        if self.kind == "dense_seg":
            return (MetricSpec(self.id, "miou", False),)
        if self.kind == "point_class":
            return (MetricSpec(self.id, "accuracy", False),)
        return (MetricSpec(self.id, "l1", True),)

    def compute_loss(self, output: nx.Tensor, batch: Batch) -> nx.Tensor:
        y = getattr(batch, self.target)
        if self.loss == "cross_entropy":
            return nx.cross_entropy(output, y)
        return nx.l1_loss(output, y)


def default_tasks() -> list[TaskSpec]:
    return [
        TaskSpec("autoencode", "dense_regress", "l1", 0.1, HeadSpec(1, "dense", 1), "image"),
        TaskSpec("edge", "dense_regress", "l1", 1.0, HeadSpec(2, "dense", 1), "edge"),
        TaskSpec("seg", "dense_seg", "cross_entropy", 1.0, HeadSpec(3, "dense", N_SEG_CLASSES), "seg"),
        TaskSpec("count", "point_class", "cross_entropy", 2.0, HeadSpec(4, "point", N_COUNT_CLASSES), "count"),
    ]


def select_tasks(tasks: Sequence[TaskSpec], ids: Sequence[str]) -> list[TaskSpec]:
    """Subset of tasks, re-indexed so heads are numbered 1..len(ids)."""
    by_id = {t.id: t for t in tasks}
    out = []
    for i, tid in enumerate(ids, start=1):
        t = by_id[tid]
        h = t.head
        out.append(TaskSpec(t.id, t.kind, t.loss, t.weight, HeadSpec(i, h.kind, h.out_dim, h.hidden), t.target))
    return out


def mean_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_SEG_CLASSES) -> float:
    """Mean IoU over the classes present in `truth`."""
    conf = np.bincount(truth.reshape(-1) * n_classes + pred.reshape(-1),
                       minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(conf).astype(np.float64)
    present = conf.sum(axis=1) > 0
    union = conf.sum(axis=1) + conf.sum(axis=0) - tp
    return float(np.mean(tp[present] / union[present]))


def evaluate(outputs: Mapping[str, np.ndarray], scenes: Sequence[Scene],
             specs: Sequence[TaskSpec]) -> dict[str, dict[str, float]]:
    """Metric table {task: {metric: value}} from raw head outputs aligned with `scenes`."""
    if not scenes:
        raise ArgumentError("evaluate needs at least one scene")
    batch = collate(scenes)
    table = {}
    for t in specs:
        out = np.asarray(outputs[t.id])
        if len(out) != len(scenes):
            raise ArgumentError(f"{t.id}: {len(out)} outputs for {len(scenes)} scenes")
        if t.kind == "dense_seg":
            table[t.id] = {"miou": mean_iou(out.argmax(axis=-1), batch.seg)}
        elif t.kind == "point_class":
            table[t.id] = {"accuracy": float(np.mean(out.argmax(axis=-1) == batch.count))}
        else:
            table[t.id] = {"l1": float(np.mean(np.abs(out - getattr(batch, t.target))))}
    return table


def metric_specs(tasks: Sequence[TaskSpec]) -> list[MetricSpec]:
    return [m for t in tasks for m in t.metrics]
