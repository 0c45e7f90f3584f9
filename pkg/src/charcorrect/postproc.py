"""From per-pixel class probability maps to character and word boxes.

Pipeline: per-pixel argmax ("maxout") -> 8-connected same-label components
-> greedy non-maxima suppression -> grouping of characters into words.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import ShapeError, check_probability_rows
from .alphabet import EMPTY, N_CLASSES, index_char
from .disjoint import link_components
from .tensor import parse_tensor

NMS_THRESHOLD = 0.30
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CharBox:
    row0: int
    col0: int
    row1: int
    col1: int  # inclusive corners
    label: int
    confidence: float

    def __post_init__(self):
        if self.row0 > self.row1 or self.col0 > self.col1:
            raise ValueError(f"box corners out of order: {self}")
        if self.label == EMPTY:
            raise ValueError("a character box cannot carry the empty label")

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.row0 + self.row1) / 2.0, (self.col0 + self.col1) / 2.0


@dataclass
class Component:
    label: int
    pixels: np.ndarray  # k x 2 (row, col)
    bbox: tuple[int, int, int, int]
    mean_confidence: float

    def to_box(self) -> CharBox:
        return CharBox(*self.bbox, label=self.label, confidence=self.mean_confidence)


def maxout_labels(maps) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax of a ``37 x H x W`` map (ties to the lowest class) and its value."""
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim != 3 or m.shape[0] != N_CLASSES:
        raise ShapeError(f"expected {N_CLASSES} x H x W maps, got shape {m.shape}")
    check_probability_rows(np.moveaxis(m, 0, -1), "pixel maps")
    labels = m.argmax(axis=0)
    conf = np.take_along_axis(m, labels[None], axis=0)[0]
    return labels, conf


def connected_components(labels, confidence=None, ignore: int = EMPTY) -> list[Component]:
    """Maximal 8-connected regions of equal label, skipping ``ignore``.

    Components are ordered by label, then by first pixel in row-major order.
    """
    labels = np.asarray(labels)
    conf = np.ones(labels.shape) if confidence is None else np.asarray(confidence, dtype=np.float64)
    comps = []
    for lab in np.unique(labels):
        if lab == ignore:
            continue
        regions, n = ndimage.label(labels == lab, structure=_EIGHT)
        for k in range(1, n + 1):
            pix = np.argwhere(regions == k)
            r0, c0 = pix.min(axis=0)
            r1, c1 = pix.max(axis=0)
            mean = float(conf[pix[:, 0], pix[:, 1]].mean())
            comps.append(Component(int(lab), pix, (int(r0), int(c0), int(r1), int(c1)), mean))
    return comps


def overlap_ratio(a: CharBox, b: CharBox) -> float:
    """Intersection over union of two inclusive pixel boxes."""
    ih = min(a.row1, b.row1) - max(a.row0, b.row0) + 1
    iw = min(a.col1, b.col1) - max(a.col0, b.col0) + 1
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    return inter / (a.area + b.area - inter)


def nms(boxes, threshold: float = NMS_THRESHOLD, overlap=overlap_ratio) -> list[CharBox]:
    """Greedy suppression: visit by descending confidence, drop boxes overlapping a kept one at >= threshold."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[CharBox] = []
    for i in order:
        if all(overlap(boxes[i], k) < threshold for k in kept):
            kept.append(boxes[i])
    return kept


def same_word(a: CharBox, b: CharBox) -> bool:
    """Euclidean distance between centers is below the narrower box's width (column extent)."""
    (ra, ca), (rb, cb) = a.center, b.center
    return math.hypot(ra - rb, ca - cb) < min(a.width, b.width)


@dataclass
class WordBox:
    bbox: tuple[int, int, int, int]
    chars: list[CharBox]

    @property
    def text(self) -> str:
        return "".join(index_char(c.label) for c in self.chars)


def merge_to_words(boxes, predicate=same_word) -> list[WordBox]:
    """Transitive closure of ``predicate``; members ordered by center column, then row."""
    boxes = list(boxes)
    words = []
    for group in link_components(len(boxes), lambda i, j: predicate(boxes[i], boxes[j])):
        members = sorted((boxes[i] for i in group), key=lambda b: (b.center[1], b.center[0]))
        bbox = (
            min(b.row0 for b in members), min(b.col0 for b in members),
            max(b.row1 for b in members), max(b.col1 for b in members),
        )
        words.append(WordBox(bbox, members))
    return words


def detect_words(maps, threshold: float = NMS_THRESHOLD) -> list[WordBox]:
    labels, conf = maxout_labels(maps)
    boxes = [c.to_box() for c in connected_components(labels, conf)]
    return merge_to_words(nms(boxes, threshold))


def write_boxes_csv(path, words) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "confidence", "row0", "col0", "row1", "col1", "word_id"])
        for word_id, word in enumerate(words):
            for b in word.chars:
                w.writerow([index_char(b.label), repr(b.confidence), b.row0, b.col0, b.row1, b.col1, word_id])


def read_pixel_maps(path) -> np.ndarray:
    """A ``TENSOR 3 37 H W`` document."""
    with open(path) as fh:
        maps = parse_tensor(fh.read())
    if maps.ndim != 3 or maps.shape[0] != N_CLASSES:
        raise ShapeError(f"{path}: expected a 37 x H x W tensor, got {maps.shape}")
    return maps
