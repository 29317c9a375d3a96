"""Multi-annotation mask algebra.

Builds the learning targets of the network from an annotation set: the union
of all annotators' masks, their intersection (high confidence, HC), the
disagreement ring (low confidence, LC), a single reference annotation, and the
three-level Multi-Confidence Mask (MCM).

Masks are plain ``numpy`` arrays of 0/1 values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

BENIGN = "benign"
MALIGNANT = "malignant"
MALIGNANCY_LABELS = (BENIGN, MALIGNANT)
MAX_ANNOTATIONS = 4

# discrete MCM levels
BACKGROUND = 0.0
LOW_CONFIDENCE = 0.5
HIGH_CONFIDENCE = 1.0


def as_binary_mask(mask, shape=None) -> np.ndarray:
    """Validate ``mask`` as a 2-D {0,1} array and return it as ``uint8``."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidInputError(f"mask shape {arr.shape} does not match {tuple(shape)}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def _stack(masks: Sequence) -> np.ndarray:
    if masks is None or len(masks) == 0:
        raise InvalidInputError("at least one mask is required")
    first = as_binary_mask(masks[0])
    return np.stack([first] + [as_binary_mask(m, first.shape) for m in masks[1:]])


def union(masks: Sequence) -> np.ndarray:
    """Pixelwise OR of all masks."""
    return _stack(masks).max(axis=0)


def intersection(masks: Sequence) -> np.ndarray:
    """Pixelwise AND of all masks."""
    return _stack(masks).min(axis=0)


def lc_region(masks: Sequence) -> np.ndarray:
    """Pixels marked by at least one annotator but not by all of them."""
    stack = _stack(masks)
    return (stack.max(axis=0) - stack.min(axis=0)).astype(np.uint8)


def hc_region(masks: Sequence) -> np.ndarray:
    """Alias of :func:`intersection`; the region every annotator agrees on."""
    return intersection(masks)


def _pair_dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def select_reference(masks: Sequence) -> tuple[np.ndarray, int]:
    """Pick the annotation with the highest mean Dice against the others.

    Ties go to the lowest index. A single annotation is returned as is.
    """
    stack = _stack(masks)
    n = stack.shape[0]
    if n == 1:
        return stack[0].copy(), 0
    dice = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dice[i, j] = dice[j, i] = _pair_dice(stack[i], stack[j])
    mean_other = (dice.sum(axis=1) - 1.0) / (n - 1)
    best = int(np.argmax(mean_other))  # argmax returns the first maximum
    return stack[best].copy(), best


@dataclass(frozen=True)
class MultiConfidenceMask:
    """Fused union/intersection map.

    ``soft`` is the continuous map in [0, 1]; ``discrete`` snaps it onto
    {0, 0.5, 1} (background, LC, HC).
    """

    soft: np.ndarray
    discrete: np.ndarray

    @property
    def hc(self) -> np.ndarray:
        return (self.discrete == HIGH_CONFIDENCE).astype(np.uint8)

    @property
    def lc(self) -> np.ndarray:
        return (self.discrete == LOW_CONFIDENCE).astype(np.uint8)


def discretize_mcm(soft, low: float = 0.25, high: float = 0.75) -> np.ndarray:
    """Map soft MCM values onto the three canonical levels."""
    soft = np.asarray(soft)
    out = np.zeros_like(soft, dtype=np.float32)
    out[soft >= low] = LOW_CONFIDENCE
    out[soft >= high] = HIGH_CONFIDENCE
    return out


def build_mcm(union_map, inter_map) -> MultiConfidenceMask:
    """Fuse a union map and an intersection map into a Multi-Confidence Mask.

    The sum is normalised by 2 so binary inputs land exactly on {0, 0.5, 1}.
    Works on both ground-truth masks and predicted probability maps.
    """
    u = np.asarray(union_map, dtype=np.float32)
    i = np.asarray(inter_map, dtype=np.float32)
    if u.ndim != 2 or u.shape != i.shape:
        raise InvalidInputError(f"union/intersection maps must be equal 2-D shapes, got {u.shape} and {i.shape}")
    for name, arr in (("union", u), ("intersection", i)):
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise InvalidInputError(f"{name} map values must lie in [0, 1]")
    soft = (u + i) / np.float32(2.0)
    return MultiConfidenceMask(soft=soft, discrete=discretize_mcm(soft))


@dataclass
class AnnotationSet:
    """A CT patch in HU with up to four expert masks and a malignancy label.

    ``masks`` may be empty for unlabelled samples used only at inference time;
    every target-building method requires at least one mask.
    """

    image: np.ndarray
    masks: list = field(default_factory=list)
    malignancy: Optional[str] = None
    sample_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2 or 0 in self.image.shape:
            raise InvalidInputError(f"image must be a non-empty 2-D array, got shape {self.image.shape}")
        if len(self.masks) > MAX_ANNOTATIONS:
            raise InvalidInputError(f"at most {MAX_ANNOTATIONS} annotations are supported, got {len(self.masks)}")
        self.masks = [as_binary_mask(m, self.image.shape) for m in self.masks]
        if self.malignancy is not None and self.malignancy not in MALIGNANCY_LABELS:
            raise InvalidInputError(f"malignancy must be one of {MALIGNANCY_LABELS} or None, got {self.malignancy!r}")

    @property
    def n_annotations(self) -> int:
        return len(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def malignancy_index(self) -> Optional[int]:
        if self.malignancy is None:
            return None
        return MALIGNANCY_LABELS.index(self.malignancy)

    def targets(self) -> dict[str, np.ndarray]:
        """Union, intersection and reference targets as float32 maps."""
        ref, _ = select_reference(self.masks)
        return {
            "union": union(self.masks).astype(np.float32),
            "inter": intersection(self.masks).astype(np.float32),
            "ref": ref.astype(np.float32),
        }

    def mcm(self) -> MultiConfidenceMask:
        return build_mcm(union(self.masks), intersection(self.masks))
