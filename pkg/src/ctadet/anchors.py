"""Anchor grids, 3D cube geometry, and box <-> target-vector encoding.

Detections and ground truth share one box model: an axis-aligned cube
given by its center (voxel coordinates) and edge length ("diameter").
Anchors are reference cubes tiled on a coarse grid inside a patch; a
detection is represented relative to an anchor as a 5-vector
(probability, normalized center offsets, log size ratio).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

DEFAULT_PATCH_SIZE = 96
DEFAULT_GRID_SIZE = 24
DEFAULT_ANCHOR_SIZES = (5.0, 10.0, 20.0)
DEFAULT_POS_IOU = 0.5
DEFAULT_NEG_IOU = 0.02


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned cube: center (x, y, z) in voxels, edge length ``diameter``."""

    center: tuple[float, float, float]
    diameter: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "diameter", float(self.diameter))
        if len(self.center) != 3:
            raise ValueError("box center must have 3 coordinates")
        if self.diameter <= 0:
            raise ValueError(f"box diameter must be positive, got {self.diameter}")

    @property
    def lo(self) -> tuple[float, float, float]:
        h = self.diameter / 2.0
        return tuple(c - h for c in self.center)

    @property
    def hi(self) -> tuple[float, float, float]:
        h = self.diameter / 2.0
        return tuple(c + h for c in self.center)

    @property
    def volume(self) -> float:
        return self.diameter ** 3

    def contains(self, point: Sequence[float]) -> bool:
        """Closed-interval containment: points on a face count as inside."""
        return all(l <= p <= h for l, p, h in zip(self.lo, point, self.hi))

    def translated(self, offset: Sequence[float]) -> "BoundingBox":
        return BoundingBox(
            tuple(c + o for c, o in zip(self.center, offset)), self.diameter
        )


@dataclass(frozen=True)
class Lesion:
    """A ground-truth box plus free-form string labels used for stratified
    evaluation (e.g. size class, location)."""

    box: BoundingBox
    labels: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Anchor:
    """Reference cube of size ``anchor_size`` centered at an output-grid point."""

    grid_index: tuple[int, int, int]
    position: tuple[float, float, float]
    anchor_size: float
    scale_index: int

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.position, self.anchor_size)


@dataclass(frozen=True)
class TargetVector:
    """Per-anchor network output: probability plus normalized geometry.

    dx, dy, dz are center offsets divided by the anchor size; ds is the
    natural log of the box diameter over the anchor size.
    """

    p: float
    dx: float
    dy: float
    dz: float
    ds: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.p}")

    @property
    def geometry(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dz, self.ds)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.p, self.dx, self.dy, self.dz, self.ds)


class AnchorStatus(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


@dataclass(frozen=True)
class AnchorLabel:
    """Training assignment for one anchor.

    Positive anchors carry the matched ground-truth box and its encoded
    target; negative and ignored anchors carry neither.
    """

    status: AnchorStatus
    matched_box: Optional[BoundingBox] = None
    target: Optional[TargetVector] = None

    def __post_init__(self):
        if self.status is AnchorStatus.POSITIVE:
            if self.matched_box is None or self.target is None:
                raise ValueError("positive label requires matched_box and target")
        elif self.matched_box is not None or self.target is not None:
            raise ValueError(f"{self.status.value} label must not carry a match")


def anchor_grid(
    patch_size: int = DEFAULT_PATCH_SIZE,
    grid_size: int = DEFAULT_GRID_SIZE,
    anchor_sizes: Sequence[float] = DEFAULT_ANCHOR_SIZES,
) -> list[Anchor]:
    """Build the full anchor list for one patch.

    Grid points are cell centers: position = (index + 0.5) * downsample
    factor, with factor = patch_size / grid_size.  Anchors are ordered
    grid-index-major (x, then y, then z) with scales innermost, matching
    :func:`anchor_index`.
    """
    if patch_size % grid_size != 0:
        raise ValueError(
            f"patch size {patch_size} not divisible by grid size {grid_size}"
        )
    factor = patch_size // grid_size
    anchors = []
    for i in range(grid_size):
        for j in range(grid_size):
            for k in range(grid_size):
                pos = ((i + 0.5) * factor, (j + 0.5) * factor, (k + 0.5) * factor)
                for s, size in enumerate(anchor_sizes):
                    anchors.append(Anchor((i, j, k), pos, float(size), s))
    return anchors


def anchor_index(
    grid_index: tuple[int, int, int],
    scale_index: int,
    grid_size: int,
    n_scales: int,
) -> int:
    """Flat position of an anchor in the list built by :func:`anchor_grid`."""
    i, j, k = grid_index
    return ((i * grid_size + j) * grid_size + k) * n_scales + scale_index


def iou3d(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two axis-aligned cubes; 0 when disjoint."""
    inter = 1.0
    vol_a = 1.0
    vol_b = 1.0
    # all three volumes use the same corner arithmetic so identical boxes
    # yield exactly 1.0
    for a_lo, a_hi, b_lo, b_hi in zip(a.lo, a.hi, b.lo, b.hi):
        lo = max(a_lo, b_lo)
        hi = min(a_hi, b_hi)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
        vol_a *= a_hi - a_lo
        vol_b *= b_hi - b_lo
    return inter / (vol_a + vol_b - inter)


def encode(box: BoundingBox, anchor: Anchor, p: float) -> TargetVector:
    """Express a box relative to an anchor: offsets over anchor size,
    log size ratio."""
    l = anchor.anchor_size
    return TargetVector(
        p,
        (box.center[0] - anchor.position[0]) / l,
        (box.center[1] - anchor.position[1]) / l,
        (box.center[2] - anchor.position[2]) / l,
        math.log(box.diameter / l),
    )


def decode(t: TargetVector, anchor: Anchor) -> tuple[BoundingBox, float]:
    """Exact inverse of :func:`encode`."""
    l = anchor.anchor_size
    center = (
        anchor.position[0] + t.dx * l,
        anchor.position[1] + t.dy * l,
        anchor.position[2] + t.dz * l,
    )
    return BoundingBox(center, l * math.exp(t.ds)), t.p


def assign_labels(
    anchors: Sequence[Anchor],
    lesions: Sequence[BoundingBox],
    pos_iou: float = DEFAULT_POS_IOU,
    neg_iou: float = DEFAULT_NEG_IOU,
) -> list[AnchorLabel]:
    """Label each anchor by its best IoU against the ground-truth boxes.

    max IoU > pos_iou: positive, matched to the argmax lesion (ties broken
    by lowest lesion index) with its encoded target.  max IoU < neg_iou:
    negative.  Otherwise ignored (borderline overlap, excluded from
    training).
    """
    if pos_iou <= neg_iou:
        raise ValueError("pos_iou must exceed neg_iou")
    labels = []
    for anchor in anchors:
        best_iou = 0.0
        best_idx = -1
        abox = anchor.box
        for idx, lesion in enumerate(lesions):
            v = iou3d(abox, lesion)
            if v > best_iou:
                best_iou = v
                best_idx = idx
        if best_iou > pos_iou:
            box = lesions[best_idx]
            labels.append(
                AnchorLabel(AnchorStatus.POSITIVE, box, encode(box, anchor, 1.0))
            )
        elif best_iou < neg_iou:
            labels.append(AnchorLabel(AnchorStatus.NEGATIVE))
        else:
            labels.append(AnchorLabel(AnchorStatus.IGNORED))
    return labels
