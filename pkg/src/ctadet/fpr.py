"""False-positive reduction stage: multi-scale patch extraction around
candidates, training-label rules, and probability averaging.

A classifier here is any callable mapping an :class:`FprPatchSet` to three
probabilities, one per patch scale; reference implementations live in
:mod:`ctadet.synth`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from .anchors import BoundingBox
from .postproc import CandidateDetection, Stage, nms
from .volume import (
    AIR_HU,
    HU_WINDOW,
    PatchSpec,
    Volume,
    extract_patch,
    normalize_hu,
    write_volume,
)

FPR_PATCH_SIZES = ((20, 20, 10), (32, 32, 16), (48, 48, 32))
DEFAULT_SENSITIVITY_FLOOR = 0.05

Classifier = Callable[["FprPatchSet"], Sequence[float]]


@dataclass(frozen=True)
class FprPatchSet:
    """Three patches of fixed sizes centered on one candidate, normalized
    to [-1, 1]."""

    candidate: CandidateDetection
    patches: tuple[Volume, Volume, Volume]

    def __post_init__(self):
        if len(self.patches) != 3:
            raise ValueError(f"expected exactly 3 patches, got {len(self.patches)}")

    @property
    def sizes(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(p.dims for p in self.patches)


class FprLabel(Enum):
    POSITIVE = "pos"
    NEGATIVE = "neg"
    EXCLUDED = "excluded"


def select_candidates(
    cands: Sequence[CandidateDetection],
    sensitivity_mode: bool = True,
    floor: float = DEFAULT_SENSITIVITY_FLOOR,
    iou_thresh: float = 0.25,
    prob_thresh: float = 0.25,
) -> list[CandidateDetection]:
    """Pick the locations to rescore.

    In sensitivity mode the NMS probability cut drops to ``floor`` so that
    as many true locations as possible reach the second stage; otherwise
    the normal threshold applies.
    """
    return nms(cands, iou_thresh=iou_thresh,
               prob_thresh=floor if sensitivity_mode else prob_thresh)


def extract_fpr_patches(
    v: Volume,
    cand: CandidateDetection,
    patch_sizes: Sequence[tuple[int, int, int]] = FPR_PATCH_SIZES,
    pad_value: float = AIR_HU,
    window: tuple[float, float] = HU_WINDOW,
) -> FprPatchSet:
    """Extract the three candidate-centered patches, padded and normalized.

    For even sizes the candidate center maps to patch index size/2.  The
    candidate center must lie inside the volume.
    """
    center = cand.box.center
    if not all(0 <= c < d for c, d in zip(center, v.dims)):
        raise ValueError(
            f"candidate center {center} outside volume bounds {v.dims}"
        )
    center_idx = tuple(int(math.floor(c + 0.5)) for c in center)
    patches = []
    for size in patch_sizes:
        origin = tuple(ci - s // 2 for ci, s in zip(center_idx, size))
        patch = extract_patch(v, PatchSpec(origin, size, pad_value))
        patches.append(normalize_hu(patch, window))
    return FprPatchSet(cand, tuple(patches))


def label_candidate(
    cand: CandidateDetection,
    lesions: Sequence[BoundingBox],
    patch_size: tuple[int, int, int],
) -> FprLabel:
    """Training label for a candidate at one patch scale.

    Positive when the candidate center lies inside any lesion box (closed
    intervals).  Otherwise excluded when some lesion center is within half
    the patch extent on every axis (too close to train on), else negative.
    """
    center = cand.box.center
    for lesion in lesions:
        if lesion.contains(center):
            return FprLabel.POSITIVE
    for lesion in lesions:
        if all(
            abs(c - lc) < s / 2.0
            for c, lc, s in zip(center, lesion.center, patch_size)
        ):
            return FprLabel.EXCLUDED
    return FprLabel.NEGATIVE


@dataclass(frozen=True)
class FprTrainingRecord:
    """One pre-extracted training patch: a candidate location at one scale
    with its training label and the patch file on disk."""

    volume_id: str
    center_vox: tuple[float, float, float]
    label: FprLabel
    scale: int
    patch_file: str


def export_training_patches(
    volume: Volume,
    candidates: Sequence[CandidateDetection],
    lesions: Sequence[BoundingBox],
    out_dir,
    patch_sizes: Sequence[tuple[int, int, int]] = FPR_PATCH_SIZES,
    pad_value: float = AIR_HU,
) -> list[FprTrainingRecord]:
    """Extract candidate-centered patches to disk for classifier training.

    Patches are stored raw (HU int16, one volume-file pair per patch scale)
    so normalization stays a training-time choice; labels follow
    :func:`label_candidate`, one per scale.  Candidates centered outside
    the volume are skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, cand in enumerate(candidates):
        center = cand.box.center
        if not all(0 <= c < d for c, d in zip(center, volume.dims)):
            continue
        center_idx = tuple(int(math.floor(c + 0.5)) for c in center)
        for scale, size in enumerate(patch_sizes):
            origin = tuple(ci - s // 2 for ci, s in zip(center_idx, size))
            patch = extract_patch(volume, PatchSpec(origin, size, pad_value))
            name = f"{volume.volume_id}-c{idx:04d}-s{scale}"
            write_volume(patch, out_dir / name)
            records.append(
                FprTrainingRecord(
                    volume_id=volume.volume_id,
                    center_vox=center,
                    label=label_candidate(cand, lesions, size),
                    scale=scale,
                    patch_file=f"{name}.vol.json",
                )
            )
    return records


def rescore(cand: CandidateDetection, probs: Sequence[float]) -> CandidateDetection:
    """Replace the candidate probability with the mean of the per-scale
    classifier outputs and mark the candidate as second-stage."""
    if len(probs) != 3:
        raise ValueError(f"expected 3 probabilities, got {len(probs)}")
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    return CandidateDetection(
        box=cand.box,
        probability=sum(float(p) for p in probs) / 3.0,
        stage=Stage.REDUCED,
        source_tile=cand.source_tile,
        scale_index=cand.scale_index,
    )
