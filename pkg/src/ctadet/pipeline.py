"""Volume-level pipeline wiring: tiled detection with anchor decoding and
cross-tile NMS, then candidate rescoring by a patch classifier.

A detector is pluggable as a *tile scorer*: given a normalized patch and
its anchor list, it returns an (n_anchors, 5) prediction array of
(probability, dx, dy, dz, ds) rows.  A scorer factory builds one scorer
per volume; the shipped factory wraps the ground-truth oracle detector so
the whole chain (tiling, decoding, NMS, rescoring) runs without a neural
network.
"""

from __future__ import annotations

from typing import Callable, Protocol, Sequence

import numpy as np

from .anchors import (
    Anchor,
    BoundingBox,
    TargetVector,
    anchor_grid,
    anchor_index,
    decode,
    encode,
    iou3d,
)
from .config import RunConfig
from .fpr import extract_fpr_patches, rescore, select_candidates
from .postproc import CandidateDetection, Stage, merge_tiles
from .synth import OracleDetectorSpec, oracle_detect
from .volume import (
    PatchSpec,
    Volume,
    extract_patch,
    normalize_hu,
    tile_volume,
    truncate_cranial,
)


class TileScorer(Protocol):
    def score(
        self, patch: Volume, tile: PatchSpec, anchors: Sequence[Anchor]
    ) -> np.ndarray: ...


ScorerFactory = Callable[[Volume, Sequence[BoundingBox], RunConfig, int], TileScorer]


class OracleTileScorer:
    """Projects known candidate boxes onto the anchor grid of each tile.

    Each candidate whose center falls inside a tile is encoded against the
    best-overlapping anchor at the nearest grid point, so decoding on the
    other side reproduces the candidate box exactly and candidates in tile
    overlaps deduplicate under NMS.
    """

    def __init__(
        self,
        candidates: Sequence[CandidateDetection],
        grid_size: int,
        downsample: int,
        n_scales: int,
    ):
        self.candidates = list(candidates)
        self.grid_size = grid_size
        self.downsample = downsample
        self.n_scales = n_scales

    def score(
        self, patch: Volume, tile: PatchSpec, anchors: Sequence[Anchor]
    ) -> np.ndarray:
        preds = np.zeros((len(anchors), 5))
        for cand in self.candidates:
            local = tuple(c - o for c, o in zip(cand.box.center, tile.origin))
            if not all(0 <= lc < s for lc, s in zip(local, tile.size)):
                continue
            gi = tuple(
                min(max(int(round(lc / self.downsample - 0.5)), 0), self.grid_size - 1)
                for lc in local
            )
            local_box = BoundingBox(local, cand.box.diameter)
            base = anchor_index(gi, 0, self.grid_size, self.n_scales)
            best = max(
                range(base, base + self.n_scales),
                key=lambda ai: iou3d(anchors[ai].box, local_box),
            )
            if cand.probability > preds[best, 0]:
                t = encode(local_box, anchors[best], cand.probability)
                preds[best] = t.as_tuple()
        return preds


def oracle_scorer_factory(
    volume: Volume,
    lesions: Sequence[BoundingBox],
    cfg: RunConfig,
    seed: int,
) -> OracleTileScorer:
    """Scorer factory backed by :func:`ctadet.synth.oracle_detect`."""
    spec = OracleDetectorSpec(
        hit_prob=cfg.detector_hit_prob,
        center_jitter_sigma=cfg.detector_center_jitter,
        diameter_jitter_ratio=cfg.detector_diameter_jitter,
        fp_per_volume=cfg.detector_fp_per_volume,
        fp_prob_range=cfg.detector_fp_prob_range,
        tp_prob_range=cfg.detector_tp_prob_range,
        seed=seed,
    )
    candidates = oracle_detect(lesions, spec, volume.dims)
    if cfg.patch_size[0] % cfg.grid_size != 0:
        raise ValueError(
            f"patch size {cfg.patch_size[0]} not divisible by grid {cfg.grid_size}"
        )
    return OracleTileScorer(
        candidates,
        grid_size=cfg.grid_size,
        downsample=cfg.patch_size[0] // cfg.grid_size,
        n_scales=len(cfg.anchor_sizes),
    )


def _decode_grid(
    preds: np.ndarray,
    anchors: Sequence[Anchor],
    floor: float,
    tile: PatchSpec,
) -> list[CandidateDetection]:
    out = []
    for row, anchor in zip(preds, anchors):
        p = float(row[0])
        if p <= floor:
            continue
        box, prob = decode(TargetVector(p, *(float(x) for x in row[1:])), anchor)
        out.append(
            CandidateDetection(
                box, prob, Stage.DETECTOR, source_tile=tile,
                scale_index=anchor.scale_index,
            )
        )
    return out


def detect_volume(
    volume: Volume,
    lesions: Sequence[BoundingBox],
    cfg: RunConfig,
    seed: int,
    scorer_factory: ScorerFactory = oracle_scorer_factory,
) -> list[CandidateDetection]:
    """Run preprocessing, tiling, per-tile scoring, decoding, and NMS merge.

    Candidates come back in the coordinates of the *input* volume even when
    cranial truncation removed caudal slices.  The probability floor is the
    high-sensitivity one; downstream stages re-threshold as needed.
    """
    v = volume
    z_offset = 0
    if v.cranial_axis is not None:
        truncated = truncate_cranial(v, cfg.cranial_max_extent_mm)
        if v.cranial_axis == "+z":
            z_offset = v.dims[2] - truncated.dims[2]
        v = truncated
    elif v.dims[2] * v.spacing[2] > cfg.cranial_max_extent_mm:
        raise ValueError(
            f"volume {v.volume_id!r} exceeds the {cfg.cranial_max_extent_mm} mm "
            "extent limit but lacks the cranial-direction flag"
        )
    shifted = [
        BoundingBox(
            (b.center[0], b.center[1], b.center[2] - z_offset), b.diameter
        )
        for b in lesions
    ]
    scorer = scorer_factory(v, shifted, cfg, seed)
    anchors = anchor_grid(cfg.patch_size[0], cfg.grid_size, cfg.anchor_sizes)
    tiles = tile_volume(v, cfg.patch_size, cfg.tile_overlap)
    per_tile = []
    for tile in tiles:
        patch = normalize_hu(extract_patch(v, tile), cfg.hu_window)
        preds = scorer.score(patch, tile, anchors)
        per_tile.append((tile, _decode_grid(preds, anchors, cfg.sensitivity_floor, tile)))
    merged = merge_tiles(per_tile, cfg.nms_iou, cfg.sensitivity_floor)
    if z_offset:
        merged = [
            CandidateDetection(
                BoundingBox(
                    (c.box.center[0], c.box.center[1], c.box.center[2] + z_offset),
                    c.box.diameter,
                ),
                c.probability,
                c.stage,
                c.source_tile,
                c.scale_index,
            )
            for c in merged
        ]
    return merged


def reduce_volume(
    volume: Volume,
    candidates: Sequence[CandidateDetection],
    classifier,
    cfg: RunConfig,
) -> list[CandidateDetection]:
    """Rescore first-stage candidates with a patch classifier.

    Candidates are re-selected at the high-sensitivity floor, the three
    fixed-size patches extracted around each, and the candidate probability
    replaced by the classifier's averaged output.  Candidates whose center
    falls outside the volume cannot be rescored and are dropped.
    """
    selected = select_candidates(
        candidates,
        sensitivity_mode=True,
        floor=cfg.sensitivity_floor,
        iou_thresh=cfg.nms_iou,
        prob_thresh=cfg.nms_prob,
    )
    out = []
    for cand in selected:
        if not all(0 <= c < d for c, d in zip(cand.box.center, volume.dims)):
            continue
        patch_set = extract_fpr_patches(
            volume, cand, cfg.fpr_patch_sizes, window=cfg.hu_window
        )
        out.append(rescore(cand, classifier(patch_set)))
    return out
