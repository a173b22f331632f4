import numpy as np
import pytest

from ctadet.anchors import BoundingBox, iou3d
from ctadet.postproc import CandidateDetection, Stage, merge_tiles, nms, to_volume_coords
from ctadet.volume import PatchSpec
from oracles import nms_oracle


def cand(center, d, p, stage=Stage.DETECTOR):
    return CandidateDetection(BoundingBox(center, d), p, stage)


def random_candidates(rng, n, span=20.0):
    return [
        cand(tuple(rng.uniform(0, span, 3)), float(rng.uniform(1, 8)),
             float(rng.uniform(0, 1)))
        for _ in range(n)
    ]


class TestNms:
    def test_singleton_kept(self):
        c = cand((1, 2, 3), 4.0, 0.9)
        assert nms([c]) == [c]

    def test_overlapping_pair_keeps_higher(self):
        a = cand((0, 0, 0), 4.0, 0.9)
        b = cand((2, 0, 0), 4.0, 0.8)  # IoU 1/3 > 0.25
        assert nms([a, b]) == [a]

    def test_probability_threshold_strict(self):
        assert nms([cand((0, 0, 0), 4.0, 0.2)]) == []
        assert nms([cand((0, 0, 0), 4.0, 0.25)]) == []  # boundary dropped
        assert len(nms([cand((0, 0, 0), 4.0, 0.250001)])) == 1

    def test_iou_at_threshold_not_suppressed(self):
        a = cand((0.0, 0.0, 0.0), 4.0, 0.9)
        b = cand((2.4, 0.0, 0.0), 4.0, 0.8)
        assert iou3d(a.box, b.box) == pytest.approx(0.25, abs=1e-12)
        assert nms([a, b], iou_thresh=0.25) == [a, b]

    def test_idempotent(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            cands = random_candidates(rng, 15)
            once = nms(cands)
            assert nms(once) == once

    def test_no_surviving_pair_overlaps(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            kept = nms(random_candidates(rng, 20))
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    assert iou3d(a.box, b.box) <= 0.25

    def test_sorted_by_descending_probability(self):
        rng = np.random.default_rng(29)
        kept = nms(random_candidates(rng, 20))
        probs = [c.probability for c in kept]
        assert probs == sorted(probs, reverse=True)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(300):
            cands = random_candidates(rng, int(rng.integers(0, 21)))
            assert nms(cands) == nms_oracle(cands, iou3d, 0.25, 0.25)

    def test_probability_tie_broken_by_center(self):
        a = cand((5.0, 0.0, 0.0), 4.0, 0.8)
        b = cand((4.0, 0.0, 0.0), 4.0, 0.8)  # heavy overlap, same prob
        assert nms([a, b]) == nms([b, a]) == [b]


class TestToVolumeCoords:
    def test_zero_origin_identity(self):
        tile = PatchSpec((0, 0, 0), (96, 96, 96))
        c = cand((2, 2, 2), 4.0, 0.9)
        out = to_volume_coords([c], tile)
        assert out[0].box == c.box
        assert out[0].source_tile == tile

    def test_translation(self):
        tile = PatchSpec((80, 0, 0), (96, 96, 96))
        out = to_volume_coords([cand((2, 2, 2), 4.0, 0.9)], tile)
        assert out[0].box.center == (82.0, 2.0, 2.0)
        assert out[0].box.diameter == 4.0

    def test_roundtrip_with_inverse(self):
        tile = PatchSpec((10, 20, 30), (8, 8, 8))
        inverse = PatchSpec((-10, -20, -30), (8, 8, 8))
        c = cand((1.5, 2.5, 3.5), 2.0, 0.7)
        back = to_volume_coords(to_volume_coords([c], tile), inverse)
        assert back[0].box == c.box


class TestMergeTiles:
    def test_single_tile_equals_nms(self):
        tile = PatchSpec((16, 0, 0), (96, 96, 96))
        rng = np.random.default_rng(37)
        cands = random_candidates(rng, 10)
        assert merge_tiles([(tile, cands)]) == nms(to_volume_coords(cands, tile))

    def test_duplicate_across_tiles_suppressed(self):
        t1 = PatchSpec((0, 0, 0), (96, 96, 96))
        t2 = PatchSpec((80, 0, 0), (96, 96, 96))
        # same physical detection seen from both tiles
        a = cand((85.0, 10.0, 10.0), 6.0, 0.8)
        b = cand((5.0, 10.0, 10.0), 6.0, 0.7)
        merged = merge_tiles([(t1, [a]), (t2, [b])])
        assert len(merged) == 1
        assert merged[0].probability == 0.8
        assert merged[0].box.center == (85.0, 10.0, 10.0)

    def test_empty(self):
        assert merge_tiles([]) == []
        assert merge_tiles([(PatchSpec((0, 0, 0), (8, 8, 8)), [])]) == []

    def test_tile_order_invariant(self):
        rng = np.random.default_rng(41)
        tiles = [PatchSpec((o, 0, 0), (32, 32, 32)) for o in (0, 16, 32)]
        per_tile = [(t, random_candidates(rng, 6, span=32)) for t in tiles]
        base = merge_tiles(per_tile)
        assert merge_tiles(per_tile[::-1]) == base
        assert merge_tiles([per_tile[1], per_tile[2], per_tile[0]]) == base
