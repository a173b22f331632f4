import math

import numpy as np
import pytest

from ctadet.anchors import (
    Anchor,
    AnchorStatus,
    BoundingBox,
    TargetVector,
    anchor_grid,
    anchor_index,
    assign_labels,
    decode,
    encode,
    iou3d,
)
from oracles import iou3d_oracle


def random_lattice_box(rng):
    # integer corners so the cell-counting oracle is exact
    lo = rng.integers(-8, 9, 3)
    d = int(rng.integers(1, 9))
    return BoundingBox(tuple(lo + d / 2.0), d)


class TestBoundingBox:
    def test_invalid_diameter(self):
        with pytest.raises(ValueError):
            BoundingBox((0, 0, 0), 0.0)

    def test_contains_is_closed(self):
        box = BoundingBox((0, 0, 0), 4.0)
        assert box.contains((2.0, 0.0, 0.0))
        assert not box.contains((2.0000001, 0.0, 0.0))


class TestIou3d:
    def test_identical(self):
        b = BoundingBox((1.5, -2.0, 3.0), 4.2)
        assert iou3d(b, b) == 1.0

    def test_disjoint(self):
        a = BoundingBox((0, 0, 0), 4.0)
        b = BoundingBox((10, 0, 0), 4.0)
        assert iou3d(a, b) == 0.0

    def test_worked_example(self):
        a = BoundingBox((0, 0, 0), 4.0)
        b = BoundingBox((2, 0, 0), 4.0)
        # intersection 2*4*4 = 32, union 64 + 64 - 32 = 96
        assert iou3d(a, b) == pytest.approx(32 / 96, abs=1e-12)

    def test_matches_cell_counting_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(500):
            a = random_lattice_box(rng)
            b = random_lattice_box(rng)
            assert iou3d(a, b) == pytest.approx(float(iou3d_oracle(a, b)), abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            a = BoundingBox(tuple(rng.uniform(-5, 5, 3)), rng.uniform(0.5, 8))
            b = BoundingBox(tuple(rng.uniform(-5, 5, 3)), rng.uniform(0.5, 8))
            v = iou3d(a, b)
            assert v == iou3d(b, a)
            assert 0.0 <= v <= 1.0
            assert iou3d(a, a) == 1.0


class TestAnchorGrid:
    def test_default_count(self):
        anchors = anchor_grid()
        assert len(anchors) == 24 ** 3 * 3

    def test_first_grid_point_position(self):
        anchors = anchor_grid()
        assert anchors[0].grid_index == (0, 0, 0)
        assert anchors[0].position == (2.0, 2.0, 2.0)

    def test_unit_factor_positions(self):
        anchors = anchor_grid(patch_size=96, grid_size=96, anchor_sizes=[5.0])
        assert anchors[0].position == (0.5, 0.5, 0.5)
        assert anchors[-1].position == (95.5, 95.5, 95.5)

    def test_indivisible_sizes_rejected(self):
        with pytest.raises(ValueError):
            anchor_grid(patch_size=96, grid_size=25)

    def test_anchor_index_agrees_with_list_order(self):
        anchors = anchor_grid(patch_size=8, grid_size=4, anchor_sizes=[3.0, 6.0])
        for flat, anchor in enumerate(anchors):
            assert anchor_index(anchor.grid_index, anchor.scale_index, 4, 2) == flat


class TestEncodeDecode:
    def test_zero_case(self):
        a = Anchor((0, 0, 0), (48.0, 48.0, 48.0), 10.0, 1)
        t = encode(BoundingBox((48, 48, 48), 10.0), a, 1.0)
        assert t.as_tuple() == (1.0, 0.0, 0.0, 0.0, 0.0)

    def test_offset_example(self):
        a = Anchor((0, 0, 0), (48.0, 48.0, 48.0), 10.0, 1)
        t = encode(BoundingBox((53, 48, 48), 10.0), a, 0.8)
        assert t.as_tuple() == (0.8, 0.5, 0.0, 0.0, 0.0)

    def test_log_size_ratio(self):
        a = Anchor((0, 0, 0), (0.0, 0.0, 0.0), 10.0, 1)
        t = encode(BoundingBox((0, 0, 0), 10.0 * math.e), a, 0.5)
        assert t.ds == pytest.approx(1.0, abs=1e-12)

    def test_decode_zero_offsets(self):
        a = Anchor((0, 0, 0), (10.0, 20.0, 30.0), 20.0, 2)
        box, p = decode(TargetVector(0.9, 0, 0, 0, 0), a)
        assert box == BoundingBox((10.0, 20.0, 30.0), 20.0)
        assert p == 0.9

    def test_decode_ds_log2(self):
        a = Anchor((0, 0, 0), (0.0, 0.0, 0.0), 5.0, 0)
        box, _ = decode(TargetVector(0.5, 0, 0, 0, math.log(2.0)), a)
        assert box.diameter == pytest.approx(10.0, rel=1e-12)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(11)
        for _ in range(2000):
            anchor = Anchor(
                (0, 0, 0),
                tuple(rng.uniform(0, 96, 3)),
                float(rng.choice([5.0, 10.0, 20.0])),
                0,
            )
            box = BoundingBox(tuple(rng.uniform(0, 96, 3)), rng.uniform(0.5, 30))
            p = float(rng.uniform(0, 1))
            out_box, out_p = decode(encode(box, anchor, p), anchor)
            assert out_p == p
            for got, want in zip(out_box.center, box.center):
                assert got == pytest.approx(want, rel=1e-9, abs=1e-9)
            assert out_box.diameter == pytest.approx(box.diameter, rel=1e-9)


class TestAssignLabels:
    def grid(self):
        return anchor_grid(patch_size=32, grid_size=8, anchor_sizes=[4.0, 8.0])

    def test_no_lesions_all_negative(self):
        labels = assign_labels(self.grid(), [])
        assert all(l.status is AnchorStatus.NEGATIVE for l in labels)

    def test_coincident_lesion_positive(self):
        anchors = self.grid()
        lesion = anchors[17].box
        labels = assign_labels(anchors, [lesion])
        assert labels[17].status is AnchorStatus.POSITIVE
        assert labels[17].matched_box == lesion
        assert labels[17].target.as_tuple() == (1.0, 0.0, 0.0, 0.0, 0.0)

    def test_borderline_iou_ignored(self):
        # build anchors so one has IoU exactly 1/3 with the lesion
        anchor = Anchor((0, 0, 0), (0.0, 0.0, 0.0), 4.0, 0)
        lesion = BoundingBox((2.0, 0.0, 0.0), 4.0)
        assert iou3d(anchor.box, lesion) == pytest.approx(1 / 3, abs=1e-12)
        labels = assign_labels([anchor], [lesion])
        assert labels[0].status is AnchorStatus.IGNORED
        assert labels[0].matched_box is None

    def test_statuses_partition(self):
        rng = np.random.default_rng(3)
        anchors = self.grid()
        lesions = [
            BoundingBox(tuple(rng.uniform(0, 32, 3)), rng.uniform(1, 10))
            for _ in range(4)
        ]
        labels = assign_labels(anchors, lesions)
        assert len(labels) == len(anchors)
        for label in labels:
            assert label.status in (
                AnchorStatus.POSITIVE,
                AnchorStatus.NEGATIVE,
                AnchorStatus.IGNORED,
            )

    def test_positive_set_invariant_under_lesion_permutation(self):
        rng = np.random.default_rng(5)
        anchors = self.grid()
        lesions = [
            BoundingBox(tuple(rng.uniform(0, 32, 3)), rng.uniform(2, 12))
            for _ in range(5)
        ]
        a = assign_labels(anchors, lesions)
        b = assign_labels(anchors, lesions[::-1])
        assert [l.status for l in a] == [l.status for l in b]
        for la, lb in zip(a, b):
            if la.status is AnchorStatus.POSITIVE:
                # may differ only between exactly-tied lesions
                if la.matched_box != lb.matched_box:
                    anchor_box = anchors[a.index(la)].box
                    assert iou3d(anchor_box, la.matched_box) == pytest.approx(
                        iou3d(anchor_box, lb.matched_box)
                    )

    def test_tie_broken_by_lowest_lesion_index(self):
        anchor = Anchor((0, 0, 0), (0.0, 0.0, 0.0), 4.0, 0)
        twin_a = BoundingBox((0.5, 0.0, 0.0), 4.0)
        twin_b = BoundingBox((-0.5, 0.0, 0.0), 4.0)
        labels = assign_labels([anchor], [twin_a, twin_b])
        assert labels[0].status is AnchorStatus.POSITIVE
        assert labels[0].matched_box == twin_a

    def test_centered_lesion_positive_iff_iou_exceeds_half(self):
        # sweep diameters for a lesion centered on the anchor; status must
        # flip exactly where the IoU crosses the positive threshold
        anchor = Anchor((0, 0, 0), (16.0, 16.0, 16.0), 10.0, 1)
        for d in np.linspace(2.0, 30.0, 57):
            lesion = BoundingBox((16.0, 16.0, 16.0), float(d))
            status = assign_labels([anchor], [lesion])[0].status
            v = iou3d(anchor.box, lesion)
            if v > 0.5:
                assert status is AnchorStatus.POSITIVE
            elif v < 0.02:
                assert status is AnchorStatus.NEGATIVE
            else:
                assert status is AnchorStatus.IGNORED
