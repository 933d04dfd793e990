import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import random_instance, simota_reference

from vidbird.assignment import (
    AnchorGrid,
    Label,
    assign,
    center_gaussian_assign,
    center_gaussian_weights,
    preset_candidates,
    shrink_box_assign,
    simota_oc_assign,
)
from vidbird.boxes import BoundingBox, box_iou

# -- independent reference -------------------------------------------------


def test_matches_reference_on_random_instances():
    rng = np.random.default_rng(1234)
    mismatches = 0
    for _ in range(1000):
        grid, gts, preds = random_instance(rng)
        assert grid.size <= 200
        res = simota_oc_assign(grid, np.asarray(gts).reshape(-1, 4), preds)
        labels, owner = simota_reference([tuple(p) for p in grid.points()], gts, [tuple(p) for p in preds])
        if list(res.labels) != [int(v) for v in labels] or list(res.gt_index) != owner:
            mismatches += 1
    assert mismatches == 0


# -- worked cases ------------------------------------------------------------


def _grid_with_anchors(n):
    return AnchorGrid(1, n)


def test_single_gt_takes_ceil_of_row_sum():
    grid = _grid_with_anchors(3)  # anchors at x = 1, 3, 5; y = 1
    gt = np.array([[0.0, 0.0, 6.0, 2.0]])
    # boxes centred on the GT with widths chosen for IOUs 0.6, 0.5, 0.3
    preds = np.array([[0.0, 0.0, 3.6, 2.0], [0.0, 0.0, 3.0, 2.0], [0.0, 0.0, 1.8, 2.0]])
    res = simota_oc_assign(grid, gt, preds)
    np.testing.assert_allclose(res.iou[:2], [0.6, 0.5])
    assert list(res.labels) == [Label.POSITIVE, Label.POSITIVE, Label.IGNORED]


def test_zero_ious_give_no_positives():
    grid = _grid_with_anchors(3)
    gt = np.array([[0.0, 0.0, 6.0, 2.0]])
    preds = np.tile([100.0, 100.0, 101.0, 101.0], (3, 1))
    res = simota_oc_assign(grid, gt, preds)
    assert list(res.labels) == [Label.IGNORED] * 3


def test_contested_anchor_goes_to_larger_iou():
    grid = _grid_with_anchors(1)  # one anchor at (1, 1)
    pred = np.array([[0.0, 0.0, 2.0, 2.0]])
    gt_a = [0.0, 0.0, 2.0, 20 / 7]  # IOU 0.7
    gt_b = [0.0, 0.0, 2.0, 5.0]  # IOU 0.4
    res = simota_oc_assign(grid, np.array([gt_a, gt_b]), pred)
    assert res.labels[0] == Label.POSITIVE and res.gt_index[0] == 0
    np.testing.assert_allclose(res.iou[0], 0.7)


def test_exact_tie_is_ignored():
    grid = _grid_with_anchors(1)
    pred = np.array([[0.0, 0.0, 2.0, 2.0]])
    res = simota_oc_assign(grid, np.array([[0.0, 0.0, 2.0, 4.0], [0.0, 0.0, 4.0, 2.0]]), pred)
    assert res.labels[0] == Label.IGNORED and res.gt_index[0] == -1


def test_no_gts_all_negative():
    grid = AnchorGrid(4, 5)
    res = simota_oc_assign(grid, np.zeros((0, 4)), np.zeros((grid.size, 4)))
    assert (res.labels == Label.NEGATIVE).all()


def test_full_image_gt_makes_every_anchor_a_candidate():
    grid = AnchorGrid(4, 5)
    cand, _ = preset_candidates(grid, [BoundingBox(0, 0, 10, 8)])
    assert cand.all()


def test_anchor_on_edge_is_negative():
    grid = AnchorGrid(1, 3)  # x = 1, 3, 5
    cand, _ = preset_candidates(grid, [BoundingBox(1, 0, 5, 2)])
    assert list(cand) == [False, True, False]


# -- properties ----------------------------------------------------------------


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_instance(np.random.default_rng(seed))


@settings(max_examples=200, deadline=None)
@given(instances())
def test_simota_invariants(inst):
    grid, gts, preds = inst
    g = np.asarray(gts).reshape(-1, 4)
    res = simota_oc_assign(grid, g, preds)
    cand, inside = preset_candidates(grid, g)
    assert (res.labels[~cand] == Label.NEGATIVE).all()
    assert (res.labels[cand] != Label.NEGATIVE).all()
    pos = np.flatnonzero(res.labels == Label.POSITIVE)
    assert inside[res.gt_index[pos], pos].all()
    counts = res.positives_per_gt(len(g))
    for m in range(len(g)):
        row = np.where(inside[m], box_iou(g[m:m + 1], preds)[0], 0.0)
        assert counts[m] <= min(math.ceil(math.fsum(row)), int(inside[m].sum()))
    again = simota_oc_assign(grid, g, preds)
    assert np.array_equal(again.labels, res.labels) and np.array_equal(again.gt_index, res.gt_index)


# -- static baselines --------------------------------------------------------


def test_shrink_one_equals_candidates():
    grid = AnchorGrid(10, 10)
    gts = [BoundingBox(3, 2, 15, 11), BoundingBox(8, 8, 19, 19)]
    res = shrink_box_assign(grid, gts, shrink=1.0)
    cand, _ = preset_candidates(grid, gts)
    assert np.array_equal(res.labels == Label.POSITIVE, cand)


def test_shrink_tiny_keeps_at_most_centre_anchor():
    grid = AnchorGrid(10, 10)
    res = shrink_box_assign(grid, [BoundingBox(2, 2, 12, 12)], shrink=1e-6)
    assert res.num_positive <= 1
    res = shrink_box_assign(grid, [BoundingBox(2.5, 2.5, 11.5, 11.5)], shrink=1e-6)
    pos = np.flatnonzero(res.labels == Label.POSITIVE)
    assert list(grid.points()[pos][0]) == [7.0, 7.0]


def test_shrink_half_on_40px_box():
    grid = AnchorGrid(30, 30)
    res = shrink_box_assign(grid, [BoundingBox(10, 10, 50, 50)], shrink=0.5)
    pts = grid.points()[res.labels == Label.POSITIVE]
    assert pts.min() > 20 and pts.max() < 40
    assert len(pts) == 100  # anchors at 21, 23, ..., 39 on each axis
    ign = grid.points()[res.labels == Label.IGNORED]
    assert len(ign) == 20 * 20 - 100  # anchors at 11, 13, ..., 49


def test_shrink_rejects_bad_factor():
    with pytest.raises(ValueError):
        shrink_box_assign(AnchorGrid(2, 2), [], shrink=0.0)


def test_gaussian_weights():
    grid = AnchorGrid(20, 20)
    w, owner = center_gaussian_weights(grid, [BoundingBox(10, 10, 20, 20)])
    pts = grid.points()
    centre = np.flatnonzero((pts[:, 0] == 15) & (pts[:, 1] == 15))[0]
    assert w[centre] == pytest.approx(1.0)
    far = np.flatnonzero((pts[:, 0] == 39) & (pts[:, 1] == 39))[0]
    assert w[far] < 1e-4
    a = np.flatnonzero((pts[:, 0] == 13) & (pts[:, 1] == 15))[0]
    b = np.flatnonzero((pts[:, 0] == 17) & (pts[:, 1] == 15))[0]
    assert w[a] == pytest.approx(w[b])
    assert (owner == 0).all()


def test_gaussian_assign_soft_targets():
    grid = AnchorGrid(20, 20)
    res = center_gaussian_assign(grid, [BoundingBox(10, 10, 20, 20)])
    pos = res.labels == Label.POSITIVE
    assert pos.sum() == 25
    assert ((res.soft_target[pos] > 0) & (res.soft_target[pos] <= 1)).all()
    assert (res.soft_target[~pos] == 0).all()


def test_assign_dispatch():
    grid = AnchorGrid(4, 4)
    gts = [BoundingBox(1, 1, 7, 7)]
    assert assign("shrink_box", grid, gts).num_positive > 0
    assert assign("center_gaussian", grid, gts).num_positive > 0
    with pytest.raises(ValueError):
        assign("simota_oc", grid, gts)
    with pytest.raises(ValueError):
        assign("nope", grid, gts)


def test_grid_points():
    grid = AnchorGrid.for_input((96, 64))
    assert (grid.height, grid.width) == (32, 48)
    pts = grid.points()
    assert tuple(pts[0]) == (1.0, 1.0) and tuple(pts[1]) == (3.0, 1.0) and tuple(pts[48]) == (1.0, 3.0)
    assert pts.max(axis=0).tolist() == [95.0, 63.0]
