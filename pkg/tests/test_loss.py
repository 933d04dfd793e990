import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ciou_reference, three_anchor_case, three_anchor_expected

from vidbird.assignment import AnchorGrid, AssignmentResult, Label, shrink_box_assign
from vidbird.loss import (
    LossConfig,
    ciou_loss,
    confidence_loss,
    decode_boxes,
    total_loss,
)


def _rand_box(rng):
    x, y = rng.uniform(-50, 50, size=2)
    w, h = rng.uniform(0.5, 40, size=2)
    return [x, y, x + w, y + h]


def test_confidence_loss_values():
    conf = torch.tensor([1.0, 0.5, 0.9], dtype=torch.float64)
    labels = np.array([Label.POSITIVE, Label.NEGATIVE, Label.IGNORED])
    assert confidence_loss(conf, labels).tolist() == [0.0, 0.25, 0.0]


def test_ciou_identical_boxes_is_zero():
    b = torch.tensor([3.0, 4.0, 17.5, 9.25], dtype=torch.float64)
    assert abs(ciou_loss(b, b).item()) < 1e-9


def test_ciou_far_disjoint_squares_exceed_one():
    p = torch.tensor([0.0, 0.0, 5.0, 5.0], dtype=torch.float64)
    g = torch.tensor([100.0, 100.0, 105.0, 105.0], dtype=torch.float64)
    assert ciou_loss(p, g).item() > 1.0


def test_ciou_matches_formula():
    rng = np.random.default_rng(0)
    for _ in range(500):
        p, g = _rand_box(rng), _rand_box(rng)
        got = ciou_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(g, dtype=torch.float64)).item()
        assert abs(got - ciou_reference(p, g)) < 1e-9


def test_ciou_translation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, g = np.array(_rand_box(rng)), np.array(_rand_box(rng))
        t = np.tile(rng.uniform(-30, 30, size=2), 2)
        a = ciou_loss(torch.tensor(p), torch.tensor(g)).item()
        b = ciou_loss(torch.tensor(p + t), torch.tensor(g + t)).item()
        assert a == pytest.approx(b, abs=1e-9)


def test_ciou_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        ciou_loss(torch.tensor([0.0, 0, 1, 1]), torch.tensor([2.0, 2, 2, 5]))


def test_ciou_aspect_weight_is_detached():
    # with the weight detached, d/dx of a*v is a * dv/dx; compare to that by hand
    p = torch.tensor([0.0, 0.0, 4.0, 2.0], dtype=torch.float64, requires_grad=True)
    g = torch.tensor([1.0, 0.0, 3.0, 3.0], dtype=torch.float64)
    ciou_loss(p, g).backward()
    q = p.detach().clone().requires_grad_(True)
    pw, ph = q[2] - q[0], q[3] - q[1]
    iw = torch.minimum(q[2], g[2]) - torch.maximum(q[0], g[0])
    ih = torch.minimum(q[3], g[3]) - torch.maximum(q[1], g[1])
    inter = iw * ih
    iou = inter / (pw * ph + 6.0 - inter)
    v = 4 / math.pi ** 2 * (math.atan(2 / 3) - torch.atan(pw / ph)) ** 2
    a = (v / (1 - iou + v)).detach()
    c2 = (torch.maximum(q[2], g[2]) - torch.minimum(q[0], g[0])) ** 2 + (
        torch.maximum(q[3], g[3]) - torch.minimum(q[1], g[1])) ** 2
    rho2 = ((q[0] + q[2] - 4) ** 2 + (q[1] + q[3] - 3) ** 2) / 4
    (1 - iou + rho2 / c2 + a * v).backward()
    assert torch.allclose(p.grad, q.grad, atol=1e-12)


def test_three_anchor_total_by_hand():
    grid, gts, assignment, conf, reg = three_anchor_case()
    expected, conf_sum, ciou = three_anchor_expected(alpha=5.0)
    terms = total_loss(conf, reg, assignment, gts, grid, LossConfig(alpha=5.0))
    assert abs(terms.total.item() - expected) < 1e-9
    assert abs(terms.conf.item() - conf_sum) < 1e-9
    assert abs(terms.reg.item() - ciou) < 1e-9
    assert terms.positives == 1 and terms.normalizer == 1.0


def test_ignored_anchor_gets_zero_gradient():
    grid, gts, assignment, conf, reg = three_anchor_case()
    total_loss(conf, reg, assignment, gts, grid).total.backward()
    assert conf.grad[2].item() == 0.0
    assert conf.grad[0].item() != 0.0 and conf.grad[1].item() != 0.0


def test_no_gts_zero_conf_is_zero():
    grid = AnchorGrid(4, 4)
    res = shrink_box_assign(grid, [])
    terms = total_loss(torch.zeros(grid.size), torch.ones(grid.size, 4), res, [], grid)
    assert terms.total.item() == 0.0
    assert terms.normalizer == 16.0


def test_perfect_fit_is_zero():
    grid = AnchorGrid(1, 3)
    gts = np.array([[2.0, 0.0, 4.0, 2.0]])
    res = AssignmentResult(np.array([0, 1, 0], dtype=np.int8), np.array([-1, 0, -1]), np.zeros(3))
    reg = torch.ones(3, 4, dtype=torch.float64)
    conf = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    assert total_loss(conf, reg, res, gts, grid).total.item() == pytest.approx(0.0, abs=1e-12)


def test_decode_boxes():
    grid = AnchorGrid(1, 2)
    reg = torch.tensor([[1.0, 2, 3, 4], [0.5, 0.5, 0.5, 0.5]])
    assert decode_boxes(reg, grid).tolist() == [[0.0, -1.0, 4.0, 5.0], [2.5, 0.5, 3.5, 1.5]]


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0)
    with pytest.raises(ValueError):
        LossConfig(fixed_N=-1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 10.0))
def test_total_nonnegative_and_alpha_scales_reg_only(seed, k):
    rng = np.random.default_rng(seed)
    grid = AnchorGrid(6, 8)
    gts = np.array([_rand_box(rng) for _ in range(int(rng.integers(0, 3)))]).reshape(-1, 4)
    gts = np.clip(np.abs(gts), 0, 14)
    gts = gts[(gts[:, 2] - gts[:, 0] > 1) & (gts[:, 3] - gts[:, 1] > 1)]
    res = shrink_box_assign(grid, gts, shrink=1.0)
    conf = torch.tensor(rng.uniform(0, 1, grid.size))
    reg = torch.tensor(rng.uniform(0.1, 6, (grid.size, 4)))
    base = total_loss(conf, reg, res, gts, grid, LossConfig(alpha=2.0))
    scaled = total_loss(conf, reg, res, gts, grid, LossConfig(alpha=2.0 * k))
    assert base.total.item() >= 0
    diff = scaled.total.item() - base.total.item()
    expected = (k - 1) * 2.0 * base.reg.item()  # reg is already divided by N
    assert diff == pytest.approx(expected, rel=1e-9, abs=1e-12)
