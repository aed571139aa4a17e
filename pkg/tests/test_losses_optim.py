import math

import numpy as np
import pytest

from drift.autodiff import Parameter, Tensor, backward, grad_check
from drift.autodiff import functional as F
from drift.frames import BoxLabel
from drift.heads import encode_box
from drift.losses import (
    detection_loss, detection_targets, draw_gaussian, focal_loss, gaussian_radius, occupancy_loss,
    regression_loss,
)
from drift.optim import STATE_PREFIX, AdamW, split_state
from drift.pillars import GridSpec

GRID = GridSpec((0.0, 6.4), (-3.2, 3.2), (0.4, 0.4))  # 16 x 16
BOXES = [[BoxLabel(2.2, -1.0, 0.0, 1.6, 0.8, 1.5, 0.4, 0), BoxLabel(4.6, 1.4, 0.2, 0.6, 0.6, 1.7, -1.0, 1)]]


def focal_oracle(logits, target):
    p = 1 / (1 + np.exp(-logits))
    pos = target == 1
    loss = np.where(pos, (1 - p) ** 2 * np.log(p), (1 - target) ** 4 * p ** 2 * np.log(1 - p))
    return -loss.sum() / max(1, pos.sum())


def test_gaussian_target_shape():
    heat = np.zeros((9, 9))
    draw_gaussian(heat, (4, 4), 2)
    assert heat[4, 4] == 1.0 and heat.max() == 1.0
    np.testing.assert_allclose(heat, heat.T)
    np.testing.assert_allclose(heat, heat[::-1, ::-1])
    assert heat[4, 7] == 0 and heat[4, 6] > 0
    sigma = 5 / 6
    assert math.isclose(heat[4, 5], math.exp(-1 / (2 * sigma ** 2)))


def test_gaussian_radius_keeps_overlap():
    # shifting a box by r along both axes keeps IoU with the original at least min_overlap
    for l, w in [(10.0, 4.0), (2.0, 2.0), (1.5, 0.7)]:
        r = gaussian_radius(l, w, 0.1)
        assert r > 0
        inter = max(0, l - r) * max(0, w - r)
        assert inter / (2 * l * w - inter) >= 0.1 - 1e-9


def test_targets():
    t = detection_targets(BOXES, GRID)
    assert t.heat.shape == (1, 16, 16, 3)
    assert t.index.shape == (2,) and t.reg.shape == (2, 8)
    for box, idx, reg in zip(BOXES[0], t.index, t.reg):
        (i, j), target = encode_box(box, GRID)
        assert idx == i * 16 + j
        np.testing.assert_array_equal(reg, target)
        assert t.heat[0, i, j, box.cls] == 1.0
    assert (t.heat == 1.0).sum() == 2


def test_shared_centre_cell_first_box_wins():
    a = BoxLabel(2.21, 0.1, 0.0, 1.0, 1.0, 1.0, 0.0, 0)
    b = BoxLabel(2.39, 0.3, 0.0, 2.0, 1.0, 1.0, 0.0, 1)
    t = detection_targets([[a, b]], GRID)
    assert len(t.index) == 1
    np.testing.assert_array_equal(t.reg[0], encode_box(a, GRID)[1])


def test_perfect_fit_floor():
    t = detection_targets(BOXES, GRID)
    logits = np.log(np.clip(t.heat, 1e-12, 1 - 1e-12) / (1 - np.clip(t.heat, 1e-12, 1 - 1e-12)))
    reg = np.zeros((1, 16, 16, 8))
    reg.reshape(-1, 8)[t.index] = t.reg
    total, parts = detection_loss(Tensor(logits), Tensor(reg), t)
    assert parts["reg"] == 0.0
    # only the Gaussian tails remain: p^2 (1-p)^4 log(1-p) summed over the skirt
    assert math.isclose(parts["heat"], focal_oracle(logits, t.heat), rel_tol=1e-9)
    assert parts["heat"] < 0.5
    assert math.isclose(float(total.data), parts["heat"], rel_tol=1e-12)


def test_no_boxes():
    t = detection_targets([[]], GRID)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 16, 16, 3))
    total, parts = detection_loss(Tensor(logits), Tensor(rng.normal(size=(1, 16, 16, 8))), t)
    assert parts["reg"] == 0.0
    assert math.isclose(parts["heat"], focal_oracle(logits, t.heat), rel_tol=1e-9)
    p = 1 / (1 + np.exp(-logits))
    assert math.isclose(parts["heat"], -(p ** 2 * np.log(1 - p)).sum(), rel_tol=1e-9)


def test_focal_matches_oracle_random():
    t = detection_targets(BOXES, GRID)
    logits = np.random.default_rng(1).normal(size=t.heat.shape) * 3
    assert math.isclose(float(focal_loss(Tensor(logits), t.heat).data), focal_oracle(logits, t.heat), rel_tol=1e-9)


def test_regression_l1_oracle():
    t = detection_targets(BOXES, GRID)
    reg = np.random.default_rng(2).normal(size=(1, 16, 16, 8))
    expected = np.abs(reg.reshape(-1, 8)[t.index] - t.reg).mean()
    assert math.isclose(float(regression_loss(Tensor(reg), t).data), expected, rel_tol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_detection_loss_grad(seed):
    t = detection_targets(BOXES, GRID)
    rng = np.random.default_rng(seed)
    heat = Tensor(rng.normal(size=(1, 16, 16, 3)), requires_grad=True)
    reg = Tensor(rng.normal(size=(1, 16, 16, 8)), requires_grad=True)
    assert grad_check(lambda: detection_loss(heat, reg, t)[0], [heat, reg], n_samples=40) < 1e-4


def test_bce_at_zero_is_ln2():
    y = np.random.default_rng(0).random((5, 7)) > 0.5
    assert math.isclose(float(occupancy_loss(Tensor(np.zeros((5, 7))), y).data), math.log(2), rel_tol=1e-12)


def test_bce_saturation():
    y = np.random.default_rng(1).random((4, 4)) > 0.5
    logits = np.where(y, 60.0, -60.0)
    assert float(occupancy_loss(Tensor(logits), y).data) < 1e-20
    assert float(occupancy_loss(Tensor(-logits), y).data) == pytest.approx(60.0, rel=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_bce_grad(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 6)) * 4, requires_grad=True)
    y = rng.random((3, 6)) > 0.5
    assert grad_check(lambda: occupancy_loss(x, y), [x], n_samples=None) < 1e-4


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        occupancy_loss(Tensor(np.zeros((3, 3))), np.zeros((3, 4), bool))


# ---------------------------------------------------------------- AdamW

def test_adamw_hand_value():
    p = Parameter(np.array([1.0]))
    opt = AdamW([("p", p)], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    # m_hat = 0.1 / 0.1 = 1, v_hat = 0.001 / 0.001 = 1
    assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_two_steps_hand_value():
    p = Parameter(np.array([1.0]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    p.grad = np.array([-2.0])
    opt.step()
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    expected = 1 - 0.1 / (1 + 1e-8) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-14)


def test_adamw_decay_only():
    p = Parameter(np.array([2.0, -3.0]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.001), -3.0 * (1 - 0.001)], rtol=0, atol=1e-15)


def test_adamw_zero_grad_no_decay_unchanged():
    p = Parameter(np.array([0.5, 1.5]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    for _ in range(3):
        opt.step()  # grad None counts as zero
    np.testing.assert_array_equal(p.data, [0.5, 1.5])


def test_adamw_state_round_trip_continues_identically():
    rng = np.random.default_rng(0)
    init = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]

    def run(split):
        p = Parameter(init.copy())
        opt = AdamW([("w", p)], lr=0.01)
        for k, g in enumerate(grads):
            if k == split:
                state = {**{"w": p.data.copy()}, **{k2: v.copy() for k2, v in opt.state_dict().items()}}
                model, ostate = split_state(state)
                p = Parameter(model["w"])
                opt = AdamW([("w", p)], lr=0.01)
                opt.load_state_dict(ostate)
            p.grad = g
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(None), run(3))


def test_state_prefix_and_split():
    p = Parameter(np.zeros(2))
    st = AdamW([("a.b", p)]).state_dict()
    assert set(st) == {f"{STATE_PREFIX}step", f"{STATE_PREFIX}m.a.b", f"{STATE_PREFIX}v.a.b"}
    model, opt = split_state({"a.b": p.data, **st})
    assert set(model) == {"a.b"} and set(opt) == set(st)


def test_adamw_with_backward():
    w = Parameter(np.array([3.0]))
    opt = AdamW([("w", w)], lr=0.5, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        backward(F.sum(F.power(w, 2.0)))
        opt.step()
    assert abs(w.data[0]) < 0.1


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        AdamW([], lr=-1.0)
