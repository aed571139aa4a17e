import numpy as np
import pytest

from drift.autodiff import backward
from drift.config import ABLATIONS, ablation
from drift.frames import RadarFrame
from drift.model import DriftModel, detections_of, stack_points


def param_names(model):
    return [n for n, _ in model.named_parameters()]


def test_names_unique_and_deterministic(tiny_config):
    a, b = DriftModel(tiny_config()), DriftModel(tiny_config())
    names = param_names(a)
    assert len(names) == len(set(names))
    assert names == param_names(b)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_pillar_only_has_no_point_or_fusion_parameters(tiny_config):
    names = param_names(DriftModel(tiny_config(model__dual_path=False)))
    assert not any(n.startswith(("point_blocks", "fusion")) for n in names)
    full = param_names(DriftModel(tiny_config()))
    assert any(n.startswith("point_blocks") for n in full) and any(n.startswith("fusion") for n in full)


def test_fusion_stage_subset(tiny_config):
    m = DriftModel(tiny_config(model__fusion__stages=[2]))
    assert [f is not None for f in m.fusion] == [False, True, False, False]
    off = DriftModel(tiny_config(model__fusion__p2v="off", model__fusion__v2p="off"))
    assert off.fusion == [None] * 4 and off.dual


def test_transformer_flags_reach_both_paths(tiny_config):
    m = DriftModel(tiny_config(model__transformer=[True, False, False, True]))
    assert [b.encoder is not None for b in m.pillar_blocks] == [True, False, False, True]
    assert [len(b.layers) for b in m.point_blocks] == [1, 0, 0, 1]


def test_channel_multiplier(tiny_config):
    m = DriftModel(tiny_config(model__channel_mult=2))
    assert [b.cfg.c_out for b in m.pillar_blocks] == [16, 16, 16, 16]


def test_detection_shapes(tiny_config, tiny_frames):
    m = DriftModel(tiny_config())
    out = m(tiny_frames(3))
    assert out.heat.shape == (3, 16, 16, 3) and out.reg.shape == (3, 16, 16, 8)
    assert out.occ is None


def test_free_road_shapes(tiny_config, tiny_frames):
    m = DriftModel(tiny_config("free_road"))
    out = m(tiny_frames(2, "free_road"))
    assert out.occ.shape == (2, 32, 32) and out.heat is None
    free, occ = m.predict(tiny_frames(1, "free_road"))[0]
    assert free.shape == occ.shape == (32, 32) and free.dtype == bool


def test_out_of_grid_points_are_ignored(tiny_config, tiny_frames):
    m = DriftModel(tiny_config())
    f = tiny_frames(1)[0]
    far = np.zeros((5, 7))
    far[:, 0] = [-3.0, 13.0, 20.0, 5.0, 5.0]
    far[:, 1] = [0.0, 0.0, 0.0, 7.0, -6.5]
    g = RadarFrame(f.frame_id, np.concatenate([f.points, far]), f.ego_pose, f.boxes, f.n_scans)
    a, b = m([f]), m([g])
    np.testing.assert_array_equal(a.heat.data, b.heat.data)
    np.testing.assert_array_equal(a.reg.data, b.reg.data)
    pts, batch = stack_points([f, g], m.grid)
    assert len(pts) == 2 * f.N and (batch == np.repeat([0, 1], f.N)).all()


def test_empty_frame(tiny_config):
    empty = RadarFrame(7, np.zeros((0, 7)))
    det = DriftModel(tiny_config())
    assert det.predict([empty], [7]) == [[]]
    loss, _ = det.loss([empty])
    assert np.isfinite(loss.data)
    fr = DriftModel(tiny_config("free_road"))
    free, occ = fr.predict([empty])[0]
    assert free.shape == (32, 32)


def test_batch_independence(tiny_config, tiny_frames):
    """A frame's outputs do not depend on which other frames share its batch."""
    cfg = tiny_config()
    m = DriftModel(cfg)
    frames = tiny_frames(3)
    together = m(frames)
    for b, f in enumerate(frames):
        alone = m([f])
        np.testing.assert_allclose(alone.heat.data[0], together.heat.data[b], atol=1e-5)
        np.testing.assert_allclose(alone.reg.data[0], together.reg.data[b], atol=1e-5)


def test_loss_terms_and_gradients_reach_every_block(tiny_config, tiny_frames):
    m = DriftModel(tiny_config())
    loss, terms = m.loss(tiny_frames(2))
    assert set(terms) >= {"heat", "reg"}
    backward(loss)
    starved = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert not [n for n in starved if n.startswith(("pillar_blocks", "point_blocks", "neck", "head"))], starved


def test_predict_detection_lists(tiny_config, tiny_frames):
    m = DriftModel(tiny_config())
    res = m.predict(tiny_frames(2), [10, 11])
    assert len(res) == 2
    assert all(d.frame_id == 10 for d in res[0]) and all(d.frame_id == 11 for d in res[1])
    assert len(detections_of(res)) == len(res[0]) + len(res[1])
    assert all(0.0 < d.score < 1.0 for d in detections_of(res))


@pytest.mark.parametrize("table, row", [(t, r) for t, rows in ABLATIONS.items() for r in rows])
def test_ablation_row_builds(tiny_config, table, row):
    cfg = ablation(tiny_config(), table, row)
    m = DriftModel(cfg)
    names = param_names(m)
    assert any(n.startswith("point_blocks") for n in names) == cfg.model.dual_path
