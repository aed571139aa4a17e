"""Fast invariant battery: gradient checks, sparse/dense and geometry oracles, round-trips.

Each check compares library code against an independent slow implementation
kept in this module. ``sabotage`` names a check whose fixture is perturbed on
purpose so callers can confirm that a broken kernel is reported.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, Tensor, checkpoint, grad_check, grad_check_module
from .autodiff import functional as F
from .fusion import DualState, FeatureSharingBlock, FusionConfig
from .frames import BoxLabel
from .geometry import bev_iou_raw
from .heads import CenterHead, OccupancyHead, decode_box, encode_box
from .losses import detection_loss, detection_targets, occupancy_loss
from .metrics import pr_curve
from .heads import Detection
from .pillar_path import PillarBlock, PillarBlockConfig, SparseConv, strided_sparse_conv, submanifold_conv
from .pillars import GridSpec, PillarEncoder, SparsePillarSet, pillarize
from .point_path import PointBlock, PointBlockConfig, PointState
from .raycast import ray_directions, raycast_free_road

GRAD_TOL = 1e-4
SABOTAGE_TARGETS = ("sparse_dense", "grad_linear", "raycast", "pillarize")


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _weighted(t: Tensor, seed: int = 7) -> Tensor:
    return F.sum(F.mul(t, np.random.default_rng(seed).normal(size=t.shape)))


# ---------------------------------------------------------------- oracles

def _dense_conv_oracle(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    h, wd, cin = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((ho, wo, w.shape[1]))
    for i in range(ho):
        for j in range(wo):
            for k, (di, dj) in enumerate((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)):
                r, c = stride * i + di, stride * j + dj
                if 0 <= r < h and 0 <= c < wd:
                    out[i, j] += x[r, c] @ w[k * cin:(k + 1) * cin]
    return out


def _march_oracle(occ: np.ndarray, origin, n_rays: int, step: float = 0.1) -> np.ndarray:
    """Fine-step marching with bisection on diagonal jumps; exact corner passes touch no side cell."""
    h, w = occ.shape
    free = np.zeros_like(occ)
    ox, oy = origin
    if occ[ox, oy]:
        return free
    start = np.array([ox + 0.5, oy + 0.5])

    def cell(t, d):
        p = start + t * d
        return int(math.floor(p[0])), int(math.floor(p[1]))

    def between(t0, t1, d, c0, c1):
        if abs(c0[0] - c1[0]) + abs(c0[1] - c1[1]) <= 1 or t1 - t0 < 1e-9:
            return []
        tm = 0.5 * (t0 + t1)
        cm = cell(tm, d)
        if cm == c0:
            return between(tm, t1, d, c0, c1)
        if cm == c1:
            return between(t0, tm, d, c0, c1)
        return between(t0, tm, d, c0, cm) + [cm] + between(tm, t1, d, cm, c1)

    free[ox, oy] = True
    for d in ray_directions(n_rays):
        t, prev_t, prev_c = 0.0, 0.0, (ox, oy)
        blocked = False
        while not blocked:
            t += step
            c = cell(t, d)
            if c == prev_c:
                prev_t = t
                continue
            for cx, cy in between(prev_t, t, d, prev_c, c) + [c]:
                if not (0 <= cx < h and 0 <= cy < w) or occ[cx, cy]:
                    blocked = True
                    break
                free[cx, cy] = True
            prev_t, prev_c = t, c
    return free


# ---------------------------------------------------------------- checks

def check_sparse_dense(sabotage: bool) -> str:
    rng = np.random.default_rng(0)
    h = w = 16
    coords = np.array([(0, i, j) for i in range(h) for j in range(w)])
    x = rng.normal(size=(h * w, 3))
    worst = 0.0
    for stride in (1, 2):
        conv = SparseConv(3, 4, rng, np.float64, "submanifold" if stride == 1 else "strided")
        w_oracle = conv.w.data.copy()
        if sabotage:
            conv.w.data[0, 0] += 1e-3
        pillars = SparsePillarSet(Tensor(x), coords, (h, w))
        out = submanifold_conv(pillars, conv) if stride == 1 else strided_sparse_conv(pillars, conv)
        ref = _dense_conv_oracle(x.reshape(h, w, 3), w_oracle, stride)
        got = np.zeros_like(ref)
        got[out.coords[:, 1], out.coords[:, 2]] = out.features.data
        dense = F.conv2d(Tensor(x.reshape(1, h, w, 3)), Tensor(w_oracle), stride=stride).data[0]
        worst = max(worst, float(np.abs(got - ref).max()), float(np.abs(dense - ref).max()))
    if worst > 1e-10:
        raise AssertionError(f"sparse conv deviates from dense oracle by {worst:.3g}")
    return f"max |diff| {worst:.1e}"


def check_sparse_gather(sabotage: bool) -> str:
    for seed in range(5):
        rng = np.random.default_rng(seed)
        active = np.argwhere(rng.random((12, 12)) < 0.3)
        coords = np.column_stack([np.zeros(len(active), np.int64), active])
        x = rng.integers(-3, 4, size=(len(active), 2)).astype(np.float64)
        conv = SparseConv(2, 3, rng, np.float64)
        conv.w.data = rng.integers(-3, 4, size=conv.w.shape).astype(np.float64)
        out = submanifold_conv(SparsePillarSet(Tensor(x), coords, (12, 12)), conv)
        lut = {(int(i), int(j)): r for r, (i, j) in enumerate(active)}
        for r, (i, j) in enumerate(active):
            acc = conv.b.data.copy()
            for k, (di, dj) in enumerate((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)):
                q = lut.get((int(i) + di, int(j) + dj))
                if q is not None:
                    acc = acc + x[q] @ conv.w.data[2 * k:2 * k + 2]
            if not np.array_equal(acc, out.features.data[r]):
                raise AssertionError(f"submanifold conv differs from gather oracle at {(i, j)}")
    return "5 random 30%-active grids exact"


def check_pillarize(sabotage: bool) -> str:
    grid = GridSpec((0.0, 8.0), (-4.0, 4.0), (0.5, 0.5))
    enc = PillarEncoder(7, 4, np.random.default_rng(0), np.float64)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-1, 9, 60), rng.uniform(-5, 5, 60), rng.normal(size=(60, 5))])
        batch = rng.integers(0, 2, 60)
        pillars, rows = pillarize(pts, batch, grid, enc)
        expected = {}
        for n, (p, b) in enumerate(zip(pts, batch)):
            if 0.0 <= p[0] < 8.0 and -4.0 <= p[1] < 4.0:
                key = (int(b), int(math.floor(p[0] / 0.5)), int(math.floor((p[1] + 4.0) / 0.5)))
                expected.setdefault(key, []).append(n)
        got = {tuple(int(v) for v in c): np.flatnonzero(rows == r).tolist() for r, c in enumerate(pillars.coords)}
        if sabotage:
            got.pop(next(iter(got)), None)
        if got != expected:
            raise AssertionError(f"pillar binning differs from brute force (seed {seed})")
    return "10 seeds exact"


def check_raycast(sabotage: bool) -> str:
    for seed in range(2):
        rng = np.random.default_rng(seed)
        occ = rng.random((24, 28)) < 0.08
        occ[0, 14] = False
        free = raycast_free_road(occ, (0, 14), 360)
        if sabotage:
            free = free.copy()
            free[0, 14] = ~free[0, 14]
        if not np.array_equal(free, _march_oracle(occ, (0, 14), 360)):
            raise AssertionError(f"ray cast differs from the marching oracle (seed {seed})")
    return "2 grids cell-exact"


def _grad(name, f, params, worst):
    err = grad_check(f, params)
    worst[name] = err
    if err >= GRAD_TOL:
        raise AssertionError(f"{name}: relative gradient error {err:.2e}")


def check_grad_linear(sabotage: bool) -> str:
    rng = np.random.default_rng(0)
    lin, norm = Linear(5, 4, rng, np.float64), LayerNorm(4, np.float64)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)

    def f():
        y = F.gelu(norm(lin(x)))
        if sabotage:
            # the weight also enters through an untracked constant, so the tape misses part of its gradient
            y = F.add(y, Tensor(np.sin(lin.w.data[:4].T[:1])))
        return _weighted(F.softmax(y, axis=-1))

    err = grad_check_module(f, lin, [x] + norm.parameters())
    if err >= GRAD_TOL:
        raise AssertionError(f"linear/norm/gelu/softmax: relative gradient error {err:.2e}")
    return f"max rel err {err:.1e}"


def check_grad_blocks(sabotage: bool) -> str:
    rng = np.random.default_rng(1)
    worst: dict[str, float] = {}
    pts = np.column_stack([rng.uniform(0, 3.2, 24), rng.uniform(-1.6, 1.6, 24), rng.normal(size=24)])
    pstate = PointState(pts, Tensor(rng.normal(size=(24, 4)), requires_grad=True), np.zeros(24, np.int64))
    pblock = PointBlock(PointBlockConfig(4, 4, stride=2, k=4), rng, np.float64)
    _grad("point block", lambda: _weighted(pblock(pstate).features), pblock.parameters() + [pstate.features], worst)

    cells = np.sort(rng.choice(64, 10, replace=False))
    coords = np.column_stack([np.zeros(10, np.int64), cells // 8, cells % 8])
    pill = SparsePillarSet(Tensor(rng.normal(size=(10, 4)), requires_grad=True), coords, (8, 8))
    vblock = PillarBlock(PillarBlockConfig(4, 4, stride=2, heads=2), rng, np.float64)
    _grad("pillar block", lambda: _weighted(vblock(pill).features), vblock.parameters() + [pill.features], worst)

    grid = GridSpec((0.0, 3.2), (-1.6, 1.6), (0.4, 0.4))
    for mode in ("add", "concat", "attention"):
        fuse = FeatureSharingBlock(4, 4, FusionConfig(mode, mode, heads=2), rng, np.float64)
        state = DualState(pstate, pill)

        def f(fuse=fuse, state=state):
            out = fuse(state, grid)
            return F.add(_weighted(out.point.features, 1), _weighted(out.pillar.features, 2))

        _grad(f"fusion {mode}", f, fuse.parameters() + [pstate.features, pill.features], worst)

    x = Tensor(rng.normal(size=(1, 4, 4, 3)), requires_grad=True)
    head = CenterHead(3, 4, rng, np.float64)
    _grad("center head", lambda: F.add(*(_weighted(t) for t in head(x))), head.parameters() + [x], worst)
    occ = OccupancyHead(3, 3, rng, np.float64)
    _grad("occupancy head", lambda: _weighted(occ(x)), occ.parameters() + [x], worst)

    hgrid = GridSpec((0.0, 6.4), (-3.2, 3.2), (0.4, 0.4))
    boxes = [[BoxLabel(2.2, -1.0, 0.0, 1.6, 0.8, 1.5, 0.4, 0), BoxLabel(4.6, 1.4, 0.2, 0.6, 0.6, 1.7, -1.0, 1)]]
    t = detection_targets(boxes, hgrid)
    heat = Tensor(rng.normal(size=(1, 16, 16, 3)), requires_grad=True)
    reg = Tensor(rng.normal(size=(1, 16, 16, 8)), requires_grad=True)
    _grad("detection loss", lambda: detection_loss(heat, reg, t)[0], [heat, reg], worst)
    logits = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    y = rng.random((5, 5)) > 0.5
    _grad("occupancy loss", lambda: occupancy_loss(logits, y), [logits], worst)
    return f"{len(worst)} blocks, max rel err {max(worst.values()):.1e}"


def check_box_round_trip(sabotage: bool) -> str:
    grid = GridSpec((0.0, 25.6), (-12.8, 12.8), (0.4, 0.4))
    rng = np.random.default_rng(3)
    for _ in range(50):
        cell = rng.integers(0, 64, 2)
        cx, cy = grid.cell_center(cell[None])[0]
        box = BoxLabel(cx, cy, rng.uniform(-1, 1), *rng.uniform(0.3, 5, 3), rng.uniform(-3, 3), int(rng.integers(3)))
        enc = encode_box(box, grid)
        back = decode_box(enc[0], enc[1], grid, box.cls)
        if np.abs(back.as_array()[:6] - box.as_array()[:6]).max() >= 1e-5:
            raise AssertionError("box decode(encode(b)) drifted")
    return "50 boxes within 1e-5 m"


def check_geometry_and_ap(sabotage: bool) -> str:
    if not math.isclose(bev_iou_raw((0, 0, 1, 1, 0), (0.5, 0, 1, 1, 0)), 1 / 3, abs_tol=1e-12):
        raise AssertionError("IoU of unit squares offset by 0.5 is not 1/3")
    car = lambda x: BoxLabel(x, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0)  # noqa: E731
    ap = pr_curve([Detection(car(10), 0.9), Detection(car(40), 0.8)], [[car(10), car(20)]], 0, 0.5).ap
    if not math.isclose(ap, 6 / 11, abs_tol=1e-12):
        raise AssertionError(f"11-point AP fixture gave {ap}, expected 6/11")
    return "IoU 1/3 and AP 6/11 fixtures"


def check_checkpoint(sabotage: bool) -> str:
    rng = np.random.default_rng(4)
    state = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32([1.5]),
             "__optim__.step": np.float32([7])}
    back = checkpoint.loads(checkpoint.dumps(state))
    if set(back) != set(state) or any(not np.array_equal(back[k], v) for k, v in state.items()):
        raise AssertionError("checkpoint round-trip is not bit-exact")
    return "bit-exact"


CHECKS = {
    "sparse_dense": check_sparse_dense,
    "sparse_gather": check_sparse_gather,
    "pillarize": check_pillarize,
    "raycast": check_raycast,
    "grad_linear": check_grad_linear,
    "grad_blocks": check_grad_blocks,
    "box_round_trip": check_box_round_trip,
    "geometry_ap": check_geometry_and_ap,
    "checkpoint": check_checkpoint,
}


def run_selfcheck(sabotage: str | None = None, echo=None, only=None) -> list[CheckResult]:
    if sabotage is not None and sabotage not in SABOTAGE_TARGETS:
        raise ValueError(f"unknown sabotage target {sabotage!r}")
    names = list(CHECKS) if only is None else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}")
    results = []
    for name in names:
        fn = CHECKS[name]
        t0 = time.perf_counter()
        try:
            detail, ok = fn(name == sabotage), True
        except AssertionError as e:
            detail, ok = str(e), False
        res = CheckResult(name, ok, detail, time.perf_counter() - t0)
        results.append(res)
        if echo is not None:
            echo(f"{'PASS' if ok else 'FAIL'}  {name:<16} {res.seconds:6.2f}s  {detail}")
    return results
