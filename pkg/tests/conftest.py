import pytest

from drift.autodiff import current_tape
from drift.config import RunConfig, with_overrides
from drift.frames import SceneConfig, generate_frame, quantize
from drift.pillars import GridSpec

TINY_GRID = GridSpec((0.0, 12.8), (-6.4, 6.4), (0.4, 0.4))   # 32 x 32
TINY = {
    "grid.x_range": [0.0, 12.8], "grid.y_range": [-6.4, 6.4], "grid.voxel_size": [0.4, 0.4],
    "model.channels": [8, 8, 8, 8], "model.heads": 2, "model.fusion.heads": 2,
    "model.neck_width": 8, "model.head_width": 8, "model.occ_width": 8,
    "train.batch_size": 2, "train.epochs": 1, "train.lr": 1e-3,
    "eval.iou_thresholds": [0.25, 0.25, 0.25],
    "data.scene": {"place_x": [2.0, 11.0], "place_y": [-5.0, 5.0]},
}


@pytest.fixture(autouse=True)
def _fresh_tape():
    current_tape().clear()
    yield
    current_tape().clear()


@pytest.fixture
def tiny_config():
    """Factory for a width-8 config on the 32 x 32 grid; keyword overrides spell dots as ``__``."""

    def make(task="detection", **overrides):
        cfg = with_overrides(RunConfig(task=task), TINY)
        return with_overrides(cfg, {k.replace("__", "."): v for k, v in overrides.items()}) if overrides else cfg

    return make


@pytest.fixture
def tiny_frames():
    def make(n=4, task="detection", seed0=0):
        sc = SceneConfig(x_range=TINY_GRID.x_range, y_range=TINY_GRID.y_range, place_x=(2.0, 11.0),
                         place_y=(-5.0, 5.0), mask_grid=TINY_GRID if task == "free_road" else None)
        return [quantize(generate_frame(sc, seed0 + s, frame_id=s)) for s in range(n)]

    return make


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``PASS``/``FAIL`` line per acceptance criterion; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
