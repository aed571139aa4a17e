"""Run configuration: a versioned YAML document mapped onto nested dataclasses.

Unknown keys, wrong types and inconsistent stage schedules are rejected with
the dotted field path and, when loaded from text, the line number.
"""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .fusion import FusionConfig
from .pillars import GridSpec

CONFIG_VERSION = 1
TASKS = ("detection", "free_road")


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    voxel_size: tuple[float, float] = (0.16, 0.16)

    def spec(self) -> GridSpec:
        return GridSpec(tuple(self.x_range), tuple(self.y_range), tuple(self.voxel_size))


@dataclass
class ModelConfig:
    channels: list[int] = field(default_factory=lambda: [64, 64, 128, 256])
    channel_mult: int = 1
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 2])
    conv_counts: list[int] = field(default_factory=lambda: [1, 3, 5, 5])
    dual_path: bool = True
    transformer: list[bool] = field(default_factory=lambda: [True, True, True, True])
    point_k: int = 8
    point_encoder_layers: int = 1
    heads: int = 4
    ffn_mult: int = 2
    max_tokens: int = 4096
    max_points_per_pillar: int = 32
    pillar_offsets: str = "center"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    neck_width: int = 128
    head_width: int = 64
    occ_width: int = 32

    @property
    def widths(self) -> list[int]:
        return [c * self.channel_mult for c in self.channels]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 80
    batch_size: int = 4
    max_steps: int = 0                 # 0 means no cap
    w_heat: float = 1.0
    w_reg: float = 0.25
    w_occ: float = 1.0
    augment: list[str] = field(default_factory=list)
    eval_period: int = 1
    min_radius: int = 2


@dataclass
class EvalConfig:
    corridor_x: tuple[float, float] = (0.0, 25.0)
    corridor_y: tuple[float, float] = (-4.0, 4.0)
    iou_thresholds: tuple[float, float, float] = (0.5, 0.25, 0.25)
    score_thresh: float = 0.1
    max_dets: int = 100
    occ_threshold: float = 0.5
    n_rays: int = 360


@dataclass
class DataConfig:
    n_frames: int = 16
    val_fraction: float = 0.25
    scene: dict = field(default_factory=dict)   # SceneConfig overrides


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    task: str = "detection"
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self, lines: dict | None = None) -> "RunConfig":
        lines = lines or {}

        def fail(path, msg):
            line = lines.get(path)
            raise ConfigError(f"{path}: {msg}" + (f" (line {line})" if line else ""))

        if self.version != CONFIG_VERSION:
            fail("version", f"unsupported config version {self.version}, expected {CONFIG_VERSION}")
        if self.task not in TASKS:
            fail("task", f"expected one of {TASKS}, got {self.task!r}")
        m = self.model
        for name in ("channels", "strides", "conv_counts", "transformer"):
            if len(getattr(m, name)) != 4:
                fail(f"model.{name}", f"expected 4 entries, got {len(getattr(m, name))}")
        if list(m.strides) != [1, 2, 2, 2]:
            # the neck reads stages 2-4 as a 2x pyramid whose finest level is the head grid
            fail("model.strides", f"the neck needs strides [1, 2, 2, 2], got {list(m.strides)}")
        if any(c <= 0 for c in m.widths) or m.channel_mult < 1:
            fail("model.channels", "channel widths must be positive")
        if any(c < 0 for c in m.conv_counts):
            fail("model.conv_counts", "conv counts must be >= 0")
        if any(w % m.heads for w, t in zip(m.widths, m.transformer) if t):
            fail("model.heads", f"{m.heads} heads do not divide the widths {m.widths}")
        if m.dual_path and (m.fusion.p2v == "attention" or m.fusion.v2p == "attention") \
                and any(w % m.fusion.heads for w in m.widths):
            fail("model.fusion.heads", f"{m.fusion.heads} heads do not divide the widths {m.widths}")
        if m.pillar_offsets not in ("center", "mean"):
            fail("model.pillar_offsets", "expected 'center' or 'mean'")
        if self.train.lr < 0:
            fail("train.lr", "learning rate must be >= 0")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            fail("train", "batch_size must be >= 1 and epochs >= 0")
        try:
            grid = self.grid.spec()
        except ValueError as e:
            fail("grid", str(e))
        if grid.H % 8 or grid.W % 8:
            fail("grid", f"grid {grid.H}x{grid.W} must be divisible by 8 for the stage schedule")
        return self


# ---------------------------------------------------------------- loading

def _line_map(text: str) -> dict[str, int]:
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    walk(root, "")
    return out


def _convert(tp, value, path, lines):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    def fail(msg):
        line = lines.get(path)
        raise ConfigError(f"{path}: {msg}" + (f" (line {line})" if line else ""))

    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            fail(f"expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path, lines)
    if tp is bool:
        if not isinstance(value, bool):
            fail(f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            fail(f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            fail(f"expected a string, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            fail(f"expected a mapping, got {value!r}")
        return dict(value)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            fail(f"expected a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                fail(f"expected {len(args)} entries, got {len(value)}")
            return tuple(_convert(a, v, f"{path}[{i}]", lines) for i, (a, v) in enumerate(zip(args, value)))
        inner = args[0] if args else typing.Any
        items = [_convert(inner, v, f"{path}[{i}]", lines) if inner is not typing.Any else v
                 for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    return value


def _build(cls, data: dict, prefix: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            line = lines.get(path)
            raise ConfigError(f"{path}: unknown key" + (f" (line {line})" if line else ""))
        kwargs[key] = _convert(hints[key], value, path, lines)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        line = lines.get(prefix)
        raise ConfigError(f"{prefix or 'config'}: {e}" + (f" (line {line})" if line else "")) from e


def from_dict(data: dict, lines: dict | None = None) -> RunConfig:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return _build(RunConfig, data, "", lines).validate(lines)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return from_dict(data, _line_map(text))


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(cfg)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides applied, re-validated."""
    data = copy.deepcopy(to_dict(cfg))
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"{dotted}: unknown key")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{dotted}: unknown key")
        node[keys[-1]] = value
    return from_dict(data)


# ---------------------------------------------------------------- ablations

_OFF = {"model.fusion.p2v": "off", "model.fusion.v2p": "off"}
_FIRST = [True, False, False, False]
_NONE = [False] * 4
_ALL = [True] * 4

ABLATIONS: dict[str, dict[str, dict]] = {
    "dual_path": {
        "pillar_no_trans": {"model.dual_path": False, "model.transformer": _NONE},
        "pillar_no_trans_double": {"model.dual_path": False, "model.transformer": _NONE, "model.channel_mult": 2},
        "pillar_trans_first": {"model.dual_path": False, "model.transformer": _FIRST},
        "pillar_trans_all": {"model.dual_path": False, "model.transformer": _ALL},
        "pillar_trans_all_double": {"model.dual_path": False, "model.transformer": _ALL, "model.channel_mult": 2},
        "dual_trans_first": {"model.transformer": _FIRST},
        "dual_trans_all": {"model.transformer": _ALL},
    },
    "fusion_type": {
        "add_add": {"model.fusion.p2v": "add", "model.fusion.v2p": "add"},
        "concat_concat": {"model.fusion.p2v": "concat", "model.fusion.v2p": "concat"},
        "attention_attention": {"model.fusion.p2v": "attention", "model.fusion.v2p": "attention"},
        "add_attention": {"model.fusion.p2v": "add", "model.fusion.v2p": "attention"},
        "attention_add": {"model.fusion.p2v": "attention", "model.fusion.v2p": "add"},
    },
    "fusion_stages": {
        "none": {"model.dual_path": False, **_OFF},
        "p2v_only": {"model.fusion.v2p": "off"},
        "first_block": {"model.fusion.stages": [1]},
        "last_block": {"model.fusion.stages": [4]},
        "all_blocks": {"model.fusion.stages": [1, 2, 3, 4]},
    },
}


def ablation(cfg: RunConfig, table: str, row: str) -> RunConfig:
    try:
        overrides = ABLATIONS[table][row]
    except KeyError:
        raise ConfigError(f"unknown ablation {table}/{row}") from None
    return with_overrides(cfg, overrides)


def toy_detection_config(seed: int = 0) -> RunConfig:
    """Reduced-width configuration: channels [16, 16, 32, 64] on a 128 x 128 grid."""
    cfg = RunConfig(task="detection", seed=seed)
    cfg.grid = GridConfig((0.0, 25.6), (-12.8, 12.8), (0.2, 0.2))
    cfg.model.channels = [16, 16, 32, 64]
    cfg.model.heads = 2
    cfg.model.fusion = FusionConfig(heads=2)
    cfg.model.neck_width = 16
    cfg.model.head_width = 16
    cfg.model.occ_width = 8
    cfg.train.batch_size = 2
    cfg.eval.iou_thresholds = (0.25, 0.25, 0.25)
    cfg.data.scene = {"place_x": [3.0, 23.0], "place_y": [-10.0, 10.0]}
    return cfg.validate()


def toy_free_road_config(seed: int = 0) -> RunConfig:
    cfg = toy_detection_config(seed)
    cfg.task = "free_road"
    cfg.grid = GridConfig((0.0, 51.2), (-25.6, 25.6), (0.4, 0.4))
    cfg.data.scene = {}
    return cfg.validate()
