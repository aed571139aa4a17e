"""Command-line entry point: ``drift {synth,train,eval,infer,render,selfcheck}``.

Exit codes: 0 success, 1 user error (bad config, missing or malformed input,
checkpoint that does not fit the config), 2 internal invariant failure.
``DRIFT_NUM_THREADS`` (default 1) caps the BLAS thread pools; it takes effect
when set before numpy is first imported, which the console script guarantees.
"""
from __future__ import annotations

import os

THREAD_ENV = "DRIFT_NUM_THREADS"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get(THREAD_ENV, "1"))

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import traceback  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import yaml  # noqa: E402

from . import config as config_mod  # noqa: E402
from .autodiff import NonFiniteError, checkpoint  # noqa: E402
from .frames import (  # noqa: E402
    MANIFEST, FrameFormatError, SceneConfig, decode_masks, encode_masks, generate_frame, read_frame,
    write_dataset,
)
from .heads import format_detections, parse_detections  # noqa: E402
from .metrics import ENTIRE, EvalRegion, evaluate_detection  # noqa: E402
from .model import DriftModel  # noqa: E402
from .render import render_frame, write_ppm  # noqa: E402
from .selfcheck import SABOTAGE_TARGETS, run_selfcheck  # noqa: E402
from .train import BEST_NAME, evaluate_model, load_checkpoint, train_loop  # noqa: E402

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
REPORT_KEYS = {"detection": ("map_all", "map_roi", "ap_car", "ap_ped", "ap_cyc", "loss"),
               "free_road": ("iou_free", "iou_occ", "loss")}


class UserError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- loading

def load_config(args) -> config_mod.RunConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise config_mod.ConfigError(f"--set expects key=value, got {item!r}")
            overrides[key] = yaml.safe_load(value)
        if args.seed is not None:
            overrides["seed"] = args.seed
        return config_mod.with_overrides(cfg, overrides) if overrides else cfg
    except OSError as e:
        raise UserError(f"cannot read config: {e}") from e
    except config_mod.ConfigError as e:
        raise UserError(f"invalid config: {e}") from e


def _read_frame(path):
    try:
        return read_frame(path)
    except OSError as e:
        raise UserError(f"cannot read frame: {e}") from e
    except FrameFormatError as e:
        raise UserError(f"{path}: not a valid frame file ({e})") from e


def read_split(root, split: str | None):
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        entries = [e for e in manifest["frames"] if split is None or e["split"] == split]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UserError(f"{root}: missing or malformed dataset manifest ({e})") from e
    if not entries:
        raise UserError(f"{root}: split {split!r} is empty")
    return [_read_frame(root / e["file"]) for e in entries]


def build_model(cfg, ckpt=None) -> DriftModel:
    model = DriftModel(cfg)
    if ckpt is not None:
        try:
            load_checkpoint(ckpt, model)
        except OSError as e:
            raise UserError(f"cannot read checkpoint: {e}") from e
        except checkpoint.CheckpointError as e:
            raise UserError(f"{ckpt}: not a valid checkpoint ({e})") from e
        except (KeyError, ValueError) as e:
            raise UserError(f"checkpoint {ckpt} does not match the config: {e.args[0]}") from e
    return model


def scene_config(cfg) -> SceneConfig:
    def tuples(v):
        return tuple(tuples(x) for x in v) if isinstance(v, (list, tuple)) else v

    g = cfg.grid.spec()
    overrides = {k: tuples(v) for k, v in cfg.data.scene.items()}
    try:
        return SceneConfig(**{"x_range": g.x_range, "y_range": g.y_range,
                              "mask_grid": g if cfg.task == "free_road" else None, **overrides})
    except TypeError as e:
        raise UserError(f"invalid config: data.scene: {e}") from e


def frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------- commands

def cmd_synth(args, out) -> int:
    cfg = load_config(args)
    n = args.n_frames if args.n_frames is not None else cfg.data.n_frames
    if n < 1:
        raise UserError("--n-frames must be >= 1")
    sc = scene_config(cfg)
    frames = [generate_frame(sc, frame_seed(cfg.seed, i), frame_id=i) for i in range(n)]
    n_val = round(n * cfg.data.val_fraction) if n > 1 else 0
    val = set(np.random.default_rng(cfg.seed).choice(n, n_val, replace=False).tolist())
    splits = ["val" if i in val else "train" for i in range(n)]
    try:
        write_dataset(frames, args.out, splits)
    except OSError as e:
        raise UserError(f"cannot write dataset: {e}") from e
    out(f"wrote {n} frames ({n - n_val} train, {n_val} val) to {args.out}")
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = load_config(args)
    train = read_split(args.data, "train")
    val = read_split(args.data, "val") if _has_split(args.data, "val") else None
    model = build_model(cfg)
    dest = Path(args.out)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        (dest / "config.yaml").write_text(config_mod.dumps(cfg))
    except OSError as e:
        raise UserError(f"cannot write to {dest}: {e}") from e
    res = train_loop(model, train, val, dest, echo=out)
    out(f"{res.steps} steps; best epoch {res.best_epoch} ({res.best_score:.6f}); checkpoint {dest / BEST_NAME}")
    return EXIT_OK


def _has_split(root, split) -> bool:
    try:
        manifest = json.loads((Path(root) / MANIFEST).read_text())
        return any(e.get("split") == split for e in manifest["frames"])
    except (OSError, ValueError, KeyError, TypeError):
        return False


def report(cfg, rec: dict, out) -> None:
    """Aligned table, then one ``metric <name> <value>`` line per number for scripts."""
    keys = REPORT_KEYS[cfg.task]
    out(" | ".join(f"{k:>9}" for k in keys))
    out(" | ".join(f"{rec.get(k, float('nan')):9.4f}" for k in keys))
    for k in keys:
        if k in rec:
            out(f"metric {k} {rec[k]:.6f}")


def cmd_eval(args, out) -> int:
    cfg = load_config(args)
    frames = read_split(args.data, args.split)
    if args.detections is not None:
        if cfg.task != "detection":
            raise UserError("--detections only applies to the detection task")
        dets = _read_detections(args.detections)
        index = {f.frame_id: i for i, f in enumerate(frames)}
        dets = [type(d)(d.box, d.score, index[d.frame_id]) for d in dets if d.frame_id in index]
        rec = _detection_metrics(cfg, dets, [f.boxes for f in frames])
    else:
        if args.checkpoint is None:
            raise UserError("eval needs --checkpoint or --detections")
        model = build_model(cfg, args.checkpoint)
        rec = evaluate_model(model, frames)
        if args.dump and cfg.task == "detection":
            dets = [type(d)(d.box, d.score, frames[d.frame_id].frame_id) for fr in rec["predictions"] for d in fr]
            Path(args.dump).write_text(format_detections(dets))
    report(cfg, rec, out)
    return EXIT_OK


def _read_detections(path):
    try:
        return parse_detections(Path(path).read_text())
    except OSError as e:
        raise UserError(f"cannot read detections: {e}") from e
    except ValueError as e:
        raise UserError(f"{path}: {e}") from e


def _detection_metrics(cfg, dets, gts) -> dict:
    ev = cfg.eval
    corridor = EvalRegion("corridor", tuple(ev.corridor_x), tuple(ev.corridor_y))
    full = evaluate_detection(dets, gts, ENTIRE, ev.iou_thresholds)
    roi = evaluate_detection(dets, gts, corridor, ev.iou_thresholds)
    return {"map_all": full["map"], "map_roi": roi["map"], "ap_car": full["ap"]["car"],
            "ap_ped": full["ap"]["pedestrian"], "ap_cyc": full["ap"]["cyclist"]}


def cmd_infer(args, out) -> int:
    cfg = load_config(args)
    frame = _read_frame(args.frame)
    model = build_model(cfg, args.checkpoint)
    (result,) = model.predict([frame], [frame.frame_id])
    try:
        if cfg.task == "detection":
            Path(args.out).write_text(format_detections(result))
            out(f"{len(result)} detections written to {args.out}")
        else:
            free, occ = result
            Path(args.out).write_bytes(encode_masks(free, occ))
            out(f"free-road mask ({int(free.sum())} free cells) written to {args.out}")
    except OSError as e:
        raise UserError(f"cannot write output: {e}") from e
    return EXIT_OK


def cmd_render(args, out) -> int:
    cfg = load_config(args)
    frame = _read_frame(args.frame)
    grid = cfg.grid.spec()
    dets = None
    if args.detections is not None:
        dets = [d for d in _read_detections(args.detections) if d.frame_id == frame.frame_id]
    free = frame.free_road_mask if args.show_free else None
    if args.mask is not None:
        try:
            free, _ = decode_masks(Path(args.mask).read_bytes())
        except OSError as e:
            raise UserError(f"cannot read mask: {e}") from e
        except FrameFormatError as e:
            raise UserError(f"{args.mask}: not a valid mask file ({e})") from e
    if free is not None and free.shape != (grid.H, grid.W):
        raise UserError(f"mask shape {free.shape} does not match the config grid {(grid.H, grid.W)}")
    img = render_frame(frame, grid, dets, free, grid, args.pixels_per_cell, not args.no_gt)
    try:
        write_ppm(args.out, img)
    except OSError as e:
        raise UserError(f"cannot write image: {e}") from e
    out(f"{img.shape[1]}x{img.shape[0]} image written to {args.out}")
    return EXIT_OK


def cmd_selfcheck(args, out) -> int:
    if args.config:
        load_config(args)   # validate only; the battery uses fixed fixtures
    results = run_selfcheck(args.sabotage, echo=out)
    failed = [r.name for r in results if not r.ok]
    total = sum(r.seconds for r in results)
    out(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    if failed:
        raise InvariantError(f"self-check failures: {', '.join(failed)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drift", description="Dual point/pillar radar backbone: data, training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run config (defaults to the built-in full-size config)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-frames", type=int)

    sp = command("train", cmd_train, "train and write checkpoints plus the metric log")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = command("eval", cmd_eval, "evaluate a checkpoint or a detections file on a split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--checkpoint")
    sp.add_argument("--detections", help="score this detections file instead of running a model")
    sp.add_argument("--dump", help="also write the model's detections here")

    sp = command("infer", cmd_infer, "run one frame; write detections or a mask file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--frame", required=True)
    sp.add_argument("--out", required=True)

    sp = command("render", cmd_render, "draw a frame to a PPM image")
    sp.add_argument("--frame", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--detections")
    sp.add_argument("--mask", help="mask file whose free-road layer is overlaid")
    sp.add_argument("--show-free", action="store_true", help="overlay the frame's stored free-road mask")
    sp.add_argument("--no-gt", action="store_true")
    sp.add_argument("--pixels-per-cell", type=int, default=1)

    sp = command("selfcheck", cmd_selfcheck, "run the invariant battery")
    sp.add_argument("--sabotage", choices=SABOTAGE_TARGETS, help="perturb one fixture to confirm failures surface")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = lambda s: print(s, flush=True)  # noqa: E731
    try:
        return args.fn(args, out)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (InvariantError, NonFiniteError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # anything unanticipated is a bug, not bad input
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
