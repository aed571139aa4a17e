"""Training loop, evaluation and the append-only metric log."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import augment, build_gt_database
from .autodiff import backward, checkpoint, no_grad
from .frames import RadarFrame
from .metrics import ENTIRE, EvalRegion, evaluate_detection, mask_iou
from .model import DriftModel
from .optim import AdamW, split_state

LOG_FIELDS = ("epoch", "split", "map_all", "map_roi", "ap_car", "ap_ped", "ap_cyc", "iou_free", "iou_occ", "loss")
LOG_NAME = "metrics.log"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"


def format_log_line(record: dict) -> str:
    vals = []
    for key in LOG_FIELDS:
        v = record.get(key, math.nan)
        vals.append(str(v) if key in ("epoch", "split") else f"{float(v):.6f}")
    return ", ".join(vals)


def parse_log_line(line: str) -> dict:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != len(LOG_FIELDS):
        raise ValueError(f"malformed metric line {line!r}")
    rec = {"epoch": int(parts[0]), "split": parts[1]}
    rec.update({k: float(v) for k, v in zip(LOG_FIELDS[2:], parts[2:])})
    return rec


def frame_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Augmentation stream for one frame of one epoch, independent of batching or workers."""
    return np.random.default_rng([seed, epoch, index])


def batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for s in range(0, n, size):
        yield order[s:s + size]


def evaluate_model(model: DriftModel, frames: list[RadarFrame], batch_size: int | None = None) -> dict:
    """Metrics and mean loss over ``frames`` without augmentation.

    Also returns the raw per-frame ``predictions`` (frame ids are list positions).
    """
    if not frames:
        raise ValueError("cannot evaluate on an empty split")
    bs = batch_size or model.cfg.train.batch_size
    ev = model.cfg.eval
    preds, total = [], 0.0
    with no_grad():
        for idx in batches(len(frames), bs):
            chunk = [frames[i] for i in idx]
            out = model(chunk)
            loss, _ = model.loss(chunk, out)
            total += float(loss.data) * len(chunk)
            preds.extend(model.decode(out, [int(i) for i in idx]))
    rec = {"loss": total / len(frames), "predictions": preds}
    if model.cfg.task == "detection":
        dets = [d for frame in preds for d in frame]
        gts = [f.boxes for f in frames]
        corridor = EvalRegion("corridor", tuple(ev.corridor_x), tuple(ev.corridor_y))
        full = evaluate_detection(dets, gts, ENTIRE, ev.iou_thresholds)
        roi = evaluate_detection(dets, gts, corridor, ev.iou_thresholds)
        rec.update(map_all=full["map"], map_roi=roi["map"], ap_car=full["ap"]["car"],
                   ap_ped=full["ap"]["pedestrian"], ap_cyc=full["ap"]["cyclist"])
    else:
        occ_gt = model.occupancy_targets(frames)
        free_gt = model.free_road_targets(frames, occ_gt)
        rec["iou_free"] = float(np.mean([mask_iou(p[0], g) for p, g in zip(preds, free_gt)]))
        rec["iou_occ"] = float(np.mean([mask_iou(p[1], g) for p, g in zip(preds, occ_gt)]))
    return rec


def save_checkpoint(path, model: DriftModel, opt: AdamW | None = None) -> None:
    state = dict(model.state_dict())
    if opt is not None:
        state.update(opt.state_dict())
    checkpoint.save(path, state)


def load_checkpoint(path, model: DriftModel, opt: AdamW | None = None) -> None:
    """Load weights (and optimizer state when given); raises with the offending names on mismatch."""
    weights, opt_state = split_state(checkpoint.load(path))
    model.load_state_dict(weights)
    if opt is not None and opt_state:
        opt.load_state_dict(opt_state)


@dataclass
class TrainResult:
    log: list[str] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = 0
    best_score: float = -math.inf
    last: dict = field(default_factory=dict)


def train_loop(model: DriftModel, train_frames: list[RadarFrame], val_frames: list[RadarFrame] | None = None,
               out_dir=None, echo=None) -> TrainResult:
    """Shuffled minibatch AdamW training with periodic evaluation.

    Evaluation runs on the validation split when one is given, otherwise on the
    training frames. The best-scoring epoch (mAP over the entire scene, or free
    road IoU) is checkpointed with its optimizer state.
    """
    if not train_frames:
        raise ValueError("training split is empty")
    cfg = model.cfg
    tc = cfg.train
    opt = AdamW(model.named_parameters(), tc.lr, tuple(tc.betas), tc.eps, tc.weight_decay)
    flags = list(tc.augment)
    detection = cfg.task == "detection"
    if detection:
        # masks play no part in detection; dropping them lets augmentation skip re-deriving them
        train_frames = [replace(f, free_road_mask=None, occupancy_mask=None) for f in train_frames]
    database = build_gt_database(train_frames) if "gt_sample" in flags else None
    mask_grid = None if detection else model.grid
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / LOG_NAME).write_text("")
    res = TrainResult()
    eval_split, eval_frames = ("val", val_frames) if val_frames else ("train", train_frames)

    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_frames))
        for idx in batches(len(train_frames), tc.batch_size, order):
            batch = [augment(train_frames[i], flags, frame_rng(cfg.seed, epoch, int(i)), database, mask_grid)
                     if flags else train_frames[i] for i in idx]
            opt.zero_grad()
            loss, _ = model.loss(batch)
            backward(loss)
            opt.step()
            res.steps += 1
            if tc.max_steps and res.steps >= tc.max_steps:
                break
        done = bool(tc.max_steps and res.steps >= tc.max_steps) or epoch == tc.epochs
        if epoch % tc.eval_period and not done:
            continue
        rec = evaluate_model(model, eval_frames)
        rec.update(epoch=epoch, split=eval_split)
        line = format_log_line(rec)
        res.log.append(line)
        res.last = rec
        if echo is not None:
            echo(line)
        if out is not None:
            with open(out / LOG_NAME, "a") as fh:
                fh.write(line + "\n")
        score = rec["map_all"] if detection else rec["iou_free"]
        if score > res.best_score:
            res.best_score, res.best_epoch = score, epoch
            if out is not None:
                save_checkpoint(out / BEST_NAME, model, opt)
        if done:
            break
    if out is not None:
        save_checkpoint(out / LAST_NAME, model, opt)
    return res
