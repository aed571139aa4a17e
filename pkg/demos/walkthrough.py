"""Synthesize a few frames, overfit a small model on them, then score and draw the result.

Run with ``python3 demos/walkthrough.py [out_dir]``; takes about a minute on one core.
"""
import sys
from pathlib import Path

from drift.config import toy_detection_config, with_overrides
from drift.frames import SceneConfig, generate_frame, quantize
from drift.metrics import evaluate_detection
from drift.model import DriftModel, detections_of
from drift.render import render_frame, write_ppm
from drift.train import train_loop

out = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough_out")
out.mkdir(parents=True, exist_ok=True)

# a 16 m square scene on 0.4 m cells keeps every step cheap
cfg = with_overrides(toy_detection_config(0), {"train.epochs": 60, "train.lr": 2e-3, "train.eval_period": 20})
grid = cfg.grid.spec()
scene = SceneConfig(x_range=grid.x_range, y_range=grid.y_range, mask_grid=None,
                    place_x=tuple(cfg.data.scene["place_x"]), place_y=tuple(cfg.data.scene["place_y"]))
frames = [quantize(generate_frame(scene, s, frame_id=s)) for s in range(4)]
for f in frames:
    print(f"frame {f.frame_id}: {f.N} points, {len(f.boxes)} boxes")

model = DriftModel(cfg)
print(f"{sum(p.size for p in model.parameters())} parameters")
result = train_loop(model, frames, out_dir=out, echo=print)

preds = model.predict(frames)
report = evaluate_detection(detections_of(preds), [f.boxes for f in frames])
print("AP per class:", {k: round(v, 3) for k, v in report["ap"].items()}, "mAP", round(report["map"], 3))

for f, dets in zip(frames, preds):
    write_ppm(out / f"frame_{f.frame_id}.ppm", render_frame(f, grid, dets, pixels_per_cell=4))
print(f"{result.steps} steps; images and checkpoints in {out}/")
