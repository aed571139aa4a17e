"""How a free-road label is made: occupied cells block rays cast from the sensor cell."""
import sys

import numpy as np

from drift.frames import BoxLabel, RadarFrame, rasterize_boxes
from drift.heads import Detection
from drift.pillars import GridSpec
from drift.raycast import raycast_free_road
from drift.render import render_frame, write_ppm

grid = GridSpec((0.0, 25.6), (-12.8, 12.8), (0.2, 0.2))
boxes = [BoxLabel(8.0, 2.0, 0.0, 4.2, 1.8, 1.5, 0.3, 0),
         BoxLabel(14.0, -4.0, 0.0, 0.7, 0.6, 1.7, 0.0, 1),
         BoxLabel(19.0, 5.0, 0.0, 1.8, 0.7, 1.7, -1.0, 2)]
occ = rasterize_boxes(boxes, grid)
free = raycast_free_road(occ, grid.origin_cell(), n_rays=360)
print(f"grid {occ.shape}, occupied {occ.sum()}, free {free.sum()} ({free.mean():.1%})")

# more rays fill the gaps between spokes far from the sensor
for n in (45, 90, 360, 1440):
    print(f"{n:5d} rays -> {raycast_free_road(occ, grid.origin_cell(), n_rays=n).sum()} free cells")

frame = RadarFrame(0, np.zeros((0, 7)), boxes=boxes)
img = render_frame(frame, grid, [Detection(b, 1.0) for b in boxes], free_mask=free, pixels_per_cell=2)
write_ppm(sys.argv[1] if len(sys.argv) > 1 else "free_road.ppm", img)
