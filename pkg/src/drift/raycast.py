"""Free-road extraction by integer grid traversal (Amanatides & Woo) from the sensor cell."""
from __future__ import annotations

import numpy as np

TIE_TOL = 1e-9


def ray_directions(n_rays: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n_rays) / n_rays
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def raycast_free_road(occupied: np.ndarray, origin: tuple[int, int], n_rays: int = 360,
                      cell_aspect: float = 1.0) -> np.ndarray:
    """Union over ``n_rays`` equally spaced rays of the cells passed before the first occupied cell.

    ``occupied`` is a boolean ``(H, W)`` grid indexed ``[gx, gy]``; rays start at
    the centre of ``origin``. ``cell_aspect`` is ``vx / vy`` for non-square cells.
    A ray that passes exactly through a cell corner (within ``TIE_TOL``) steps
    diagonally and touches neither side cell.
    """
    occ = np.asarray(occupied, dtype=bool)
    h, w = occ.shape
    ox, oy = origin
    if not (0 <= ox < h and 0 <= oy < w):
        raise ValueError(f"origin {origin} outside grid {occ.shape}")
    free = np.zeros_like(occ)
    if occ[ox, oy] or n_rays == 0:
        return free

    d = ray_directions(n_rays)
    dx = d[:, 0]
    dy = d[:, 1] * cell_aspect
    with np.errstate(divide="ignore"):
        tdx = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        tdy = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    sx = np.sign(dx).astype(np.int64)
    sy = np.sign(dy).astype(np.int64)
    cx = np.full(n_rays, ox, dtype=np.int64)
    cy = np.full(n_rays, oy, dtype=np.int64)
    alive = np.ones(n_rays, dtype=bool)
    free[ox, oy] = True
    while alive.any():
        tie = np.abs(tmx - tmy) <= TIE_TOL * np.maximum(1.0, np.minimum(tmx, tmy))
        step_x = tie | (tmx < tmy)
        step_y = tie | ~step_x
        cx = np.where(alive & step_x, cx + sx, cx)
        cy = np.where(alive & step_y, cy + sy, cy)
        tmx = np.where(step_x, tmx + tdx, tmx)
        tmy = np.where(step_y, tmy + tdy, tmy)
        alive &= (cx >= 0) & (cx < h) & (cy >= 0) & (cy < w)
        ia = np.flatnonzero(alive)
        blocked = occ[cx[ia], cy[ia]]
        alive[ia[blocked]] = False
        ok = ia[~blocked]
        free[cx[ok], cy[ok]] = True
    return free
