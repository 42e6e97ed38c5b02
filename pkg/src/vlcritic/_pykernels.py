"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Every expression is evaluated in the same order and precision as the
compiled version so both backends agree bit for bit.
"""

import math
from functools import lru_cache

import numpy as np

SHAPE_SQUARE = 0
SHAPE_CIRCLE = 1
SHAPE_TRIANGLE = 2


@lru_cache(maxsize=8)
def _grid(H, W):
    py = 1.0 - (np.arange(H, dtype=np.float64) + 0.5) / H
    px = (np.arange(W, dtype=np.float64) + 0.5) / W
    return py[:, None], px[None, :]


def render_frame(out, ax, ay, ox, oy, gx, gy, shape, cr, cg, cb,
                 draw_goal, obj_half, agent_radius, goal_radius, ring_half):
    H, W = out.shape[0], out.shape[1]
    py, px = _grid(H, W)
    out[...] = 128

    if draw_goal:
        inner = goal_radius - ring_half
        outer = goal_radius + ring_half
        dx = px - gx
        dy = py - gy
        d2 = dx * dx + dy * dy
        out[(d2 >= inner * inner) & (d2 <= outer * outer)] = 30

    dx = px - ox
    dy = py - oy
    if shape == SHAPE_SQUARE:
        inside = (dx <= obj_half) & (dx >= -obj_half) & (dy <= obj_half) & (dy >= -obj_half)
    elif shape == SHAPE_CIRCLE:
        inside = dx * dx + dy * dy <= obj_half * obj_half
    else:
        hw = (obj_half - dy) * 0.5
        inside = (dy >= -obj_half) & (dy <= obj_half) & (dx <= hw) & (dx >= -hw)
    out[inside] = (cr, cg, cb)

    dx = px - ax
    dy = py - ay
    out[dx * dx + dy * dy <= agent_radius * agent_radius] = 255


def _clip01(v):
    return 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)


def push_step(ax, ay, ox, oy, vx, vy, contact):
    nax = _clip01(ax + vx)
    nay = _clip01(ay + vy)
    dx = nax - ax
    dy = nay - ay
    dn = math.sqrt(dx * dx + dy * dy)
    if dn > 0.0:
        wx = ox - nax
        wy = oy - nay
        w2 = wx * wx + wy * wy
        if w2 < contact * contact:
            ux = dx / dn
            uy = dy / dn
            wu = wx * ux + wy * uy
            if wu > 0.0:
                s = -wu + math.sqrt(wu * wu - w2 + contact * contact)
                ox = _clip01(ox + s * ux)
                oy = _clip01(oy + s * uy)
    return nax, nay, ox, oy
