# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer and push dynamics.

Both functions mirror :mod:`vlcritic._pykernels` operation for operation so
the two backends produce bit-identical output.
"""

from libc.math cimport sqrt, floor, ceil

cdef int SHAPE_SQUARE = 0
cdef int SHAPE_CIRCLE = 1
cdef int SHAPE_TRIANGLE = 2


cdef inline int _clampi(int v, int lo, int hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef inline double _clip01(double v) nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


cdef inline void _rows_cols(double cx, double cy, double r, int H, int W,
                            int* i0, int* i1, int* j0, int* j1) nogil:
    # conservative pixel bounding box of a disc of radius r around (cx, cy)
    i0[0] = _clampi(<int>floor((1.0 - cy - r) * H) - 1, 0, H - 1)
    i1[0] = _clampi(<int>ceil((1.0 - cy + r) * H) + 1, 0, H - 1)
    j0[0] = _clampi(<int>floor((cx - r) * W) - 1, 0, W - 1)
    j1[0] = _clampi(<int>ceil((cx + r) * W) + 1, 0, W - 1)


def render_frame(unsigned char[:, :, ::1] out,
                 double ax, double ay, double ox, double oy, double gx, double gy,
                 int shape, unsigned char cr, unsigned char cg, unsigned char cb,
                 bint draw_goal, double obj_half, double agent_radius,
                 double goal_radius, double ring_half):
    cdef int H = out.shape[0]
    cdef int W = out.shape[1]
    cdef int i, j, i0, i1, j0, j1
    cdef double px, py, dx, dy, d2, inner, outer, hw
    cdef bint inside

    with nogil:
        for i in range(H):
            for j in range(W):
                out[i, j, 0] = 128
                out[i, j, 1] = 128
                out[i, j, 2] = 128

        if draw_goal:
            inner = goal_radius - ring_half
            outer = goal_radius + ring_half
            _rows_cols(gx, gy, outer, H, W, &i0, &i1, &j0, &j1)
            for i in range(i0, i1 + 1):
                py = 1.0 - (i + 0.5) / H
                for j in range(j0, j1 + 1):
                    px = (j + 0.5) / W
                    dx = px - gx
                    dy = py - gy
                    d2 = dx * dx + dy * dy
                    if d2 >= inner * inner and d2 <= outer * outer:
                        out[i, j, 0] = 30
                        out[i, j, 1] = 30
                        out[i, j, 2] = 30

        _rows_cols(ox, oy, obj_half * 1.5, H, W, &i0, &i1, &j0, &j1)
        for i in range(i0, i1 + 1):
            py = 1.0 - (i + 0.5) / H
            for j in range(j0, j1 + 1):
                px = (j + 0.5) / W
                dx = px - ox
                dy = py - oy
                if shape == SHAPE_SQUARE:
                    inside = dx <= obj_half and dx >= -obj_half and dy <= obj_half and dy >= -obj_half
                elif shape == SHAPE_CIRCLE:
                    inside = dx * dx + dy * dy <= obj_half * obj_half
                else:
                    hw = (obj_half - dy) * 0.5
                    inside = dy >= -obj_half and dy <= obj_half and dx <= hw and dx >= -hw
                if inside:
                    out[i, j, 0] = cr
                    out[i, j, 1] = cg
                    out[i, j, 2] = cb

        _rows_cols(ax, ay, agent_radius, H, W, &i0, &i1, &j0, &j1)
        for i in range(i0, i1 + 1):
            py = 1.0 - (i + 0.5) / H
            for j in range(j0, j1 + 1):
                px = (j + 0.5) / W
                dx = px - ax
                dy = py - ay
                if dx * dx + dy * dy <= agent_radius * agent_radius:
                    out[i, j, 0] = 255
                    out[i, j, 1] = 255
                    out[i, j, 2] = 255


def push_step(double ax, double ay, double ox, double oy,
              double vx, double vy, double contact):
    """Move the agent by (vx, vy) and push the object out of contact.

    Returns the new (ax, ay, ox, oy).
    """
    cdef double nax = _clip01(ax + vx)
    cdef double nay = _clip01(ay + vy)
    cdef double dx = nax - ax
    cdef double dy = nay - ay
    cdef double dn = sqrt(dx * dx + dy * dy)
    cdef double wx, wy, w2, ux, uy, wu, s
    if dn > 0.0:
        wx = ox - nax
        wy = oy - nay
        w2 = wx * wx + wy * wy
        if w2 < contact * contact:
            ux = dx / dn
            uy = dy / dn
            wu = wx * ux + wy * uy
            if wu > 0.0:
                s = -wu + sqrt(wu * wu - w2 + contact * contact)
                ox = _clip01(ox + s * ux)
                oy = _clip01(oy + s * uy)
    return nax, nay, ox, oy
