"""Oriented-box helpers and rigid frame transforms shared by sim and cost."""

from __future__ import annotations

import numpy as np

VEHICLE_LENGTH = 4.6
VEHICLE_WIDTH = 2.0


def half_extent(heading, direction, length=VEHICLE_LENGTH, width=VEHICLE_WIDTH):
    """Half of a box's extent projected onto the unit vector at angle ``direction``."""
    rel = heading - direction
    return 0.5 * length * np.abs(np.cos(rel)) + 0.5 * width * np.abs(np.sin(rel))


def boxes_overlap(xa, ya, ha, xb, yb, hb, length=VEHICLE_LENGTH, width=VEHICLE_WIDTH):
    """Separating-axis test for equally sized oriented boxes (broadcasting)."""
    dx = np.asarray(xb) - np.asarray(xa)
    dy = np.asarray(yb) - np.asarray(ya)
    hl, hw = 0.5 * length, 0.5 * width
    overlap = np.ones(np.broadcast(dx, ha, hb).shape, dtype=bool)
    for axis_h in (ha, hb):
        for ang in (axis_h, axis_h + np.pi / 2):
            c, s = np.cos(ang), np.sin(ang)
            dist = np.abs(dx * c + dy * s)
            ra = hl * np.abs(np.cos(ha - ang)) + hw * np.abs(np.sin(ha - ang))
            rb = hl * np.abs(np.cos(hb - ang)) + hw * np.abs(np.sin(hb - ang))
            overlap &= dist <= ra + rb
    return overlap


def box_gap(xa, ya, ha, xb, yb, hb):
    """Centre distance minus both half-extents along the line of centres."""
    dx = np.asarray(xb) - np.asarray(xa)
    dy = np.asarray(yb) - np.asarray(ya)
    phi = np.arctan2(dy, dx)
    return np.hypot(dx, dy) - half_extent(ha, phi) - half_extent(hb, phi)


def to_frame(xy, heading, origin_xy, origin_heading):
    """Express global points/headings in the frame of ``origin``."""
    c, s = np.cos(origin_heading), np.sin(origin_heading)
    dx = xy[..., 0] - origin_xy[0]
    dy = xy[..., 1] - origin_xy[1]
    out = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)
    return out, heading - origin_heading


def from_frame(xy, heading, origin_xy, origin_heading):
    c, s = np.cos(origin_heading), np.sin(origin_heading)
    x = c * xy[..., 0] - s * xy[..., 1] + origin_xy[0]
    y = s * xy[..., 0] + c * xy[..., 1] + origin_xy[1]
    return np.stack([x, y], axis=-1), heading + origin_heading
