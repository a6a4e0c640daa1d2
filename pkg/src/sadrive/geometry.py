"""Planar geometry: oriented boxes, separating-axis overlap, convex clipping,
lane surfaces, and the anchor box reparameterisation."""
from __future__ import annotations

import math

import numpy as np

# ---------------------------------------------------------------------------
# oriented boxes


def box_corners(x, y, w, h, theta) -> np.ndarray:
    """Corners of boxes centred at (x, y), length ``w`` along the heading and
    width ``h`` across it, counter-clockwise. Broadcasts to shape (..., 4, 2)."""
    x, y, w, h, theta = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, w, h, theta)))
    c, s = np.cos(theta), np.sin(theta)
    lx = np.array([0.5, -0.5, -0.5, 0.5])
    ly = np.array([0.5, 0.5, -0.5, -0.5])
    dx = w[..., None] * lx
    dy = h[..., None] * ly
    px = x[..., None] + c[..., None] * dx - s[..., None] * dy
    py = y[..., None] + s[..., None] * dx + c[..., None] * dy
    return np.stack([px, py], axis=-1)


def _axes(poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=-2) - poly
    normals = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    return normals


def sat_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """True when convex polygons ``a`` and ``b`` overlap with positive area.

    Separating-axis test: the polygons are disjoint iff their projections are
    disjoint on some edge normal. Touching boundaries count as disjoint.
    """
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa = a @ axis
        pb = b @ axis
        if pa.max() <= pb.min() or pb.max() <= pa.min():
            return False
    return True


def boxes_overlap(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Vectorised SAT between corner arrays of shape (..., 4, 2), broadcasting."""
    a, b = np.broadcast_arrays(boxes_a, boxes_b)
    sep = np.zeros(a.shape[:-2], dtype=bool)
    for src in (a, b):
        normals = _axes(src)
        for k in range(4):
            ax = normals[..., k, :]
            pa = np.einsum("...ij,...j->...i", a, ax)
            pb = np.einsum("...ij,...j->...i", b, ax)
            sep |= (pa.max(-1) <= pb.min(-1)) | (pb.max(-1) <= pa.min(-1))
    return ~sep


# ---------------------------------------------------------------------------
# polygons


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        inp = out
        out = []

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        for j in range(len(inp)):
            cur = inp[j]
            prev = inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(box_a, box_b) -> float:
    """Exact IoU of two (x, y, w, h, theta) boxes via convex clipping."""
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    inter = polygon_area(clip_convex(ca, cb))
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return inter / union if union > 0 else 0.0


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting along +x."""
    px = points[..., 0][..., None]
    py = points[..., 1][..., None]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    crosses = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    return (np.count_nonzero(crosses & (px < xint), axis=-1) % 2) == 1


# ---------------------------------------------------------------------------
# lanes


def segment_frames(polyline: np.ndarray):
    """Start points, unit directions and lengths of each polyline segment."""
    p0 = polyline[:-1]
    d = polyline[1:] - p0
    length = np.hypot(d[:, 0], d[:, 1])
    u = d / np.maximum(length, 1e-12)[:, None]
    return p0, u, length


def on_lane(points: np.ndarray, polyline: np.ndarray, width: float) -> np.ndarray:
    """Membership in the union of flat-capped rectangles around each segment."""
    pts = np.asarray(points, dtype=np.float64)
    p0, u, length = segment_frames(polyline)
    rel = pts[..., None, :] - p0
    along = np.einsum("...kj,kj->...k", rel, u)
    across = rel[..., 0] * u[:, 1] - rel[..., 1] * u[:, 0]
    inside = (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)
    return inside.any(axis=-1)


def distance_to_polyline(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    p0, u, length = segment_frames(polyline)
    rel = pts[..., None, :] - p0
    t = np.clip(np.einsum("...kj,kj->...k", rel, u), 0, length)
    closest = p0 + t[..., None] * u
    d = np.linalg.norm(pts[..., None, :] - closest, axis=-1)
    return d.min(axis=-1)


def lane_rectangles(polyline: np.ndarray, width: float) -> list[np.ndarray]:
    """The segment rectangles whose union is the lane surface, as CCW polygons."""
    p0, u, length = segment_frames(polyline)
    out = []
    for s, d, ln in zip(p0, u, length):
        n = np.array([-d[1], d[0]]) * width / 2
        e = s + d * ln
        out.append(np.array([s - n, e - n, e + n, s + n]))
    return out


def interpolate_polyline(polyline: np.ndarray, s) -> np.ndarray:
    """Points (x, y, heading) at arc lengths ``s``; extrapolates along end segments."""
    p0, u, length = segment_frames(polyline)
    cum = np.concatenate([[0.0], np.cumsum(length)])
    s = np.asarray(s, dtype=np.float64)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(length) - 1)
    local = s - cum[k]
    xy = p0[k] + local[..., None] * u[k]
    heading = np.arctan2(u[k, 1], u[k, 0])
    return np.concatenate([xy, heading[..., None]], axis=-1)


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


# ---------------------------------------------------------------------------
# anchor box reparameterisation


def encode_box(box, anchor) -> np.ndarray:
    """6-vector offset of ``box`` = (x, y, w, h, theta) from ``anchor``."""
    x, y, w, h, th = box
    xa, ya, wa, ha, tha = anchor
    return np.array(
        [
            (xa - x) / wa,
            (ya - y) / ha,
            math.log(w / wa),
            math.log(h / ha),
            math.sin(tha - th),
            math.cos(tha - th),
        ]
    )


def decode_box(delta, anchor) -> np.ndarray:
    """Inverse of :func:`encode_box`; heading recovered with atan2."""
    d = np.asarray(delta, dtype=np.float64)
    xa, ya, wa, ha, tha = anchor
    x = xa - d[..., 0] * wa
    y = ya - d[..., 1] * ha
    w = wa * np.exp(d[..., 2])
    h = ha * np.exp(d[..., 3])
    th = wrap_angle(tha - np.arctan2(d[..., 4], d[..., 5]))
    return np.stack(np.broadcast_arrays(x, y, w, h, th), axis=-1)
