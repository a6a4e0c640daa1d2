"""BEV raster composites: map in gray, actors green, ego blue, attention red.

The red channel is reserved for the attention overlay (255 on attended
pixels, 0 elsewhere) so the overlay can be counted exactly. Images are
flipped so that forward (+x) points up and left (+y) points left.
"""
from __future__ import annotations

import numpy as np

from . import geometry as geo
from .formats import save_pgm, save_ppm
from .planner import Trajectory
from .scene import LABEL_STRIDE, Scene, drivable

GRAY = 90
GREEN = 200
BLUE = 255


def _fill_polygon(img_mask: np.ndarray, centers: np.ndarray, poly: np.ndarray) -> None:
    img_mask |= geo.points_in_polygon(centers, poly)


def render(scene: Scene, mask=None, trajectory=None, scale: int = 2) -> np.ndarray:
    """H·scale × W·scale × 3 uint8 composite in grid orientation (before flipping)."""
    b = scene.bounds
    H, W = b.H * scale, b.W * scale
    res = b.resolution / scale
    xs = b.x_min + (np.arange(H) + 0.5) * res
    ys = b.y_min + (np.arange(W) + 0.5) * res
    centers = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    img = np.zeros((H, W, 3), dtype=np.uint8)
    road = drivable(centers, scene.lanes) if scene.lanes else np.zeros((H, W), bool)
    img[road, 1] = GRAY
    img[road, 2] = GRAY
    actors = np.zeros((H, W), bool)
    for a in scene.actors:
        _fill_polygon(actors, centers, geo.box_corners(*a.box))
    img[actors, 1] = GREEN
    img[actors, 2] = 0
    ego = geo.points_in_polygon(centers, geo.box_corners(0.0, 0.0, *scene.ego_size, 0.0))
    img[ego, 1] = 0
    img[ego, 2] = BLUE
    if trajectory is not None:
        w = trajectory.waypoints if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
        pts = np.vstack([[0.0, 0.0], w[:, :2]])
        for p, q in zip(pts[:-1], pts[1:]):
            n = int(np.ceil(np.hypot(*(q - p)) / (0.5 * res))) + 1
            seg = p + np.linspace(0, 1, n)[:, None] * (q - p)
            i = np.floor((seg[:, 0] - b.x_min) / res).astype(int)
            j = np.floor((seg[:, 1] - b.y_min) / res).astype(int)
            ok = (i >= 0) & (i < H) & (j >= 0) & (j < W)
            img[i[ok], j[ok], 1] = 255
            img[i[ok], j[ok], 2] = 255
    if mask is not None:
        m = np.asarray(mask).reshape(np.shape(mask)[-2:]) > 0
        up = H // m.shape[0]
        img[..., 0] = np.where(np.kron(m, np.ones((up, up), bool)), 255, 0)
    return img


def display(img: np.ndarray) -> np.ndarray:
    """Rotate grid orientation (row = +x, col = +y) so forward is up and left is left."""
    return img[::-1, ::-1]


def red_pixels(img: np.ndarray) -> int:
    return int(np.count_nonzero(img[..., 0] == 255))


def save_visualization(prefix, scene: Scene, mask=None, trajectory=None, scale: int = 2) -> list[str]:
    """Write ``prefix``_mask.pgm (when a mask is given) and ``prefix``_bev.ppm."""
    paths = []
    if mask is not None:
        m = (np.asarray(mask).reshape(np.shape(mask)[-2:]) > 0).astype(np.uint8) * 255
        p = f"{prefix}_mask.pgm"
        save_pgm(p, display(m))
        paths.append(p)
    p = f"{prefix}_bev.ppm"
    save_ppm(p, display(render(scene, mask, trajectory, scale)))
    paths.append(p)
    return paths


def upsample_factor(scene: Scene, scale: int = 2, stride: int = LABEL_STRIDE) -> int:
    """Image pixels per mask cell along each axis."""
    return stride * scale
