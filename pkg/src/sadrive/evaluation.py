"""Planning and detection metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .formats import write_csv
from .planner import Trajectory, ego_corners, off_lane_steps
from .scene import EGO_SIZE, LABEL_STRIDE, Actor, Bounds, Lane

IOU_THRESHOLDS = (0.3, 0.5, 0.7)


def _xy(traj) -> np.ndarray:
    w = traj.waypoints if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    return w[..., :2]


def planning_l2(pred, gt) -> np.ndarray:
    """Euclidean waypoint error per step; the last entry is the 3 s value."""
    p, g = _xy(pred), _xy(gt)
    if p.shape != g.shape:
        raise ValueError(f"trajectories differ in shape: {p.shape} vs {g.shape}")
    return np.linalg.norm(p - g, axis=-1)


def collides(pred, actors: list[Actor], ego_size=EGO_SIZE) -> bool:
    """Ego box along ``pred`` overlaps some actor box along its future track."""
    if not actors:
        return False
    w = pred.waypoints if isinstance(pred, Trajectory) else np.asarray(pred)
    ego = ego_corners(w, ego_size)  # T×4×2
    for a in actors:
        if len(a.future_track) != len(w):
            raise ValueError(f"actor track has {len(a.future_track)} steps, plan has {len(w)}")
        if geo.boxes_overlap(ego, a.corners_at(a.future_track)).any():
            return True
    return False


def violates_lanes(pred, lanes: list[Lane], ego_size=EGO_SIZE) -> bool:
    w = pred.waypoints if isinstance(pred, Trajectory) else np.asarray(pred)
    return bool(off_lane_steps(w, lanes, ego_size).any())


def collision_rate(preds, scenes) -> float:
    """Fraction of scenes whose plan collides at any step."""
    flags = [collides(p, s.actors, s.ego_size) for p, s in zip(preds, scenes)]
    return float(np.mean(flags)) if flags else 0.0


def lane_violation_rate(preds, scenes) -> float:
    flags = [violates_lanes(p, s.lanes, s.ego_size) for p, s in zip(preds, scenes)]
    return float(np.mean(flags)) if flags else 0.0


# ---------------------------------------------------------------------------
# detection


def in_region(boxes, mask, bounds: Bounds, stride: int = LABEL_STRIDE) -> np.ndarray:
    """Whether each box centre falls on an active mask cell."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    if len(boxes) == 0:
        return np.zeros(0, dtype=bool)
    m = np.asarray(mask).reshape(np.shape(mask)[-2:]) > 0
    i, j = bounds.cell_index(boxes[:, :2], stride)
    ok = (i >= 0) & (i < m.shape[0]) & (j >= 0) & (j < m.shape[1])
    out = np.zeros(len(boxes), dtype=bool)
    out[ok] = m[i[ok], j[ok]]
    return out


def match_detections(dets, gts, iou: float):
    """Greedy matching in descending score order across all scenes.

    ``dets[k]`` is a list of (box, score) for scene k and ``gts[k]`` a list of
    boxes. Returns (scores, tp flags, number of ground truths).
    """
    order = []
    for k, ds in enumerate(dets):
        for n, (_, s) in enumerate(ds):
            order.append((-float(s), k, n))
    order.sort()
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    scores, tp = [], []
    for neg_s, k, n in order:
        box = dets[k][n][0]
        best, best_i = -1.0, -1
        for i, g in enumerate(gts[k]):
            if used[k][i]:
                continue
            v = geo.rotated_iou(box, g)
            if v >= iou and v > best:
                best, best_i = v, i
        if best_i >= 0:
            used[k][best_i] = True
        scores.append(-neg_s)
        tp.append(best_i >= 0)
    return np.asarray(scores), np.asarray(tp, dtype=bool), sum(len(g) for g in gts)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """11-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        sel = precision[recall >= r - 1e-12]
        ap += sel.max() if len(sel) else 0.0
    return ap / 11


def detection_map(dets, gts, thresholds=IOU_THRESHOLDS, masks=None, bounds: Bounds | None = None) -> dict:
    """AP per IoU threshold over a dataset.

    With ``masks`` (one per scene) only ground truths and detections whose
    centre cell is attended are kept.
    """
    if masks is not None:
        bounds = bounds or Bounds()
        dets = [[d for d, keep in zip(ds, in_region([b for b, _ in ds], m, bounds)) if keep]
                for ds, m in zip(dets, masks)]
        gts = [[g for g, keep in zip(gs, in_region(gs, m, bounds)) if keep] for gs, m in zip(gts, masks)]
    out = {}
    for thr in thresholds:
        _, tp, n_gt = match_detections(dets, gts, thr)
        out[thr] = average_precision(tp, n_gt)
    return out


def gt_coverage(scenes, masks) -> float:
    """Fraction of actors whose centre cell is attended."""
    hit = total = 0
    for s, m in zip(scenes, masks):
        boxes = [a.box for a in s.actors]
        hit += int(in_region(boxes, m, s.bounds).sum())
        total += len(boxes)
    return hit / total if total else float("nan")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    sparsity: float = 0.0  # percent
    planning_l2: float = 0.0  # metres at 3 s
    collision_rate: float = 0.0  # percent
    lane_violation: float = 0.0  # percent
    map_full: dict = field(default_factory=dict)
    map_attended: dict = field(default_factory=dict)
    flops: float = 0.0  # sparse backbone FLOPs per scene
    l2_curve: list = field(default_factory=list)
    n_scenes: int = 0

    def columns(self) -> list[tuple[str, object]]:
        cols = [
            ("sparsity_pct", self.sparsity),
            ("planning_l2_3s_m", self.planning_l2),
            ("collision_rate_pct", self.collision_rate),
            ("lane_violation_pct", self.lane_violation),
        ]
        for thr in IOU_THRESHOLDS:
            cols.append((f"map_full@{thr}", self.map_full.get(thr, float("nan"))))
        for thr in IOU_THRESHOLDS:
            cols.append((f"map_attended@{thr}", self.map_attended.get(thr, float("nan"))))
        cols.append(("gflops", self.flops / 1e9))
        cols.append(("n_scenes", self.n_scenes))
        return cols

    def save_csv(self, path) -> None:
        cols = self.columns()
        write_csv(path, [c for c, _ in cols], [[v for _, v in cols]])

    def to_text(self) -> str:
        cols = self.columns()
        cells = [(c, f"{v:.4f}" if isinstance(v, float) else str(v)) for c, v in cols]
        width = [max(len(c), len(v)) for c, v in cells]
        head = "  ".join(c.rjust(w) for (c, _), w in zip(cells, width))
        body = "  ".join(v.rjust(w) for (_, v), w in zip(cells, width))
        return head + "\n" + body + "\n"
