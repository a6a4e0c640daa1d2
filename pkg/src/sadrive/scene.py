"""Procedural driving scenes and their bird's-eye-view rasterisation.

Everything is expressed in the ego frame at t=0: the ego sits at the origin
facing +x, y points left. Grid axis 0 indexes x, axis 1 indexes y.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .formats import save_tensor

T_FUTURE = 6
DT_FUTURE = 0.5
T_PAST = 10
DT_SWEEP = 0.1
Z_SLICES = 3
Z_EDGES = (0.3, 1.2)  # slice boundaries (m)
MAP_CHANNELS = ("lane_surface", "lane_centerline", "ego_route")
EGO_SIZE = (4.5, 2.0)
ANCHOR_SIZE = (4.5, 2.0)
LABEL_STRIDE = 4
LANE_WIDTH = 3.5
V_MAX = 15.0
KAPPA_MAX = 0.2
A_MAX = 3.0

SCENE_MAGIC = "sadrive-scene v1"
DIFFICULTY = ("sparse", "urban", "dense")


@dataclass(frozen=True)
class Bounds:
    """Metric extent of the BEV grid."""

    x_min: float = -16.0
    y_min: float = -24.0
    length_x: float = 48.0
    length_y: float = 48.0
    resolution: float = 0.5

    def validate(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        for name, ln in (("length_x", self.length_x), ("length_y", self.length_y)):
            n = ln / self.resolution
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"resolution {self.resolution} does not evenly divide {name}={ln}")

    @property
    def H(self) -> int:
        return int(round(self.length_x / self.resolution))

    @property
    def W(self) -> int:
        return int(round(self.length_y / self.resolution))

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy)
        return (
            (xy[..., 0] >= self.x_min)
            & (xy[..., 0] < self.x_min + self.length_x)
            & (xy[..., 1] >= self.y_min)
            & (xy[..., 1] < self.y_min + self.length_y)
        )

    def cell_index(self, xy, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        res = self.resolution * stride
        xy = np.asarray(xy, dtype=np.float64)
        return (
            np.floor((xy[..., 0] - self.x_min) / res).astype(int),
            np.floor((xy[..., 1] - self.y_min) / res).astype(int),
        )

    def cell_centers(self, stride: int = 1) -> np.ndarray:
        """H/stride × W/stride × 2 array of cell-centre coordinates."""
        res = self.resolution * stride
        xs = self.x_min + (np.arange(self.H // stride) + 0.5) * res
        ys = self.y_min + (np.arange(self.W // stride) + 0.5) * res
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def to_cell_coords(self, xy, stride: int = 1):
        """Fractional cell coordinates with cell centres at integers."""
        res = self.resolution * stride
        xy = np.asarray(xy, dtype=np.float64)
        return (xy[..., 0] - self.x_min) / res - 0.5, (xy[..., 1] - self.y_min) / res - 0.5


@dataclass
class Lane:
    centerline: np.ndarray
    width: float = LANE_WIDTH


@dataclass
class Actor:
    """A vehicle; tracks hold (x, y, heading) rows.

    ``future_track[k]`` is the pose at t = (k+1)·0.5 s; ``past_track[s]`` the
    pose at sweep s, i.e. t = -0.1·s (``past_track[0]`` is the current pose).
    """

    center: tuple[float, float]
    size: tuple[float, float]
    heading: float
    future_track: np.ndarray
    past_track: np.ndarray
    kind: str = "vehicle"
    speed: float = 0.0

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise ValueError(f"actor size must be positive, got {self.size}")
        if len(self.future_track) != T_FUTURE:
            raise ValueError(f"future_track needs {T_FUTURE} entries, got {len(self.future_track)}")
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"heading {self.heading} outside (-pi, pi]")

    @property
    def box(self) -> tuple[float, float, float, float, float]:
        return (self.center[0], self.center[1], self.size[0], self.size[1], self.heading)

    def corners_at(self, track: np.ndarray) -> np.ndarray:
        return geo.box_corners(track[:, 0], track[:, 1], self.size[0], self.size[1], track[:, 2])


@dataclass
class Scene:
    seed: int
    difficulty: str
    bounds: Bounds
    ego_past: np.ndarray
    ego_future: np.ndarray
    ego_speed: float
    actors: list[Actor]
    lanes: list[Lane]
    route: np.ndarray
    ego_size: tuple[float, float] = EGO_SIZE

    @property
    def ego_track(self) -> np.ndarray:
        """T' past poses (oldest first) followed by the T future poses."""
        return np.concatenate([self.ego_past[::-1], self.ego_future])

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "difficulty": self.difficulty,
            "bounds": [self.bounds.x_min, self.bounds.y_min, self.bounds.length_x, self.bounds.length_y,
                       self.bounds.resolution],
            "ego_size": list(self.ego_size),
            "ego_speed": float(self.ego_speed),
            "ego_past": self.ego_past.tolist(),
            "ego_future": self.ego_future.tolist(),
            "route": self.route.tolist(),
            "lanes": [{"width": ln.width, "centerline": ln.centerline.tolist()} for ln in self.lanes],
            "actors": [
                {
                    "kind": a.kind,
                    "center": list(a.center),
                    "size": list(a.size),
                    "heading": a.heading,
                    "speed": a.speed,
                    "future_track": a.future_track.tolist(),
                    "past_track": a.past_track.tolist(),
                }
                for a in self.actors
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            seed=d["seed"],
            difficulty=d["difficulty"],
            bounds=Bounds(*d["bounds"]),
            ego_past=np.array(d["ego_past"], dtype=np.float64),
            ego_future=np.array(d["ego_future"], dtype=np.float64),
            ego_speed=d["ego_speed"],
            actors=[
                Actor(
                    center=tuple(a["center"]),
                    size=tuple(a["size"]),
                    heading=a["heading"],
                    future_track=np.array(a["future_track"], dtype=np.float64),
                    past_track=np.array(a["past_track"], dtype=np.float64),
                    kind=a["kind"],
                    speed=a["speed"],
                )
                for a in d["actors"]
            ],
            lanes=[Lane(np.array(ln["centerline"], dtype=np.float64), ln["width"]) for ln in d["lanes"]],
            route=np.array(d["route"], dtype=np.float64),
            ego_size=tuple(d["ego_size"]),
        )


def save_scene(path, scene: Scene) -> None:
    """Versioned text format: header line, then one JSON document."""
    Path(path).write_text(SCENE_MAGIC + "\n" + json.dumps(scene.to_dict(), indent=1) + "\n")


def load_scene(path) -> Scene:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if header.strip() != SCENE_MAGIC:
        raise ValueError(f"{path}: expected header {SCENE_MAGIC!r}, got {header!r}")
    return Scene.from_dict(json.loads(body))


def drivable(points, lanes: list[Lane]) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    for ln in lanes:
        out |= geo.on_lane(pts, ln.centerline, ln.width)
    return out


# ---------------------------------------------------------------------------
# generation

_IDM = dict(a_max=2.0, b=2.5, headway=1.2, gap0=2.0)
_SIM_DT = 0.1
_SIM_STEPS = int(round(T_FUTURE * DT_FUTURE / _SIM_DT))


@dataclass
class _Agent:
    path: np.ndarray
    s0: float
    v0: float
    size: tuple[float, float]
    kind: str
    lane_id: int
    v_des: float = 10.0
    leader: int | None = None
    gap0: float = math.inf
    s: np.ndarray = field(default=None)


def _straight(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y1]], dtype=np.float64)


def _turn_route(y_e: float, x0: float, radius: float, left: bool) -> np.ndarray:
    sign = 1.0 if left else -1.0
    cy = y_e + sign * radius
    ang = np.linspace(0, math.pi / 2, max(8, int(radius * math.pi / 2 / 0.5)))
    arc = np.stack([x0 + radius * np.sin(ang), cy - sign * radius * np.cos(ang)], axis=1)
    before = _straight(-70.0, y_e, x0, y_e)
    end = arc[-1]
    after = _straight(end[0], end[1], end[0], end[1] + sign * 80.0)
    return np.concatenate([before[:-1], arc, after[1:]])


def _idm_accel(v, v_des, gap, dv):
    p = _IDM
    desired = p["gap0"] + v * p["headway"] + v * dv / (2 * math.sqrt(p["a_max"] * p["b"]))
    interaction = (max(desired, 0.0) / max(gap, 0.1)) ** 2 if math.isfinite(gap) else 0.0
    a = p["a_max"] * (1 - (v / max(v_des, 0.1)) ** 4 - interaction)
    return min(max(a, -A_MAX), p["a_max"])


def _simulate(agents: list[_Agent], stop_at: dict[int, float] | None = None) -> None:
    """Joint longitudinal IDM roll-out; fills ``agent.s`` with arc lengths at each sim step."""
    stop_at = stop_at or {}
    n = len(agents)
    s = np.array([a.s0 for a in agents])
    v = np.array([a.v0 for a in agents])
    hist = np.zeros((n, _SIM_STEPS + 1))
    hist[:, 0] = s
    for k in range(_SIM_STEPS):
        acc = np.zeros(n)
        for i, a in enumerate(agents):
            if a.kind == "parked-vehicle":
                continue
            gap, dv = math.inf, 0.0
            if a.leader is not None:
                L = agents[a.leader]
                gap = a.gap0 + (s[a.leader] - L.s0) - (s[i] - a.s0)
                dv = v[i] - v[a.leader]
            if i in stop_at:
                g2 = stop_at[i] - s[i]
                if g2 < gap:
                    gap, dv = g2, v[i]
            acc[i] = _idm_accel(v[i], a.v_des, gap, dv)
        v_new = np.clip(v + acc * _SIM_DT, 0.0, V_MAX)
        s = s + 0.5 * (v + v_new) * _SIM_DT
        v = v_new
        hist[:, k + 1] = s
    for i, a in enumerate(agents):
        a.s = hist[i]


def _poses(agent: _Agent, s_vals) -> np.ndarray:
    p = geo.interpolate_polyline(agent.path, s_vals)
    p[..., 2] = geo.wrap_angle(p[..., 2])
    return p


def _future(agent: _Agent) -> np.ndarray:
    step = int(round(DT_FUTURE / _SIM_DT))
    return _poses(agent, agent.s[step::step][:T_FUTURE])


def _past(agent: _Agent) -> np.ndarray:
    return _poses(agent, agent.s0 - agent.v0 * DT_SWEEP * np.arange(T_PAST))


def _corners_of(agent: _Agent, poses: np.ndarray) -> np.ndarray:
    return geo.box_corners(poses[..., 0], poses[..., 1], agent.size[0], agent.size[1], poses[..., 2])


def generate_scene(seed: int, difficulty: str = "urban", bounds: Bounds | None = None) -> Scene:
    """Build a deterministic toy driving scene from ``seed``."""
    if difficulty not in DIFFICULTY:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    bounds = bounds or Bounds()
    bounds.validate()
    rng = np.random.default_rng([int(seed), DIFFICULTY.index(difficulty)])
    level = DIFFICULTY.index(difficulty)

    n_same = int(rng.integers(1, 2 + min(level, 1) + (level == 2)))
    n_opp = int(rng.integers(1, 2 + min(level, 1) + (level == 2)))
    ego_k = int(rng.integers(0, n_same))
    lanes: list[Lane] = []
    lane_kind: list[str] = []
    x_lo, x_hi = -70.0, 100.0
    for k in range(n_same):
        y = -LANE_WIDTH * (k - ego_k)
        lanes.append(Lane(_straight(x_lo, y, x_hi, y)))
        lane_kind.append("same")
    y_left = LANE_WIDTH * ego_k
    for j in range(n_opp):
        y = y_left + LANE_WIDTH * (j + 1)
        lanes.append(Lane(_straight(x_hi, y, x_lo, y)))
        lane_kind.append("opp")
    road_left = y_left + LANE_WIDTH * (n_opp + 0.5)
    road_right = -LANE_WIDTH * (n_same - 1 - ego_k) - LANE_WIDTH / 2

    crossing = level > 0 and rng.random() < (0.5 if level == 1 else 0.7)
    x_c = float(rng.uniform(12.0, 24.0)) if crossing else None
    if crossing:
        lanes.append(Lane(_straight(x_c + 1.75, -80.0, x_c + 1.75, 80.0)))
        lane_kind.append("cross")
        lanes.append(Lane(_straight(x_c - 1.75, 80.0, x_c - 1.75, -80.0)))
        lane_kind.append("cross")

    # ego route: straight, or a turn onto the crossing road
    route = _straight(x_lo, 0.0, x_hi, 0.0)
    v_cap = 10.0
    if crossing and rng.random() < 0.4:
        turn = None
        if ego_k == n_same - 1 and rng.random() < 0.5:
            radius = float(rng.uniform(6.0, 9.0))
            turn = (x_c - 1.75 - radius, radius, False)
        elif ego_k == 0:
            x0 = float(rng.uniform(max(2.0, x_c + 1.75 - 16.0), x_c + 1.75 - 8.0))
            turn = (x0, x_c + 1.75 - x0, True)
        if turn is not None and turn[0] > 1.0 and turn[1] >= 1.0 / KAPPA_MAX:
            route = _turn_route(0.0, *turn)
            v_cap = min(v_cap, math.sqrt(2.5 * turn[1]))
            lanes.append(Lane(route.copy()))
            lane_kind.append("route")
    # the origin sits at arc length -x_lo on the route and on the ego lane alike
    v_ego = float(rng.uniform(3.0, v_cap))
    ego = _Agent(route, -x_lo, v_ego, EGO_SIZE, "ego", ego_k, v_des=v_cap)

    agents: list[_Agent] = [ego]
    boxes0: list[np.ndarray] = [geo.box_corners(0.0, 0.0, EGO_SIZE[0] + 1.0, EGO_SIZE[1] + 0.6, 0.0)]

    def try_add(agent: _Agent) -> bool:
        pose = _poses(agent, np.array([agent.s0]))[0]
        if not bounds.contains(pose[:2]):
            return False
        margin = 0.8
        c = geo.box_corners(pose[0], pose[1], agent.size[0] + margin, agent.size[1] + margin, pose[2])
        if geo.boxes_overlap(c, np.asarray(boxes0)).any():
            return False
        boxes0.append(c)
        agents.append(agent)
        return True

    lo, hi = {0: (1, 5), 1: (6, 20), 2: (20, 40)}[level]
    target = int(rng.integers(lo, hi + 1))

    def rand_size():
        return (float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.1)))

    # lead vehicle in the ego lane
    if rng.random() < (0.6 if level == 0 else 0.8):
        gap = float(rng.uniform(6.0, 30.0))
        size = rand_size()
        v_lead = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.0, v_ego + 2.0))
        s_lead = -x_lo + EGO_SIZE[0] / 2 + gap + size[0] / 2
        lead = _Agent(lanes[ego_k].centerline, s_lead, v_lead, size, "vehicle", ego_k,
                      v_des=max(v_lead, 0.5) if v_lead > 0 else 0.0)
        try_add(lead)

    attempts = 0
    while len(agents) - 1 < target and attempts < 60 * target:
        attempts += 1
        size = rand_size()
        r = rng.random()
        if r < (0.25 if level > 0 else 0.15):
            # parked on a shoulder
            left = rng.random() < 0.5
            y = road_left + 0.6 + size[1] / 2 if left else road_right - 0.6 - size[1] / 2
            x = float(rng.uniform(bounds.x_min + 3, bounds.x_min + bounds.length_x - 3))
            heading = math.pi if left else 0.0
            path = _straight(x - 1.0, y, x + 1.0, y) if heading == 0.0 else _straight(x + 1.0, y, x - 1.0, y)
            agent = _Agent(path, 1.0, 0.0, size, "parked-vehicle", -1, v_des=0.0)
        else:
            li = int(rng.integers(0, len(lanes)))
            if lane_kind[li] == "route":
                continue
            line = lanes[li].centerline
            total = geo.segment_frames(line)[2].sum()
            s0 = float(rng.uniform(0, total))
            v = float(rng.uniform(2.0, 11.0))
            agent = _Agent(line, s0, v, size, "vehicle", li, v_des=v + float(rng.uniform(0, 2)))
        try_add(agent)

    # longitudinal leader: nearest moving agent ahead on the same lane
    for i, a in enumerate(agents):
        if a.kind == "parked-vehicle":
            continue
        best, best_gap = None, math.inf
        for j, b in enumerate(agents):
            if j == i or b.kind == "parked-vehicle" or b.lane_id != a.lane_id or b.s0 <= a.s0:
                continue
            gap = b.s0 - a.s0 - (a.size[0] + b.size[0]) / 2
            if gap < best_gap:
                best, best_gap = j, gap
        a.leader, a.gap0 = best, best_gap

    # the ego yields at a stop line before the crossing once; remaining conflicts are dropped
    stop_at: dict[int, float] = {}
    stop_line = -x_lo + x_c - LANE_WIDTH - EGO_SIZE[0] / 2 - 1.0 if crossing else None
    while True:
        _simulate(agents, stop_at)
        ego_c = _corners_of(ego, _poses(ego, ego.s))
        bad = [
            j for j in range(1, len(agents))
            if geo.boxes_overlap(ego_c, _corners_of(agents[j], _poses(agents[j], agents[j].s))).any()
        ]
        if not bad:
            break
        crossing_conflict = any(agents[j].lane_id >= 0 and lane_kind[agents[j].lane_id] == "cross" for j in bad)
        if crossing_conflict and not stop_at and stop_line is not None and stop_line > -x_lo + 1.0:
            stop_at[0] = stop_line
            continue
        keep = [a for j, a in enumerate(agents) if j not in bad]
        remap = {id(a): n for n, a in enumerate(keep)}
        for a in keep:
            if a.leader is not None:
                a.leader = remap.get(id(agents[a.leader]))
                if a.leader is None:
                    a.gap0 = math.inf
        agents = keep

    actors = []
    for a in agents[1:]:
        past = _past(a)
        fut = _future(a)
        if a.kind == "parked-vehicle":
            fut = np.repeat(past[:1], T_FUTURE, axis=0)
            past = np.repeat(past[:1], T_PAST, axis=0)
        c = past[0]
        if not bounds.contains(c[:2]):
            continue
        actors.append(
            Actor(
                center=(float(c[0]), float(c[1])),
                size=a.size,
                heading=float(c[2]),
                future_track=fut,
                past_track=past,
                kind=a.kind,
                speed=float(a.v0),
            )
        )

    ego_past = _past(ego)
    ego_fut = _future(ego)
    return Scene(
        seed=int(seed),
        difficulty=difficulty,
        bounds=bounds,
        ego_past=ego_past,
        ego_future=ego_fut,
        ego_speed=v_ego,
        actors=actors,
        lanes=lanes,
        route=route,
    )


# ---------------------------------------------------------------------------
# LiDAR


N_RAYS = 1024
MAX_RANGE = 60.0
GROUND_RINGS = 4.0 * 1.12 ** np.arange(24)
HIT_HEIGHTS = (0.7, 1.5)


def ray_box_distance(origin, dirs, box) -> np.ndarray:
    """Entry distance of each ray into an oriented box (inf if missed or inside)."""
    x, y, w, h, th = box
    c, s = math.cos(th), math.sin(th)
    ox, oy = origin[0] - x, origin[1] - y
    lo = np.array([c * ox + s * oy, -s * ox + c * oy])
    ld = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1]], axis=1)
    half = np.array([w / 2, h / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def simulate_lidar(scene: Scene, sweep: int) -> np.ndarray:
    """Points (x, y, z) seen from the ego position at past sweep ``sweep``."""
    if not 0 <= sweep < T_PAST:
        raise ValueError(f"sweep must be in [0, {T_PAST}), got {sweep}")
    origin = scene.ego_past[sweep, :2]
    ang = 2 * np.pi * np.arange(N_RAYS) / N_RAYS
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    dist = np.full(N_RAYS, np.inf)
    for a in scene.actors:
        p = a.past_track[sweep]
        dist = np.minimum(dist, ray_box_distance(origin, dirs, (p[0], p[1], a.size[0], a.size[1], p[2])))
    pts = []
    hit = np.isfinite(dist) & (dist <= MAX_RANGE)
    hxy = origin + dirs[hit] * dist[hit, None]
    for z in HIT_HEIGHTS:
        pts.append(np.column_stack([hxy, np.full(len(hxy), z)]))
    r = GROUND_RINGS[GROUND_RINGS <= MAX_RANGE]
    gxy = origin + dirs[:, None, :] * r[None, :, None]
    visible = r[None, :] < dist[:, None]
    gxy = gxy[visible]
    gxy = gxy[scene.bounds.contains(gxy)]
    gxy = gxy[drivable(gxy, scene.lanes)]
    pts.append(np.column_stack([gxy, np.zeros(len(gxy))]))
    return np.concatenate(pts).reshape(-1, 3)


# ---------------------------------------------------------------------------
# rasterisation


@dataclass
class BevInput:
    """(Z·T' + M) × H × W input grid; occupancy channels ordered sweep-major."""

    grid: np.ndarray
    bounds: Bounds

    @property
    def n_occupancy(self) -> int:
        return Z_SLICES * T_PAST

    def save(self, path) -> None:
        save_tensor(path, self.grid, {"layout": "CHW", "z_slices": Z_SLICES, "sweeps": T_PAST,
                                      "map_channels": list(MAP_CHANNELS)})


def n_input_channels() -> int:
    return Z_SLICES * T_PAST + len(MAP_CHANNELS)


def voxelize(points: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Z × H × W binary occupancy of one sweep."""
    bounds.validate()
    occ = np.zeros((Z_SLICES, bounds.H, bounds.W), dtype=np.float32)
    if len(points) == 0:
        return occ
    i, j = bounds.cell_index(points[:, :2])
    z = np.digitize(points[:, 2], Z_EDGES)
    ok = (i >= 0) & (i < bounds.H) & (j >= 0) & (j < bounds.W)
    occ[z[ok], i[ok], j[ok]] = 1.0
    return occ


def map_channels(scene: Scene) -> np.ndarray:
    b = scene.bounds
    centers = b.cell_centers()
    surface = drivable(centers, scene.lanes)
    half = b.resolution / 2
    center_line = np.zeros(surface.shape, dtype=bool)
    for ln in scene.lanes:
        center_line |= geo.distance_to_polyline(centers, ln.centerline) <= half
    route = geo.distance_to_polyline(centers, scene.route) <= b.resolution
    return np.stack([surface, center_line, route]).astype(np.float32)


def rasterize(scene: Scene, sweeps: list[np.ndarray] | None = None) -> BevInput:
    """Voxelise the T' sweeps and stack the map channels.

    ``sweeps`` overrides the simulated LiDAR (one point array per sweep).
    """
    scene.bounds.validate()
    if sweeps is None:
        sweeps = [simulate_lidar(scene, s) for s in range(T_PAST)]
    occ = [voxelize(p, scene.bounds) for p in sweeps]
    grid = np.concatenate(occ + [map_channels(scene)], axis=0)
    return BevInput(grid, scene.bounds)


@dataclass
class Labels:
    """Detection targets at the backbone resolution (H/4 × W/4)."""

    score: np.ndarray
    targets: np.ndarray
    owner: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.owner >= 0


def anchor_at(bounds: Bounds, i, j):
    res = bounds.resolution * LABEL_STRIDE
    return (
        bounds.x_min + (i + 0.5) * res,
        bounds.y_min + (j + 0.5) * res,
        ANCHOR_SIZE[0],
        ANCHOR_SIZE[1],
        0.0,
    )


def rasterize_labels(scene: Scene, stride: int = LABEL_STRIDE) -> Labels:
    """Per-cell class labels, box/trajectory offsets and owning actor index.

    A cell is positive when its centre lies inside an actor box; an actor
    covering no centre claims the cell holding its own centre.
    """
    b = scene.bounds
    Hs, Ws = b.H // stride, b.W // stride
    centers = b.cell_centers(stride)
    owner = np.full((Hs, Ws), -1, dtype=int)
    for k, a in enumerate(scene.actors):
        poly = geo.box_corners(*a.box)
        inside = geo.points_in_polygon(centers.reshape(-1, 2), poly).reshape(Hs, Ws)
        inside &= owner < 0
        if not inside.any():
            i, j = b.cell_index(np.array(a.center), stride)
            if 0 <= i < Hs and 0 <= j < Ws and owner[i, j] < 0:
                inside[i, j] = True
        owner[inside] = k
    score = (owner >= 0).astype(np.float32)
    targets = np.zeros((6 * (T_FUTURE + 1), Hs, Ws), dtype=np.float32)
    for i, j in zip(*np.nonzero(owner >= 0)):
        a = scene.actors[owner[i, j]]
        anchor = anchor_at(b, i, j)
        poses = np.concatenate([[[a.center[0], a.center[1], a.heading]], a.future_track])
        for t, p in enumerate(poses):
            targets[6 * t : 6 * t + 6, i, j] = geo.encode_box((p[0], p[1], a.size[0], a.size[1], p[2]), anchor)
    return Labels(score, targets, owner)
