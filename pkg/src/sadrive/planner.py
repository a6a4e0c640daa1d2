"""Trajectory sampling and cost-volume planning.

Candidates start at the ego pose (origin, heading 0). Each has a clipped
constant-acceleration speed profile and a curvature that is linear in arc
length: zero for straight lines, constant for circles, and a free rate for
clothoids. Positions are integrated with Gauss-Legendre quadrature between
consecutive waypoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .formats import write_csv
from .nn import Tensor
from .nn import functional as F
from .scene import A_MAX, DT_FUTURE, EGO_SIZE, KAPPA_MAX, T_FUTURE, V_MAX, Bounds, Lane, drivable

KINDS = ("clothoid", "circle", "straight")
MIXTURE = (0.4, 0.3, 0.3)
N_SAMPLES = 200
A_LAT_MAX = 4.0  # lateral acceleration cap (m/s²), tightens κ at speed
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass
class Trajectory:
    """A sampled or observed ego trajectory; ``waypoints`` is T×3 (x, y, θ)."""

    kind: str
    v0: float
    accel: float
    kappa0: float
    kappa_rate: float
    waypoints: np.ndarray

    @classmethod
    def observed(cls, poses) -> "Trajectory":
        """Wrap logged poses (e.g. the ground-truth ego future)."""
        return cls("observed", 0.0, 0.0, 0.0, 0.0, np.asarray(poses, dtype=np.float64))

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]


@dataclass
class PlanResult:
    index: int
    trajectory: Trajectory
    cost: float
    costs: np.ndarray = field(repr=False)
    step_costs: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# curves


def arc_length(v0, accel, times, v_max: float = V_MAX) -> np.ndarray:
    """Distance travelled under v(t) = clip(v0 + a·t, 0, v_max).

    ``v0`` and ``accel`` broadcast against each other; ``times`` is appended
    as a trailing axis.
    """
    v0 = np.asarray(v0, dtype=np.float64)[..., None]
    a = np.asarray(accel, dtype=np.float64)[..., None]
    t = np.asarray(times, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_sat = np.where(a > 0, (v_max - v0) / a, np.where(a < 0, -v0 / a, np.inf))
    t_sat = np.maximum(t_sat, 0.0)
    v_end = np.where(a > 0, v_max, 0.0)
    tc = np.minimum(t, t_sat)
    s = v0 * tc + 0.5 * a * tc * tc
    return s + v_end * np.maximum(t - t_sat, 0.0)


def speed(v0, accel, times, v_max: float = V_MAX) -> np.ndarray:
    v0 = np.asarray(v0, dtype=np.float64)[..., None]
    a = np.asarray(accel, dtype=np.float64)[..., None]
    return np.clip(v0 + a * np.asarray(times), 0.0, v_max)


def curve_poses(s, kappa0, kappa_rate) -> np.ndarray:
    """(x, y, θ) at arc lengths ``s`` (…×T, increasing) for κ(s) = κ0 + κ'·s."""
    s = np.asarray(s, dtype=np.float64)
    k0 = np.asarray(kappa0, dtype=np.float64)[..., None]
    kr = np.asarray(kappa_rate, dtype=np.float64)[..., None]
    lo = np.concatenate([np.zeros(s.shape[:-1] + (1,)), s[..., :-1]], axis=-1)
    half = 0.5 * (s - lo)
    # quadrature nodes per interval: …×T×Q
    u = (lo + half)[..., None] + half[..., None] * _GL_NODES
    th = k0[..., None] * u + 0.5 * kr[..., None] * u * u
    dx = (half[..., None] * _GL_WEIGHTS * np.cos(th)).sum(-1)
    dy = (half[..., None] * _GL_WEIGHTS * np.sin(th)).sum(-1)
    heading = k0 * s + 0.5 * kr * s * s
    return np.stack([np.cumsum(dx, -1), np.cumsum(dy, -1), heading], axis=-1)


def make_trajectory(kind: str, v0: float, accel: float, kappa0: float = 0.0, kappa_rate: float = 0.0,
                    horizon: int = T_FUTURE, dt: float = DT_FUTURE) -> Trajectory:
    if kind not in KINDS:
        raise ValueError(f"unknown curve kind {kind!r}; expected one of {KINDS}")
    if kind == "straight":
        kappa0, kappa_rate = 0.0, 0.0
    elif kind == "circle":
        kappa_rate = 0.0
    times = dt * np.arange(1, horizon + 1)
    s = arc_length(v0, accel, times)
    return Trajectory(kind, float(v0), float(accel), float(kappa0), float(kappa_rate),
                      curve_poses(s, kappa0, kappa_rate))


def sample_counts(n: int, mixture=MIXTURE) -> list[int]:
    """Split ``n`` by the mixture weights, largest remainders first."""
    raw = np.asarray(mixture) * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def sample_trajectories(v0: float, n: int = N_SAMPLES, rng: np.random.Generator | None = None,
                        horizon: int = T_FUTURE, dt: float = DT_FUTURE) -> list[Trajectory]:
    """Draw ``n`` kinematically bounded candidates: clothoids, then circles, then lines.

    |a| ≤ A_MAX, speeds stay in [0, V_MAX], and |κ| never exceeds
    min(KAPPA_MAX, A_LAT_MAX / v_peak²) along the horizon.
    """
    if n < 1:
        raise ValueError(f"need at least one trajectory, got n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = sample_counts(n)
    kinds = np.repeat(np.arange(3), counts)
    times = dt * np.arange(1, horizon + 1)
    v0 = float(np.clip(v0, 0.0, V_MAX))
    accel = rng.uniform(-A_MAX, A_MAX, n)
    s = arc_length(v0, accel, times)
    v_peak = np.maximum(v0, speed(v0, accel, times)[:, -1])
    k_lim = np.minimum(KAPPA_MAX, A_LAT_MAX / np.maximum(v_peak, 1e-6) ** 2)
    k_start = rng.uniform(-1.0, 1.0, n) * k_lim
    k_end = rng.uniform(-1.0, 1.0, n) * k_lim
    s_end = s[:, -1]
    kappa0 = np.where(kinds == 2, 0.0, k_start)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(s_end > 0, (k_end - k_start) / s_end, 0.0)
    kappa_rate = np.where(kinds == 0, rate, 0.0)
    poses = curve_poses(s, kappa0, kappa_rate)
    return [
        Trajectory(KINDS[kinds[i]], v0, float(accel[i]), float(kappa0[i]), float(kappa_rate[i]), poses[i])
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# costs


def _stack_waypoints(trajectories) -> np.ndarray:
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if isinstance(trajectories, np.ndarray):
        w = trajectories
    else:
        w = np.stack([t.waypoints if isinstance(t, Trajectory) else np.asarray(t) for t in trajectories])
    return w[None] if w.ndim == 2 else w


def step_costs(trajectories, cost: Tensor | np.ndarray, bounds: Bounds | None = None,
               off_grid: str = "clamp", penalty: float = 10.0) -> Tensor:
    """Per-step costs C[t, x_t, y_t] (P×T) by bilinear interpolation.

    Off-grid waypoints are clamped to the border (``off_grid="clamp"``) or
    charged a constant ``penalty`` (``off_grid="penalty"``).
    """
    bounds = bounds or Bounds()
    C = cost if isinstance(cost, Tensor) else Tensor(np.asarray(cost, dtype=np.float64))
    if C.ndim == 4:
        if C.shape[0] != 1:
            raise ValueError(f"expected a single cost volume, got batch of {C.shape[0]}")
        C = F.reshape(C, C.shape[1:])
    w = _stack_waypoints(trajectories)
    if w.shape[1] != C.shape[0]:
        raise ValueError(f"trajectories have {w.shape[1]} steps but the cost volume has {C.shape[0]}")
    rows, cols = bounds.to_cell_coords(w[..., :2])
    out = F.bilinear_sample(C, rows, cols)
    if off_grid == "clamp":
        return out
    if off_grid != "penalty":
        raise ValueError(f"off_grid must be 'clamp' or 'penalty', got {off_grid!r}")
    inside = bounds.contains(w[..., :2])
    return out * inside.astype(out.dtype) + (~inside).astype(out.dtype) * penalty


def evaluate_cost(trajectory, cost, bounds: Bounds | None = None, **kw) -> float:
    """Σ_t C[t, x_t, y_t] for one trajectory."""
    return float(step_costs(trajectory, cost, bounds, **kw).data.sum())


def select(trajectories: list[Trajectory], cost, bounds: Bounds | None = None, **kw) -> PlanResult:
    """Minimum-cost candidate; ties go to the lowest index."""
    if len(trajectories) == 0:
        raise ValueError("select needs at least one trajectory")
    per_step = np.asarray(step_costs(trajectories, cost, bounds, **kw).data, dtype=np.float64)
    costs = per_step.sum(axis=1)
    i = int(np.argmin(costs))
    return PlanResult(i, trajectories[i], float(costs[i]), costs, per_step[i])


def plan(cost, v0: float, n: int = N_SAMPLES, rng=None, bounds: Bounds | None = None) -> PlanResult:
    return select(sample_trajectories(v0, n, rng, horizon=np.shape(cost)[-3]), cost, bounds)


# ---------------------------------------------------------------------------
# traffic rules


def ego_corners(waypoints: np.ndarray, ego_size=EGO_SIZE) -> np.ndarray:
    w = np.asarray(waypoints, dtype=np.float64)
    return geo.box_corners(w[..., 0], w[..., 1], ego_size[0], ego_size[1], w[..., 2])


def off_lane_steps(waypoints: np.ndarray, lanes: list[Lane], ego_size=EGO_SIZE) -> np.ndarray:
    """…×T flags: some ego corner leaves the drivable surface at that step."""
    if not lanes:
        return np.ones(np.shape(waypoints)[:-1], dtype=bool)
    return ~drivable(ego_corners(waypoints, ego_size), lanes).all(axis=-1)


def save_plan_csv(path, result: PlanResult, dt: float = DT_FUTURE) -> None:
    w = result.trajectory.waypoints
    rows = [((t + 1) * dt, w[t, 0], w[t, 1], w[t, 2], result.step_costs[t]) for t in range(len(w))]
    write_csv(path, ["t", "x", "y", "theta", "cost_t"], rows)
