"""Reference-path geometry and candidate trajectory generation.

Paths are polylines with arc length measured along the chords.  Positions
are interpolated linearly along the chords and the tangent heading is
interpolated linearly between vertex headings, which makes
``frenet_to_cartesian`` smooth and lets ``cartesian_to_frenet`` invert it
exactly with a short Newton refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DT = 0.1
MAX_LATERAL = 20.0


class OffPathError(ValueError):
    """Point cannot be expressed in the path's Frenet frame."""


class PlannerFault(RuntimeError):
    """No candidate trajectory could be produced."""


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass(frozen=True, eq=False)
class ReferencePath:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    heading: np.ndarray  # unwrapped vertex headings
    lane_id: str = ""
    speed_limit: float = 10.0
    _seg_heading: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_points(cls, points, lane_id: str = "", speed_limit: float = 10.0) -> "ReferencePath":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("need at least two (x, y) points")
        seg = np.diff(pts, axis=0)
        ds = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(ds <= 0):
            raise ValueError("duplicate consecutive waypoints")
        s = np.concatenate([[0.0], np.cumsum(ds)])
        seg_h = np.unwrap(np.arctan2(seg[:, 1], seg[:, 0]))
        if np.any(np.abs(np.diff(seg_h)) > np.pi / 2):
            raise ValueError("heading jump larger than pi/2 between segments")
        vert = np.empty(len(pts))
        vert[0], vert[-1] = seg_h[0], seg_h[-1]
        vert[1:-1] = 0.5 * (seg_h[:-1] + seg_h[1:])
        return cls(pts[:, 0].copy(), pts[:, 1].copy(), s, vert, lane_id, float(speed_limit), seg_h)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    # -- evaluation ---------------------------------------------------------

    def _segment(self, s):
        i = np.searchsorted(self.s, s, side="right") - 1
        return np.clip(i, 0, len(self.s) - 2)

    def _eval(self, s):
        """Position, heading, chord direction and heading slope at ``s``."""
        i = self._segment(s)
        s0, s1 = self.s[i], self.s[i + 1]
        u = (s - s0) / (s1 - s0)
        px = self.x[i] + u * (self.x[i + 1] - self.x[i])
        py = self.y[i] + u * (self.y[i + 1] - self.y[i])
        h = self.heading[i] + u * (self.heading[i + 1] - self.heading[i])
        dh = (self.heading[i + 1] - self.heading[i]) / (s1 - s0)
        sh = self._seg_heading[i]
        return px, py, h, np.cos(sh), np.sin(sh), dh

    def position(self, s):
        s = np.asarray(s, dtype=float)
        px, py, h, *_ = self._eval(s)
        return px, py, h

    def cartesian(self, s, d):
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        px, py, h, *_ = self._eval(s)
        return px - d * np.sin(h), py + d * np.cos(h), h

    def project(self, x, y, iterations: int = 6):
        """Vectorised projection; returns ``(s, d, clamped)`` arrays."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ax, ay = self.x[:-1], self.y[:-1]
        ex, ey = np.diff(self.x), np.diff(self.y)
        seg_len2 = ex * ex + ey * ey
        rx = x[:, None] - ax[None, :]
        ry = y[:, None] - ay[None, :]
        u = np.clip((rx * ex + ry * ey) / seg_len2, 0.0, 1.0)
        dx = rx - u * ex
        dy = ry - u * ey
        k = np.argmin(dx * dx + dy * dy, axis=1)
        rows = np.arange(len(x))
        s = self.s[k] + u[rows, k] * np.sqrt(seg_len2[k])
        # refine so that the offset is normal to the interpolated tangent
        for _ in range(iterations):
            px, py, h, cu, su, dh = self._eval(s)
            ox, oy = x - px, y - py
            c, sn = np.cos(h), np.sin(h)
            g = ox * c + oy * sn
            dd = -ox * sn + oy * c
            gp = -(cu * c + su * sn) + dd * dh
            safe = np.where(np.abs(gp) > 1e-9, gp, -1.0)
            s = s - g / safe
            s = np.clip(s, 0.0, self.length)
        px, py, h, *_ = self._eval(s)
        d = -(x - px) * np.sin(h) + (y - py) * np.cos(h)
        along = (x - px) * np.cos(h) + (y - py) * np.sin(h)
        clamped = ((s <= 0.0) & (along < -1e-9)) | ((s >= self.length) & (along > 1e-9))
        return s, d, clamped

    def tangent(self, s):
        return self.position(s)[2]

    def transformed(self, rotation: float, tx: float, ty: float) -> "ReferencePath":
        c, sn = np.cos(rotation), np.sin(rotation)
        pts = np.stack([c * self.x - sn * self.y + tx, sn * self.x + c * self.y + ty], axis=1)
        return ReferencePath.from_points(pts, self.lane_id, self.speed_limit)


def cartesian_to_frenet(path: ReferencePath, point, clamp: bool = False) -> tuple[float, float]:
    s, d, clamped = path.project(point[0], point[1])
    if abs(d[0]) > MAX_LATERAL:
        raise OffPathError(f"point {tuple(point)} is {abs(d[0]):.1f} m from path {path.lane_id!r}")
    if clamped[0] and not clamp:
        raise OffPathError(f"point {tuple(point)} lies beyond the extent of path {path.lane_id!r}")
    return float(s[0]), float(d[0])


def frenet_to_cartesian(path: ReferencePath, s: float, d: float) -> tuple[float, float, float]:
    if not (0.0 <= s <= path.length):
        raise OffPathError(f"s={s} outside [0, {path.length}]")
    x, y, h = path.cartesian(s, d)
    return float(x), float(y), float(h)


# ---------------------------------------------------------------------------
# polynomial profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeedProfile:
    """Cubic speed ramp ``v(t) = b0 + b1 t + b2 t^2 + b3 t^3`` held after ``T_s``."""

    coeffs: np.ndarray
    switch_time: float
    target_speed: float

    def speed(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.minimum(t, self.switch_time)
        b0, b1, b2, b3 = self.coeffs
        v = b0 + tc * (b1 + tc * (b2 + tc * b3))
        v = np.where(t >= self.switch_time, self.target_speed, v)
        return np.maximum(v, 0.0)

    def accel(self, t):
        t = np.asarray(t, dtype=float)
        b0, b1, b2, b3 = self.coeffs
        a = b1 + t * (2 * b2 + 3 * b3 * t)
        return np.where(t >= self.switch_time, 0.0, a)


def make_speed_profile(v0: float, a0: float, v_target: float, switch_time: float) -> SpeedProfile:
    if switch_time <= 0:
        raise ValueError("switch time must be positive")
    if v_target < 0:
        raise ValueError("target speed must be non-negative")
    T = switch_time
    # v(T) = v_target, v'(T) = 0
    A = np.array([[T ** 2, T ** 3], [2 * T, 3 * T ** 2]])
    b = np.array([v_target - v0 - a0 * T, -a0])
    b2, b3 = np.linalg.solve(A, b)
    return SpeedProfile(np.array([v0, a0, b2, b3]), float(T), float(v_target))


@dataclass(frozen=True)
class LateralProfile:
    """Quintic lateral offset ``d(t)`` held at ``d_T`` after ``T_t``."""

    coeffs: np.ndarray  # a0..a5
    target_time: float
    target_offset: float

    def _poly(self, t, der):
        t = np.minimum(np.asarray(t, dtype=float), self.target_time)
        c = np.polynomial.polynomial.polyder(self.coeffs, der) if der else self.coeffs
        return np.polynomial.polynomial.polyval(t, c)

    def offset(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= self.target_time, self.target_offset, self._poly(t, 0))

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= self.target_time, 0.0, self._poly(t, 1))

    def accel(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= self.target_time, 0.0, self._poly(t, 2))


def make_lateral_profile(d0: float, d_target: float, target_time: float, d_rate0: float = 0.0) -> LateralProfile:
    if target_time <= 0:
        raise ValueError("target time must be positive")
    T = target_time
    # Closed-form reduction of the 6x6 system: the first three
    # coefficients follow from the t=0 conditions.
    a0, a1, a2 = d0, d_rate0, 0.0
    A = np.array([[T ** 3, T ** 4, T ** 5],
                  [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                  [6 * T, 12 * T ** 2, 20 * T ** 3]])
    rhs = np.array([d_target - a0 - a1 * T - a2 * T ** 2, -a1 - 2 * a2 * T, -2 * a2])
    a3, a4, a5 = np.linalg.solve(A, rhs)
    return LateralProfile(np.array([a0, a1, a2, a3, a4, a5]), float(T), float(d_target))


# ---------------------------------------------------------------------------
# candidate set
# ---------------------------------------------------------------------------


@dataclass
class PlannerConfig:
    horizon: int = 30
    dt: float = DT
    speed_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    include_current_speed: bool = True
    switch_time: float = 3.0
    lateral_times: tuple = (2.0, 3.0)
    max_heading_step: float = 0.3
    max_path_offset: float = 6.0

    def __post_init__(self):
        if self.horizon <= 0 or self.dt <= 0 or self.switch_time <= 0:
            raise ValueError("horizon, dt and switch_time must be positive")
        if not self.lateral_times or min(self.lateral_times) <= 0:
            raise ValueError("lateral_times must be a non-empty list of positive durations")
        if min(self.speed_fractions, default=0.0) < 0:
            raise ValueError("speed_fractions must be non-negative")


@dataclass
class CandidatePlan:
    trajectory: np.ndarray  # [T+1, 4] x, y, heading, speed; row 0 is the current state
    lane_id: str
    target_speed: float
    lateral_time: float
    s: np.ndarray
    d: np.ndarray
    index: int = 0
    cost: float = float("nan")
    features: np.ndarray | None = None

    @property
    def future(self) -> np.ndarray:
        return self.trajectory[1:]


def generate_candidates(ego, paths: list[ReferencePath], config: PlannerConfig | None = None,
                        speed_grid=None, accel: float = 0.0) -> list[CandidatePlan]:
    """Candidate plans from the Cartesian product of speeds, paths and lateral times.

    ``ego`` is ``(x, y, heading, speed)``.  ``speed_grid`` overrides the
    speed-limit fractions when given; ``accel`` is the initial longitudinal
    acceleration of every speed profile.
    """
    cfg = config or PlannerConfig()
    ex, ey, eh, ev = (float(v) for v in ego[:4])
    t = np.arange(cfg.horizon + 1) * cfg.dt
    out: list[CandidatePlan] = []
    for path in paths:
        s_arr, d_arr, clamped = path.project(ex, ey)
        s0, d0 = float(s_arr[0]), float(d_arr[0])
        if clamped[0] or abs(d0) > min(MAX_LATERAL, cfg.max_path_offset):
            continue
        rel = float(wrap_angle(eh - path.tangent(s0)))
        if np.cos(rel) <= 0:
            continue
        sdot0 = ev * np.cos(rel)
        ddot0 = ev * np.sin(rel)
        if speed_grid is not None:
            speeds = list(speed_grid)
        else:
            speeds = [f * path.speed_limit for f in cfg.speed_fractions]
            if cfg.include_current_speed:
                speeds.append(ev)
        for v_target in speeds:
            prof = make_speed_profile(sdot0, accel, max(float(v_target), 0.0), cfg.switch_time)
            v = prof.speed(t)
            s = s0 + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * cfg.dt)])
            if s[-1] > path.length:
                continue
            for t_lat in cfg.lateral_times:
                lat = make_lateral_profile(d0, 0.0, t_lat, ddot0)
                d = lat.offset(t)
                dd = lat.rate(t)
                x, y, h = path.cartesian(s, d)
                heading = h + np.arctan2(dd, v)
                speed = np.hypot(v, dd)
                heading[0] = eh if ev <= 1e-9 else heading[0]
                for k in range(1, len(t)):
                    if speed[k] < 0.1:
                        heading[k] = heading[k - 1]
                heading = wrap_angle(heading)
                traj = np.stack([x, y, heading, speed], axis=1)
                out.append(CandidatePlan(traj, path.lane_id, float(v_target), float(t_lat), s, d))
    if not out:
        raise PlannerFault("empty candidate set: ego not projectable onto any path")
    feasible = [c for c in out if _heading_feasible(c.trajectory, cfg.max_heading_step)]
    if not feasible:
        log.warning("all %d candidates violate the heading-rate limit; keeping them", len(out))
        feasible = out
    for i, c in enumerate(feasible):
        c.index = i
    return feasible


def _heading_feasible(traj: np.ndarray, limit: float) -> bool:
    dh = np.abs(wrap_angle(np.diff(traj[:, 2])))
    fast = traj[1:, 3] > 1.0
    return bool(np.all(dh[fast] < limit))


def stack_trajectories(cands: list[CandidatePlan]) -> np.ndarray:
    return np.stack([c.trajectory for c in cands])
