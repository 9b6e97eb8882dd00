"""Hand-crafted plan cost: seven features combined linearly."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .frenet import DT, ReferencePath, wrap_angle
from .geometry import box_gap, boxes_overlap

FEATURES = ("col", "d2a", "ttc", "spd", "tgt", "jerk", "acc")
SAFETY = ("col", "d2a", "ttc")


@dataclass
class CostWeights:
    col: float = 100.0
    d2a: float = 5.0
    ttc: float = 5.0
    spd: float = 1.0
    tgt: float = 2.0
    jerk: float = 0.1
    acc: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"cost weight {f.name} must be finite and non-negative, got {v}")
            setattr(self, f.name, v)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURES])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostConfig:
    d_safe: float = 3.0
    ttc_safe: float = 4.0
    corridor: float = 3.0  # lateral half width in which an agent counts as ahead
    dt: float = DT


def time_to_collision(ego, agent_xy, agent_vel, valid=None, corridor: float = 3.0):
    """TTC to the nearest agent ahead of the ego, ``inf`` if none is closing.

    ``ego [..., 4]`` (x, y, heading, speed); ``agent_xy``/``agent_vel``
    ``[..., N, 2]``.  Range is the centre distance.
    """
    ego = np.asarray(ego, dtype=float)
    agent_xy = np.asarray(agent_xy, dtype=float)
    agent_vel = np.asarray(agent_vel, dtype=float)
    c, s = np.cos(ego[..., 2:3]), np.sin(ego[..., 2:3])
    rx = agent_xy[..., 0] - ego[..., 0:1]
    ry = agent_xy[..., 1] - ego[..., 1:2]
    lon = rx * c + ry * s
    lat = -rx * s + ry * c
    ahead = (lon > 0) & (np.abs(lat) < corridor)
    if valid is not None:
        ahead &= np.asarray(valid, dtype=bool)
    rng = np.hypot(rx, ry)
    dvx = agent_vel[..., 0] - ego[..., 3:4] * c
    dvy = agent_vel[..., 1] - ego[..., 3:4] * s
    rate = (rx * dvx + ry * dvy) / np.maximum(rng, 1e-9)
    lon_m = np.where(ahead, lon, np.inf)
    k = np.argmin(lon_m, axis=-1)
    pick = lambda a: np.take_along_axis(a, k[..., None], axis=-1)[..., 0]  # noqa: E731
    found = np.isfinite(pick(lon_m))
    closing = found & (pick(rate) < 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ttc = np.where(closing, pick(rng) / -pick(rate), np.inf)
    return ttc


def compute_features(plans, predictions, valid, agents_now, speed_limit: float,
                     goal_path: ReferencePath | None, config: CostConfig | None = None) -> np.ndarray:
    """Feature matrix ``[K, 7]`` for ``K`` plans.

    ``plans [K, T+1, 4]`` in the global frame with row 0 the current state;
    ``predictions [K, N, T, 3]`` (or ``[N, T, 3]`` shared by every plan);
    ``valid [N]``; ``agents_now [N, 3]`` current agent poses, used to get
    predicted velocities at the first step.
    """
    cfg = config or CostConfig()
    plans = np.asarray(plans, dtype=float)
    if plans.ndim == 2:
        plans = plans[None]
    K, T1, _ = plans.shape
    T = T1 - 1
    pred = np.asarray(predictions, dtype=float)
    if pred.ndim == 3:
        pred = np.broadcast_to(pred, (K,) + pred.shape)
    if pred.shape[0] != K or pred.shape[2] != T:
        raise ValueError(f"horizon mismatch: plans {plans.shape}, predictions {pred.shape}")
    valid = np.asarray(valid, dtype=bool)
    N = pred.shape[1]
    fut = plans[:, 1:]  # [K, T, 4]
    out = np.zeros((K, len(FEATURES)))

    if N and valid.any():
        ex, ey, eh = (fut[:, None, :, i] for i in range(3))  # [K, 1, T]
        px, py, ph = pred[..., 0], pred[..., 1], pred[..., 2]  # [K, N, T]
        m = valid[None, :, None]
        hit = boxes_overlap(ex, ey, eh, px, py, ph) & m
        out[:, 0] = hit.any(axis=(1, 2))
        gap = np.where(m, box_gap(ex, ey, eh, px, py, ph), np.inf).min(axis=1)  # [K, T]
        out[:, 1] = np.maximum(0.0, cfg.d_safe - gap).sum(axis=1) / T
        now = np.broadcast_to(np.asarray(agents_now, dtype=float)[None, :, None, :2], (K, N, 1, 2))
        xy = np.concatenate([now, pred[..., :2]], axis=2)
        vel = np.diff(xy, axis=2) / cfg.dt  # [K, N, T, 2]
        ttc = time_to_collision(np.moveaxis(fut, 1, 0), np.moveaxis(pred[..., :2], 2, 0),
                                np.moveaxis(vel, 2, 0), valid, cfg.corridor)  # [T, K]
        out[:, 2] = np.maximum(0.0, cfg.ttc_safe - ttc).sum(axis=0) / T

    v = plans[..., 3]
    out[:, 3] = np.abs(fut[..., 3] - speed_limit).mean(axis=1)
    if goal_path is not None:
        _, d, _ = goal_path.project(fut[..., 0].ravel(), fut[..., 1].ravel())
        out[:, 4] = np.abs(d).reshape(K, T).mean(axis=1)
    if T >= 2:
        jerk = np.diff(v, n=2, axis=1) / cfg.dt ** 2
        out[:, 5] = (jerk ** 2).mean(axis=1)
    yaw_rate = wrap_angle(np.diff(plans[..., 2], axis=1)) / cfg.dt
    out[:, 6] = ((fut[..., 3] * yaw_rate) ** 2).mean(axis=1)
    return out


def total_cost(features, weights: CostWeights, explore=False) -> np.ndarray | float:
    """Weighted sum over the last axis; ``explore`` drops the safety terms."""
    f = np.asarray(features, dtype=float)
    w = weights.as_array()
    if explore:
        w = w.copy()
        w[: len(SAFETY)] = 0.0
    c = f @ w
    return float(c) if np.ndim(c) == 0 else c


def select_best(costs, target_speeds=None) -> int:
    """Index of the lowest cost; ties go to higher target speed, then lower index."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("select_best needs at least one candidate")
    speeds = np.zeros_like(costs) if target_speeds is None else np.asarray(target_speeds, dtype=float)
    order = np.lexsort((np.arange(len(costs)), -speeds, costs))
    return int(order[0])
