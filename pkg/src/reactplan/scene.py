"""Ego-normalised scene observations shared by the simulator, replay buffer and predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frenet import wrap_angle
from .geometry import to_frame

N_NEIGHBORS = 5
HISTORY = 10
N_ROUTES = 3
ROUTE_POINTS = 50


@dataclass
class SceneObservation:
    """Model input at one timestep.

    States are ``(x, y, heading, speed)``, routes ``(x, y, heading)``.  In the
    ego frame the ego's current pose is the origin with heading 0.  Padded
    slots hold exact zeros.
    """

    ego_history: np.ndarray  # [T_h+1, 4]
    neighbor_histories: np.ndarray  # [N_a, T_h+1, 4]
    neighbor_valid: np.ndarray  # [N_a]
    history_valid: np.ndarray  # [N_a+1, T_h+1], row 0 is the ego
    local_maps: np.ndarray  # [N_a+1, R, W, 3]
    map_valid: np.ndarray  # [N_a+1, R, W]
    neighbor_ids: np.ndarray  # [N_a], -1 for empty slots
    origin: np.ndarray  # global ego pose (x, y, heading) the frame is anchored to

    @property
    def n_neighbors(self) -> int:
        return len(self.neighbor_valid)

    def neighbor_current(self) -> np.ndarray:
        """Current neighbor states ``[N_a, 4]`` (zeros for empty slots)."""
        return self.neighbor_histories[:, -1]

    def allclose(self, other: "SceneObservation", atol: float = 1e-9) -> bool:
        same_masks = all(np.array_equal(getattr(self, f), getattr(other, f))
                          for f in ("neighbor_valid", "history_valid", "map_valid", "neighbor_ids"))
        if not same_masks:
            return False
        for f in ("ego_history", "neighbor_histories", "local_maps"):
            a, b = getattr(self, f), getattr(other, f)
            diff = a - b
            # headings equal up to a full turn (the +-pi branch can flip)
            diff[..., 2] = wrap_angle(diff[..., 2])
            if np.abs(diff).max(initial=0.0) > atol:
                return False
        return True


def select_neighbors(ego_xy, ids, xy, valid, k: int = N_NEIGHBORS) -> list[int]:
    """Column indices of the ``k`` closest valid agents, ties broken by id."""
    cols = np.nonzero(valid)[0]
    if len(cols) == 0:
        return []
    dist = np.hypot(xy[cols, 0] - ego_xy[0], xy[cols, 1] - ego_xy[1])
    order = np.lexsort((np.asarray(ids)[cols], dist))
    return [int(c) for c in cols[order[:k]]]


def build_observation(scene_map, ego_hist: np.ndarray, ego_valid: np.ndarray, agent_ids: np.ndarray,
                      agent_hist: np.ndarray, agent_valid: np.ndarray, ego_frame: bool = True,
                      n_neighbors: int = N_NEIGHBORS) -> SceneObservation:
    """Assemble an observation from the last ``T_h+1`` global states.

    ``ego_hist [H, 4]``, ``agent_hist [H, A, 4]`` with validity masks; the last
    row is the current timestep.
    """
    H = ego_hist.shape[0]
    ego_now = ego_hist[-1]
    cols = select_neighbors(ego_now[:2], agent_ids, agent_hist[-1, :, :2], agent_valid[-1], n_neighbors)
    nb = np.zeros((n_neighbors, H, 4))
    hv = np.zeros((n_neighbors + 1, H), dtype=bool)
    hv[0] = ego_valid
    ids = np.full(n_neighbors, -1, dtype=np.int64)
    for slot, c in enumerate(cols):
        nb[slot] = agent_hist[:, c]
        hv[slot + 1] = agent_valid[:, c]
        ids[slot] = agent_ids[c]
    nv = ids >= 0
    ego = np.where(ego_valid[:, None], ego_hist, 0.0)
    nb = np.where(hv[1:, :, None], nb, 0.0)

    poses = np.concatenate([ego_now[None, :3], nb[:, -1, :3]])
    routes, mv = scene_map.local_routes(poses[:, :2], poses[:, 2], N_ROUTES, ROUTE_POINTS)
    mv[1:] &= nv[:, None, None]
    origin = ego_now[:3].copy()
    if ego_frame:
        ego, nb, routes = _normalise(ego, nb, routes, origin)
    ego = np.where(ego_valid[:, None], ego, 0.0)
    nb = np.where(hv[1:, :, None], nb, 0.0)
    routes = np.where(mv[..., None], routes, 0.0)
    return SceneObservation(ego, nb, nv, hv, routes, mv, ids, origin)


def _normalise(ego, nb, routes, origin):
    def states(a):
        xy, h = to_frame(a[..., :2], a[..., 2], origin[:2], origin[2])
        out = a.copy()
        out[..., :2] = xy
        out[..., 2] = wrap_angle(h)
        return out

    return states(ego), states(nb), states(routes)
