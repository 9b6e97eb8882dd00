"""Scenario map files.

A map file is JSON with the keys

``name``, ``description``
``lane_width``            metres
``lanes``                 list of ``{id, points: [[x, y], ...], speed_limit,
                          priority, left, right, ego_drivable}``; points are
                          ordered in the driving direction, spacing <= 2 m;
                          ``left``/``right`` name the adjacent same-direction
                          lane or are null; a lower ``priority`` yields to a
                          higher one where lanes cross
``ego``                   ``{lane, s, speed}`` start pose on a lane
``goal``                  ``{lane, s_min, s_max}`` arc-length interval
``flows``                 list of ``{lane, inter_arrival: [lo, hi],
                          desired_speed: [lo, hi], yield_threshold: [lo, hi]}``
``platoon``               null or ``{lane, count: [lo, hi], lead_gap: [lo, hi],
                          spacing: [lo, hi], speed: [lo, hi]}``

Conflict points are not stored; they are derived from lane crossings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..frenet import ReferencePath

SCENARIOS = ("intersection", "merge", "overtake")
ROUTE_SPACING = 1.0


@dataclass
class Lane:
    id: str
    path: ReferencePath
    speed_limit: float
    priority: int = 0
    left: str | None = None
    right: str | None = None
    ego_drivable: bool = False
    samples: np.ndarray = field(default=None, repr=False)  # [M, 3] at 1 m spacing

    def __post_init__(self):
        if self.samples is None:
            s = np.arange(0.0, self.path.length + 1e-9, ROUTE_SPACING)
            x, y, h = self.path.position(s)
            self.samples = np.stack([x, y, h], axis=1)

    @property
    def length(self) -> float:
        return self.path.length


@dataclass(frozen=True)
class Conflict:
    lane: str
    s: float
    other: str
    other_s: float
    x: float
    y: float


@dataclass
class FlowDef:
    lane: str
    inter_arrival: tuple[float, float]
    desired_speed: tuple[float, float]
    yield_threshold: tuple[float, float] = (-0.5, 2.5)


@dataclass
class ScenarioMap:
    name: str
    lane_width: float
    lanes: dict[str, Lane]
    ego_start: dict
    goal: dict
    flows: list[FlowDef]
    platoon: dict | None = None
    description: str = ""
    conflicts: dict[str, list[Conflict]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.conflicts:
            self.conflicts = _find_conflicts(self.lanes)
        self._route_cloud = np.concatenate([ln.samples for ln in self.lanes.values()])
        sizes = [len(ln.samples) for ln in self.lanes.values()]
        self._route_starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self._lane_order = list(self.lanes)

    @property
    def ego_lanes(self) -> list[Lane]:
        return [ln for ln in self.lanes.values() if ln.ego_drivable]

    def neighbors(self, lane_id: str) -> list[Lane]:
        ln = self.lanes[lane_id]
        return [self.lanes[n] for n in (ln.left, ln.right) if n]

    def ego_start_state(self) -> np.ndarray:
        ln = self.lanes[self.ego_start["lane"]]
        x, y, h = ln.path.position(self.ego_start["s"])
        return np.array([float(x), float(y), float(h), float(self.ego_start["speed"])])

    def locate(self, x: float, y: float, heading: float, lanes=None, max_offset: float = 3.0):
        """Lane the pose is driving on: ``(lane, s, d)`` or ``None``.

        Candidates must be heading-aligned and within ``max_offset`` laterally;
        the smallest offset wins.
        """
        best = None
        for ln in lanes if lanes is not None else self.lanes.values():
            s, d, clamped = ln.path.project(x, y)
            if clamped[0] or abs(d[0]) > max_offset:
                continue
            if np.cos(heading - ln.path.tangent(s[0])) < 0.7:
                continue
            if best is None or abs(d[0]) < abs(best[2]):
                best = (ln, float(s[0]), float(d[0]))
        return best

    def local_routes(self, xy: np.ndarray, heading: np.ndarray, n_routes: int = 3,
                     n_points: int = 50, radius: float = 10.0):
        """Nearby lane polylines for each pose.

        Returns ``routes [A, R, W, 3]`` (x, y, heading) and ``valid [A, R, W]``.
        Lanes are ranked by distance to their nearest sample plus a penalty
        for heading misalignment, so the lane an agent drives on comes first.
        """
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        heading = np.asarray(heading, dtype=float).reshape(-1)
        A = len(xy)
        routes = np.zeros((A, n_routes, n_points, 3))
        valid = np.zeros((A, n_routes, n_points), dtype=bool)
        cloud = self._route_cloud
        d2 = (xy[:, None, 0] - cloud[None, :, 0]) ** 2 + (xy[:, None, 1] - cloud[None, :, 1]) ** 2
        for a in range(A):
            scores = []
            for li, lane_id in enumerate(self._lane_order):
                start = self._route_starts[li]
                seg = d2[a, start:start + len(self.lanes[lane_id].samples)]
                k = int(np.argmin(seg))
                dist = float(np.sqrt(seg[k]))
                if dist > radius:
                    continue
                align = np.cos(heading[a] - self.lanes[lane_id].samples[k, 2])
                scores.append((dist + 5.0 * (1.0 - align), li, k))
            scores.sort()
            for r, (_, li, k) in enumerate(scores[:n_routes]):
                pts = self.lanes[self._lane_order[li]].samples[k:k + n_points]
                routes[a, r, :len(pts)] = pts
                valid[a, r, :len(pts)] = True
        return routes, valid

    def transformed(self, rotation: float, tx: float, ty: float) -> "ScenarioMap":
        """Rigidly transformed copy (used to check frame invariance)."""
        lanes = {}
        for k, ln in self.lanes.items():
            lanes[k] = Lane(ln.id, ln.path.transformed(rotation, tx, ty), ln.speed_limit,
                            ln.priority, ln.left, ln.right, ln.ego_drivable)
        return ScenarioMap(self.name, self.lane_width, lanes, dict(self.ego_start), dict(self.goal),
                           list(self.flows), self.platoon, self.description)


def _segment_intersections(p: np.ndarray, q: np.ndarray):
    """Crossings between two polylines as (index_p, t_p, index_q, t_q)."""
    a0, a1 = p[:-1], p[1:]
    b0, b1 = q[:-1], q[1:]
    r = a1 - a0
    s = b1 - b0
    denom = r[:, None, 0] * s[None, :, 1] - r[:, None, 1] * s[None, :, 0]
    qp = b0[None, :, :] - a0[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[None, :, 1] - qp[..., 1] * s[None, :, 0]) / denom
        u = (qp[..., 0] * r[:, None, 1] - qp[..., 1] * r[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0) & (t < 1) & (u >= 0) & (u < 1)
    return [(i, t[i, j], j, u[i, j]) for i, j in zip(*np.nonzero(hit))]


def _find_conflicts(lanes: dict[str, Lane]) -> dict[str, list[Conflict]]:
    out: dict[str, list[Conflict]] = {k: [] for k in lanes}
    ids = list(lanes)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            pa, pb = lanes[a].path, lanes[b].path
            for ia, ta, ib, tb in _segment_intersections(pa.points, pb.points):
                sa = pa.s[ia] + ta * (pa.s[ia + 1] - pa.s[ia])
                sb = pb.s[ib] + tb * (pb.s[ib + 1] - pb.s[ib])
                x = pa.x[ia] + ta * (pa.x[ia + 1] - pa.x[ia])
                y = pa.y[ia] + ta * (pa.y[ia + 1] - pa.y[ia])
                out[a].append(Conflict(a, float(sa), b, float(sb), float(x), float(y)))
                out[b].append(Conflict(b, float(sb), a, float(sa), float(x), float(y)))
    for v in out.values():
        v.sort(key=lambda c: c.s)
    return out


def load_map(source) -> ScenarioMap:
    """Load a bundled scenario by name or a map file by path."""
    if isinstance(source, str) and source in SCENARIOS:
        text = resources.files("reactplan.sim").joinpath("maps", f"{source}.json").read_text()
    else:
        path = Path(source)
        if not path.exists():
            raise KeyError(f"unknown scenario {source!r}")
        text = path.read_text()
    doc = json.loads(text)
    lanes = {}
    for ln in doc["lanes"]:
        path = ReferencePath.from_points(ln["points"], ln["id"], ln["speed_limit"])
        if np.any(np.diff(path.s) > 2.0 + 1e-9):
            raise ValueError(f"lane {ln['id']}: waypoint spacing above 2 m")
        lanes[ln["id"]] = Lane(ln["id"], path, float(ln["speed_limit"]), int(ln.get("priority", 0)),
                               ln.get("left"), ln.get("right"), bool(ln.get("ego_drivable", False)))
    flows = [FlowDef(f["lane"], tuple(f["inter_arrival"]), tuple(f["desired_speed"]),
                      tuple(f.get("yield_threshold", (-0.5, 2.5)))) for f in doc.get("flows", [])]
    for f in flows:
        if f.lane not in lanes:
            raise ValueError(f"flow on unknown lane {f.lane!r}")
    if doc["goal"]["lane"] not in lanes or doc["ego"]["lane"] not in lanes:
        raise ValueError("ego start or goal on unknown lane")
    return ScenarioMap(doc["name"], float(doc["lane_width"]), lanes, doc["ego"], doc["goal"],
                       flows, doc.get("platoon"), doc.get("description", ""))


_CACHE: dict[str, ScenarioMap] = {}


def get_map(name: str) -> ScenarioMap:
    if name not in _CACHE:
        _CACHE[name] = load_map(name)
    return _CACHE[name]
