"""Lightweight reactive traffic simulator.

Background vehicles follow their lane with IDM.  Where lanes cross they
use gap acceptance: a lower-priority lane yields to higher-priority traffic,
and every vehicle decides per encounter whether to yield to the ego based
on a sampled yield threshold.  On straight multi-lane roads they follow the
ego once it cuts into their lane, and polite drivers already brake when the
ego starts drifting toward them.  The ego is moved by teleporting it along
its plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..geometry import VEHICLE_LENGTH, VEHICLE_WIDTH, boxes_overlap
from ..scene import HISTORY, SceneObservation, build_observation
from .maps import ScenarioMap, get_map

DT = 0.1
TIMEOUT = 40.0
EGO_ID = 0

# IDM parameters
IDM_ACCEL = 1.5
IDM_DECEL = 2.0
IDM_S0 = 2.0
IDM_HEADWAY = 1.2
MAX_BRAKE = 9.0

STOP_CLEARANCE = 3.5  # virtual stop line, metres before the crossing point
ZONE = VEHICLE_LENGTH / 2 + 1.75 + 0.5  # half size of the conflict zone along a lane
GAP_ACCEPT = 3.0  # seconds, minor lane vs major traffic
EGO_HORIZON = 8.0  # seconds; ego arrivals later than this are ignored
COURTESY_THRESHOLD = 1.0
IN_LANE = 2.6
ENCROACH = 3.2


class Status(str, Enum):
    RUNNING = "running"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"
    OFFROAD = "offroad"


class SimulationError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    """Traffic-flow knobs layered over the map's own flow definitions.

    ``density`` scales arrival rates (0 disables all background traffic,
    including platoons); ``speed_scale`` scales sampled desired speeds.
    """

    density: float = 1.0
    speed_scale: float = 1.0
    warmup: float = 20.0
    yield_shift: float = 0.0

    def __post_init__(self):
        if self.density < 0 or self.speed_scale <= 0 or self.warmup < 0:
            raise ValueError("flow parameters must be non-negative (speed scale positive)")


@dataclass
class Agent:
    id: int
    lane: str
    s: float
    v: float
    desired: float
    yield_threshold: float
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    yielding_to_ego: set = field(default_factory=set)

    @property
    def state(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.v])


@dataclass
class Verdict:
    status: Status
    success: bool
    collision: bool
    time: float | None


class World:
    """Single-owner episode state; mutate only through :meth:`step`."""

    def __init__(self, scene_map: ScenarioMap, flow: FlowConfig, seed: int):
        self.map = scene_map
        self.flow = flow
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.time = 0.0
        self.steps = 0
        self.ego = scene_map.ego_start_state()
        self.ego_present = False
        self.agents: dict[int, Agent] = {}
        self.next_id = EGO_ID + 1
        self.status = Status.RUNNING
        self.bg_collisions = 0
        self.history: list[tuple[np.ndarray, dict[int, np.ndarray]]] = []
        self._next_spawn = {}
        self._flow_by_lane = {f.lane: f for f in scene_map.flows}
        self._ego_on: dict[str, tuple[float, float, float]] = {}

    # -- setup ---------------------------------------------------------------

    def _sample_arrival(self, lane_id: str) -> float:
        lo, hi = self._flow_by_lane[lane_id].inter_arrival
        return float(self.rng.uniform(lo, hi)) / self.flow.density

    def _new_agent(self, lane_id: str, s: float, desired: float, v: float, tau: float) -> Agent:
        a = Agent(self.next_id, lane_id, s, v, desired, tau)
        self.next_id += 1
        self._place(a)
        self.agents[a.id] = a
        return a

    def _place(self, a: Agent):
        x, y, h = self.map.lanes[a.lane].path.position(a.s)
        a.x, a.y, a.heading = float(x), float(y), float(h)

    def _populate(self, with_ego: bool = True):
        if self.flow.density > 0:
            for f in self.map.flows:
                self._next_spawn[f.lane] = float(self.rng.uniform(0.0, f.inter_arrival[1])) / self.flow.density
        warm = int(round(self.flow.warmup / DT))
        for _ in range(warm):
            self._advance_background()
            self.time += DT
        self.time = 0.0
        if self.flow.density > 0 and self.map.platoon:
            self._spawn_platoon()
        # clear the ego's start area
        ego_box = self.ego
        for aid in list(self.agents):
            a = self.agents[aid]
            if math.hypot(a.x - ego_box[0], a.y - ego_box[1]) < 12.0:
                del self.agents[aid]
        self.ego_present = with_ego
        self._record()

    def _spawn_platoon(self):
        p = self.map.platoon
        lane = self.map.lanes[p["lane"]]
        ego_s = self.map.ego_start["s"]
        n = int(self.rng.integers(p["count"][0], p["count"][1] + 1))
        s = ego_s + float(self.rng.uniform(*p["lead_gap"]))
        for _ in range(n):
            v = float(self.rng.uniform(*p["speed"])) * self.flow.speed_scale
            if s < lane.length - 5:
                self._new_agent(p["lane"], s, v, v, float(self.rng.uniform(-0.5, 0.5)))
            s += float(self.rng.uniform(*p["spacing"]))

    def _spawn(self):
        for lane_id, due in list(self._next_spawn.items()):
            if self.time < due:
                continue
            f = self._flow_by_lane[lane_id]
            desired = float(self.rng.uniform(*f.desired_speed)) * self.flow.speed_scale
            tau = float(self.rng.uniform(*f.yield_threshold)) + self.flow.yield_shift
            on_lane = [a for a in self.agents.values() if a.lane == lane_id]
            last = min(on_lane, key=lambda a: a.s) if on_lane else None
            v = desired
            if last is not None:
                gap = last.s - VEHICLE_LENGTH
                if gap < IDM_S0 + 6.0:
                    continue  # retry next step
                v = min(desired, last.v + 0.5 * max(0.0, gap - IDM_S0 - v * IDM_HEADWAY))
                v = max(v, 0.0)
            self._new_agent(lane_id, 0.0, desired, v, tau)
            self._next_spawn[lane_id] = self.time + self._sample_arrival(lane_id)

    # -- dynamics -------------------------------------------------------------

    def _idm(self, a: Agent, gap: float | None, lead_v: float) -> float:
        free = 1.0 - (a.v / a.desired) ** 4
        if gap is None:
            acc = IDM_ACCEL * free
        else:
            s_star = IDM_S0 + max(0.0, a.v * IDM_HEADWAY + a.v * (a.v - lead_v) / (2 * math.sqrt(IDM_ACCEL * IDM_DECEL)))
            acc = IDM_ACCEL * (free - (s_star / max(gap, 0.1)) ** 2)
        return min(max(acc, -MAX_BRAKE), IDM_ACCEL)

    def _ego_projection(self):
        """Ego ``(s, d, cos_rel)`` on every lane it is laterally close to."""
        self._ego_on = {}
        if not self.ego_present:
            return
        ex, ey, eh = self.ego[:3]
        for lid, ln in self.map.lanes.items():
            s, d, clamped = ln.path.project(ex, ey)
            if clamped[0] or abs(d[0]) > 5.0:
                continue
            self._ego_on[lid] = (float(s[0]), float(d[0]), float(math.cos(eh - ln.path.tangent(s[0]))))

    def _ego_lane(self) -> str | None:
        best = None
        for lid, (s, d, c) in self._ego_on.items():
            if c > 0.7 and abs(d) < 3.0 and (best is None or abs(d) < abs(self._ego_on[best][1])):
                best = lid
        return best

    def _time_to(self, dist: float, v: float) -> float:
        return max(dist, 0.0) / max(v, 0.1)

    def _clear_time(self, a: Agent, dist: float) -> float:
        """Time for ``a`` to cover ``dist`` accelerating at IDM_ACCEL up to its desired speed."""
        v, acc = a.v, IDM_ACCEL
        t_cap = max(a.desired - v, 0.0) / acc
        d_cap = v * t_cap + 0.5 * acc * t_cap ** 2
        if dist <= d_cap:
            return (-v + math.sqrt(v * v + 2 * acc * dist)) / acc
        return t_cap + (dist - d_cap) / max(a.desired, 0.1)

    def _conflict_stop(self, a: Agent, by_lane: dict[str, list[Agent]], ego_lane: str | None):
        """Distance from ``a``'s front to the nearest stop line it must respect, or None."""
        front = a.s + VEHICLE_LENGTH / 2
        my_pri = self.map.lanes[a.lane].priority
        for c in self.map.conflicts[a.lane]:
            if c.s + ZONE < a.s - VEHICLE_LENGTH / 2:
                continue  # already cleared
            if c.s - front > 60.0:
                break
            stop_at = c.s - STOP_CLEARANCE
            committed = front > stop_at
            key = (c.other, round(c.s, 3))
            must_yield = False
            # ego
            if ego_lane == c.other:
                es, _, _ = self._ego_on[c.other]
                de = c.other_s - es
                if -ZONE <= de <= ZONE:
                    if committed:
                        # the ego occupies the crossing: brake for it as an obstacle
                        block = c.s - VEHICLE_WIDTH / 2 - 0.5 - front
                        if block > -VEHICLE_WIDTH:
                            return block
                    must_yield = not committed
                elif de > ZONE:
                    t_e = self._time_to(de - ZONE, self.ego[3])
                    t_a = self._time_to(c.s - ZONE - front, a.v)
                    if key in a.yielding_to_ego:
                        if self.ego[3] < 0.5 and de - ZONE > 3.0:
                            a.yielding_to_ego.discard(key)
                        else:
                            must_yield = not committed
                    elif (not committed and t_e < EGO_HORIZON and t_e < t_a + a.yield_threshold
                          and (stop_at - front) >= a.v * a.v / (2 * 6.0)):
                        a.yielding_to_ego.add(key)
                        must_yield = True
                else:
                    a.yielding_to_ego.discard(key)
            # background traffic on the crossing lane
            if not must_yield and not committed:
                other_pri = self.map.lanes[c.other].priority
                for o in by_lane.get(c.other, ()):
                    do = c.other_s - o.s
                    if do < -ZONE - VEHICLE_LENGTH / 2:
                        continue
                    o_front = o.s + VEHICLE_LENGTH / 2
                    o_committed = o_front > c.other_s - STOP_CLEARANCE
                    if other_pri > my_pri:
                        if abs(do) <= ZONE + VEHICLE_LENGTH / 2:
                            must_yield = True
                        else:
                            t_o = self._time_to(do - ZONE - VEHICLE_LENGTH / 2, o.v)
                            t_clear = self._clear_time(a, c.s + ZONE - (a.s - VEHICLE_LENGTH / 2))
                            if t_o < t_clear + GAP_ACCEPT:
                                must_yield = True
                    elif other_pri < my_pri and o_committed:
                        must_yield = True
                    if must_yield:
                        break
            if must_yield:
                return stop_at - front
        return None

    def _advance_background(self):
        by_lane: dict[str, list[Agent]] = {}
        for a in self.agents.values():
            by_lane.setdefault(a.lane, []).append(a)
        for lst in by_lane.values():
            lst.sort(key=lambda a: a.s)
        self._ego_projection()
        ego_lane = self._ego_lane() if self.ego_present else None
        accs = {}
        for lane_id, lst in by_lane.items():
            for i, a in enumerate(lst):
                gap, lead_v = None, 0.0
                if i + 1 < len(lst):
                    lead = lst[i + 1]
                    gap, lead_v = lead.s - a.s - VEHICLE_LENGTH, lead.v
                if self.ego_present and lane_id in self._ego_on:
                    es, ed, ec = self._ego_on[lane_id]
                    ahead = es - a.s
                    if ec > 0.5 and ahead > 0:
                        follow = abs(ed) < IN_LANE or (
                            abs(ed) < ENCROACH and ahead < 25.0 and a.yield_threshold >= COURTESY_THRESHOLD)
                        if follow:
                            g = ahead - VEHICLE_LENGTH
                            if gap is None or g < gap:
                                gap, lead_v = g, self.ego[3] * ec
                stop = self._conflict_stop(a, by_lane, ego_lane)
                if stop is not None and (gap is None or stop < gap):
                    gap, lead_v = stop, 0.0
                accs[a.id] = self._idm(a, gap, lead_v)
        for aid, acc in accs.items():
            a = self.agents[aid]
            v_new = max(0.0, a.v + acc * DT)
            a.s += 0.5 * (a.v + v_new) * DT
            a.v = v_new
            if a.s >= self.map.lanes[a.lane].length - 1.0:
                del self.agents[aid]
                continue
            self._place(a)
        self._check_background_collisions()
        self._spawn()

    def _check_background_collisions(self):
        ag = list(self.agents.values())
        if len(ag) < 2:
            return
        st = np.array([[a.x, a.y, a.heading] for a in ag])
        near = np.hypot(st[:, None, 0] - st[None, :, 0], st[:, None, 1] - st[None, :, 1]) < 6.0
        iu = np.triu_indices(len(ag), 1)
        pairs = [(i, j) for i, j in zip(*iu) if near[i, j]]
        if pairs:
            i, j = np.array(pairs).T
            hits = boxes_overlap(st[i, 0], st[i, 1], st[i, 2], st[j, 0], st[j, 1], st[j, 2])
            self.bg_collisions += int(np.count_nonzero(hits))

    # -- episode ---------------------------------------------------------------

    def _record(self):
        self.history.append((self.ego.copy(), {a.id: a.state for a in self.agents.values()}))

    def step(self, ego_next) -> "World":
        if self.status is not Status.RUNNING:
            raise SimulationError(f"step after terminal status {self.status.value}")
        self._advance_background()
        if ego_next is not None:
            self.ego = np.asarray(ego_next, dtype=float)[:4].copy()
        self.time = round(self.time + DT, 10)
        self.steps += 1
        self._record()
        self._update_status()
        return self

    def ego_collides(self) -> bool:
        if not self.agents:
            return False
        st = np.array([[a.x, a.y, a.heading] for a in self.agents.values()])
        e = self.ego
        return bool(np.any(boxes_overlap(e[0], e[1], e[2], st[:, 0], st[:, 1], st[:, 2])))

    def _update_status(self):
        if not self.ego_present:
            if self.time >= TIMEOUT - 1e-9:
                self.status = Status.TIMEOUT
            return
        if self.ego_collides():
            self.status = Status.COLLISION
            return
        goal = self.map.goal
        gl = self.map.lanes[goal["lane"]]
        s, d, clamped = gl.path.project(self.ego[0], self.ego[1])
        if not clamped[0] and abs(d[0]) < 1.75 and goal["s_min"] <= s[0] <= goal["s_max"]:
            self.status = Status.SUCCESS
            return
        if not self.on_road():
            self.status = Status.OFFROAD
            return
        if self.time >= TIMEOUT - 1e-9:
            self.status = Status.TIMEOUT

    def on_road(self) -> bool:
        for ln in self.map.ego_lanes:
            s, d, clamped = ln.path.project(self.ego[0], self.ego[1])
            if not clamped[0] and abs(d[0]) <= 2.5:
                return True
        return False

    @property
    def terminal(self) -> bool:
        return self.status is not Status.RUNNING

    # -- observation -------------------------------------------------------------

    def history_arrays(self, length: int = HISTORY + 1):
        """Last ``length`` snapshots as dense arrays for agents present now."""
        snaps = self.history[-length:]
        pad = length - len(snaps)
        ids = np.array(sorted(snaps[-1][1]), dtype=np.int64)
        col = {int(i): k for k, i in enumerate(ids)}
        ego = np.zeros((length, 4))
        ego_valid = np.zeros(length, dtype=bool)
        hist = np.zeros((length, len(ids), 4))
        valid = np.zeros((length, len(ids)), dtype=bool)
        for r, (e, agents) in enumerate(snaps, start=pad):
            ego[r] = e
            ego_valid[r] = True
            for aid, st in agents.items():
                k = col.get(aid)
                if k is not None:
                    hist[r, k] = st
                    valid[r, k] = True
        return ego, ego_valid, ids, hist, valid

    def to_record(self):
        """Dense global-frame trace of the whole episode."""
        ids = sorted({aid for _, agents in self.history for aid in agents})
        col = {aid: k for k, aid in enumerate(ids)}
        S = len(self.history)
        states = np.zeros((S, len(ids), 4))
        valid = np.zeros((S, len(ids)), dtype=bool)
        ego = np.zeros((S, 4))
        for r, (e, agents) in enumerate(self.history):
            ego[r] = e
            for aid, st in agents.items():
                states[r, col[aid]] = st
                valid[r, col[aid]] = True
        return np.array(ids, dtype=np.int64), states, valid, ego


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def reset(scenario: str | ScenarioMap, flow: FlowConfig | None = None, seed: int = 0,
          with_ego: bool = True) -> World:
    """Fresh episode; ``with_ego=False`` gives a background-only rollout."""
    scene_map = scenario if isinstance(scenario, ScenarioMap) else get_map(scenario)
    world = World(scene_map, flow or FlowConfig(), seed)
    world._populate(with_ego)
    return world


def step(world: World, ego_next) -> World:
    return world.step(ego_next)


def observe(world: World, ego_frame: bool = True) -> SceneObservation:
    ego, ego_valid, ids, hist, valid = world.history_arrays()
    return build_observation(world.map, ego, ego_valid, ids, hist, valid, ego_frame)


def judge(world: World) -> Verdict:
    if not world.terminal:
        raise SimulationError("judge called on a running episode")
    ok = world.status is Status.SUCCESS
    return Verdict(world.status, ok, world.status is Status.COLLISION, world.time if ok else None)
