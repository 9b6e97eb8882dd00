"""Interactivity probe: does a plan change move only the agents it conflicts with?

A conflict state is a recorded timestep where the ego is approaching a
crossing, another agent is approaching the same crossing from the crossing
lane, and some third agent has nothing to do with that crossing.  The probe
predicts both agents under a pass plan (lane speed limit) and a yield plan
(stop) and reports how far their final predicted positions move.

Geometry alone does not make a state interactive: an agent that is already
committed, or an ego that arrives long after it, leaves the agent's future
unchanged whatever the plan.  ``verified`` sampling therefore replays the
episode in the simulator, executes both plans, and keeps only states where
the true futures show the pattern (conflicting agent moves, free one does not).
"""

from __future__ import annotations

import copy

from dataclasses import dataclass

import numpy as np

from .learn import EpisodeRecord, lane_plans, observation_at, plans_to_ego_frame
from .predictor import Predictor, predict
from .sim import FlowConfig, reset
from .sim.maps import get_map

PASS_SHIFT = 0.5  # m, conflicting agent must move at least this much
FREE_SHIFT = 0.25  # m, free agent must move less than this


@dataclass
class ConflictState:
    record: EpisodeRecord
    t: int
    conflict_slot: int  # neighbor slot of the agent heading for the ego's crossing
    free_slot: int  # neighbor slot of an agent that does not share it
    ego_gap: float  # ego distance to the crossing point (m)
    agent_gap: float  # conflicting agent's distance to it (m)
    true_shifts: tuple[float, float] | None = None  # simulated (conflict, free) pass/yield shifts


@dataclass
class ProbeResult:
    state: ConflictState
    conflict_shift: float  # FDE-style distance between its pass and yield predictions (m)
    free_shift: float
    conflict_gate: float | None = None
    free_gate: float | None = None

    def holds(self, conflict_min: float = PASS_SHIFT, free_max: float = FREE_SHIFT) -> bool:
        return self.conflict_shift > conflict_min and self.free_shift < free_max


def find_conflict_state(record: EpisodeRecord, t: int, max_gap: float = 30.0, min_ego_gap: float = 3.0,
                        min_steps: int = 10) -> ConflictState | None:
    """Classify the neighbors at step ``t``; ``None`` unless both roles are filled."""
    if t < min_steps or t >= record.steps:
        return None
    m = get_map(record.scenario)
    ego = record.ego[t]
    hit = m.locate(*ego[:3], m.ego_lanes)
    if hit is None:
        return None
    ego_lane, ego_s, _ = hit
    ahead = [c for c in m.conflicts.get(ego_lane.id, []) if min_ego_gap <= c.s - ego_s <= max_gap]
    if not ahead:
        return None
    obs = observation_at(record, t)
    col = {int(a): k for k, a in enumerate(record.ids)}
    conflict, free = [], []
    for slot, aid in enumerate(obs.neighbor_ids):
        if aid < 0:
            continue
        st = record.states[t, col[int(aid)]]
        loc = m.locate(*st[:3])
        if loc is None:
            continue
        lane, s, _ = loc
        hits = [c for c in ahead if c.other == lane.id]
        if hits:
            gap = hits[0].other_s - s
            if 0.0 <= gap <= max_gap:
                conflict.append((gap, slot, hits[0].s - ego_s))
                continue
        # nothing ahead of this agent crosses the ego's lane within reach
        later = [c for c in m.conflicts.get(lane.id, []) if c.other == ego_lane.id and c.s >= s - 1.0]
        if not later:
            free.append((float(np.hypot(*(st[:2] - ego[:2]))), slot))
    if not conflict or not free:
        return None
    gap, cslot, egap = min(conflict)
    _, fslot = min(free)
    return ConflictState(record, t, cslot, fslot, egap, gap)


def probe_plans(record: EpisodeRecord, t: int, horizon: int = 30):
    """Pass (lane speed limit) and yield (stop) plans from the recorded ego state."""
    m = get_map(record.scenario)
    ego = record.ego[t]
    lane = m.locate(*ego[:3], m.ego_lanes)[0]
    return lane_plans(m, ego, [lane.speed_limit, 0.0], horizon=horizon)


def replay_world(record: EpisodeRecord, t: int, flow: FlowConfig | None = None):
    """Rebuild the simulator at step ``t`` by re-driving the recorded ego."""
    w = reset(record.scenario, flow, record.seed)
    for k in range(t):
        w.step(record.ego[k + 1])
    if not np.allclose(w.ego, record.ego[t]) or w.terminal:
        raise ValueError("record does not replay; was it produced with another flow config?")
    return w


def simulated_shifts(state: ConflictState, horizon: int = 30, flow: FlowConfig | None = None):
    """True final-position shift of both agents between the pass and yield plans, or ``None``.

    ``None`` when either rollout ends early or an agent leaves the map.
    """
    rec, t = state.record, state.t
    world = replay_world(rec, t, flow)
    obs = observation_at(rec, t)
    ids = [int(obs.neighbor_ids[state.conflict_slot]), int(obs.neighbor_ids[state.free_slot])]
    finals = []
    for plan in probe_plans(rec, t, horizon):
        w = copy.deepcopy(world)
        for k in range(1, horizon + 1):
            w.step(plan.trajectory[k])
            if w.terminal:
                return None
        if any(i not in w.agents for i in ids):
            return None
        finals.append(np.array([[w.agents[i].x, w.agents[i].y] for i in ids]))
    c, f = np.hypot(*(finals[0] - finals[1]).T)
    return float(c), float(f)


def sample_conflict_states(records, n: int, stride: int = 10, verified: bool = False,
                           flow: FlowConfig | None = None) -> list[ConflictState]:
    """Up to ``n`` states, scanning each record every ``stride`` steps, at most one state per crossing approach.

    With ``verified`` only states whose simulated futures show the interaction pattern are kept.
    """
    out = []
    for rec in records:
        last = -10 ** 9
        for t in range(0, rec.steps, stride):
            if t - last < 2 * stride:
                continue
            st = find_conflict_state(rec, t)
            if st is None:
                continue
            if verified:
                st.true_shifts = simulated_shifts(st, flow=flow)
                if st.true_shifts is None or not (st.true_shifts[0] > PASS_SHIFT and st.true_shifts[1] < FREE_SHIFT):
                    continue
            out.append(st)
            last = t
            if len(out) == n:
                return out
    return out


def probe(model: Predictor, state: ConflictState, horizon: int = 30) -> ProbeResult:
    """Pass vs yield prediction shift of the conflicting and the free agent."""
    rec, t = state.record, state.t
    plans = probe_plans(rec, t, horizon)
    obs = observation_at(rec, t)
    ego_frame = plans_to_ego_frame(np.stack([p.trajectory for p in plans]), obs.origin)
    res = predict(obs, ego_frame, model)
    tr = res.trajectories  # [2, N, T, 3]
    shift = np.hypot(*(tr[0, :, -1, :2] - tr[1, :, -1, :2]).T)
    gates = res.gate_scores
    g = (lambda s: float(gates[0, s])) if gates is not None else (lambda s: None)
    return ProbeResult(state, float(shift[state.conflict_slot]), float(shift[state.free_slot]),
                       g(state.conflict_slot), g(state.free_slot))
