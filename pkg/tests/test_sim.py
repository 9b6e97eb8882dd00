import math

import numpy as np
import pytest

from reactplan.geometry import box_gap
from reactplan.scene import N_NEIGHBORS, build_observation
from reactplan.sim import FlowConfig, SCENARIOS, get_map, judge, observe, reset
from reactplan.sim.world import DT, IDM_ACCEL, IDM_S0, SimulationError, Status


def idm_free_oracle(v0, desired, seconds, substeps=100):
    """RK4 integration of the free-road IDM law dv/dt = a (1 - (v/v0)^4)."""
    f = lambda v: IDM_ACCEL * (1.0 - (v / desired) ** 4)  # noqa: E731
    h = DT / substeps
    v = v0
    for _ in range(int(round(seconds / DT)) * substeps):
        k1 = f(v)
        k2 = f(v + h * k1 / 2)
        k3 = f(v + h * k2 / 2)
        k4 = f(v + h * k3)
        v += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    return v


def lone_agent(v0, desired):
    w = reset("overtake", FlowConfig(density=0.0), seed=0, with_ego=False)
    lane = next(iter(w.map.lanes))
    return w, w._new_agent(lane, 5.0, desired, v0, 0.0)


@pytest.mark.parametrize("v0,desired", [(5.0, 10.0), (8.0, 12.0), (12.0, 8.0), (7.5, 7.5)])
def test_idm_free_flow_converges(v0, desired):
    w, a = lone_agent(v0, desired)
    for _ in range(100):
        w.step(None)
    assert abs(a.v - desired) < 0.1
    assert abs(a.v - idm_free_oracle(v0, desired, 10.0)) < 0.05


def test_zero_density_leaves_ego_alone():
    for name in SCENARIOS:
        w = reset(name, FlowConfig(density=0.0), seed=3)
        for _ in range(50):
            w.step(None)
        assert not w.agents
        obs = observe(w)
        assert not obs.neighbor_valid.any()
        assert np.all(obs.neighbor_histories == 0)


def test_reset_and_rollout_deterministic():
    for name in SCENARIOS:
        a, b = reset(name, seed=11), reset(name, seed=11)
        for _ in range(60):
            a.step(None)
            b.step(None)
        ia, sa, va, ea = a.to_record()
        ib, sb, vb, eb = b.to_record()
        assert np.array_equal(ia, ib) and np.array_equal(sa, sb)
        assert np.array_equal(va, vb) and np.array_equal(ea, eb)
        c = reset(name, seed=12)
        for _ in range(60):
            c.step(None)
        assert not np.array_equal(c.to_record()[1].shape, sa.shape) or not np.array_equal(c.to_record()[1], sa)


def test_unknown_scenario():
    with pytest.raises(KeyError):
        reset("roundabout")


def test_maps_have_reachable_goal_and_symmetric_conflicts():
    for name in SCENARIOS:
        m = get_map(name)
        assert m.goal["lane"] in m.lanes and m.lanes[m.goal["lane"]].ego_drivable
        assert m.goal["s_max"] <= m.lanes[m.goal["lane"]].length
        for lid, confs in m.conflicts.items():
            for c in confs:
                back = [d for d in m.conflicts[c.other] if d.other == lid and abs(d.s - c.other_s) < 1e-6]
                assert back and abs(back[0].other_s - c.s) < 1e-6


def test_ego_blocking_a_crossing_stops_traffic_short():
    checked = 0
    for seed in range(8):
        w = reset("intersection", seed=seed)
        x, y, h = w.map.lanes["sn"].path.position(98.2)
        if any(math.hypot(a.x - x, a.y - y) < 5.0 for a in w.agents.values()):
            continue  # would start overlapping
        crossing = {lid: next(c.s for c in w.map.conflicts[lid] if c.other == "sn") for lid in ("we", "ew")}
        ego = np.array([x, y, h, 0.0])
        stopped = []
        for _ in range(200):
            w.step(ego)
            assert w.status is not Status.COLLISION
            for a in w.agents.values():
                if a.lane in crossing and a.s < crossing[a.lane] and a.v < 0.05:
                    stopped.append(float(box_gap(a.x, a.y, a.heading, *ego[:3])))
        if stopped:
            checked += 1
            assert min(stopped) >= IDM_S0
    assert checked >= 3


def test_overlap_is_collision_and_absorbing():
    w = reset("intersection", seed=2)
    for _ in range(5):
        w.step(None)
    a = next(iter(w.agents.values()))
    w.step([a.x + a.v * DT, a.y, a.heading, a.v])
    assert w.status in (Status.COLLISION, Status.OFFROAD)
    w = reset("overtake", seed=0)
    lead = min(w.agents.values(), key=lambda a: a.s)
    w.step([lead.x, lead.y, lead.heading, 0.0])
    assert w.status is Status.COLLISION
    v = judge(w)
    assert v.collision and not v.success and v.time is None
    with pytest.raises(SimulationError):
        w.step(None)


def test_goal_reached_reports_travel_time():
    w = reset("merge", FlowConfig(density=0.0), seed=0)
    goal = w.map.goal
    path = w.map.lanes[goal["lane"]].path
    steps = 143
    for k in range(steps - 1):
        w.step(None)
    x, y, h = path.position(goal["s_min"] + 1.0)
    w.step([x, y, h, 10.0])
    v = judge(w)
    assert v.success and v.time == pytest.approx(14.3)


def test_timeout_and_judge_on_running():
    w = reset("overtake", FlowConfig(density=0.0), seed=0)
    with pytest.raises(SimulationError):
        judge(w)
    while not w.terminal:
        w.step(None)
    v = judge(w)
    assert v.status is Status.TIMEOUT and not v.success and v.time is None
    assert w.time == pytest.approx(40.0)


def test_observe_padding_and_spawn_masking():
    w = reset("intersection", seed=5)
    seen = set(w.agents)
    for _ in range(60):
        w.step(None)
        new = set(w.agents) - seen
        seen |= set(w.agents)
        obs = observe(w)
        for slot, aid in enumerate(obs.neighbor_ids):
            if aid in new:
                # spawned this step: only the current entry is valid
                assert obs.history_valid[slot + 1].sum() == 1 and obs.history_valid[slot + 1, -1]
    obs = observe(w)
    assert obs.neighbor_histories.shape[0] == N_NEIGHBORS
    assert np.array_equal(obs.neighbor_valid, obs.neighbor_ids >= 0)


def test_observe_agent_spawned_three_steps_ago():
    w = reset("intersection", FlowConfig(density=0.0), seed=0)
    ego, ev, _, _, _ = w.history_arrays()
    H = ego.shape[0]
    hist = np.zeros((H, 2, 4))
    valid = np.zeros((H, 2), bool)
    hist[:, 0] = ego[-1] + [5.0, 0.0, 0.0, 0.0]
    valid[:, 0] = True
    hist[-3:, 1] = ego[-1] + [0.0, 8.0, 0.0, 0.0]
    valid[-3:, 1] = True
    hist[:-3, 1] = 99.0  # stale values before the spawn must not leak
    obs = build_observation(w.map, ego, ev, np.array([4, 9]), hist, valid)
    assert list(obs.neighbor_ids) == [4, 9, -1, -1, -1]
    hv = obs.history_valid[2]
    assert not hv[: H - 3].any() and hv[-3:].all()
    assert np.all(obs.neighbor_histories[1, : H - 3] == 0)
    assert np.all(obs.neighbor_histories[2:] == 0) and not obs.history_valid[3:].any()
    assert not obs.map_valid[3:].any()


def test_observe_is_pure():
    w = reset("merge", seed=4)
    for _ in range(30):
        w.step(None)
    a, b = observe(w), observe(w)
    assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in vars(a))


def test_speed_bounds_during_rollouts():
    for name in SCENARIOS:
        w = reset(name, seed=7, with_ego=False)
        for _ in range(200):
            w.step(None)
            for a in w.agents.values():
                assert 0.0 <= a.v <= 1.3 * a.desired + 1e-9


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(density=-1.0)
    with pytest.raises(ValueError):
        FlowConfig(speed_scale=0.0)
