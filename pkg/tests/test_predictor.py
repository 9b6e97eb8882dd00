import math

import numpy as np
import pytest
import torch

from reactplan.frenet import wrap_angle
from reactplan.learn import prediction_loss
from reactplan.nn import DTYPE, as_tensor, numerical_gradient_check, seed_rng
from reactplan.predictor import Predictor, collate, cvtr_predict, predict
from reactplan.scene import SceneObservation, build_observation
from reactplan.sim import observe, reset

from conftest import straight_plan


def permute_neighbors(obs: SceneObservation, i: int, j: int) -> SceneObservation:
    order = np.arange(obs.n_neighbors)
    order[[i, j]] = order[[j, i]]
    full = np.concatenate([[0], order + 1])
    return SceneObservation(obs.ego_history, obs.neighbor_histories[order], obs.neighbor_valid[order],
                            obs.history_valid[full], obs.local_maps[full], obs.map_valid[full],
                            obs.neighbor_ids[order], obs.origin)


def test_observation_layout(scene):
    assert scene.ego_history.shape == (11, 4)
    assert scene.neighbor_histories.shape == (5, 11, 4)
    assert scene.local_maps.shape == (6, 3, 50, 3)
    assert np.allclose(scene.ego_history[-1, :3], 0.0, atol=1e-12)
    assert np.all(scene.local_maps[~scene.map_valid] == 0)
    assert np.all(scene.neighbor_histories[~scene.history_valid[1:]] == 0)


def test_neighbors_sorted_by_distance(scene):
    cur = scene.neighbor_current()[scene.neighbor_valid]
    d = np.hypot(cur[:, 0], cur[:, 1])
    assert np.all(np.diff(d) >= 0)


def test_permutation_equivariance(scene, model):
    valid = np.nonzero(scene.neighbor_valid)[0]
    i, j = int(valid[0]), int(valid[-1])
    plan = straight_plan(6.0)
    a = predict(scene, plan, model)
    b = predict(permute_neighbors(scene, i, j), plan, model)
    order = np.arange(5)
    order[[i, j]] = order[[j, i]]
    assert np.allclose(a.trajectories[order], b.trajectories, atol=1e-9, rtol=0)
    assert np.allclose(a.gate_scores[order], b.gate_scores, atol=1e-9, rtol=0)
    ctx_a = model.encode(collate([scene]))
    ctx_b = model.encode(collate([permute_neighbors(scene, i, j)]))
    full = np.concatenate([[0], order + 1])
    assert torch.allclose(ctx_a.features[0, full], ctx_b.features[0], atol=1e-9, rtol=0)


def test_padded_history_gets_zero_attention(scene, model):
    obs = SceneObservation(**{k: np.copy(v) for k, v in vars(scene).items()})
    obs.history_valid[1, :4] = False
    obs.neighbor_histories[0, :4] = 0.0
    ctx = model.encode(collate([obs]), keep_weights=True)
    w = ctx.history_weights  # [B, A, heads, H, H]
    assert torch.all(w[0, 1, :, :, :4] == 0)
    assert torch.all(w[0, 0] > 0)


def test_padded_agents_are_masked(scene, model):
    obs = SceneObservation(**{k: np.copy(v) for k, v in vars(scene).items()})
    obs.neighbor_valid[-1] = False
    obs.history_valid[-1] = False
    obs.neighbor_histories[-1] = 0
    obs.map_valid[-1] = False
    obs.local_maps[-1] = 0
    obs.neighbor_ids[-1] = -1
    res = predict(obs, straight_plan(5.0), model)
    assert np.all(res.trajectories[-1] == 0)
    # garbage in a padded slot cannot leak into the valid agents
    noisy = SceneObservation(**{k: np.copy(v) for k, v in vars(obs).items()})
    noisy.neighbor_histories[-1] = 55.0
    noisy.local_maps[-1] = -3.0
    collated = collate([noisy])
    assert torch.all(collated.hist[0, -1] == 0)
    res2 = predict(noisy, straight_plan(5.0), model)
    assert np.array_equal(res.trajectories, res2.trajectories)


def test_all_neighbors_invalid(model):
    w = reset("intersection", seed=0)
    obs = observe(w)
    empty = SceneObservation(obs.ego_history, np.zeros_like(obs.neighbor_histories), np.zeros(5, bool),
                             np.concatenate([obs.history_valid[:1], np.zeros((5, 11), bool)]),
                             np.concatenate([obs.local_maps[:1], np.zeros_like(obs.local_maps[1:])]),
                             np.concatenate([obs.map_valid[:1], np.zeros_like(obs.map_valid[1:])]),
                             np.full(5, -1), obs.origin)
    res = predict(empty, straight_plan(5.0), model)
    assert np.all(res.trajectories == 0) and not res.valid.any()
    ctx = model.encode(collate([empty]))
    assert torch.isfinite(ctx.features).all()


def test_gate_zero_makes_predictions_plan_independent(scene, model):
    a = predict(scene, straight_plan(2.0), model, gate_override=0.0)
    b = predict(scene, straight_plan(12.0), model, gate_override=0.0)
    assert np.array_equal(a.trajectories, b.trajectories)
    c = predict(scene, straight_plan(2.0), model)
    d = predict(scene, straight_plan(12.0), model)
    assert not np.allclose(c.trajectories, d.trajectories)


def test_gate_one_equals_ungated_decoder(scene, model):
    batch = collate([scene])
    plan = as_tensor(straight_plan(8.0)[None])
    ctx = model.encode(batch)
    a, _ = model.decode(ctx, plan, gate_override=1.0)
    b, _ = model.decode(ctx, plan, use_gate=False)
    assert torch.equal(a, b)


def test_gate_scores_in_unit_interval(scene, model):
    res = predict(scene, straight_plan(5.0), model)
    assert res.gate_scores.shape == (5,)
    assert np.all((res.gate_scores > 0) & (res.gate_scores < 1))


def test_truncated_decode_is_prefix_when_gate_is_zero(scene, model):
    ctx = model.encode(collate([scene]))
    plan = as_tensor(straight_plan(8.0)[None])
    full, _ = model.decode(ctx, plan, gate_override=0.0)
    part, _ = model.decode(ctx, plan[:, :12], gate_override=0.0)
    assert torch.equal(full[:, :, :12], part)


def test_zero_head_repeats_last_pose(scene):
    m = Predictor(seed=5)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    res = predict(scene, straight_plan(5.0), m)
    last = scene.neighbor_current()[:, :3]
    for i in np.nonzero(scene.neighbor_valid)[0]:
        expect = np.repeat(last[i][None], 30, axis=0)
        expect[:, 2] = wrap_angle(expect[:, 2])
        assert np.allclose(res.trajectories[i], expect, atol=1e-12)


def test_heading_stays_wrapped(scene):
    m = Predictor(seed=6)
    with torch.no_grad():
        m.head.bias.copy_(as_tensor([0.0, 0.0, 1.3]))
    res = predict(scene, straight_plan(5.0), m)
    th = res.trajectories[scene.neighbor_valid][..., 2]
    assert th.max() <= math.pi and th.min() > -math.pi


def test_no_interaction_variant(scene, plain_model, model):
    a = predict(scene, straight_plan(2.0), plain_model)
    b = predict(scene, straight_plan(12.0), plain_model)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert a.gate_scores is None
    assert not hasattr(plain_model, "gate")
    assert plain_model.gru.w_ih.shape[1] < model.gru.w_ih.shape[1]
    with pytest.raises(ValueError):
        predict(scene, straight_plan(2.0), plain_model, variant="interaction_aware")


def test_candidate_batch_matches_single_calls(scene, model):
    plans = np.stack([straight_plan(v) for v in (0.0, 4.0, 9.0)])
    batched = predict(scene, plans, model)
    assert batched.trajectories.shape == (3, 5, 30, 3)
    for k in range(3):
        single = predict(scene, plans[k], model)
        assert np.allclose(batched.trajectories[k], single.trajectories, atol=1e-12)


def test_frame_invariance_and_determinism(model):
    w = reset("intersection", seed=4)
    for _ in range(15):
        w.step(None)
    ego, ev, ids, hist, valid = w.history_arrays()
    base = build_observation(w.map, ego, ev, ids, hist, valid)
    rot, tx, ty = 0.7, 40.0, -15.0
    c, s = math.cos(rot), math.sin(rot)

    def move(a):
        out = a.copy()
        out[..., 0] = c * a[..., 0] - s * a[..., 1] + tx
        out[..., 1] = s * a[..., 0] + c * a[..., 1] + ty
        out[..., 2] = a[..., 2] + rot
        return out

    moved = build_observation(w.map.transformed(rot, tx, ty), move(ego), ev, ids,
                              np.where(valid[..., None], move(hist), 0.0), valid)
    assert base.allclose(moved, atol=1e-6)
    plan = straight_plan(5.0)
    a, b = predict(base, plan, model), predict(base, plan, model)
    assert np.array_equal(a.trajectories, b.trajectories)
    c = predict(moved, plan, model)
    diff = a.trajectories - c.trajectories
    diff[..., 2] = wrap_angle(diff[..., 2])
    assert np.abs(diff).max() < 1e-6
    # identical normalised inputs give bit-identical outputs
    snapped = build_observation(w.map, ego, ev, ids, hist, valid)
    assert np.array_equal(predict(snapped, plan, model).trajectories, a.trajectories)


def test_every_parameter_group_gets_gradient(scene, model):
    m = Predictor(seed=9)
    batch = collate([scene, scene])
    plan = as_tensor(np.stack([straight_plan(3.0), straight_plan(9.0)]))
    pred, _ = m(batch, plan)
    target = torch.as_tensor(np.random.default_rng(0).normal(size=pred.shape), dtype=DTYPE)
    loss = prediction_loss(pred, target, torch.as_tensor(np.stack([scene.neighbor_valid] * 2)))
    loss.backward()
    zero = [n for n, p in m.named_parameters() if p.grad is None or float(p.grad.abs().sum()) == 0.0]
    assert not zero, zero


def test_full_predictor_gradient_check(scene):
    m = Predictor(hidden=16, heads=2, horizon=4, seed=11)
    batch = collate([scene])
    plan = as_tensor(straight_plan(6.0, horizon=4)[None])
    names = [n for n, _ in m.named_parameters()]
    target = torch.as_tensor(seed_rng(1).normal(size=(1, 5, 4, 3)) * 0.1, dtype=DTYPE)
    mask = torch.as_tensor(scene.neighbor_valid[None])

    def fn(leaves):
        out, _ = torch.func.functional_call(m, dict(zip(names, leaves)), (batch, plan))
        w = torch.linspace(0.5, 1.5, out.numel(), dtype=DTYPE).reshape(out.shape)
        return (out * w).sum() + prediction_loss(out, target, mask)

    err = numerical_gradient_check(fn, [p.detach() for p in m.parameters()], probes=20, rng=seed_rng(2))
    assert err < 1e-4


def test_unknown_variant():
    with pytest.raises(ValueError):
        Predictor("mystery")


# -- CVTR ------------------------------------------------------------------------


def cvtr_obs(x, y, th, v, omega, dt=0.1):
    """Single neighbor whose last two states encode speed ``v`` and yaw rate ``omega``."""
    H = 11
    nb = np.zeros((5, H, 4))
    hv = np.zeros((6, H), bool)
    hv[0] = True
    hv[1] = True
    for k in range(H):
        back = (H - 1 - k) * dt
        nb[0, k] = (x, y, th - omega * back, v)
    return SceneObservation(np.zeros((H, 4)), nb, np.array([True, False, False, False, False]), hv,
                            np.zeros((6, 3, 50, 3)), np.zeros((6, 3, 50), bool), np.array([1, -1, -1, -1, -1]),
                            np.zeros(3))


def test_cvtr_straight_line_exact():
    res = cvtr_predict(cvtr_obs(0.0, 0.0, 0.0, 5.0, 0.0))
    assert np.abs(res.trajectories[0, -1] - [15.0, 0.0, 0.0]).max() < 1e-12
    assert np.all(res.trajectories[1:] == 0)


def test_cvtr_stationary_agent():
    res = cvtr_predict(cvtr_obs(3.0, -2.0, 0.4, 0.0, 0.0))
    assert np.allclose(res.trajectories[0], [[3.0, -2.0, 0.4]] * 30, atol=1e-15)


@pytest.mark.parametrize("v,omega", [(5.0, 0.3), (8.0, -0.5), (2.0, 1.0)])
def test_cvtr_follows_circle_within_first_order_bound(v, omega):
    dt = 0.1
    res = cvtr_predict(cvtr_obs(0.0, 0.0, 0.0, v, omega), dt=dt)
    traj = np.concatenate([[[0.0, 0.0, 0.0]], res.trajectories[0]])
    radius = v / omega
    bound = abs(v * omega) * dt ** 2 / 2
    for k in range(30):
        x, y, th = traj[k]
        # exact one-step arc from the predicted pose
        ex = x + radius * (math.sin(th + omega * dt) - math.sin(th))
        ey = y - radius * (math.cos(th + omega * dt) - math.cos(th))
        assert math.hypot(traj[k + 1, 0] - ex, traj[k + 1, 1] - ey) <= bound + 1e-12
        assert abs(wrap_angle(traj[k + 1, 2] - (th + omega * dt))) < 1e-12


def test_cvtr_single_valid_state_uses_zero_yaw_rate():
    obs = cvtr_obs(0.0, 0.0, 0.5, 4.0, 0.8)
    obs.history_valid[1, :-1] = False
    res = cvtr_predict(obs)
    assert np.allclose(res.trajectories[0, :, 2], 0.5)
