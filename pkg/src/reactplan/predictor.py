"""Interaction-aware motion predictor and the constant-velocity/turn-rate baseline.

The network encodes every agent's history with a temporal self-attention
layer, relates agents to each other with a second self-attention layer and
attends from each agent to its own local routes.  A GRU then rolls each
neighbor forward; at every step its input carries the ego's planned state,
scaled by a learned per-agent interaction gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .frenet import DT, wrap_angle
from .nn import DTYPE, MLP, Dense, GRUCell, TransformerLayer, as_tensor, seed_rng
from .scene import SceneObservation

INTERACTION_AWARE = "interaction_aware"
NO_INTERACTION = "no_interaction"
VARIANTS = (INTERACTION_AWARE, NO_INTERACTION)

POS_SCALE = 10.0
SPEED_SCALE = 10.0
_NEG = -1e30


@dataclass
class PredictionResult:
    trajectories: np.ndarray  # [N_a, T, 3] (or [K, N_a, T, 3] for a candidate batch)
    valid: np.ndarray  # [N_a]
    gate_scores: np.ndarray | None = None  # [N_a]
    neighbor_ids: np.ndarray | None = None


@dataclass
class Batch:
    hist: torch.Tensor  # [B, A, H, 5]
    hist_valid: torch.Tensor  # [B, A, H]
    maps: torch.Tensor  # [B, A, R, W, 4]
    map_valid: torch.Tensor  # [B, A, R, W]
    agent_valid: torch.Tensor  # [B, A]
    last_state: torch.Tensor  # [B, N, 3]

    @property
    def size(self) -> int:
        return self.hist.shape[0]


def _state_features(states: np.ndarray) -> np.ndarray:
    x, y, h, v = np.moveaxis(states, -1, 0)
    return np.stack([x / POS_SCALE, y / POS_SCALE, np.cos(h), np.sin(h), v / SPEED_SCALE], axis=-1)


def collate(observations: list[SceneObservation]) -> Batch:
    hist, hv, maps, mv, av, last = [], [], [], [], [], []
    for o in observations:
        states = np.concatenate([o.ego_history[None], o.neighbor_histories])
        valid = o.history_valid
        f = np.where(valid[..., None], _state_features(states), 0.0)
        hist.append(f)
        hv.append(valid)
        lm = o.local_maps
        m = np.stack([lm[..., 0] / POS_SCALE, lm[..., 1] / POS_SCALE, np.cos(lm[..., 2]), np.sin(lm[..., 2])], -1)
        maps.append(np.where(o.map_valid[..., None], m, 0.0))
        mv.append(o.map_valid)
        av.append(np.concatenate([[True], o.neighbor_valid]))
        last.append(np.where(o.neighbor_valid[:, None], o.neighbor_histories[:, -1, :3], 0.0))
    return Batch(as_tensor(np.stack(hist)), torch.as_tensor(np.stack(hv)), as_tensor(np.stack(maps)),
                 torch.as_tensor(np.stack(mv)), torch.as_tensor(np.stack(av)), as_tensor(np.stack(last)))


@dataclass
class Context:
    hist_feat: torch.Tensor  # [B, A, D]
    features: torch.Tensor  # [B, A, 3D]
    agent_valid: torch.Tensor  # [B, A]
    last_state: torch.Tensor  # [B, N, 3]
    history_weights: torch.Tensor | None = None

    def expand(self, k: int) -> "Context":
        if self.hist_feat.shape[0] == k:
            return self
        if self.hist_feat.shape[0] != 1:
            raise ValueError("can only broadcast a single-scene context over candidates")
        return Context(self.hist_feat.expand(k, -1, -1), self.features.expand(k, -1, -1),
                       self.agent_valid.expand(k, -1), self.last_state.expand(k, -1, -1))


class Predictor(nn.Module):
    def __init__(self, variant: str = INTERACTION_AWARE, hidden: int = 64, heads: int = 4,
                 history: int = 10, horizon: int = 30, seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown predictor variant {variant!r}")
        rng = seed_rng(seed)
        self.variant = variant
        self.hidden = hidden
        self.horizon = horizon
        D = hidden
        self.hist_embed = Dense(5, D, rng)
        self.time_embed = nn.Parameter(as_tensor(rng.uniform(-1, 1, size=(history + 1, D)) / np.sqrt(D)))
        self.hist_layer = TransformerLayer(D, heads, rng)
        self.map_encoder = MLP([4, D, D], rng)
        self.interaction_layer = TransformerLayer(D, heads, rng)
        self.map_layer = TransformerLayer(D, heads, rng)
        self.hidden_init = Dense(3 * D, D, rng)
        d_in = 4 + (5 if variant == INTERACTION_AWARE else 0)
        self.gru = GRUCell(d_in, D, rng)
        self.head = Dense(D, 3, rng)
        if variant == INTERACTION_AWARE:
            self.gate = MLP([2 * D, 64, 1], rng)

    @property
    def interaction_aware(self) -> bool:
        return self.variant == INTERACTION_AWARE

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    # -- encoder ---------------------------------------------------------------

    def encode(self, batch: Batch, keep_weights: bool = False) -> Context:
        B, A, H, _ = batch.hist.shape
        hv = batch.hist_valid
        x = self.hist_embed(batch.hist) + self.time_embed
        tmask = hv[:, :, None, :].expand(B, A, H, H)
        res = self.hist_layer(x, x, tmask, return_weights=keep_weights)
        x, w = res if keep_weights else (res, None)
        steps = torch.arange(H).expand(B, A, H)
        last = torch.where(hv, steps, torch.zeros_like(steps)).max(dim=-1).values
        idx = last[:, :, None, None].expand(B, A, 1, x.shape[-1])
        valid = batch.agent_valid.to(DTYPE)[..., None]
        hist_feat = x.gather(2, idx)[:, :, 0] * valid

        m = self.map_encoder(batch.maps)
        m = m.masked_fill(~batch.map_valid[..., None], _NEG).max(dim=-2).values
        route_valid = batch.map_valid.any(dim=-1)
        routes = torch.where(route_valid[..., None], m, torch.zeros_like(m))

        amask = batch.agent_valid[:, None, :].expand(B, A, A)
        inter = self.interaction_layer(hist_feat, hist_feat, amask) * valid
        mfeat = self.map_layer(inter[:, :, None], routes, route_valid[:, :, None, :])[:, :, 0] * valid
        feats = torch.cat([hist_feat, inter, mfeat], dim=-1)
        return Context(hist_feat, feats, batch.agent_valid, batch.last_state, w)

    def gate_scores(self, ctx: Context) -> torch.Tensor:
        ego = ctx.hist_feat[:, :1].expand_as(ctx.hist_feat[:, 1:])
        return torch.sigmoid(self.gate(torch.cat([ego, ctx.hist_feat[:, 1:]], dim=-1)))[..., 0]

    # -- decoder ---------------------------------------------------------------

    def decode(self, ctx: Context, plan: torch.Tensor | None = None, gate_override: float | None = None,
               use_gate: bool = True, steps: int | None = None):
        """Roll neighbors forward.

        ``plan`` is ``[B, T, 4]`` ego-frame (x, y, heading, speed).  Returns
        ``(trajectories [B, N, T, 3], gates [B, N] or None)``.
        """
        if self.interaction_aware:
            if plan is None:
                raise ValueError("interaction-aware decoding needs an ego plan")
            ctx = ctx.expand(plan.shape[0])
            T = plan.shape[1] if steps is None else steps
        else:
            if plan is not None:
                ctx = ctx.expand(plan.shape[0])
            T = self.horizon if steps is None else steps
        nb_valid = ctx.agent_valid[:, 1:]
        h = torch.tanh(self.hidden_init(ctx.features[:, 1:]))
        state = ctx.last_state
        gates = None
        if self.interaction_aware:
            gates = self.gate_scores(ctx)
            if gate_override is not None:
                gates = torch.full_like(gates, float(gate_override))
            g = gates[..., None]
        out = []
        for t in range(T):
            x, y, th = state[..., 0], state[..., 1], state[..., 2]
            c, s = torch.cos(th), torch.sin(th)
            inp = torch.stack([x / POS_SCALE, y / POS_SCALE, c, s], dim=-1)
            if self.interaction_aware:
                p = plan[:, t][:, None, :]  # [B, 1, 4]
                dx, dy = p[..., 0] - x, p[..., 1] - y
                dth = p[..., 2] - th
                rel = torch.stack([(c * dx + s * dy) / POS_SCALE, (-s * dx + c * dy) / POS_SCALE,
                                   torch.cos(dth), torch.sin(dth),
                                   (p[..., 3] / SPEED_SCALE).expand_as(dx)], dim=-1)
                if use_gate:
                    rel = rel * g
                inp = torch.cat([inp, rel], dim=-1)
            h = self.gru(inp, h)
            d = self.head(h)
            nx = x + c * d[..., 0] - s * d[..., 1]
            ny = y + s * d[..., 0] + c * d[..., 1]
            nth = th + d[..., 2]
            nth = torch.atan2(torch.sin(nth), torch.cos(nth))
            state = torch.stack([nx, ny, nth], dim=-1)
            out.append(state)
        traj = torch.stack(out, dim=2) * nb_valid.to(DTYPE)[..., None, None]
        return traj, gates

    def forward(self, batch: Batch, plan: torch.Tensor | None = None, gate_override: float | None = None):
        return self.decode(self.encode(batch), plan, gate_override)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def encode_scene(obs: SceneObservation, model: Predictor) -> Context:
    return model.encode(collate([obs]))


def decode_future(ctx: Context, obs: SceneObservation, plan, model: Predictor,
                  gate_override: float | None = None) -> PredictionResult:
    plan_t = None if plan is None else as_tensor(np.asarray(plan)[None] if np.ndim(plan) == 2 else plan)
    traj, gates = model.decode(ctx, plan_t, gate_override)
    tr = traj.detach().numpy()
    gs = None if gates is None else gates.detach().numpy()
    if np.ndim(plan) == 2 or plan is None:
        tr = tr[0]
        gs = None if gs is None else gs[0]
    return PredictionResult(tr, obs.neighbor_valid.copy(), gs, obs.neighbor_ids.copy())


@torch.no_grad()
def predict(obs: SceneObservation, plan, model: Predictor, variant: str | None = None,
            gate_override: float | None = None) -> PredictionResult:
    """Predict neighbor futures for one plan ``[T, 4]`` or a stack ``[K, T, 4]``."""
    if variant is not None and variant != model.variant:
        raise ValueError(f"model is {model.variant!r}, asked for {variant!r}")
    ctx = encode_scene(obs, model)
    if not model.interaction_aware:
        res = decode_future(ctx, obs, None, model)
        if plan is not None and np.ndim(plan) == 3:
            k = np.shape(plan)[0]
            res.trajectories = np.broadcast_to(res.trajectories, (k,) + res.trajectories.shape).copy()
        return res
    return decode_future(ctx, obs, plan, model, gate_override)


def cvtr_predict(obs: SceneObservation, horizon: int = 30, dt: float = DT) -> PredictionResult:
    """Constant speed and yaw-rate rollout from each neighbor's last two valid states."""
    N = obs.n_neighbors
    out = np.zeros((N, horizon, 3))
    valid_h = obs.history_valid[1:]
    for i in range(N):
        if not obs.neighbor_valid[i]:
            continue
        idx = np.nonzero(valid_h[i])[0]
        last = obs.neighbor_histories[i, idx[-1]]
        x, y, th, v = (float(a) for a in last)
        omega = 0.0
        if len(idx) >= 2:
            prev = obs.neighbor_histories[i, idx[-2]]
            omega = float(wrap_angle(th - prev[2])) / (dt * (idx[-1] - idx[-2]))
        for t in range(horizon):
            x += v * np.cos(th) * dt
            y += v * np.sin(th) * dt
            th += omega * dt
            out[i, t] = (x, y, float(wrap_angle(th)))
    return PredictionResult(out, obs.neighbor_valid.copy(), None, obs.neighbor_ids.copy())
