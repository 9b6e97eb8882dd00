"""Online learning loop: plan, execute, store, train.

Each episode alternates planning cycles (generate candidates, predict the
neighbors' reaction to every candidate, score, pick the cheapest) with a few
executed simulator steps.  Finished episodes go to a replay buffer that the
predictor is trained from after every episode.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .cost import FEATURES, CostConfig, CostWeights, compute_features, select_best, total_cost
from .frenet import DT, CandidatePlan, PlannerConfig, generate_candidates, wrap_angle
from .geometry import from_frame, to_frame
from .nn import AdamState, adam_step, as_tensor, check_finite, save_checkpoint, smooth_l1_elementwise
from .predictor import INTERACTION_AWARE, NO_INTERACTION, Batch, PredictionResult, Predictor, collate, cvtr_predict, predict
from .scene import HISTORY, SceneObservation, build_observation
from .sim import FlowConfig, observe, reset
from .sim.maps import SCENARIOS, get_map

log = logging.getLogger(__name__)

VARIANTS = ("ours", "no_interaction", "no_exploration", "cvtr")
VARIANT_LABELS = {"ours": "Ours", "no_interaction": "w/o interaction",
                  "no_exploration": "w/o exploration", "cvtr": "w/ CVTR"}

# seed stream tags
_MODEL, _SAMPLING, _EXPLORE, _TRAIN_FLOW, _EVAL_FLOW, _TEST_FLOW = range(6)


def derive_seed(master: int, stream: int, index: int = 0) -> int:
    """Independent 32-bit seed for ``(master, stream, index)``."""
    return int(np.random.SeedSequence([int(master), int(stream), int(index)]).generate_state(1)[0])


def stream_rng(master: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, stream, index)))


@dataclass
class TrainConfig:
    episodes: int = 1000
    grad_steps: int = 50
    batch_size: int = 32
    exec_steps_train: int = 15
    exec_steps_test: int = 5
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_episodes: int = 500
    horizon: int = 30
    history: int = HISTORY
    checkpoint_every: int = 50
    eval_every: int = 50
    eval_flows: int = 5
    base_lr: float = 2e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 5000
    gate_l1: float = 0.0  # weight of the mean gate score added to the training objective
    min_future: int = 30  # realized future steps a training window needs; fewer are masked

    def __post_init__(self):
        for k in ("episodes", "grad_steps", "batch_size", "exec_steps_train", "exec_steps_test",
                  "horizon", "history", "eps_decay_episodes", "checkpoint_every", "eval_every"):
            if int(getattr(self, k)) <= 0:
                raise ValueError(f"{k} must be positive")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 1 <= self.min_future <= self.horizon:
            raise ValueError("min_future must lie in [1, horizon]")
        if self.gate_l1 < 0:
            raise ValueError("gate_l1 must be non-negative")


def epsilon(episode: int, cfg: TrainConfig | None = None) -> float:
    """Linear decay from ``eps_start`` to ``eps_end`` over ``eps_decay_episodes``."""
    cfg = cfg or TrainConfig()
    frac = min(max(episode, 0) / cfg.eps_decay_episodes, 1.0)
    return float(cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start))


# ---------------------------------------------------------------------------
# prediction back ends
# ---------------------------------------------------------------------------

PredictFn = Callable[[SceneObservation, np.ndarray], PredictionResult]


def model_predictor(model: Predictor) -> PredictFn:
    def fn(obs, plans_ego):
        return predict(obs, plans_ego, model)
    return fn


def cvtr_predictor(horizon: int = 30) -> PredictFn:
    def fn(obs, plans_ego):
        return cvtr_predict(obs, horizon)
    return fn


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@dataclass
class PlannerSettings:
    weights: CostWeights = field(default_factory=CostWeights)
    cost: CostConfig = field(default_factory=CostConfig)
    candidates: PlannerConfig = field(default_factory=PlannerConfig)


@dataclass
class PlanOutcome:
    plan: CandidatePlan
    explore: bool
    costs: np.ndarray
    features: np.ndarray
    predictions: np.ndarray  # [N, T, 3] global frame, for the selected plan
    valid: np.ndarray
    neighbor_ids: np.ndarray
    gate_scores: np.ndarray | None = None


def candidate_paths(world):
    """Reference paths the ego may plan on: its current lane and adjacent ones."""
    m = world.map
    hit = m.locate(world.ego[0], world.ego[1], world.ego[2], m.ego_lanes, max_offset=3.0)
    if hit is None:
        return [ln.path for ln in m.ego_lanes]
    lane = hit[0]
    lanes = [lane] + [n for n in m.neighbors(lane.id) if n.ego_drivable]
    return [ln.path for ln in lanes]


def current_accel(world, limit: float = 6.0) -> float:
    """Backward-difference ego acceleration, so consecutive plans join smoothly."""
    if len(world.history) < 2:
        return 0.0
    a = (world.history[-1][0][3] - world.history[-2][0][3]) / DT
    return float(np.clip(a, -limit, limit))


def plans_to_ego_frame(trajs: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """``[K, T+1, 4]`` global plans to ``[K, T, 4]`` ego-frame futures."""
    fut = trajs[:, 1:]
    xy, h = to_frame(fut[..., :2], fut[..., 2], origin[:2], origin[2])
    return np.concatenate([xy, wrap_angle(h)[..., None], fut[..., 3:4]], axis=-1)


def predictions_to_global(traj: np.ndarray, origin: np.ndarray) -> np.ndarray:
    xy, h = from_frame(traj[..., :2], traj[..., 2], origin[:2], origin[2])
    return np.concatenate([xy, wrap_angle(h)[..., None]], axis=-1)


def plan_once(world, predictor: PredictFn, settings: PlannerSettings, eps: float,
              rng: np.random.Generator) -> PlanOutcome:
    """One planning cycle; exploration is drawn once per call."""
    obs = observe(world)
    cands = generate_candidates(world.ego, candidate_paths(world), settings.candidates,
                                accel=current_accel(world))
    trajs = np.stack([c.trajectory for c in cands])
    explore = bool(rng.random() < eps)
    res = predictor(obs, plans_to_ego_frame(trajs, obs.origin))
    pred = res.trajectories
    if pred.ndim == 3:
        pred = np.broadcast_to(pred, (len(cands),) + pred.shape)
    pred_g = predictions_to_global(pred, obs.origin)
    now = predictions_to_global(obs.neighbor_current()[:, :3], obs.origin)
    lane = world.map.lanes[world.map.goal["lane"]]
    feats = compute_features(trajs, pred_g, obs.neighbor_valid, now, lane.speed_limit, lane.path, settings.cost)
    costs = total_cost(feats, settings.weights, explore)
    costs = np.atleast_1d(costs)
    best = select_best(costs, [c.target_speed for c in cands])
    for c, cost, f in zip(cands, costs, feats):
        c.cost, c.features = float(cost), f
    return PlanOutcome(cands[best], explore, costs, feats, pred_g[best].copy(), obs.neighbor_valid.copy(),
                       obs.neighbor_ids.copy(), res.gate_scores)


# ---------------------------------------------------------------------------
# episodes and replay
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """Dense global-frame trace of one episode; row ``t`` is the state after ``t`` steps."""

    scenario: str
    seed: int
    ids: np.ndarray  # [A]
    states: np.ndarray  # [S, A, 4]
    valid: np.ndarray  # [S, A]
    ego: np.ndarray  # [S, 4]
    exec_steps: int = 15
    cycles: list = field(default_factory=list)  # (t, explore, plan index, target speed, cost, features)

    @property
    def steps(self) -> int:
        return len(self.ego) - 1


@dataclass
class EpisodeResult:
    record: EpisodeRecord
    status: str
    success: bool
    collision: bool
    time: float | None
    ade: float
    fde: float
    n_cycles: int
    explored: int


def displacement_errors(record: EpisodeRecord, predictions: list, horizon: int = 30):
    """Sum of ADE/FDE terms over (cycle, agent) pairs with a complete realized future.

    ``predictions`` holds ``(t, ids [N], valid [N], traj [N, T, 3])`` in the
    global frame.  Returns ``(sum_ade, sum_fde, count)``.
    """
    col = {int(i): k for k, i in enumerate(record.ids)}
    sa = sf = 0.0
    n = 0
    for t, ids, valid, traj in predictions:
        if t + horizon > record.steps:
            continue
        for slot, aid in enumerate(ids):
            if not valid[slot] or int(aid) not in col:
                continue
            c = col[int(aid)]
            if not record.valid[t + 1:t + horizon + 1, c].all():
                continue
            truth = record.states[t + 1:t + horizon + 1, c, :2]
            err = np.hypot(*(traj[slot, :horizon, :2] - truth).T)
            sa += float(err.mean())
            sf += float(err[-1])
            n += 1
    return sa, sf, n


def run_episode(scenario: str, predictor: PredictFn, settings: PlannerSettings, seed: int,
                eps: float = 0.0, exec_steps: int = 15, rng: np.random.Generator | None = None,
                flow: FlowConfig | None = None, horizon: int = 30, on_cycle=None) -> EpisodeResult:
    """Roll out one episode, replanning every ``exec_steps`` steps."""
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(seed))
    world = reset(scenario, flow, seed)
    preds = []
    cycles = []
    while not world.terminal:
        out = plan_once(world, predictor, settings, eps, rng)
        t0 = world.steps
        preds.append((t0, out.neighbor_ids, out.valid, out.predictions))
        cycles.append((t0, out.explore, out.plan.index, out.plan.target_speed, out.plan.cost,
                       tuple(float(v) for v in out.plan.features)))
        if on_cycle is not None:
            on_cycle(world, out)
        for k in range(1, exec_steps + 1):
            if world.terminal:
                break
            world.step(out.plan.trajectory[min(k, len(out.plan.trajectory) - 1)])
    ids, states, valid, ego = world.to_record()
    rec = EpisodeRecord(world.map.name, seed, ids, states, valid, ego, exec_steps, cycles)
    sa, sf, n = displacement_errors(rec, preds, horizon)
    ok = world.status.value == "success"
    return EpisodeResult(rec, world.status.value, ok, world.status.value == "collision",
                         world.time if ok else None, sa / n if n else float("nan"),
                         sf / n if n else float("nan"), len(cycles), sum(c[1] for c in cycles))


class ReplayBuffer:
    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self.episodes: list[EpisodeRecord] = []

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, record: EpisodeRecord) -> None:
        self.episodes.append(record)
        if self.capacity is not None and len(self.episodes) > self.capacity:
            self.episodes.pop(0)


@dataclass
class TrainingBatch:
    inputs: Batch
    plan: torch.Tensor  # [B, T, 4]
    target: torch.Tensor  # [B, N, T, 3]
    mask: torch.Tensor  # [B, N, T], realized future steps
    index: list  # (episode, t) pairs


@dataclass
class TrainingSample:
    obs: SceneObservation
    plan: np.ndarray  # [T, 4] ego frame
    target: np.ndarray  # [N, T, 3] ego frame
    mask: np.ndarray  # [N, T]
    episode: int
    t: int


def make_sample(record: EpisodeRecord, t: int, horizon: int = 30, history: int = HISTORY,
                episode: int = -1, min_future: int | None = None) -> TrainingSample:
    """Observation at ``t`` plus the realized futures over ``[t+1, t+T]``.

    With ``min_future < horizon`` a window may run past the episode end (a
    collision, say); the missing steps are masked out and the plan holds the
    last ego pose there.
    """
    need = horizon if min_future is None else min_future
    if t < history or t + need > record.steps:
        raise IndexError(f"timestep {t} has no {need}-step window in a {record.steps}-step episode")
    sl = slice(t - history, t + 1)
    obs = build_observation(get_map(record.scenario), record.ego[sl], np.ones(history + 1, dtype=bool),
                            record.ids, record.states[sl], record.valid[sl])
    o = obs.origin
    n = min(horizon, record.steps - t)
    fut = slice(t + 1, t + n + 1)
    ego = record.ego[t:t + n + 1]
    ego = np.concatenate([ego, np.repeat(ego[-1:], horizon - n, axis=0)])
    plan = plans_to_ego_frame(ego[None], o)[0]
    col = {int(i): k for k, i in enumerate(record.ids)}
    N = obs.n_neighbors
    target = np.zeros((N, horizon, 3))
    mask = np.zeros((N, horizon), dtype=bool)
    for slot, aid in enumerate(obs.neighbor_ids):
        if aid < 0:
            continue
        c = col[int(aid)]
        if not record.valid[fut, c].all():
            continue
        xy, h = to_frame(record.states[fut, c, :2], record.states[fut, c, 2], o[:2], o[2])
        target[slot, :n] = np.concatenate([xy, wrap_angle(h)[:, None]], axis=1)
        mask[slot, :n] = True
    return TrainingSample(obs, plan, target, mask, episode, t)


def sample_batch(buffer: ReplayBuffer, batch_size: int, horizon: int, history: int,
                 rng: np.random.Generator, min_future: int | None = None) -> list[TrainingSample]:
    """Uniform (episode, timestep) draws over windows with at least ``min_future`` realized steps."""
    need = horizon if min_future is None else min_future
    eligible = [i for i, r in enumerate(buffer.episodes) if r.steps - need >= history]
    if not eligible:
        raise ValueError("no episode in the replay buffer is long enough to sample from")
    out = []
    for _ in range(batch_size):
        e = eligible[int(rng.integers(len(eligible)))]
        t = int(rng.integers(history, buffer.episodes[e].steps - need + 1))
        out.append(make_sample(buffer.episodes[e], t, horizon, history, e, need))
    return out


def collate_samples(samples: list[TrainingSample]) -> TrainingBatch:
    return TrainingBatch(collate([s.obs for s in samples]), as_tensor(np.stack([s.plan for s in samples])),
                         as_tensor(np.stack([s.target for s in samples])),
                         torch.as_tensor(np.stack([s.mask for s in samples])),
                         [(s.episode, s.t) for s in samples])


def prediction_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 over valid agents, timesteps and (x, y, heading); heading error wrapped.

    ``mask`` is per agent ``[B, N]`` or per agent and step ``[B, N, T]``.
    """
    diff = pred - target
    dth = torch.atan2(torch.sin(diff[..., 2]), torch.cos(diff[..., 2]))
    diff = torch.cat([diff[..., :2], dth[..., None]], dim=-1)
    if mask.dim() == pred.dim() - 2:
        mask = mask[..., None].expand(pred.shape[:-1])
    el = smooth_l1_elementwise(diff) * mask.to(pred.dtype)[..., None]
    n = mask.sum() * pred.shape[-1]
    if int(n) == 0:
        return el.sum()
    return el.sum() / n


def batch_loss(model: Predictor, batch: TrainingBatch, gate_l1: float = 0.0):
    """Prediction loss and the objective actually minimised (plus the gate penalty)."""
    pred, gates = model(batch.inputs, batch.plan if model.interaction_aware else None)
    loss = prediction_loss(pred, batch.target, batch.mask)
    if gate_l1 == 0.0 or gates is None:
        return loss, loss
    m = batch.mask.any(dim=-1).to(gates.dtype)
    return loss, loss + gate_l1 * (gates * m).sum() / m.sum().clamp(min=1.0)


def train_step(model: Predictor, batch: TrainingBatch, adam: AdamState, gate_l1: float = 0.0) -> float:
    """One Adam step; returns the prediction loss before the step."""
    params = model.params()
    for p in params.values():
        p.grad = None
    loss, objective = batch_loss(model, batch, gate_l1)
    check_finite("loss", objective)
    objective.backward()
    grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    for k, g in grads.items():
        check_finite(f"grad {k}", g)
    adam_step(params, grads, adam)
    return float(loss.detach())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ScenarioMetrics:
    scenario: str
    episodes: int
    success: float  # percent
    collision: float  # percent
    time: float  # mean time of successful episodes, NaN if none
    ade: float
    fde: float

    def row(self) -> dict:
        return asdict(self)


def aggregate(name: str, results: list[EpisodeResult]) -> ScenarioMetrics:
    n = len(results)
    times = [r.time for r in results if r.success]
    ades = [r.ade for r in results if not math.isnan(r.ade)]
    fdes = [r.fde for r in results if not math.isnan(r.fde)]
    return ScenarioMetrics(name, n, 100.0 * sum(r.success for r in results) / max(n, 1),
                           100.0 * sum(r.collision for r in results) / max(n, 1),
                           float(np.mean(times)) if times else float("nan"),
                           float(np.mean(ades)) if ades else float("nan"),
                           float(np.mean(fdes)) if fdes else float("nan"))


def evaluate(predictor: PredictFn, scenarios, n_flows: int, settings: PlannerSettings,
             master_seed: int = 0, exec_steps: int = 5, flow: FlowConfig | None = None,
             stream: int = _TEST_FLOW, horizon: int = 30, on_episode=None):
    """Exploration-free episodes over seeded flows; returns per-scenario rows plus an overall row."""
    rows, everything = [], []
    for sc in scenarios:
        res = []
        for i in range(n_flows):
            seed = derive_seed(master_seed, stream, i)
            r = run_episode(sc, predictor, settings, seed, 0.0, exec_steps, flow=flow, horizon=horizon)
            if on_episode is not None:
                on_episode(sc, i, r)
            res.append(r)
        rows.append(aggregate(sc, res))
        everything += res
    rows.append(aggregate("overall", everything))
    return rows


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("episode", "scenario", "success", "collision", "time", "loss", "ade", "fde", "epsilon", "lr")
EVAL_FIELDS = ("episode", "scenario", "episodes", "success", "collision", "time", "ade", "fde")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def build_predictor(variant: str, seed: int, horizon: int = 30) -> Predictor | None:
    if variant == "cvtr":
        return None
    kind = NO_INTERACTION if variant == "no_interaction" else INTERACTION_AWARE
    return Predictor(kind, horizon=horizon, seed=derive_seed(seed, _MODEL))


def predictor_fn(model: Predictor | None, horizon: int = 30) -> PredictFn:
    return cvtr_predictor(horizon) if model is None else model_predictor(model)


@dataclass
class TrainingRun:
    model: Predictor | None
    adam: AdamState | None
    buffer: ReplayBuffer
    history: list  # per-episode metric dicts
    evaluations: list  # (episode, [ScenarioMetrics])
    out_dir: Path | None


def run_training(cfg: TrainConfig, variant: str = "ours", scenarios=SCENARIOS, seed: int = 0,
                 settings: PlannerSettings | None = None, flow: FlowConfig | None = None,
                 out_dir=None, manifest: dict | None = None, log_every: int = 10) -> TrainingRun:
    """Algorithm loop over ``cfg.episodes`` episodes, scenarios in round robin."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    settings = settings or PlannerSettings()
    scenarios = tuple(scenarios)
    model = build_predictor(variant, seed, cfg.horizon)
    fn = predictor_fn(model, cfg.horizon)
    adam = AdamState.for_params(model.params(), base_lr=cfg.base_lr, decay_factor=cfg.lr_decay,
                                decay_every=cfg.lr_decay_every) if model is not None else None
    out = Path(out_dir) if out_dir is not None else None
    metrics_f = eval_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        if manifest is not None:
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        metrics_f = open(out / "metrics.csv", "w", newline="")
        eval_f = open(out / "eval.csv", "w", newline="")
        mw = csv.writer(metrics_f)
        mw.writerow(METRIC_FIELDS)
        ew = csv.writer(eval_f)
        ew.writerow(EVAL_FIELDS)
    buffer = ReplayBuffer()
    history, evaluations = [], []
    sample_rng = stream_rng(seed, _SAMPLING)
    explore_rng = stream_rng(seed, _EXPLORE)
    episodes = cfg.episodes if model is not None else 0  # CVTR has nothing to train

    def snapshot(done: int):
        rows = evaluate(fn, scenarios, cfg.eval_flows, settings, seed, cfg.exec_steps_test, flow,
                        stream=_EVAL_FLOW, horizon=cfg.horizon)
        evaluations.append((done, rows))
        if eval_f is not None:
            for r in rows:
                ew.writerow([_fmt(done)] + [_fmt(getattr(r, k)) for k in EVAL_FIELDS[1:]])
            eval_f.flush()

    try:
        if episodes and cfg.eval_flows > 0:
            model.eval()
            snapshot(0)  # untrained reference
        for e in range(episodes):
            sc = scenarios[e % len(scenarios)]
            eps = 0.0 if variant == "no_exploration" else epsilon(e, cfg)
            model.eval()
            res = run_episode(sc, fn, settings, derive_seed(seed, _TRAIN_FLOW, e), eps, cfg.exec_steps_train,
                              explore_rng, flow, cfg.horizon)
            buffer.add(res.record)
            losses = []
            if any(r.steps - cfg.min_future >= cfg.history for r in buffer.episodes):
                model.train()
                for _ in range(cfg.grad_steps):
                    batch = collate_samples(sample_batch(buffer, cfg.batch_size, cfg.horizon, cfg.history, sample_rng,
                                                         cfg.min_future))
                    losses.append(train_step(model, batch, adam, cfg.gate_l1))
            row = dict(episode=e + 1, scenario=sc, success=res.success, collision=res.collision,
                       time=res.time, loss=float(np.mean(losses)) if losses else float("nan"),
                       ade=res.ade, fde=res.fde, epsilon=eps, lr=adam.lr())
            history.append(row)
            if metrics_f is not None:
                mw.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                metrics_f.flush()
            if log_every and (e + 1) % log_every == 0:
                log.info("episode %d %s status=%s loss=%.4f ade=%.3f eps=%.3f", e + 1, sc, res.status,
                         row["loss"], res.ade, eps)
            done = e + 1
            if out is not None and done % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"episode_{done:04d}.ckpt", model.params(), adam,
                                {"episode": done, "variant": variant, "seed": seed})
            if cfg.eval_flows > 0 and done % cfg.eval_every == 0:
                model.eval()
                snapshot(done)
        if out is not None and episodes and episodes % cfg.checkpoint_every:
            save_checkpoint(out / "checkpoints" / "final.ckpt", model.params(), adam,
                            {"episode": episodes, "variant": variant, "seed": seed})
    finally:
        for f in (metrics_f, eval_f):
            if f is not None:
                f.close()
    if model is not None:
        model.eval()
    return TrainingRun(model, adam, buffer, history, evaluations, out)


# ---------------------------------------------------------------------------
# episode traces
# ---------------------------------------------------------------------------


def write_trace(path, record: EpisodeRecord, status: str = "") -> None:
    """Append one episode as line-delimited JSON: a header line, then one line per step."""
    with open(path, "a") as f:
        f.write(json.dumps({"type": "episode", "scenario": record.scenario, "seed": record.seed,
                            "steps": record.steps, "exec_steps": record.exec_steps, "status": status,
                            "cycles": [_cycle_json(c) for c in record.cycles]}) + "\n")
        starts = [c[0] for c in record.cycles]
        for t in range(len(record.ego)):
            agents = {str(int(a)): [float(v) for v in record.states[t, k]]
                      for k, a in enumerate(record.ids) if record.valid[t, k]}
            line = {"type": "step", "t": t, "time": round(t * DT, 10), "ego": [float(v) for v in record.ego[t]],
                    "agents": agents}
            # the plan being executed while moving from step t to t+1
            k = bisect_right(starts, t) - 1
            if k >= 0 and t < record.steps:
                c = record.cycles[k]
                line["plan"] = int(c[2])
                if len(c) > 4:
                    line["cost"] = dict(zip(FEATURES, c[5]), total=c[4], explore=bool(c[1]))
            f.write(json.dumps(line) + "\n")


def _cycle_json(c) -> list:
    out = [int(c[0]), bool(c[1]), int(c[2]), float(c[3])]
    if len(c) > 4:
        out += [float(c[4]), [float(v) for v in c[5]]]
    return out


def read_trace(path) -> list[EpisodeRecord]:
    episodes = []
    header, steps = None, []

    def flush():
        if header is None:
            return
        ids = sorted({int(a) for s in steps for a in s["agents"]})
        col = {a: k for k, a in enumerate(ids)}
        S = len(steps)
        states = np.zeros((S, len(ids), 4))
        valid = np.zeros((S, len(ids)), dtype=bool)
        ego = np.zeros((S, 4))
        for r, s in enumerate(steps):
            ego[r] = s["ego"]
            for a, st in s["agents"].items():
                states[r, col[int(a)]] = st
                valid[r, col[int(a)]] = True
        cycles = [tuple(tuple(v) if isinstance(v, list) else v for v in c) for c in header.get("cycles", [])]
        episodes.append(EpisodeRecord(header["scenario"], int(header["seed"]), np.array(ids, dtype=np.int64),
                                      states, valid, ego, int(header.get("exec_steps", 15)), cycles))

    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "episode":
                flush()
                header, steps = rec, []
            else:
                steps.append(rec)
    flush()
    return episodes


def observation_at(record: EpisodeRecord, t: int, history: int = HISTORY) -> SceneObservation:
    """Observation at step ``t`` of a recorded episode, padded at the start like the live simulator."""
    if not 0 <= t <= record.steps:
        raise IndexError(f"timestep {t} outside episode of {record.steps} steps")
    lo = max(0, t - history)
    H = history + 1
    pad = H - (t + 1 - lo)
    now = record.valid[t]
    ids = record.ids[now]
    ego = np.zeros((H, 4))
    ev = np.zeros(H, dtype=bool)
    hist = np.zeros((H, len(ids), 4))
    hv = np.zeros((H, len(ids)), dtype=bool)
    ego[pad:] = record.ego[lo:t + 1]
    ev[pad:] = True
    hist[pad:] = record.states[lo:t + 1][:, now]
    hv[pad:] = record.valid[lo:t + 1][:, now]
    hist = np.where(hv[..., None], hist, 0.0)
    return build_observation(get_map(record.scenario), ego, ev, ids, hist, hv)


def lane_plans(scene_map, ego, speeds, accel: float = 0.0, horizon: int = 30) -> list[CandidatePlan]:
    """Lane-keeping plans on the ego's current lane, one per target speed (pass/yield style)."""
    hit = scene_map.locate(ego[0], ego[1], ego[2], scene_map.ego_lanes, max_offset=3.0)
    if hit is None:
        raise ValueError("ego is not on a drivable lane")
    cfg = PlannerConfig(horizon=horizon, lateral_times=(3.0,), include_current_speed=False)
    return generate_candidates(ego, [hit[0].path], cfg, speed_grid=list(speeds), accel=accel)
