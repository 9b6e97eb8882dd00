"""Command-line harness: ``reactplan {train,test,predict,ablate}``.

Every command writes delimited text (CSV/TSV) plus PNG figures into ``--out``
and a ``manifest.json`` that can be passed back as ``--config`` to rerun it.
Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, from_dict, load_config
from .learn import (VARIANT_LABELS, EpisodeResult, derive_seed, evaluate, lane_plans, observation_at,
                    plans_to_ego_frame, predictions_to_global, predictor_fn, read_trace, run_training,
                    write_trace)
from .nn import load_checkpoint
from .predictor import INTERACTION_AWARE, NO_INTERACTION, Predictor, cvtr_predict, predict
from .sim.maps import SCENARIOS, get_map

log = logging.getLogger("reactplan")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
RESULT_FIELDS = ("scenario", "episodes", "success", "collision", "time", "ade", "fde")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if path.suffix == ".json":
            try:
                data = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            cfg = from_dict(data["config"] if "manifest_version" in data else data)
        else:
            cfg = load_config(path)
    cfg = apply_overrides(cfg, args.overrides or [])
    flags = {"seed": args.seed, "scenario": args.scenario, "variant": args.variant, "out": args.out}
    items = [f"{k}={v}" for k, v in flags.items() if v is not None]
    if getattr(args, "episodes", None) is not None:
        items.append(f"train.episodes={args.episodes}")
    if getattr(args, "n_flows", None) is not None:
        items.append(f"test_flows={args.n_flows}")
    return apply_overrides(cfg, items)


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> dict:
    m = {
        "manifest_version": 1,
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "model": derive_seed(cfg.seed, 0)},
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    m.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.4f}"
    return str(v)


def write_table(path: Path, header, rows, delimiter=",") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter=delimiter)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def print_table(header, rows) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(_fmt(v) for v in r))


def load_model(path, variant: str | None = None) -> Predictor:
    params, _, meta = load_checkpoint(path)
    kind = NO_INTERACTION if meta.get("variant") == "no_interaction" else INTERACTION_AWARE
    if variant is not None and variant != "cvtr":
        want = NO_INTERACTION if variant == "no_interaction" else INTERACTION_AWARE
        if want != kind:
            raise RuntimeError(f"checkpoint holds a {kind} model but variant {variant!r} was requested")
    model = Predictor(kind)
    own = model.params()
    if set(own) != set(params) or any(own[k].shape != params[k].shape for k in own):
        raise RuntimeError(f"checkpoint {path} does not match the {kind} predictor layout")
    with torch.no_grad():
        for k, p in own.items():
            p.copy_(params[k])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    manifest = write_manifest(out, "train", cfg)
    run = run_training(cfg.train, cfg.variant, cfg.scenarios, cfg.seed, cfg.planner_settings(), cfg.flow,
                       out, manifest)
    if run.history:
        from .plotting import learning_curves
        learning_curves(run.history, out / "learning_curves.png")
        last = run.history[-10:]
        print(f"episodes\t{len(run.history)}")
        print(f"success_last10\t{np.mean([r['success'] for r in last]):.2f}")
        print(f"loss_last\t{run.history[-1]['loss']:.5f}")
    print(f"output\t{out}")
    return EXIT_OK


def _evaluate_to(out: Path, cfg: RunConfig, fn, label: str, trace: bool = True):
    trace_path = out / "traces.jsonl"
    if trace and trace_path.exists():
        trace_path.unlink()

    def keep(sc, i, r: EpisodeResult):
        if trace:
            write_trace(trace_path, r.record, r.status)

    return evaluate(fn, cfg.scenarios, cfg.test_flows, cfg.planner_settings(), cfg.seed,
                    cfg.train.exec_steps_test, cfg.flow, horizon=cfg.train.horizon, on_episode=keep)


def cmd_test(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    if cfg.variant == "cvtr":
        model = None
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --variant cvtr")
        model = load_model(args.checkpoint, cfg.variant)
    write_manifest(out, "test", cfg, {"checkpoint": args.checkpoint})
    rows = _evaluate_to(out, cfg, predictor_fn(model, cfg.train.horizon), cfg.variant)
    table = [[getattr(r, k) for k in RESULT_FIELDS] for r in rows]
    write_table(out / "results.csv", RESULT_FIELDS, table)
    print_table(RESULT_FIELDS, table)
    from .plotting import metric_bars
    metric_bars({VARIANT_LABELS[cfg.variant]: rows}, out / "results.png", "success")
    return EXIT_OK


def _plan_blocks(record, t, sources, horizon):
    ego = record.ego[t]
    m = get_map(record.scenario)
    blocks = []
    for src in sources:
        if src == "executed":
            if t + horizon > record.steps:
                raise ValueError(f"timestep {t} has no recorded {horizon}-step ego future")
            traj = record.ego[t:t + horizon + 1]
        elif src in ("pass", "yield"):
            speed = m.lanes[m.locate(*ego[:3], m.ego_lanes)[0].id].speed_limit if src == "pass" else 0.0
            traj = lane_plans(m, ego, [speed], horizon=horizon)[0].trajectory
        else:
            rows = np.loadtxt(src, delimiter=",", ndmin=2)
            if rows.shape != (horizon, 4):
                raise ValueError(f"plan file {src} must hold {horizon} rows of x,y,heading,speed")
            traj = np.concatenate([ego[None], rows])
        blocks.append((src, traj))
    return blocks


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    episodes = read_trace(args.trace)
    if not 0 <= args.episode < len(episodes):
        raise IndexError(f"trace holds {len(episodes)} episodes, asked for {args.episode}")
    rec = episodes[args.episode]
    if not 0 <= args.timestep <= rec.steps:
        raise IndexError(f"timestep {args.timestep} not in trace episode of {rec.steps} steps")
    obs = observation_at(rec, args.timestep)
    horizon = cfg.train.horizon
    if args.checkpoint:
        model = load_model(args.checkpoint)
    elif cfg.variant == "cvtr":
        model = None
    else:
        raise ConfigError("--checkpoint is required unless --variant cvtr")
    blocks = _plan_blocks(rec, args.timestep, args.plan, horizon)
    header = ("plan", "slot", "agent_id", "step", "x", "y", "heading", "gate")
    rows, figs = [], []
    for label, traj in blocks:
        plan_ego = plans_to_ego_frame(traj[None], obs.origin)[0]
        res = cvtr_predict(obs, horizon) if model is None else predict(obs, plan_ego, model)
        glob = predictions_to_global(res.trajectories, obs.origin)
        for i in np.nonzero(res.valid)[0]:
            gate = float(res.gate_scores[i]) if res.gate_scores is not None else float("nan")
            for k in range(horizon):
                rows.append([label, int(i), int(obs.neighbor_ids[i]), k + 1, *glob[i, k], gate])
        figs.append((label, traj[1:], glob))
    out.mkdir(parents=True, exist_ok=True)
    name = f"prediction_ep{args.episode}_t{args.timestep}"
    write_table(out / f"{name}.tsv", header, rows, delimiter="\t")
    from .plotting import prediction_plot
    hist = rec.ego[max(0, args.timestep - 10):args.timestep + 1]
    nb = predictions_to_global(obs.neighbor_histories[..., :3], obs.origin) * obs.history_valid[1:, :, None]
    prediction_plot(hist, nb, obs.neighbor_valid, figs, out / f"{name}.png")
    print(f"wrote\t{out / (name + '.tsv')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    write_manifest(out, "ablate", cfg)
    table = {}
    for variant in ("ours", "no_interaction", "no_exploration", "cvtr"):
        sub = out / variant
        vcfg = apply_overrides(cfg, [f"variant={variant}", f"out={sub}"])
        if variant != "cvtr":
            run = run_training(vcfg.train, variant, vcfg.scenarios, vcfg.seed, vcfg.planner_settings(),
                               vcfg.flow, sub, {"config": vcfg.to_dict()})
            fn = predictor_fn(run.model, cfg.train.horizon)
        else:
            sub.mkdir(parents=True, exist_ok=True)
            fn = predictor_fn(None, cfg.train.horizon)
        table[VARIANT_LABELS[variant]] = _evaluate_to(sub, vcfg, fn, variant)
    header = ["model"]
    for sc in cfg.scenarios:
        header += [f"{sc}_success", f"{sc}_collision", f"{sc}_time"]
    header.append("overall_success")
    rows = []
    for label, res in table.items():
        r = [label]
        for m in res[:-1]:
            r += [m.success, m.collision, m.time]
        r.append(res[-1].success)
        rows.append(r)
    write_table(out / "ablation.csv", header, rows)
    print_table(header, rows)
    from .plotting import metric_bars
    metric_bars(table, out / "ablation_success.png", "success")
    metric_bars(table, out / "ablation_collision.png", "collision")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, episodes: bool = False):
    p.add_argument("--config", help="YAML/JSON run config or a manifest.json from an earlier run")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario", choices=SCENARIOS + ("all",))
    p.add_argument("--variant", choices=("ours", "no_interaction", "no_exploration", "cvtr"))
    p.add_argument("--out", help="output directory")
    if episodes:
        p.add_argument("--episodes", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reactplan", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", allow_abbrev=False, help="online training (decision loop + predictor updates)")
    _common(p, episodes=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", allow_abbrev=False, help="evaluate a checkpoint (or CVTR) over seeded traffic flows")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n-flows", type=int, dest="n_flows")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("predict", allow_abbrev=False, help="dump predictions for one traced timestep under several plans")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--trace", required=True, help="traces.jsonl written by `test`")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--timestep", type=int, required=True)
    p.add_argument("--plan", nargs="+", default=["pass", "yield"],
                   help="plan sources: pass, yield, executed, or CSV files of T rows x,y,heading,speed")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", allow_abbrev=False, help="train and test all four variants under shared seeds")
    _common(p, episodes=True)
    p.add_argument("--n-flows", type=int, dest="n_flows")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [x for x in extra if not (x.startswith("--") and "=" in x)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
