"""Command-line entry point.

Subcommands: gen-data, train-dynamics, train-stainf, eval, sysid,
train-policy, newton-ball. Every subcommand is deterministic in
(config, inputs, seed), writes its resolved configuration next to its
outputs, and never mutates its inputs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dynamics import (
    ModelConfig,
    TrainConfig,
    history_to_csv,
    load_dynamics,
    save_dynamics,
    train,
)
from .evalmetrics import eval_episodes, newton_ball_optimize, ood_eval
from .oracle import (
    generate_ball_episode,
    generate_episode,
    load_dataset,
    phase_counts,
    save_dataset,
)
from .policy import (
    PolicyConfig,
    history_to_csv as policy_history_to_csv,
    save_policy,
    train_policy_bptt,
    train_policy_reinforce,
)
from .real2sim import (
    ParameterMask,
    first_motion_step,
    identify_parameters,
    load_stainf,
    save_stainf,
    save_sysid_report,
    stainf_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    root = os.environ.get("GRADWORLD_OUTPUT_ROOT", "")
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    if root:
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_writer(out: Path):
    lines = []

    def log(row: dict):
        lines.append(json.dumps(row))

    def flush():
        (out / "run_log.jsonl").write_text("\n".join(lines) + "\n" if lines else "")

    return log, flush


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    episodes = []
    if args.task == "ball":
        for i in range(args.episodes):
            episodes.append(generate_ball_episode(seed=cfg.seed + i, cfg=cfg.ball))
        manifest_extra = {"task": "ball"}
    else:
        if args.phase == "all":
            counts = phase_counts(args.scale)
            seed = cfg.seed
            for phase, count in counts.items():
                for _ in range(count):
                    episodes.append(generate_episode(phase, seed=seed, cfg=cfg.env))
                    seed += 1
        else:
            for i in range(args.episodes):
                episodes.append(generate_episode(args.phase, seed=cfg.seed + i, cfg=cfg.env))
        manifest_extra = {"task": "push", "phase": args.phase, "scale": args.scale}
    save_dataset(out, episodes, manifest_extra=manifest_extra)
    print(f"wrote {len(episodes)} episodes to {out}")
    return EXIT_OK


def cmd_train_dynamics(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    episodes = load_dataset(args.data)
    action_dim = episodes[0].actions.shape[1]
    model_cfg = cfg.dynamics_model
    if model_cfg.action_dim != action_dim:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "action_dim": action_dim})
    train_cfg = TrainConfig(**{**cfg.dynamics_train.to_dict(), "seed": cfg.seed})
    log, flush = _log_writer(out)
    core, history = train(episodes, train_cfg, model_cfg, log_fn=log)
    flush()
    save_dynamics(out / "dynamics.json", core, train_cfg)
    (out / "loss_history.csv").write_text(history_to_csv(history))
    print(f"trained dynamics on {len(episodes)} episodes -> {out / 'dynamics.json'}")
    return EXIT_OK


def cmd_train_stainf(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    episodes = load_dataset(args.data)
    log, flush = _log_writer(out)
    model, history = stainf_train(
        episodes, camera=cfg.renderer, cfg=cfg.stainf, epochs=args.epochs,
        seed=cfg.seed, log_fn=log)
    flush()
    save_stainf(out / "stainf.json", model)
    print(f"trained state inference -> {out / 'stainf.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    core = load_dynamics(args.ckpt)
    episodes = load_dataset(args.data)[: cfg.eval.n_episodes]
    modes = tuple(cfg.eval.modes) if args.mode == "all" else (args.mode,)
    stainf = load_stainf(args.stainf) if args.stainf else None
    report = eval_episodes(core, episodes, modes=modes, stainf=stainf,
                           camera=cfg.renderer, horizon=cfg.eval.horizon,
                           noise_std=cfg.eval.noise_std)
    if args.ood:
        ood = ood_eval(core, args.ood, n_episodes=min(10, cfg.eval.n_episodes),
                       base_cfg=cfg.env, horizon=min(60, cfg.eval.horizon), seed=cfg.seed + 5000)
        (out / "ood_report.csv").write_text(ood.to_csv())
        (out / "ood_summary.json").write_text(ood.summary_json())
    (out / "eval_report.csv").write_text(report.to_csv())
    (out / "eval_summary.json").write_text(report.summary_json())
    print(report.summary_json())
    return EXIT_OK


def parse_mask(spec: str, n_objects: int) -> ParameterMask:
    """Mask grammar: comma-separated entries 'objK.friction', 'objK.mass',
    'world.table_friction', 'world.restitution'."""
    attr_cols = {"friction": (4, 0.05, 1.0), "mass": (3, 0.01, 0.5)}
    world_cols = {"table_friction": (1, 0.05, 1.0), "restitution": (2, 0.0, 1.0)}
    attr_entries, world_entries = [], []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        head, _, name = token.partition(".")
        if head.startswith("obj"):
            try:
                idx = int(head[3:])
            except ValueError as e:
                raise ConfigError(f"bad mask entry {token!r}") from e
            if idx >= n_objects or name not in attr_cols:
                raise ConfigError(f"bad mask entry {token!r}")
            col, lo, hi = attr_cols[name]
            attr_entries.append((idx, col, lo, hi))
        elif head == "world":
            if name not in world_cols:
                raise ConfigError(f"bad mask entry {token!r}")
            col, lo, hi = world_cols[name]
            world_entries.append((col, lo, hi))
        else:
            raise ConfigError(f"bad mask entry {token!r}")
    mask = ParameterMask.for_entries(n_objects, attr_entries, world_entries)
    if mask.n_params == 0:
        raise ConfigError(f"mask {spec!r} selects no parameters")
    return mask


def cmd_sysid(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    core = load_dynamics(args.ckpt)
    episodes = load_dataset(args.data)[: args.episodes]
    mask_spec = args.mask or cfg.sysid.mask
    log, flush = _log_writer(out)
    rows = []
    for i, ep in enumerate(episodes):
        mask = parse_mask(mask_spec, ep.descriptors.n_objects)
        t0 = first_motion_step(ep) if cfg.sysid.window_at_first_motion else 0
        result = identify_parameters(
            core, ep, mask, window=cfg.sysid.window, window_start=max(0, t0 - 2),
            lr=cfg.sysid.lr, steps=cfg.sysid.steps, n_starts=cfg.sysid.n_starts,
            seed=cfg.seed + i, log_fn=None)
        save_sysid_report(out / f"sysid_{i:03d}.json", result)
        true_theta = mask.extract(ep.descriptors)
        row = {"episode": i, "true": true_theta.tolist(), "identified": result.theta.tolist(),
               "abs_error": np.abs(true_theta - result.theta).tolist(),
               "final_loss": result.loss_curve[-1] if result.loss_curve else None}
        rows.append(row)
        log(row)
    flush()
    (out / "sysid_summary.json").write_text(json.dumps(rows, indent=2))
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    core = load_dynamics(args.ckpt)
    pol_cfg = cfg.policy
    run = cfg.policy_run
    log, flush = _log_writer(out)
    if args.algo == "bptt":
        pi, history = train_policy_bptt(
            core, pol_cfg, cfg.env, episodes_budget=run.episodes_budget, batch=run.batch,
            n_train_scenes=run.n_train_scenes, n_eval_scenes=run.n_eval_scenes,
            eval_every=run.eval_every, seed=cfg.seed, log_fn=log)
    elif args.algo == "reinforce":
        pi, history = train_policy_reinforce(
            core.stats, pol_cfg, cfg.env, episodes_budget=run.episodes_budget,
            n_train_scenes=run.n_train_scenes, n_eval_scenes=run.n_eval_scenes,
            eval_every=max(1, run.episodes_budget // 4), seed=cfg.seed, log_fn=log)
    else:
        raise ConfigError(f"unknown algo {args.algo!r}")
    flush()
    save_policy(out / f"policy_{args.algo}.json", pi, pol_cfg)
    (out / f"rewards_{args.algo}.csv").write_text(policy_history_to_csv(history))
    print(f"final eval: {history[-1]}")
    return EXIT_OK


def cmd_newton_ball(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    episodes = [generate_ball_episode(seed=cfg.seed + i, cfg=cfg.ball)
                for i in range(args.episodes)]
    model_cfg = ModelConfig(latent_dim=32, hidden_dim=64, cond_dim=32, n_layers=1,
                            n_heads=2, mlp_hidden=64, enc_hidden=64, dec_hidden=64,
                            action_dim=0)
    train_cfg = TrainConfig(stage1_epochs=8, stage2_epochs=4, batches_per_epoch=40,
                            batch_size=64, window=16, seed=cfg.seed)
    log, flush = _log_writer(out)
    core, history = train(episodes, train_cfg, model_cfg, log_fn=log)
    save_dynamics(out / "ball_dynamics.json", core, train_cfg)
    (out / "loss_history.csv").write_text(history_to_csv(history))
    result = newton_ball_optimize(core, cfg.ball, lr=args.lr, steps=args.steps,
                                  seed=cfg.seed, log_fn=log)
    flush()
    payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in result.items()}
    (out / "ball_optimization.json").write_text(json.dumps(payload, indent=2))
    print(json.dumps({k: payload[k] for k in
                      ("v0", "steps_used", "final_model_loss", "oracle_landing_error")}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradworld",
                                description="desk-scale differentiable neural physics engine")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate oracle episodes")
    g.add_argument("--phase", default="push_hit",
                   choices=["random_move", "push_random", "push_hit", "all"])
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--scale", type=float, default=0.05,
                   help="scale of the full phase ratio when --phase all")
    g.add_argument("--task", default="push", choices=["push", "ball"])
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-dynamics", help="train the dynamics core")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train_dynamics)

    s = sub.add_parser("train-stainf", help="train single-frame state inference")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--config", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_train_stainf)

    e = sub.add_parser("eval", help="evaluate rollouts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="gt_first",
                   choices=["gt_first", "gt_state", "recon_first", "recon_all", "all"])
    e.add_argument("--stainf", default=None)
    e.add_argument("--ood", default=None, choices=["object_count", "physical_parameter"])
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    y = sub.add_parser("sysid", help="identify scene parameters")
    y.add_argument("--ckpt", required=True)
    y.add_argument("--data", required=True)
    y.add_argument("--mask", default=None)
    y.add_argument("--episodes", type=int, default=4)
    y.add_argument("--out", required=True)
    y.add_argument("--config", default=None)
    y.add_argument("--seed", type=int, default=None)
    y.set_defaults(fn=cmd_sysid)

    pl = sub.add_parser("train-policy", help="train a push policy")
    pl.add_argument("--ckpt", required=True)
    pl.add_argument("--algo", required=True, choices=["bptt", "reinforce"])
    pl.add_argument("--out", required=True)
    pl.add_argument("--config", default=None)
    pl.add_argument("--seed", type=int, default=None)
    pl.set_defaults(fn=cmd_train_policy)

    nb = sub.add_parser("newton-ball", help="ball-velocity optimization study")
    nb.add_argument("--episodes", type=int, default=500)
    nb.add_argument("--lr", type=float, default=0.8)
    nb.add_argument("--steps", type=int, default=800)
    nb.add_argument("--out", required=True)
    nb.add_argument("--config", default=None)
    nb.add_argument("--seed", type=int, default=None)
    nb.set_defaults(fn=cmd_newton_ball)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
