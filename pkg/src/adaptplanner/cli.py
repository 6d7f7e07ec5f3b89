"""Command-line surface: gen-data, train, evolve, plan, eval, render.

Every command is reproducible from (config file, master seed); flags override
config values. Usage errors exit 2, runtime errors exit 1 with a JSON error
line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import evaluate as ez
from . import evolve as ev
from . import persist, render
from .config import RunConfig, default_data_dir, load_run_config
from .diffusion import build_schedule
from .errors import AdaptPlannerError, InvalidConfig
from .evolve import DataPool, DiscriminatorRule, PhaseConfig
from .maze import TaskSpec, default_env_config, generate_expert, load_maze, validate_task


def _parse_point(text: str) -> np.ndarray:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise InvalidConfig(f"expected 'x,y', got {text!r}") from exc
    return np.array([x, y])


def _env_for(cfg: RunConfig, maze):
    return default_env_config(maze, **cfg.env)


def _load_config(args, **overrides) -> RunConfig:
    return load_run_config(getattr(args, "config", None), seed=getattr(args, "seed", None), **overrides)


def _out_dir(args) -> Path:
    out = getattr(args, "out_dir", None)
    return Path(out) if out else default_data_dir()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, maze=args.maze)
    maze = load_maze(cfg.maze)
    env = _env_for(cfg, maze)
    episodes = generate_expert(maze, env, args.n, cfg.seed)
    pool = DataPool(maze, env)
    pool.add_expert(episodes)
    pool.fit_normalizer()
    out = Path(args.out) if args.out else _out_dir(args) / f"{maze.name}_expert_{args.n}.pool"
    persist.save_pool(out, pool)
    lengths = [e.trajectory.horizon for e in pool.entries]
    print(
        json.dumps(
            {
                "pool": str(out),
                "episodes": len(pool),
                "mean_rows": float(np.mean(lengths)),
                "max_rows": int(np.max(lengths)),
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    pool = persist.load_pool(args.pool)
    cfg = _load_config(args, maze=args.maze or pool.maze.name)
    if args.steps is not None:
        cfg.training.steps = args.steps
    if pool.normalizer is None:
        pool.fit_normalizer()
    sched = build_schedule(cfg.diffusion.n_steps, cfg.diffusion.schedule)
    arch = dn.DenoiserArch(
        width=cfg.denoiser.width,
        blocks=cfg.denoiser.blocks,
        kernel_size=cfg.denoiser.kernel_size,
        embed_dim=cfg.denoiser.embed_dim,
        groups=cfg.denoiser.groups,
        dilations=cfg.denoiser.resolved_dilations(),
    )
    history: list = []
    params = dn.train(
        sched,
        pool,
        steps=cfg.training.steps,
        batch_size=cfg.training.batch_size,
        lr=cfg.training.lr,
        seed=cfg.seed,
        horizon=cfg.diffusion.horizon,
        arch=arch,
        history=history,
        log_every=args.log_every,
    )
    out = Path(args.out) if args.out else _out_dir(args) / f"{pool.maze.name}_base.ckpt"
    ckpt = persist.Checkpoint(
        params=params,
        sched=sched,
        normalizer=pool.normalizer,
        horizon=cfg.diffusion.horizon,
        maze_name=pool.maze.name,
        config_echo={"training": cfg.training.__dict__, "seed": cfg.seed},
    )
    persist.save_checkpoint(out, ckpt)
    log_dir = out.parent
    with (log_dir / f"{out.stem}_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(history)
    render.render_loss_curve(history, log_dir / f"{out.stem}_loss.png")
    print(json.dumps({"checkpoint": str(out), "steps": cfg.training.steps, "final_loss": history[-1][1] if history else None}))
    return 0


def _eval_fn_for(cfg: RunConfig, maze, env, sched, normalizer, horizon, refs):
    suite = _suite_for(cfg, maze, env)

    def eval_fn(params):
        result = ez.benchmark(
            maze, env, params, sched, normalizer, suite, cfg.eval.seeds, horizon, refs=refs
        )
        return result.summary()

    return eval_fn


def _suite_for(cfg: RunConfig, maze, env):
    if cfg.eval.suite == "hard":
        return ez.hard_case_suite(maze, limit=cfg.eval.n_tasks)
    return ez.random_suite(maze, env, cfg.eval.n_tasks, cfg.seed)


def cmd_evolve(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    pool = persist.load_pool(args.pool)
    cfg = _load_config(args, maze=args.maze or pool.maze.name)
    if args.phases is not None:
        cfg.evolution.phases = args.phases
    env = _env_for(cfg, pool.maze)
    if pool.normalizer is None:
        pool.normalizer = ckpt.normalizer
    refs = ez.reference_returns(pool.maze, env)
    eval_fn = _eval_fn_for(cfg, pool.maze, env, ckpt.sched, ckpt.normalizer, ckpt.horizon, refs)
    rule = None
    if cfg.evolution.rule_c1 is not None:
        rule = DiscriminatorRule(
            long_len=cfg.evolution.rule_c1,
            min_len=cfg.evolution.rule_c2,
            score_floor=cfg.evolution.rule_c3,
            max_deviation=cfg.evolution.deviation_max or 2.0 * env.v_max * env.dt,
            max_episode_steps=env.max_episode_steps,
            length_weight=cfg.evolution.rule_weight,
        )
    phase_cfg = PhaseConfig(
        maze=pool.maze,
        env=env,
        sched=ckpt.sched,
        horizon=ckpt.horizon,
        base_steps=cfg.training.steps,
        batch_size=cfg.training.batch_size,
        lr=cfg.training.lr,
        seed=cfg.seed,
        n_tasks=cfg.evolution.n_tasks,
        per_task=cfg.evolution.per_task,
        attempt_factor=cfg.evolution.attempt_factor,
        coin_tasks=cfg.evolution.coin_tasks,
        finetune_divisor=cfg.evolution.finetune_divisor,
        rule=rule,
        eval_fn=eval_fn,
    )
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = ckpt.params
    reports = []
    for _ in range(cfg.evolution.phases):
        params, pool, report = ev.run_phase(pool, params, phase_cfg)
        reports.append(report)
        phase_ckpt = persist.Checkpoint(
            params=params,
            sched=ckpt.sched,
            normalizer=ckpt.normalizer,
            horizon=ckpt.horizon,
            maze_name=ckpt.maze_name,
            config_echo={"phase": report.phase, "seed": cfg.seed},
        )
        persist.save_checkpoint(out_dir / f"phase{report.phase}.ckpt", phase_ckpt)
        persist.save_report_json(out_dir / f"phase{report.phase}_report.json", report.to_dict())
    persist.save_pool(out_dir / "evolved.pool", pool)
    render.render_phase_progress(reports, out_dir / "evolution.png")
    print(
        json.dumps(
            {
                "phases": [r.phase for r in reports],
                "accepted": [r.accepted for r in reports],
                "post_scores": [r.post_eval.get("mean_normalized") for r in reports],
                "out_dir": str(out_dir),
            }
        )
    )
    return 0


def cmd_plan(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    cfg = _load_config(args, maze=args.maze or ckpt.maze_name)
    maze = load_maze(cfg.maze)
    env = _env_for(cfg, maze)
    task = TaskSpec(
        start=_parse_point(args.start),
        goal=_parse_point(args.goal),
        coin=_parse_point(args.coin) if args.coin else None,
    )
    validate_task(maze, env, task)
    alpha = args.alpha if args.alpha is not None else (cfg.guidance.alpha or 0.0)
    guide_alpha = alpha if task.coin is not None else 0.0
    from .guidance import guidance_for_task
    from .diffusion import sample_trajectory

    guide = guidance_for_task(task, ckpt.horizon, ckpt.normalizer, alpha=guide_alpha)
    traj = sample_trajectory(ckpt.sched, ckpt.params, guide, ckpt.horizon, cfg.seed, ckpt.normalizer)
    out = Path(args.out) if args.out else _out_dir(args) / "plan"
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = persist.trajectory_to_json(traj, maze, task, seed=cfg.seed, alpha=guide_alpha)
    json_path = out.with_suffix(".json")
    svg_path = out.with_suffix(".svg")
    persist.save_trajectory_json(json_path, doc)
    render.render_plan(traj, maze, task, svg_path)
    print(json.dumps({"trajectory": str(json_path), "svg": str(svg_path)}))
    return 0


def cmd_eval(args) -> int:
    ckpt = persist.load_checkpoint(args.ckpt)
    cfg = _load_config(args, maze=args.maze or ckpt.maze_name)
    if args.suite is not None:
        cfg.eval.suite = args.suite
    maze = load_maze(cfg.maze)
    env = _env_for(cfg, maze)
    out_dir = _out_dir(args)
    refs = ez.reference_returns(maze, env)
    if cfg.eval.suite == "coin":
        if not args.coin:
            raise InvalidConfig("eval --suite coin requires --coin x,y")
        tasks = ez.random_suite(maze, env, cfg.eval.n_tasks, cfg.seed)
        alphas = args.alphas or [0.0, -50.0, -100.0, -200.0]
        report = ez.coin_adaptation_eval(
            maze, env, ckpt.params, ckpt.sched, ckpt.normalizer, tasks,
            _parse_point(args.coin), alphas, cfg.eval.seeds, ckpt.horizon,
            refs=refs, out_dir=out_dir,
        )
        render.render_coin_curve(report, out_dir / "coin_curve.png")
        summary = {
            a: {k: v for k, v in block.items() if k != "rows"}
            for a, block in report["alphas"].items()
        }
        print(json.dumps(summary))
        return 0
    suite = _suite_for(cfg, maze, env)
    result = ez.benchmark(
        maze, env, ckpt.params, ckpt.sched, ckpt.normalizer, suite,
        cfg.eval.seeds, ckpt.horizon, refs=refs, out_dir=out_dir, label=cfg.eval.suite,
    )
    render.render_suite_scores(result.rows, out_dir / f"{cfg.eval.suite}_scores.png")
    print(json.dumps(result.summary()))
    return 0


def cmd_render(args) -> int:
    traj, maze, task, _ = persist.load_trajectory_json(args.traj)
    out = Path(args.out) if args.out else Path(args.traj).with_suffix(".svg")
    render.render_plan(traj, maze, task, out)
    print(json.dumps({"svg": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptplanner",
        description="Trajectory-diffusion planning with self-evolution on point-mass mazes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--maze", help="bundled maze name or layout file")
        p.add_argument("--out-dir", help="artifact directory (default $ADAPTPLANNER_DATA_DIR or ./artifacts)")

    p = sub.add_parser("gen-data", help="generate an expert dataset for a maze")
    common(p)
    p.add_argument("--n", type=int, default=500, help="number of expert episodes")
    p.add_argument("--out", help="output pool path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a base checkpoint on an expert pool")
    common(p)
    p.add_argument("--pool", required=True, help="expert pool file")
    p.add_argument("--steps", type=int, help="training steps (overrides config)")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evolve", help="run self-evolution phases from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--phases", type=int)
    p.set_defaults(fn=cmd_evolve)

    p = sub.add_parser("plan", help="sample one plan and write JSON + SVG")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--start", required=True, help="start position 'x,y'")
    p.add_argument("--goal", required=True, help="goal position 'x,y'")
    p.add_argument("--coin", help="optional coin position 'x,y'")
    p.add_argument("--alpha", type=float, help="coin guidance scale (negative pulls toward coin)")
    p.add_argument("--out", help="output path prefix")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("eval", help="run a benchmark suite from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", choices=["random", "hard", "coin"])
    p.add_argument("--coin", help="coin position for the coin suite, 'x,y'")
    p.add_argument("--alphas", type=float, nargs="*", help="guidance scales for the coin suite")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="re-render a trajectory JSON to SVG")
    common(p)
    p.add_argument("--traj", required=True, help="trajectory JSON file")
    p.add_argument("--out", help="output SVG path")
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AdaptPlannerError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IoError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
