"""Command-line entry point: ``advpolicies <subcommand> --config FILE ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

from .config import ExperimentConfig, RunManifest, load_config
from .envs import make_env
from .errors import ConfigurationError, NumericalFault
from .evaluation import (
    EVAL_SEED_OFFSET,
    SWEEP_FIELDS,
    build_score_grid,
    dimensionality_sweep,
    sweep_medians,
    win_rate_curve,
    write_curve_csv,
    write_rows_csv,
)
from .policy import FrozenPolicy, load_policy, make_baseline, save_policy
from .rl import METRIC_FIELDS, Adam, role_int, train_adversary, train_selfplay

OUT_ENV_VAR = "ADVPOLICIES_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("advpolicies")


def _out_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV_VAR) or cfg.out)


def _load_checkpoint(path) -> FrozenPolicy:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    try:
        return FrozenPolicy(load_policy(path))
    except (ValueError, OSError) as e:
        raise ConfigurationError(f"cannot read checkpoint {path}: {e}") from None


def _labelled(items, flag: str) -> dict:
    out = {}
    for item in items or []:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        if label in out:
            raise ConfigurationError(f"duplicate {flag} label {label!r}")
        out[label] = _load_checkpoint(path)
    return out


def _write_metrics(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _start_run(args, cfg: ExperimentConfig, name: str) -> Path:
    out = _out_root(args, cfg) / name
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    return out


def _finish(out: Path, command: str, cfg: ExperimentConfig, schedule: dict) -> Path:
    manifest = RunManifest(command, cfg.digest(), cfg.seed, schedule)
    manifest.record_tree(out)
    return manifest.write(out)


# --- subcommands -------------------------------------------------------------

def cmd_train_victim(args, cfg: ExperimentConfig) -> int:
    out = _start_run(args, cfg, f"victim-{cfg.env.env_name}-pose{cfg.env.pose_dim}-seed{cfg.seed}")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def progress(steps, metrics):
        if steps % (10 * cfg.victim_ppo.batch_size) < cfg.victim_ppo.batch_size:
            log.info("self-play step %d  win rates %.2f / %.2f", steps, metrics[0][-1]["win_rate"],
                     metrics[1][-1]["win_rate"])

    sp = train_selfplay(cfg.env, cfg.victim_ppo, cfg.selfplay.pool_interval, cfg.seed,
                        cfg.selfplay.shaping_fraction, cfg.selfplay.shaping_scale, progress)
    roles = make_env(cfg.env).player_names
    for p, role in enumerate(roles):
        for step, snap in sp.checkpoints(p):
            save_policy(snap, ckpt / f"{role}_step{step:09d}.pol")
        save_policy(sp.policies[p], out / f"{role}_final.pol")
        _write_metrics(sp.metrics[p], out / f"metrics_{role}.csv")
    _finish(out, "train-victim", cfg, {"selfplay": cfg.seed})
    print(out)
    return EXIT_OK


def cmd_train_adversary(args, cfg: ExperimentConfig) -> int:
    victim = _load_checkpoint(args.victim)
    digest_before = victim.digest()
    vi = cfg.adversary.victim_index
    out = _start_run(args, cfg, f"adversary-{cfg.env.env_name}-pose{cfg.env.pose_dim}-seed{cfg.seed}")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    init, start, opt = None, 0, None
    if args.resume:
        init = _load_checkpoint(args.resume).thaw()
        start = int(init.metadata.get("step", 0))
        opt = Adam(init.arrays(), cfg.adversary_ppo.learning_rate, eps=cfg.adversary_ppo.adam_eps)
        opt_path = Path(args.resume).with_suffix(".adam.npz")
        if opt_path.is_file():
            opt.load(opt_path)
    seed = role_int(cfg.seed, "adversary")
    interval = max(cfg.adversary_ppo.batch_size, cfg.adversary_ppo.total_steps // cfg.adversary.checkpoints)
    res = train_adversary(cfg.env, victim, cfg.adversary_ppo, seed, vi, interval, init, start, opt)
    for step, snap in res.checkpoints:
        save_policy(snap, ckpt / f"adversary_step{step:09d}.pol")
    res.optimizer.save(ckpt / f"adversary_step{res.steps:09d}.adam.npz")
    metrics_path = out / "metrics.csv"
    rows = res.metrics
    if start and metrics_path.is_file():
        with metrics_path.open() as f:
            old = [r for r in csv.DictReader(f) if int(r["step"]) <= start]
        rows = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in old] + rows
    _write_metrics(rows, metrics_path)
    if victim.digest() != digest_before:
        raise RuntimeError("victim parameters changed during attack training")
    game = make_env(cfg.env)
    series = sorted(ckpt.glob("adversary_step*.pol"))
    checkpoints = [(int(p.stem.removeprefix("adversary_step")), _load_checkpoint(p)) for p in series]
    points = win_rate_curve(game, checkpoints, victim, cfg.evaluation.n_episodes,
                            cfg.seed + EVAL_SEED_OFFSET, vi)
    write_curve_csv(points, out / "curve.csv")
    if not args.no_plots:
        from .plots import curve_plot
        curve_plot({"adversary": points}, out / "curve.svg")
    _finish(out, "train-adversary", cfg, {"adversary": seed, "evaluation": cfg.seed + EVAL_SEED_OFFSET})
    print(out)
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    victims = _labelled(args.victim, "--victim")
    if not victims:
        raise ConfigurationError("evaluate needs at least one --victim")
    opponents = _labelled(args.opponent, "--opponent")
    game = make_env(cfg.env)
    for kind in ("Rand", "Zero"):
        opponents.setdefault(kind, make_baseline(kind, game.action_dim))
    out = _start_run(args, cfg, f"grid-{cfg.env.env_name}-pose{cfg.env.pose_dim}-seed{cfg.seed}")
    masks = (False,) if args.no_masks else (False, True)
    grid = build_score_grid(game, victims, opponents, masks, cfg.evaluation.n_episodes,
                            cfg.seed + EVAL_SEED_OFFSET, cfg.adversary.victim_index)
    grid.write_csv(out / "grid.csv")
    grid.write_json(out / "grid.json")
    svg = out / "grid.svg"
    if args.no_plots:
        svg.unlink(missing_ok=True)
    else:
        from .plots import grid_heatmap
        grid_heatmap(grid, svg)
    _finish(out, "evaluate", cfg, {"evaluation": cfg.seed + EVAL_SEED_OFFSET})
    print(out)
    return EXIT_OK


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    from .analysis.activations import activation_report

    victim = _load_checkpoint(args.victim)
    normal = _labelled([args.normal], "--normal")
    opponents = {**normal, **_labelled(args.opponent, "--opponent")}
    game = make_env(cfg.env)
    opponents.setdefault("Rand", make_baseline("rand", game.action_dim))
    a = cfg.analysis
    out = _start_run(args, cfg, f"analysis-{cfg.env.env_name}-pose{cfg.env.pose_dim}-seed{cfg.seed}")
    bundle = out / "report"
    if bundle.exists():
        shutil.rmtree(bundle)
    report = activation_report(game, victim, opponents, next(iter(normal)), a.n_steps,
                               role_int(cfg.seed, "analysis"), cfg.adversary.victim_index, a.k_list, a.cov_types,
                               a.perplexity, a.tsne_rows_per_opponent, a.tsne_iters, max_iters=a.max_iters,
                               include_value_net=a.include_value_net)
    report.write(bundle, plots=not args.no_plots)
    _finish(out, "analyze", cfg, {"analysis": role_int(cfg.seed, "analysis")})
    print(out)
    return EXIT_OK


def cmd_sweep_dim(args, cfg: ExperimentConfig) -> int:
    out = _start_run(args, cfg, f"sweep-{cfg.env.env_name}-seed{cfg.seed}")
    seeds = [cfg.seed + s for s in cfg.sweep.seeds]
    rows = dimensionality_sweep(cfg.env, cfg.sweep.pose_dims, seeds, cfg.victim_ppo, cfg.adversary_ppo,
                                cfg.selfplay.pool_interval, cfg.evaluation.n_episodes)
    write_rows_csv(rows, out / "sweep.csv", SWEEP_FIELDS)
    medians = sweep_medians(rows)
    write_rows_csv([{"pose_dim": d, "median_adversary_win_rate": m} for d, m in medians.items()],
                   out / "sweep_medians.csv")
    if not args.no_plots:
        from .plots import sweep_plot
        sweep_plot(medians, out / "sweep.svg")
    _finish(out, "sweep-dim", cfg, {"seeds": seeds})
    print(out)
    return EXIT_OK


COMMANDS = {
    "train-victim": cmd_train_victim,
    "train-adversary": cmd_train_adversary,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "sweep-dim": cmd_sweep_dim,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help=f"output root (default: ${OUT_ENV_VAR}, then paths.out)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics for bit-exact reruns")
    common.add_argument("--no-plots", action="store_true", help="skip SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advpolicies", description="Adversarial-policy experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-victim", parents=[common], help="self-play training of both players")
    p = sub.add_parser("train-adversary", parents=[common], help="attack a frozen victim checkpoint")
    p.add_argument("--victim", required=True)
    p.add_argument("--resume", help="adversary checkpoint to continue from")
    p = sub.add_parser("evaluate", parents=[common], help="score grid over victims and opponents")
    p.add_argument("--victim", action="append", metavar="[LABEL=]PATH")
    p.add_argument("--opponent", action="append", metavar="[LABEL=]PATH")
    p.add_argument("--no-masks", action="store_true", help="omit the masked-victim rows")
    p = sub.add_parser("analyze", parents=[common], help="activation density and t-SNE report")
    p.add_argument("--victim", required=True)
    p.add_argument("--normal", required=True, metavar="[LABEL=]PATH", help="the victim's usual opponent")
    p.add_argument("--opponent", action="append", metavar="[LABEL=]PATH")
    sub.add_parser("sweep-dim", parents=[common], help="attack success across pose dimensions")
    return parser


@contextlib.contextmanager
def _thread_limit(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed})
        with _thread_limit(args.deterministic):
            return COMMANDS[args.command](args, cfg)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
