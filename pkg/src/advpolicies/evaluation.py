"""Match harness: win/loss/tie statistics, score grids and win-rate curves.

Seeding convention: episode ``e`` of a match with seed ``s`` draws its
initial state from the stream keyed ``(s, EVAL_SALT, e)``; policy sampling
uses role-tagged generators derived from ``s``. Evaluation seeds are offset
by :data:`EVAL_SEED_OFFSET` from training seeds so the two never collide.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import NO_MASK, MaskSpec, PointMassGame, make_env
from .errors import ConfigurationError
from .game import NOT_DONE, TIE, MarkovGame, episode_generator, replace_rows, take_rows
from .policy import FrozenPolicy, make_baseline
from .rl import role_int, role_rng, train_adversary, train_selfplay

EVAL_SALT = 2
EVAL_SEED_OFFSET = 1_000_003
Z95 = 1.959963984540054


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


@dataclass
class MatchStats:
    n_episodes: int
    wins_opponent: int
    wins_victim: int
    ties: int
    mean_episode_length: float
    seed: int
    ci_low: float = 0.0
    ci_high: float = 1.0

    def __post_init__(self):
        if self.wins_opponent + self.wins_victim + self.ties != self.n_episodes:
            raise ValueError("outcome counts do not sum to n_episodes")
        self.ci_low, self.ci_high = wilson_interval(self.wins_opponent, self.n_episodes)

    @property
    def opponent_win_rate(self) -> float:
        return self.wins_opponent / self.n_episodes

    @property
    def victim_win_rate(self) -> float:
        return self.wins_victim / self.n_episodes

    @property
    def tie_rate(self) -> float:
        return self.ties / self.n_episodes

    def to_row(self) -> dict:
        return {**asdict(self), "opponent_win_rate": self.opponent_win_rate,
                "victim_win_rate": self.victim_win_rate, "tie_rate": self.tie_rate}


def _check_dims(game: MarkovGame, policy, player: int, label: str) -> None:
    obs_dim = getattr(policy, "obs_dim", None)
    act_dim = getattr(policy, "action_dim", None)
    if obs_dim is not None and obs_dim != game.obs_dim(player):
        raise ConfigurationError(f"{label} expects obs dim {obs_dim}, game gives {game.obs_dim(player)}")
    if act_dim is not None and act_dim != game.action_dim:
        raise ConfigurationError(f"{label} outputs {act_dim} actions, game expects {game.action_dim}")


def play_match(game: MarkovGame, opponent, victim, mask: MaskSpec | None = None, n_episodes: int = 1000,
               seed: int = 0, victim_index: int = 0, chunk: int = 1000) -> MatchStats:
    """Play ``n_episodes`` between stochastic policies; all episodes run batched."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    _check_dims(game, victim, victim_index, "victim")
    _check_dims(game, opponent, 1 - victim_index, "opponent")
    mask = mask or NO_MASK
    opp_index = 1 - victim_index
    rng_v = role_rng(seed, "match-victim")
    rng_o = role_rng(seed, "match-opponent")
    wins_o = wins_v = ties = 0
    total_len = 0
    for start in range(0, n_episodes, chunk):
        ids = np.arange(start, min(n_episodes, start + chunk))
        gens = [episode_generator(seed, EVAL_SALT, int(e), 0) for e in ids]
        noise = np.stack([g.random(game.reset_noise_dim) for g in gens]) if game.reset_noise_dim else \
            np.zeros((ids.size, 0))
        state = game.reset(noise)
        active = np.arange(ids.size)
        while active.size:
            sub = take_rows(state, active)
            a_v = victim.act(game.observe(sub, victim_index, mask), rng_v)
            a_o = opponent.act(game.observe(sub, opp_index), rng_o)
            joint = (a_v, a_o) if victim_index == 0 else (a_o, a_v)
            step_noise = (np.stack([gens[i].random(game.step_noise_dim) for i in active])
                          if game.step_noise_dim else np.zeros((active.size, 0)))
            res = game.step(sub, *joint, step_noise)
            replace_rows(state, active, res.state)
            w = res.winner[res.done]
            wins_o += int(np.sum(w == opp_index))
            wins_v += int(np.sum(w == victim_index))
            ties += int(np.sum(w == TIE))
            total_len += int(np.sum(res.state.t[res.done]))
            active = active[res.winner == NOT_DONE]
    return MatchStats(n_episodes, wins_o, wins_v, ties, total_len / n_episodes, seed)


# --- score grids -------------------------------------------------------------

MASKED_SUFFIX = "-masked"


@dataclass
class ScoreGrid:
    victims: list[str]  # row labels, masked variants included
    opponents: list[str]
    cells: dict[tuple[str, str], MatchStats]
    n_episodes: int
    seed: int
    meta: dict = field(default_factory=dict)

    def cell(self, victim: str, opponent: str) -> MatchStats:
        return self.cells[(victim, opponent)]

    def rate(self, victim: str, opponent: str) -> float:
        return self.cells[(victim, opponent)].opponent_win_rate

    def matrix(self) -> np.ndarray:
        return np.array([[self.rate(v, o) for o in self.opponents] for v in self.victims])

    def rows(self) -> list[dict]:
        return [{"victim": v, "opponent": o, **self.cells[(v, o)].to_row()}
                for v in self.victims for o in self.opponents]

    def write_csv(self, path) -> Path:
        rows = self.rows()
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        doc = {"victims": self.victims, "opponents": self.opponents, "n_episodes": self.n_episodes,
               "seed": self.seed, "meta": self.meta, "cells": self.rows()}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path


def build_score_grid(game: PointMassGame, victims: dict, opponents: dict, masks=(False, True),
                     n_episodes: int = 1000, seed: int = 0, victim_index: int = 0) -> ScoreGrid:
    """Cross every victim (and its masked variant) with every opponent.

    Cell ``i`` in row-major order uses its own seed derived from ``(seed, i)``
    so no two cells share episode streams.
    """
    if not victims or not opponents:
        raise ConfigurationError("score grid needs at least one victim and one opponent")
    rows: list[tuple[str, object, MaskSpec]] = []
    for label, pol in victims.items():
        for masked in masks:
            mask = game.default_mask(victim_index) if masked else NO_MASK
            rows.append((label + MASKED_SUFFIX if masked else label, pol, mask))
    cells = {}
    i = 0
    for row_label, pol, mask in rows:
        for opp_label, opp in opponents.items():
            cell_seed = role_int(seed, "grid-cell", i)
            cells[(row_label, opp_label)] = play_match(game, opp, pol, mask, n_episodes, cell_seed, victim_index)
            i += 1
    return ScoreGrid([r[0] for r in rows], list(opponents), cells, n_episodes, seed,
                     {"env_name": game.env_name, "victim_index": victim_index})


# --- curves ------------------------------------------------------------------

@dataclass
class CurvePoint:
    step: int
    win_rate: float
    ci_low: float
    ci_high: float
    n_episodes: int


def win_rate_curve(game: MarkovGame, checkpoints, victim, n_episodes: int = 1000, seed: int = 0,
                   victim_index: int = 0) -> list[CurvePoint]:
    """Evaluate every ``(step, adversary)`` checkpoint against one fixed victim.

    All points share ``seed``, so the last point equals ``play_match`` on the
    final checkpoint with that seed.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ConfigurationError("a curve needs at least two checkpoints")
    out = []
    for step, adv in checkpoints:
        st = play_match(game, adv, victim, NO_MASK, n_episodes, seed, victim_index)
        out.append(CurvePoint(int(step), st.opponent_win_rate, st.ci_low, st.ci_high, n_episodes))
    return out


def write_curve_csv(points: list[CurvePoint], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "win_rate", "ci_low", "ci_high", "n_episodes"])
        for p in points:
            w.writerow([p.step, repr(p.win_rate), repr(p.ci_low), repr(p.ci_high), p.n_episodes])
    return path


def median_index(values) -> int:
    """Index of the median entry (lower median for even counts, lowest index on ties)."""
    values = list(values)
    if not values:
        raise ValueError("empty sequence")
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    return order[(len(values) - 1) // 2]


# --- the attack experiment and the dimensionality sweep ------------------------

@dataclass
class AttackRun:
    """One victim trained by self-play, attacked, and evaluated."""

    env_config: object
    seed: int
    victim: object  # FrozenPolicy
    normal_opponent: object  # FrozenPolicy, the victim's final self-play partner
    adversary: object  # FrozenPolicy
    adversary_checkpoints: list
    grid: ScoreGrid
    victim_steps: int
    adversary_steps: int

    def rate(self, opponent: str, masked: bool = False) -> float:
        return self.grid.rate("victim" + (MASKED_SUFFIX if masked else ""), opponent)


def attack_experiment(env_config, seed: int, victim_ppo, adversary_ppo, pool_interval: int,
                      n_episodes: int = 1000, victim_index: int = 0, progress=None) -> AttackRun:
    """Self-play a victim, attack it, and grid it against Adv, Normal, Rand and Zero.

    Evaluation uses ``seed + EVAL_SEED_OFFSET`` so it never shares streams with
    training.
    """
    game = make_env(env_config)
    sp = train_selfplay(env_config, victim_ppo, pool_interval, seed, progress=progress)
    victim = FrozenPolicy(sp.policies[victim_index])
    normal = FrozenPolicy(sp.policies[1 - victim_index])
    adv = train_adversary(env_config, victim, adversary_ppo, role_int(seed, "adversary"), victim_index,
                          progress=progress)
    opponents = {"Adv": adv.checkpoints[-1][1], "Normal": normal,
                 "Rand": make_baseline("rand", game.action_dim), "Zero": make_baseline("zero", game.action_dim)}
    grid = build_score_grid(game, {"victim": victim}, opponents, (False, True), n_episodes,
                            seed + EVAL_SEED_OFFSET, victim_index)
    return AttackRun(env_config, seed, victim, normal, adv.checkpoints[-1][1], adv.checkpoints, grid,
                     sp.steps, adv.steps)


SWEEP_FIELDS = ["pose_dim", "seed", "adversary_win_rate", "ci_low", "ci_high", "normal_win_rate",
                "rand_win_rate", "zero_win_rate", "masked_adversary_win_rate", "masked_normal_win_rate",
                "n_episodes", "victim_steps", "adversary_steps"]


def sweep_row(run: AttackRun) -> dict:
    adv = run.grid.cell("victim", "Adv")
    return {
        "pose_dim": run.env_config.pose_dim, "seed": run.seed,
        "adversary_win_rate": adv.opponent_win_rate, "ci_low": adv.ci_low, "ci_high": adv.ci_high,
        "normal_win_rate": run.rate("Normal"), "rand_win_rate": run.rate("Rand"),
        "zero_win_rate": run.rate("Zero"), "masked_adversary_win_rate": run.rate("Adv", True),
        "masked_normal_win_rate": run.rate("Normal", True), "n_episodes": adv.n_episodes,
        "victim_steps": run.victim_steps, "adversary_steps": run.adversary_steps,
    }


def dimensionality_sweep(template, pose_dims, seeds, victim_ppo, adversary_ppo, pool_interval: int,
                         n_episodes: int = 1000, progress=None, keep_runs: bool = False):
    """Rerun :func:`attack_experiment` for every (pose_dim, seed) pair.

    Returns the table rows (``len(pose_dims) * len(seeds)`` of them), plus the
    runs themselves when ``keep_runs``.
    """
    pose_dims = list(pose_dims)
    if pose_dims != sorted(pose_dims):
        raise ConfigurationError("pose_dims must be sorted ascending")
    rows, runs = [], []
    for pd in pose_dims:
        cfg = template.replace(pose_dim=pd)
        for s in seeds:
            run = attack_experiment(cfg, s, victim_ppo, adversary_ppo, pool_interval, n_episodes,
                                    progress=progress)
            rows.append(sweep_row(run))
            if keep_runs:
                runs.append(run)
    return (rows, runs) if keep_runs else rows


def sweep_medians(rows: list[dict], key: str = "adversary_win_rate") -> dict[int, float]:
    by_dim: dict[int, list[float]] = {}
    for r in rows:
        by_dim.setdefault(r["pose_dim"], []).append(r[key])
    return {pd: float(np.median(v)) for pd, v in sorted(by_dim.items())}


def write_rows_csv(rows: list[dict], path, fields=None) -> Path:
    path = Path(path)
    fields = fields or list(rows[0])
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path
