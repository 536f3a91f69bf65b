"""Victim activation capture and the density / embedding report built on it."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..envs import NO_MASK, MaskSpec
from ..errors import ConfigurationError
from ..game import NOT_DONE, MarkovGame, episode_generator, replace_rows, take_rows
from ..neural import forward
from ..rl import role_rng
from .gmm import COV_TYPES, GmmModel, SelectionRow, score_loglik, select_gmm
from .tsne import TsneEmbedding, tsne

log = logging.getLogger(__name__)

ACTIVATION_SALT = 3
SPLITS = ("train", "validation", "probe")


@dataclass
class ActivationDataset:
    matrix: np.ndarray  # (n, 128) concatenated hidden activations, in time order
    opponent: str
    victim: str
    split: str = "probe"
    observations: np.ndarray | None = None  # victim inputs, for replay checks
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def subset(self, rows, split: str | None = None) -> ActivationDataset:
        obs = None if self.observations is None else self.observations[rows]
        return ActivationDataset(self.matrix[rows], self.opponent, self.victim, split or self.split, obs,
                                 self.seed, dict(self.meta))

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``stem.npy`` (float64 matrix) and a ``stem.json`` sidecar."""
        stem = Path(stem)
        npy, side = stem.with_suffix(".npy"), stem.with_suffix(".json")
        np.save(npy, self.matrix)
        side.write_text(json.dumps({
            "opponent": self.opponent, "victim": self.victim, "split": self.split,
            "seed": self.seed, "rows": len(self), "width": int(self.matrix.shape[1]), **self.meta,
        }, indent=2, sort_keys=True))
        return npy, side

    @classmethod
    def load(cls, stem) -> ActivationDataset:
        stem = Path(stem)
        info = json.loads(stem.with_suffix(".json").read_text())
        return cls(np.load(stem.with_suffix(".npy")), info["opponent"], info["victim"], info["split"],
                   seed=info.get("seed", 0))


def _policy_net(victim):
    net = getattr(victim, "network", victim)
    if not hasattr(net, "mean_net"):
        raise ConfigurationError("victim does not support activation capture")
    return net


def record_activations(game: MarkovGame, victim, opponent, mask: MaskSpec | None = None, n_steps: int = 20000,
                       seed: int = 0, victim_index: int = 0, n_parallel: int = 16,
                       include_value_net: bool = False, victim_label: str = "victim",
                       opponent_label: str = "opponent") -> ActivationDataset:
    """Play episodes until ``n_steps`` victim decisions have been captured.

    Episodes run ``n_parallel`` at a time but are written out whole, in the
    order they finish, so the rows of one episode are contiguous and in time
    order.
    """
    net = _policy_net(victim)
    mask = mask or NO_MASK
    opp_index = 1 - victim_index
    rng_v = role_rng(seed, "act-victim")
    rng_o = role_rng(seed, "act-opponent")
    rows: list[np.ndarray] = []
    obs_rows: list[np.ndarray] = []
    captured = 0
    next_episode = 0
    state = None
    buffers: list[list] = [[] for _ in range(n_parallel)]
    obs_buffers: list[list] = [[] for _ in range(n_parallel)]

    def fresh(k):
        nonlocal next_episode
        out = []
        for _ in range(k):
            g = episode_generator(seed, ACTIVATION_SALT, next_episode, 0)
            out.append(g.random(game.reset_noise_dim) if game.reset_noise_dim else np.zeros(0))
            next_episode += 1
        return game.reset(np.stack(out))

    state = fresh(n_parallel)
    noise_rng = role_rng(seed, "act-noise")
    while captured < n_steps:
        v_obs = game.observe(state, victim_index, mask)
        _, trace = forward(net.mean_net, v_obs, capture=True)
        feats = trace.concatenated
        if include_value_net:
            _, vtrace = forward(net.value_net, v_obs, capture=True)
            feats = np.concatenate([feats, vtrace.concatenated], axis=1)
        a_v = (victim if hasattr(victim, "sample_action") else net).sample_action(v_obs, rng_v)[0]
        a_o = opponent.act(game.observe(state, opp_index), rng_o)
        joint = (a_v, a_o) if victim_index == 0 else (a_o, a_v)
        res = game.step(state, *joint, noise_rng.random((n_parallel, game.step_noise_dim)))
        for k in range(n_parallel):
            buffers[k].append(feats[k])
            obs_buffers[k].append(v_obs[k])
        done = np.flatnonzero(res.winner != NOT_DONE)
        state = res.state
        for k in done:
            rows.append(np.array(buffers[k]))
            obs_rows.append(np.array(obs_buffers[k]))
            captured += len(buffers[k])
            buffers[k], obs_buffers[k] = [], []
        if done.size:
            state = take_rows(state, slice(None))
            replace_rows(state, done, fresh(done.size))
    matrix = np.concatenate(rows)[:n_steps]
    observations = np.concatenate(obs_rows)[:n_steps]
    return ActivationDataset(matrix, opponent_label, victim_label, "probe", observations, seed,
                             {"masked": bool(mask.enabled), "include_value_net": include_value_net})


def replay_activations(victim, observations: np.ndarray) -> np.ndarray:
    return _policy_net(victim).activations(observations).concatenated


def block_split(ds: ActivationDataset, train_fraction: float = 0.8):
    """Contiguous time-block split into (train, validation)."""
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(slice(0, cut), "train"), ds.subset(slice(cut, None), "validation")


def dispersion(X, chunk: int = 2048) -> float:
    """Mean Euclidean distance over all unordered pairs of rows."""
    X = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        return 0.0
    sq = np.sum(X * X, axis=1)
    total = 0.0
    for s in range(0, n, chunk):
        block = X[s:s + chunk]
        d2 = sq[s:s + chunk, None] - 2.0 * block @ X.T + sq[None, :]
        d = np.sqrt(np.maximum(d2, 0.0))
        # count each pair once: only columns after the row index
        cols = np.arange(n)[None, :]
        rows = np.arange(s, s + block.shape[0])[:, None]
        total += float(np.sum(np.where(cols > rows, d, 0.0)))
    return total / (n * (n - 1) / 2)


@dataclass
class LikelihoodRow:
    label: str
    n: int
    mean_log_likelihood: float
    ci_low: float
    ci_high: float


@dataclass
class ActivationReport:
    likelihoods: list[LikelihoodRow]
    selection: list[SelectionRow]
    model: GmmModel
    dispersion: dict[str, float]
    embedding: TsneEmbedding | None
    embedding_labels: list[str]
    normal_label: str

    def likelihood(self, label: str) -> LikelihoodRow:
        return next(r for r in self.likelihoods if r.label == label)

    def write(self, out_dir, plots: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        p = out / "likelihood.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["opponent", "n", "mean_log_likelihood", "ci_low", "ci_high"])
            for r in self.likelihoods:
                w.writerow([r.label, r.n, repr(r.mean_log_likelihood), repr(r.ci_low), repr(r.ci_high)])
        paths.append(p)
        p = out / "gmm_selection.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["k", "cov_type", "n_parameters", "train_log_likelihood", "validation_log_likelihood",
                        "bic", "iterations", "converged", "selected"])
            for r in self.selection:
                chosen = r.k == self.model.k and r.cov_type == self.model.cov_type
                w.writerow([r.k, r.cov_type, r.n_parameters, repr(r.train_log_likelihood),
                            repr(r.validation_log_likelihood), repr(r.bic), r.iterations, r.converged, chosen])
        paths.append(p)
        p = out / "dispersion.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["opponent", "mean_pairwise_distance"])
            for label, v in self.dispersion.items():
                w.writerow([label, repr(v)])
        paths.append(p)
        if self.embedding is not None:
            p = out / "tsne.csv"
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["opponent", "x", "y"])
                for label, (x, y) in zip(self.embedding_labels, self.embedding.coordinates):
                    w.writerow([label, repr(float(x)), repr(float(y))])
            paths.append(p)
        if plots:
            from ..plots import likelihood_bars, tsne_scatter
            paths.append(likelihood_bars(self.likelihoods, out / "likelihood.svg"))
            if self.embedding is not None:
                paths.append(tsne_scatter(self.embedding.coordinates, self.embedding_labels, out / "tsne.svg"))
        return paths


def activation_report(game: MarkovGame, victim, opponents: dict, normal_label: str, n_steps: int = 20000,
                      seed: int = 0, victim_index: int = 0, k_list=(5, 10, 20, 40, 80), cov_types=COV_TYPES,
                      perplexity: float = 250.0, tsne_rows_per_opponent: int = 250, tsne_iters: int = 1000,
                      dispersion_rows: int = 4000, max_iters: int = 200, include_value_net: bool = False,
                      run_tsne: bool = True) -> ActivationReport:
    """Density and embedding analysis of a victim's activations per opponent.

    The GMM is fitted on the first 80% (by time) of the activations induced by
    ``opponents[normal_label]`` and the last 20% is held out as the
    validation split. The held-out split stands in for the normal opponent in
    the likelihood table; every other opponent is scored on its own recording.
    """
    if normal_label not in opponents:
        raise ConfigurationError(f"normal opponent {normal_label!r} not among {sorted(opponents)}")
    datasets = {}
    for i, (label, opp) in enumerate(opponents.items()):
        datasets[label] = record_activations(game, victim, opp, n_steps=n_steps, seed=seed + 7919 * i,
                                             victim_index=victim_index, include_value_net=include_value_net,
                                             opponent_label=label)
    train, val = block_split(datasets[normal_label])
    usable_k = [k for k in k_list if 10 * k <= len(train)]
    model, table = select_gmm(train, val, usable_k, cov_types, max_iters=max_iters, seed=seed)
    rows = []
    mean, (lo, hi) = score_loglik(model, val)
    rows.append(LikelihoodRow(f"{normal_label}-validation", len(val), mean, lo, hi))
    for label, ds in datasets.items():
        if label == normal_label:
            continue
        mean, (lo, hi) = score_loglik(model, ds)
        rows.append(LikelihoodRow(label, len(ds), mean, lo, hi))
    disp = {label: dispersion(_even_rows(ds.matrix, dispersion_rows)) for label, ds in datasets.items()}
    embedding, labels = None, []
    if run_tsne:
        pieces = []
        for label, ds in datasets.items():
            sub = _even_rows(ds.matrix, tsne_rows_per_opponent)
            pieces.append(sub)
            labels.extend([label] * sub.shape[0])
        X = np.concatenate(pieces)
        perp = perplexity
        if 3 * perp > X.shape[0]:
            perp = max(2.0, X.shape[0] / 3.0 - 1.0)
            log.warning("perplexity %.0f too large for %d points, using %.1f", perplexity, X.shape[0], perp)
        embedding = tsne(X, perp, n_iters=tsne_iters, seed=seed)
    return ActivationReport(rows, table, model, disp, embedding, labels, normal_label)


def _even_rows(X: np.ndarray, m: int) -> np.ndarray:
    if X.shape[0] <= m:
        return X
    return X[np.linspace(0, X.shape[0] - 1, m).round().astype(int)]
