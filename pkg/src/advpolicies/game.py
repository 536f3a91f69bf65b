"""Two-player Markov games and their reduction to a single-player MDP.

Games are vectorized: a state holds a leading batch axis of independent
environment instances, and every transition is a pure function of the state,
both actions and an explicit array of uniform noise. Noise comes from
per-episode Philox streams keyed by ``(seed, salt, slot, episode)``, so a
trajectory depends only on the seed and the policies, never on scheduling.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalFault

NOT_DONE = -1
TIE = 2  # winner code for a draw; 0 and 1 are player indices


class Winner(enum.Enum):
    ADVERSARY = "adversary"
    VICTIM = "victim"
    TIE = "tie"


@dataclass(frozen=True)
class EpisodeOutcome:
    winner: Winner
    steps_elapsed: int


@dataclass
class StepResult:
    state: object
    rewards: np.ndarray  # (n, 2) sparse game payoff
    done: np.ndarray  # (n,) bool
    winner: np.ndarray  # (n,) int: NOT_DONE, 0, 1 or TIE
    shaping: np.ndarray | None = None  # (n, 2) optional dense progress signal


class MarkovGame:
    """Interface of a batched two-player zero-sum game.

    Subclasses set ``action_dim``, ``max_steps``, ``reset_noise_dim`` and
    ``step_noise_dim`` and implement ``obs_dim``, ``reset``, ``step`` and
    ``observe``. ``step`` must be deterministic given its arguments.
    """

    action_dim: int
    max_steps: int
    reset_noise_dim: int = 0
    step_noise_dim: int = 0
    player_names: tuple[str, str] = ("player0", "player1")

    def obs_dim(self, player: int) -> int:
        raise NotImplementedError

    def reset(self, noise: np.ndarray):
        raise NotImplementedError

    def step(self, state, a0: np.ndarray, a1: np.ndarray, noise: np.ndarray) -> StepResult:
        raise NotImplementedError

    def observe(self, state, player: int, mask=None) -> np.ndarray:
        raise NotImplementedError

    def validate(self) -> None:
        if self.action_dim < 1:
            raise ConfigurationError("action_dim must be >= 1")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")


def payoff(winner: np.ndarray) -> np.ndarray:
    """Sparse terminal rewards (n, 2): +1 win, -1 loss, -1 each on a tie."""
    r = np.zeros((winner.shape[0], 2))
    for p in (0, 1):
        r[winner == p, p] = 1.0
        r[winner == 1 - p, p] = -1.0
    r[winner == TIE] = -1.0
    return r


def replace_rows(state, rows: np.ndarray, new):
    """Copy batch rows of ``new`` (a state of len(rows)) into ``state`` in place."""
    for f in dataclasses.fields(state):
        arr = getattr(state, f.name)
        if isinstance(arr, np.ndarray):
            arr[rows] = getattr(new, f.name)
    return state


def take_rows(state, rows):
    kw = {}
    for f in dataclasses.fields(state):
        v = getattr(state, f.name)
        kw[f.name] = v[rows].copy() if isinstance(v, np.ndarray) else v
    return type(state)(**kw)


def episode_generator(seed: int, salt: int, slot: int, episode: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, salt, slot, episode])))


class EpisodeStreams:
    """Per-slot noise streams; a fresh counter-based stream per episode."""

    def __init__(self, seed: int, n_slots: int, salt: int = 0):
        self.seed, self.salt = int(seed), int(salt)
        self.episode = np.zeros(n_slots, dtype=np.int64)
        self.gens: list[np.random.Generator | None] = [None] * n_slots

    def begin(self, slots, reset_dim: int) -> np.ndarray:
        """Start a new episode in each slot; returns its reset noise (len(slots), reset_dim)."""
        out = np.zeros((len(slots), reset_dim))
        for k, s in enumerate(slots):
            g = episode_generator(self.seed, self.salt, int(s), int(self.episode[s]))
            self.episode[s] += 1
            self.gens[s] = g
            if reset_dim:
                out[k] = g.random(reset_dim)
        return out

    def step_noise(self, dim: int) -> np.ndarray:
        n = len(self.gens)
        if dim == 0:
            return np.zeros((n, 0))
        return np.stack([g.random(dim) for g in self.gens])


class VecGame:
    """Runs ``n_envs`` instances of a game with automatic episode resets."""

    def __init__(self, game: MarkovGame, n_envs: int = 1, seed: int = 0, salt: int = 0):
        game.validate()
        self.game, self.n_envs = game, int(n_envs)
        self.streams = EpisodeStreams(seed, self.n_envs, salt)
        self.state = None
        self.t = np.zeros(self.n_envs, dtype=np.int64)

    def reset(self):
        noise = self.streams.begin(range(self.n_envs), self.game.reset_noise_dim)
        self.state = self.game.reset(noise)
        self.t[:] = 0
        return self.state

    def step(self, a0, a1) -> tuple[StepResult, np.ndarray]:
        """Advance every slot. Finished slots are reset in place.

        Returns the step result (whose ``state`` is the terminal state for
        finished slots) and the episode lengths (0 where not done).
        """
        if self.state is None:
            self.reset()
        noise = self.streams.step_noise(self.game.step_noise_dim)
        res = self.game.step(self.state, a0, a1, noise)
        self.t += 1
        lengths = np.where(res.done, self.t, 0)
        self.state = res.state
        done_rows = np.flatnonzero(res.done)
        if done_rows.size:
            res.state = take_rows(res.state, slice(None))
            fresh = self.game.reset(self.streams.begin(done_rows, self.game.reset_noise_dim))
            replace_rows(self.state, done_rows, fresh)
            self.t[done_rows] = 0
        return res, lengths


class BlackBoxVictim:
    """Action-sampling access to a victim, nothing else.

    Only the sampling callable (and an optional per-episode hook used by
    opponent pools) is retained; parameters and activations are unreachable
    through this object's interface.
    """

    __slots__ = ("_sample", "_begin", "obs_dim", "action_dim")

    def __init__(self, policy, obs_dim: int | None = None, action_dim: int | None = None):
        self._sample = policy.act
        self._begin = getattr(policy, "begin_episodes", None)
        self.obs_dim = obs_dim if obs_dim is not None else getattr(policy, "obs_dim", None)
        self.action_dim = action_dim if action_dim is not None else getattr(policy, "action_dim", None)

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self._sample(obs, rng), dtype=np.float64)

    def begin_episodes(self, slots: np.ndarray, rng: np.random.Generator) -> None:
        if self._begin is not None:
            self._begin(slots, rng)


class EmbeddedMdp:
    """The single-player MDP seen by the adversary when the victim is fixed.

    ``step(a_adv)`` samples the victim's action from its policy on the
    victim's own observation, advances the game with both actions and returns
    the adversary's observation and reward. Batched over ``n_envs`` slots
    with automatic resets.
    """

    def __init__(self, game: MarkovGame, victim, victim_index: int = 0, n_envs: int = 1, seed: int = 0,
                 victim_mask=None, shaping_coef: float = 0.0):
        if victim_index not in (0, 1):
            raise ConfigurationError("victim_index must be 0 or 1")
        victim = victim if isinstance(victim, BlackBoxVictim) else BlackBoxVictim(victim)
        if victim.obs_dim is not None and victim.obs_dim != game.obs_dim(victim_index):
            raise ConfigurationError(
                f"victim expects observations of dim {victim.obs_dim}, game provides {game.obs_dim(victim_index)}")
        if victim.action_dim is not None and victim.action_dim != game.action_dim:
            raise ConfigurationError(
                f"victim produces actions of dim {victim.action_dim}, game expects {game.action_dim}")
        self.game = game
        self.victim = victim
        self.victim_index = victim_index
        self.adversary_index = 1 - victim_index
        self.victim_mask = victim_mask
        self.shaping_coef = float(shaping_coef)
        self.vec = VecGame(game, n_envs, seed, salt=0)
        self._victim_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))

    @property
    def n_envs(self) -> int:
        return self.vec.n_envs

    @property
    def obs_dim(self) -> int:
        return self.game.obs_dim(self.adversary_index)

    @property
    def action_dim(self) -> int:
        return self.game.action_dim

    def _joint(self, a_adv, a_vic):
        return (a_vic, a_adv) if self.victim_index == 0 else (a_adv, a_vic)

    def victim_obs(self, state) -> np.ndarray:
        return self.game.observe(state, self.victim_index, self.victim_mask)

    def observe(self, state=None) -> np.ndarray:
        return self.game.observe(self.vec.state if state is None else state, self.adversary_index)

    def reset(self) -> np.ndarray:
        self.vec.reset()
        self.victim.begin_episodes(np.arange(self.n_envs), self._victim_rng)
        return self.observe()

    def transition(self, state, a_adv, victim_rng: np.random.Generator, noise=None):
        """Pure embedded transition for a batch of states (no resets).

        Returns ``(next_state, adversary_reward, done, winner)``.
        """
        a_vic = self.victim.sample(self.victim_obs(state), victim_rng)
        if noise is None:
            noise = np.zeros((np.shape(a_adv)[0], self.game.step_noise_dim))
        res = self.game.step(state, *self._joint(np.asarray(a_adv, dtype=np.float64), a_vic), noise)
        return res.state, res.rewards[:, self.adversary_index], res.done, res.winner

    def step(self, a_adv):
        """Returns ``(obs, reward, done, winner, lengths)`` for every slot.

        ``winner`` is relative to this embedding: +1 adversary win, -1 victim
        win, 0 tie (only meaningful where ``done``). ``obs`` is the first
        observation of the new episode in slots that just finished.
        """
        if self.vec.state is None:
            self.reset()
        a_vic = self.victim.sample(self.victim_obs(self.vec.state), self._victim_rng)
        res, lengths = self.vec.step(*self._joint(np.asarray(a_adv, dtype=np.float64), a_vic))
        reward = res.rewards[:, self.adversary_index].copy()
        if self.shaping_coef and res.shaping is not None:
            reward += self.shaping_coef * res.shaping[:, self.adversary_index]
        rel = np.zeros(self.n_envs, dtype=np.int64)
        rel[res.winner == self.adversary_index] = 1
        rel[res.winner == self.victim_index] = -1
        if res.done.any():
            self.victim.begin_episodes(np.flatnonzero(res.done), self._victim_rng)
        return self.observe(), reward, res.done.copy(), rel, lengths


def embed_victim(game: MarkovGame, victim, victim_index: int = 0, **kwargs) -> EmbeddedMdp:
    return EmbeddedMdp(game, victim, victim_index, **kwargs)


def outcome_from_code(code: int, steps: int) -> EpisodeOutcome:
    winner = {1: Winner.ADVERSARY, -1: Winner.VICTIM, 0: Winner.TIE}[int(code)]
    return EpisodeOutcome(winner, int(steps))


@dataclass
class TrajectoryBatch:
    """Time-major rollout storage: arrays are (T, n_envs, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    outcomes: list[EpisodeOutcome] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    def __len__(self) -> int:
        return self.n_steps

    def flat(self) -> dict[str, np.ndarray]:
        """Per-transition arrays flattened to (T * n_envs, ...), in time-major order."""
        out = {
            "obs": self.obs.reshape(self.n_steps, -1),
            "actions": self.actions.reshape(self.n_steps, -1),
            "log_probs": self.log_probs.reshape(-1),
            "values": self.values.reshape(-1),
        }
        if self.advantages is not None:
            out["advantages"] = self.advantages.reshape(-1)
            out["returns"] = self.returns.reshape(-1)
        return out

    def win_rate(self) -> float:
        if not self.outcomes:
            return float("nan")
        return sum(o.winner is Winner.ADVERSARY for o in self.outcomes) / len(self.outcomes)


def rollout(mdp: EmbeddedMdp, adversary, n_steps: int, rng) -> TrajectoryBatch:
    """Collect ``n_steps`` transitions (split evenly across the mdp's slots).

    The mdp keeps its state between calls, so consecutive rollouts continue
    the same episodes. ``adversary`` must offer ``sample_action`` (learners)
    or ``act`` (fixed baselines, which get log-prob and value 0).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n = mdp.n_envs
    if n_steps % n:
        raise ValueError(f"n_steps={n_steps} is not a multiple of n_envs={n}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    horizon = n_steps // n
    obs_dim, act_dim = mdp.obs_dim, mdp.action_dim
    obs_buf = np.zeros((horizon, n, obs_dim))
    act_buf = np.zeros((horizon, n, act_dim))
    logp_buf = np.zeros((horizon, n))
    rew_buf = np.zeros((horizon, n))
    val_buf = np.zeros((horizon, n))
    done_buf = np.zeros((horizon, n), dtype=bool)
    outcomes: list[EpisodeOutcome] = []

    obs = mdp.observe() if mdp.vec.state is not None else mdp.reset()
    sampler = getattr(adversary, "sample_action", None)
    for t in range(horizon):
        if not np.all(np.isfinite(obs)):
            raise NumericalFault("non-finite observation", step=t)
        if sampler is not None:
            action, logp, value, _ = sampler(obs, rng)
        else:
            action = np.asarray(adversary.act(obs, rng), dtype=np.float64)
            logp, value = np.zeros(n), np.zeros(n)
        if not np.all(np.isfinite(action)):
            raise NumericalFault("non-finite action", step=t)
        obs_buf[t], act_buf[t], logp_buf[t], val_buf[t] = obs, action, logp, value
        obs, reward, done, rel, lengths = mdp.step(action)
        rew_buf[t], done_buf[t] = reward, done
        for slot in np.flatnonzero(done):
            outcomes.append(outcome_from_code(rel[slot], lengths[slot]))
    if sampler is not None:
        last_values = adversary.value(obs)
    else:
        last_values = np.zeros(n)
    return TrajectoryBatch(obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf, last_values, outcomes)
