"""GAE, PPO with hand-derived gradients, self-play and adversary training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .envs import EnvConfig, make_env
from .errors import ConfigurationError, NumericalFault
from .game import EmbeddedMdp, TrajectoryBatch, rollout
from .neural import backward, forward_cached
from .policy import FrozenPolicy, GaussianPolicy, gaussian_entropy, gaussian_log_prob

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "win_rate", "policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")


@dataclass(frozen=True)
class PpoConfig:
    total_steps: int = 2_000_000
    batch_size: int = 4096
    n_envs: int = 8
    minibatches: int = 4
    epochs_per_update: int = 4
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5

    def __post_init__(self):
        if self.batch_size % self.minibatches:
            raise ConfigurationError("batch_size must be divisible by minibatches")
        if self.batch_size % self.n_envs:
            raise ConfigurationError("batch_size must be divisible by n_envs")
        for name in ("learning_rate", "gamma", "gae_lambda", "clip_range"):
            v = getattr(self, name)
            if not 0 < v <= 1 and not (name == "gae_lambda" and v == 0):
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if min(self.total_steps, self.n_envs, self.minibatches, self.epochs_per_update) < 1:
            raise ConfigurationError("step counts must be >= 1")

    def replace(self, **changes) -> PpoConfig:
        return PpoConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> PpoConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown ppo keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale settings; the desk default above only shrinks total_steps and batch_size.
FULL_SCALE_PPO = PpoConfig(total_steps=20_000_000, batch_size=16384, n_envs=8)


def compute_gae(batch: TrajectoryBatch, gamma: float, lam: float):
    """Generalized advantage estimates with episode masking.

    A done flag at step t means the transition ended its episode (time-limit
    truncation included), so nothing is bootstrapped across it. Stores and
    returns ``(advantages, returns)``; ``returns = advantages + values``.
    """
    T = batch.rewards.shape[0]
    adv = np.zeros_like(batch.rewards)
    last = np.zeros_like(batch.last_values)
    next_values = batch.last_values
    for t in range(T - 1, -1, -1):
        live = 1.0 - batch.dones[t]
        delta = batch.rewards[t] + gamma * next_values * live - batch.values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_values = batch.values[t]
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch.advantages, batch.returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip_range: float) -> np.ndarray:
    """Per-sample min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv)


@dataclass
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    surrogate: float
    loss: float


def ppo_loss_and_grad(policy: GaussianPolicy, obs, actions, old_log_probs, advantages, returns,
                      config: PpoConfig, need_grad: bool = True):
    """Total PPO loss (to minimize) and its gradient in ``policy.arrays()`` order.

    loss = -mean(clipped surrogate) + vf_coef * 0.5 * mean((V - R)^2)
           - ent_coef * entropy
    """
    m = obs.shape[0]
    mean, pi_cache = forward_cached(policy.mean_net, obs)
    value, v_cache = forward_cached(policy.value_net, obs)
    value = value[:, 0]
    logp = gaussian_log_prob(mean, policy.log_std, actions)
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range) * advantages
    surrogate = np.minimum(surr1, surr2)
    pg_loss = -surrogate.mean()
    vf_loss = 0.5 * np.mean((value - returns) ** 2)
    entropy = gaussian_entropy(policy.log_std)
    loss = pg_loss + config.vf_coef * vf_loss - config.ent_coef * entropy
    diff = logp - old_log_probs
    stats = LossStats(
        float(pg_loss), float(vf_loss), entropy,
        float(np.mean(np.abs(ratio - 1.0) > config.clip_range)),
        float(0.5 * np.mean(diff * diff)),
        float(surrogate.mean()), float(loss),
    )
    if not need_grad:
        return loss, None, stats
    # d loss / d logp: only samples whose unclipped term attains the min
    active = surr1 <= surr2
    dlogp = np.where(active, -advantages * ratio, 0.0) / m
    inv_var = np.exp(-2.0 * policy.log_std)
    resid = actions - mean
    dmean = dlogp[:, None] * resid * inv_var
    dlog_std = (dlogp[:, None] * (resid * resid * inv_var - 1.0)).sum(axis=0) - config.ent_coef
    dvalue = (config.vf_coef * (value - returns) / m)[:, None]
    grads = [*backward(policy.mean_net, pi_cache, dmean), dlog_std, *backward(policy.value_net, v_cache, dvalue)]
    return loss, grads, stats


class Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-5):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return [*self.m, *self.v, np.array([self.t], dtype=np.float64)]

    def save(self, path) -> None:
        np.savez(path, t=np.array(self.t), **{f"m{i}": m for i, m in enumerate(self.m)},
                 **{f"v{i}": v for i, v in enumerate(self.v)})

    def load(self, path) -> None:
        with np.load(path) as z:
            if len([k for k in z.files if k.startswith("m")]) != len(self.m):
                raise ConfigurationError("optimizer state does not match the policy")
            self.t = int(z["t"])
            for i in range(len(self.m)):
                self.m[i][...] = z[f"m{i}"]
                self.v[i][...] = z[f"v{i}"]


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def ppo_update(policy: GaussianPolicy, batch: TrajectoryBatch, config: PpoConfig, optimizer: Adam,
               rng: np.random.Generator, update_index: int = 0) -> tuple[GaussianPolicy, dict]:
    """Several epochs of minibatch PPO on one batch (parameters updated in place).

    On a non-finite loss the parameters are restored to their state before
    the update and :class:`NumericalFault` is raised.
    """
    if batch.advantages is None:
        raise ValueError("compute advantages before calling ppo_update")
    data = batch.flat()
    adv = normalize_advantages(data["advantages"])
    n = adv.shape[0]
    mb = n // config.minibatches
    backup = [a.copy() for a in policy.arrays()]
    history: list[LossStats] = []
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for k in range(config.minibatches):
            idx = order[k * mb:(k + 1) * mb]
            loss, grads, stats = ppo_loss_and_grad(
                policy, data["obs"][idx], data["actions"][idx], data["log_probs"][idx],
                adv[idx], data["returns"][idx], config)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                for a, b in zip(policy.arrays(), backup):
                    a[...] = b
                raise NumericalFault("non-finite PPO loss", step=update_index)
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(policy.arrays(), grads)
            history.append(stats)
    summary = {
        "policy_loss": float(np.mean([s.policy_loss for s in history])),
        "value_loss": float(np.mean([s.value_loss for s in history])),
        "entropy": history[-1].entropy,
        "clip_fraction": float(np.mean([s.clip_fraction for s in history])),
        "approx_kl": float(np.mean([s.approx_kl for s in history])),
    }
    return policy, summary


class OpponentPool:
    """Append-only list of frozen snapshots with their step stamps."""

    def __init__(self):
        self._entries: list[tuple[int, FrozenPolicy]] = []

    def add(self, step: int, policy: GaussianPolicy | FrozenPolicy) -> None:
        snap = policy if isinstance(policy, FrozenPolicy) else FrozenPolicy(policy)
        self._entries.append((int(step), snap))

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i) -> tuple[int, FrozenPolicy]:
        return self._entries[i]

    @property
    def entries(self) -> tuple[tuple[int, FrozenPolicy], ...]:
        return tuple(self._entries)

    def latest(self) -> FrozenPolicy:
        return self._entries[-1][1]

    def sample_index(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(0, len(self._entries), size=size)


class PoolOpponent:
    """Plays a uniformly sampled pool snapshot per episode in each env slot.

    Snapshot mean networks are stacked so one batched pass serves every slot
    whatever snapshot it was assigned.
    """

    def __init__(self, pool: OpponentPool, n_slots: int):
        self.pool = pool
        self.assigned = np.zeros(n_slots, dtype=np.int64)
        first = pool.latest()
        self.obs_dim, self.action_dim = first.obs_dim, first.action_dim
        self._stacked_len = 0

    def _stack(self) -> None:
        nets = [snap.network for _, snap in self.pool.entries]
        self._W = [np.stack([p.mean_net.weights[i] for p in nets]) for i in range(len(nets[0].mean_net.weights))]
        self._b = [np.stack([p.mean_net.biases[i] for p in nets]) for i in range(len(nets[0].mean_net.biases))]
        self._std = np.stack([np.exp(p.log_std) for p in nets])
        self._stacked_len = len(nets)

    def begin_episodes(self, slots, rng: np.random.Generator) -> None:
        slots = np.asarray(slots)
        self.assigned[slots] = self.pool.sample_index(rng, slots.size)

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        if self._stacked_len != len(self.pool):
            self._stack()
        idx = self.assigned[:obs.shape[0]]
        h = np.asarray(obs, dtype=np.float64)
        last = len(self._W) - 1
        for i, (W, b) in enumerate(zip(self._W, self._b)):
            h = np.einsum("ni,nio->no", h, W[idx]) + b[idx]
            if i < last:
                h = np.tanh(h)
        return h + self._std[idx] * rng.standard_normal(h.shape)


def role_seed(seed: int, *tags) -> np.random.SeedSequence:
    """Sub-seed for a named role, e.g. ``role_seed(7, "selfplay", 0)``."""
    words = [int(seed)] + [t if isinstance(t, int) else int.from_bytes(str(t).encode()[:8].ljust(8, b"\0"), "little")
                           for t in tags]
    return np.random.SeedSequence(words)


def role_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(role_seed(seed, *tags)))


def role_int(seed: int, *tags) -> int:
    return int(role_seed(seed, *tags).generate_state(1, np.uint32)[0])


@dataclass
class SelfPlayResult:
    policies: list[GaussianPolicy]
    pools: list[OpponentPool]
    metrics: list[list[dict]]  # per player, one row per update
    steps: int

    def checkpoints(self, player: int) -> tuple[tuple[int, FrozenPolicy], ...]:
        return self.pools[player].entries


def _tag_policy(policy: GaussianPolicy, env_config: EnvConfig, role: str, step: int) -> None:
    policy.metadata.update(env_name=env_config.env_name, pose_dim=env_config.pose_dim, role=role, step=int(step))


def train_selfplay(env_config: EnvConfig, ppo_config: PpoConfig, pool_interval: int, rng_seed: int,
                   shaping_fraction: float = 0.1, shaping_scale: float = 1.0, progress=None) -> SelfPlayResult:
    """Train both players against uniformly sampled old versions of each other.

    A frozen snapshot of each player joins its pool every ``pool_interval``
    steps (the initial policies are snapshot 0). A dense progress reward is
    added with weight annealed linearly from ``shaping_scale`` to zero over
    the first ``shaping_fraction`` of training.
    """
    if pool_interval < 1:
        raise ConfigurationError("pool_interval must be >= 1")
    game = make_env(env_config)
    roles = game.player_names
    policies = []
    for p in (0, 1):
        pol = GaussianPolicy.create(game.obs_dim(p), game.action_dim, role_rng(rng_seed, "init", p))
        _tag_policy(pol, env_config, roles[p], 0)
        policies.append(pol)
    pools = [OpponentPool(), OpponentPool()]
    for p in (0, 1):
        pools[p].add(0, policies[p])
    mdps = [
        EmbeddedMdp(game, PoolOpponent(pools[1 - p], ppo_config.n_envs), victim_index=1 - p,
                    n_envs=ppo_config.n_envs, seed=role_int(rng_seed, "env", p))
        for p in (0, 1)
    ]
    optimizers = [Adam(pol.arrays(), ppo_config.learning_rate, eps=ppo_config.adam_eps) for pol in policies]
    rngs = [role_rng(rng_seed, "learner", p) for p in (0, 1)]
    metrics: list[list[dict]] = [[], []]
    steps, update = 0, 0
    next_snapshot = pool_interval
    shaping_steps = shaping_fraction * ppo_config.total_steps
    while steps < ppo_config.total_steps:
        coef = shaping_scale * max(0.0, 1.0 - steps / shaping_steps) if shaping_steps > 0 else 0.0
        for p in (0, 1):
            mdps[p].shaping_coef = coef
            batch = rollout(mdps[p], policies[p], ppo_config.batch_size, rngs[p])
            compute_gae(batch, ppo_config.gamma, ppo_config.gae_lambda)
            _, stats = ppo_update(policies[p], batch, ppo_config, optimizers[p], rngs[p], update)
            metrics[p].append({"step": steps + ppo_config.batch_size, "win_rate": batch.win_rate(), **stats})
        steps += ppo_config.batch_size
        update += 1
        while steps >= next_snapshot:
            for p in (0, 1):
                _tag_policy(policies[p], env_config, roles[p], next_snapshot)
                pools[p].add(next_snapshot, policies[p])
            next_snapshot += pool_interval
        if progress is not None:
            progress(steps, metrics)
    for p in (0, 1):
        _tag_policy(policies[p], env_config, roles[p], steps)
    return SelfPlayResult(policies, pools, metrics, steps)


@dataclass
class AdversaryResult:
    policy: GaussianPolicy
    checkpoints: list[tuple[int, FrozenPolicy]]
    metrics: list[dict]
    steps: int
    optimizer: Adam | None = field(default=None, repr=False)

    def curve(self) -> list[tuple[int, float]]:
        """Training win rate at each checkpoint step (mean over the preceding interval)."""
        out = []
        for step, _ in self.checkpoints:
            rows = [m for m in self.metrics if m["step"] <= step]
            recent = [m["win_rate"] for m in rows[-4:] if not np.isnan(m["win_rate"])]
            out.append((step, float(np.mean(recent)) if recent else float("nan")))
        return out


def train_adversary(env_config: EnvConfig, victim: FrozenPolicy, ppo_config: PpoConfig, rng_seed: int,
                    victim_index: int = 0, checkpoint_interval: int | None = None,
                    init_policy: GaussianPolicy | None = None, start_step: int = 0,
                    optimizer: Adam | None = None, progress=None) -> AdversaryResult:
    """Train an adversarial policy against a frozen victim with sparse rewards only.

    The victim is reached exclusively through its action sampler. Resuming
    is supported via ``init_policy`` / ``start_step`` (and optionally the
    previous ``optimizer``); the step counter continues from ``start_step``.
    """
    game = make_env(env_config)
    expected_role = game.player_names[victim_index]
    role = getattr(victim, "metadata", {}).get("role")
    if role is not None and role != expected_role:
        raise ConfigurationError(f"victim has role {role!r} but player {victim_index} is the {expected_role}")
    adv_role = game.player_names[1 - victim_index]
    if init_policy is None:
        policy = GaussianPolicy.create(game.obs_dim(1 - victim_index), game.action_dim,
                                       role_rng(rng_seed, "adv-init"))
        _tag_policy(policy, env_config, adv_role, 0)
    else:
        policy = init_policy
    policy.metadata["kind"] = "adversary"
    mdp = EmbeddedMdp(game, victim, victim_index=victim_index, n_envs=ppo_config.n_envs,
                      seed=role_int(rng_seed, "adv-env", start_step))
    opt = optimizer or Adam(policy.arrays(), ppo_config.learning_rate, eps=ppo_config.adam_eps)
    rng = role_rng(rng_seed, "adv-learner", start_step)
    interval = checkpoint_interval or max(ppo_config.batch_size, ppo_config.total_steps // 10)
    checkpoints: list[tuple[int, FrozenPolicy]] = []
    if start_step == 0:
        checkpoints.append((0, FrozenPolicy(policy)))
    metrics: list[dict] = []
    steps = start_step
    end = start_step + ppo_config.total_steps
    next_ckpt = start_step + interval
    update = 0
    while steps < end:
        batch = rollout(mdp, policy, ppo_config.batch_size, rng)
        compute_gae(batch, ppo_config.gamma, ppo_config.gae_lambda)
        _, stats = ppo_update(policy, batch, ppo_config, opt, rng, update)
        steps += ppo_config.batch_size
        update += 1
        metrics.append({"step": steps, "win_rate": batch.win_rate(), **stats})
        if steps >= next_ckpt or steps >= end:
            _tag_policy(policy, env_config, adv_role, steps)
            checkpoints.append((steps, FrozenPolicy(policy)))
            next_ckpt = steps + interval
        if progress is not None:
            progress(steps, metrics)
    return AdversaryResult(policy, checkpoints, metrics, steps, opt)
