"""Diagonal-Gaussian policies, frozen snapshots and the Rand/Zero baselines.

Every policy-like object exposes ``act(obs, rng) -> actions`` on a batch of
observations; that is the only method an opponent or a victim needs.
Learners additionally expose ``sample_action`` / ``log_prob`` / ``value``.
Actions are returned unclipped; environments clip at their boundary so the
reported log densities stay exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neural import (
    ActivationTrace,
    MlpParams,
    forward,
    init_mlp,
    mlp_from_bytes,
    mlp_to_bytes,
)

LOG_2PI = float(np.log(2.0 * np.pi))
POLICY_MAGIC = b"ADVPOL\x00\x01"
POLICY_FORMAT_VERSION = 1


def _check_obs(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if not np.all(np.isfinite(obs)):
        raise FloatingPointError("non-finite observation passed to policy")
    return obs


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.size * (LOG_2PI + 1.0))


@dataclass
class GaussianPolicy:
    mean_net: MlpParams
    log_std: np.ndarray
    value_net: MlpParams
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, rng: np.random.Generator,
               hidden=(64, 64), log_std_init: float = 0.0, **metadata) -> GaussianPolicy:
        return cls(
            init_mlp(rng, obs_dim, action_dim, hidden, output_gain=0.01),
            np.full(action_dim, float(log_std_init)),
            init_mlp(rng, obs_dim, 1, hidden, output_gain=1.0),
            dict(metadata),
        )

    @property
    def obs_dim(self) -> int:
        return self.mean_net.input_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in optimizer order: mean net, log_std, value net."""
        return [*self.mean_net.arrays(), self.log_std, *self.value_net.arrays()]

    def copy(self) -> GaussianPolicy:
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy(), self.value_net.copy(),
                              dict(self.metadata))

    def mean(self, obs) -> np.ndarray:
        return forward(self.mean_net, _check_obs(obs))[0]

    def value(self, obs) -> np.ndarray:
        return forward(self.value_net, _check_obs(obs))[0][..., 0]

    def sample_action(self, obs, rng: np.random.Generator, capture: bool = False, deterministic: bool = False):
        """Returns ``(action, log_prob, value, trace)`` for a vector or batch."""
        obs = _check_obs(obs)
        mean, trace = forward(self.mean_net, obs, capture=capture)
        if deterministic:
            action = mean.copy()
        else:
            action = mean + self.std * rng.standard_normal(mean.shape)
        logp = gaussian_log_prob(mean, self.log_std, action)
        value = forward(self.value_net, obs)[0][..., 0]
        return action, logp, value, trace

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        return self.sample_action(obs, rng)[0]

    def log_prob(self, obs, action) -> np.ndarray:
        obs = _check_obs(obs)
        return gaussian_log_prob(self.mean(obs), self.log_std, np.asarray(action, dtype=np.float64))

    def activations(self, obs) -> ActivationTrace:
        return forward(self.mean_net, _check_obs(obs), capture=True)[1]

    def digest(self) -> str:
        return policy_digest(self)


class FrozenPolicy:
    """Immutable snapshot of a :class:`GaussianPolicy`.

    The wrapped arrays are copied and marked read-only, so any in-place update
    raises ``ValueError``; :meth:`arrays` is not offered at all.
    """

    def __init__(self, policy: GaussianPolicy, deterministic_eval: bool = False):
        snap = policy.copy()
        for a in snap.arrays():
            a.setflags(write=False)
        self._inner = snap
        self.deterministic_eval = deterministic_eval
        self._digest = policy_digest(snap)

    @property
    def obs_dim(self) -> int:
        return self._inner.obs_dim

    @property
    def action_dim(self) -> int:
        return self._inner.action_dim

    @property
    def metadata(self) -> dict:
        return dict(self._inner.metadata)

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        return self._inner.sample_action(obs, rng, deterministic=self.deterministic_eval)[0]

    def sample_action(self, obs, rng: np.random.Generator, capture: bool = False):
        return self._inner.sample_action(obs, rng, capture=capture, deterministic=self.deterministic_eval)

    def activations(self, obs) -> ActivationTrace:
        return self._inner.activations(obs)

    @property
    def network(self) -> GaussianPolicy:
        """The read-only wrapped policy (white-box access for trainers and analysis)."""
        return self._inner

    def thaw(self) -> GaussianPolicy:
        """A writable copy (e.g. to resume training from a snapshot)."""
        return self._inner.copy()

    def digest(self) -> str:
        current = policy_digest(self._inner)
        if current != self._digest:
            raise RuntimeError("frozen policy parameters changed")
        return current

    def __setattr__(self, name, value):
        if name in ("_inner", "_digest") and name in self.__dict__:
            raise AttributeError("FrozenPolicy parameters cannot be replaced")
        super().__setattr__(name, value)


class ZeroPolicy:
    """Lifeless baseline: always outputs the zero action."""

    def __init__(self, action_dim: int):
        if action_dim < 1:
            raise ValueError("action_dim must be >= 1")
        self.action_dim = action_dim

    def act(self, obs, rng=None) -> np.ndarray:
        obs = np.asarray(obs)
        return np.zeros((*obs.shape[:-1], self.action_dim))


class RandPolicy:
    """Baseline drawing every action uniformly from the box [low, high]."""

    def __init__(self, action_dim: int, low: float = -1.0, high: float = 1.0):
        if action_dim < 1:
            raise ValueError("action_dim must be >= 1")
        self.action_dim = action_dim
        self.low, self.high = low, high

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        obs = np.asarray(obs)
        return rng.uniform(self.low, self.high, size=(*obs.shape[:-1], self.action_dim))


def make_baseline(kind: str, action_dim: int):
    kind = kind.lower()
    if kind == "zero":
        return ZeroPolicy(action_dim)
    if kind == "rand":
        return RandPolicy(action_dim)
    raise ValueError(f"unknown baseline {kind!r} (expected 'rand' or 'zero')")


class MaskedPolicy:
    """Victim variant that sees a static value in place of the opponent slice."""

    def __init__(self, inner, observed_slice: slice | np.ndarray, static_value: np.ndarray):
        self.inner = inner
        self.index = observed_slice
        self.static_value = np.asarray(static_value, dtype=np.float64)

    def _mask(self, obs):
        obs = np.array(obs, dtype=np.float64, copy=True)
        obs[..., self.index] = self.static_value
        return obs

    def act(self, obs, rng):
        return self.inner.act(self._mask(obs), rng)

    def sample_action(self, obs, rng, capture: bool = False):
        return self.inner.sample_action(self._mask(obs), rng, capture=capture)


# --- checkpoints -------------------------------------------------------------
#
# magic, u32 version, u32 json length, metadata json (utf-8), mean net record,
# value net record, u32 action dim, float64 log_std. Net records use the
# neural-module binary format.

def policy_to_bytes(policy: GaussianPolicy) -> bytes:
    meta = json.dumps(policy.metadata, sort_keys=True).encode()
    return b"".join([
        POLICY_MAGIC,
        struct.pack("<II", POLICY_FORMAT_VERSION, len(meta)),
        meta,
        mlp_to_bytes(policy.mean_net),
        mlp_to_bytes(policy.value_net),
        struct.pack("<I", policy.log_std.size),
        np.ascontiguousarray(policy.log_std, dtype="<f8").tobytes(),
    ])


def policy_from_bytes(buf: bytes) -> GaussianPolicy:
    if buf[:8] != POLICY_MAGIC:
        raise ValueError("not a policy checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy checkpoint version {version}")
    off = 16
    metadata = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    mean_net, off = mlp_from_bytes(buf, off)
    value_net, off = mlp_from_bytes(buf, off)
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    log_std = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    return GaussianPolicy(mean_net, log_std, value_net, metadata)


def save_policy(policy: GaussianPolicy | FrozenPolicy, path) -> str:
    """Write a checkpoint and return its sha256 content digest."""
    if isinstance(policy, FrozenPolicy):
        policy = policy.thaw()
    data = policy_to_bytes(policy)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_policy(path) -> GaussianPolicy:
    return policy_from_bytes(Path(path).read_bytes())


def policy_digest(policy: GaussianPolicy) -> str:
    h = hashlib.sha256()
    for a in policy.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
