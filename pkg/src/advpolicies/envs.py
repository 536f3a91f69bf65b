"""Point-mass zero-sum games with an observation-only pose channel.

Each player is a planar point mass that also carries a ``pose`` vector. The
pose follows its action target with a first-order lag and has no effect on
the dynamics or on who wins: it only shows up in the opponent's observation.
That makes the opponent-observable slice (position + pose) an attack surface
whose size is set by ``pose_dim``.

CorridorPass: player 0 is the runner, player 1 the blocker. The runner wins
by crossing the finish line; the blocker wins by tagging the runner or when
time runs out, so there are no draws.

DiskSumo: symmetric. Overlapping players repel each other; a player that
leaves the disk loses, both leaving at once or a timeout is a tie.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigurationError, NumericalFault
from .game import NOT_DONE, TIE, MarkovGame, StepResult, payoff

ENV_NAMES = ("CorridorPass", "DiskSumo")


@dataclass(frozen=True)
class EnvConfig:
    env_name: str = "CorridorPass"
    pose_dim: int = 24
    arena_scale: float = 1.0
    time_limit: int = 100
    dt: float = 0.05
    max_speed: float = 1.0
    force_limit: float = 4.0  # acceleration at |action| = 1
    drag: float = 1.0
    pose_lag: float = 0.5  # fraction of the gap to the pose target closed per step
    tag_radius: float = 0.15  # CorridorPass capture distance (arena units)
    blocker_speed_ratio: float = 0.3
    start_spread: tuple = (0.2, 1.0)  # CorridorPass start y-range per player, fraction of the half-width
    contact_radius: float = 0.15  # DiskSumo body radius (arena units)
    contact_stiffness: float = 40.0
    squash: str = "clip"  # how actions are mapped into [-1, 1]: "clip" or "tanh"
    observe_opponent_velocity: bool = False

    def __post_init__(self):
        if self.env_name not in ENV_NAMES:
            raise ConfigurationError(f"unknown env_name {self.env_name!r}; expected one of {ENV_NAMES}")
        if self.pose_dim < 0:
            raise ConfigurationError("pose_dim must be >= 0")
        if self.time_limit < 1:
            raise ConfigurationError("time_limit must be >= 1")
        if not (self.dt > 0 and self.arena_scale > 0 and self.max_speed > 0):
            raise ConfigurationError("dt, arena_scale and max_speed must be positive")
        if not 0 < self.pose_lag <= 1:
            raise ConfigurationError("pose_lag must lie in (0, 1]")
        spread = tuple(float(v) for v in self.start_spread)
        if len(spread) != 2 or not all(0 <= v <= 1 for v in spread):
            raise ConfigurationError("start_spread must be two fractions in [0, 1]")
        object.__setattr__(self, "start_spread", spread)
        if self.squash not in ("clip", "tanh"):
            raise ConfigurationError("squash must be 'clip' or 'tanh'")

    def replace(self, **changes) -> EnvConfig:
        return EnvConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ObservationLayout:
    own_position: slice
    own_velocity: slice
    own_pose: slice
    opponent_position: slice
    opponent_velocity: slice | None
    opponent_pose: slice
    total_dim: int

    @classmethod
    def build(cls, pose_dim: int, opponent_velocity: bool = False) -> ObservationLayout:
        i = 0

        def take(n):
            nonlocal i
            s = slice(i, i + n)
            i += n
            return s

        own_pos, own_vel, own_pose = take(2), take(2), take(pose_dim)
        opp_pos = take(2)
        opp_vel = take(2) if opponent_velocity else None
        opp_pose = take(pose_dim)
        return cls(own_pos, own_vel, own_pose, opp_pos, opp_vel, opp_pose, i)

    @property
    def maskable(self) -> slice:
        """The opponent-controlled slice P (contiguous by construction)."""
        return slice(self.opponent_position.start, self.opponent_pose.stop)

    @property
    def maskable_dim(self) -> int:
        return self.maskable.stop - self.maskable.start

    def slices(self) -> list[slice]:
        return [s for s in (self.own_position, self.own_velocity, self.own_pose, self.opponent_position,
                            self.opponent_velocity, self.opponent_pose) if s is not None]


@dataclass(frozen=True)
class MaskSpec:
    enabled: bool = False
    static_value: np.ndarray | None = None

    def __post_init__(self):
        if self.enabled and self.static_value is None:
            raise ConfigurationError("an enabled mask needs a static_value")


NO_MASK = MaskSpec()


@dataclass
class GameState:
    pos: np.ndarray  # (n, 2 players, 2)
    vel: np.ndarray  # (n, 2, 2)
    pose: np.ndarray  # (n, 2, pose_dim)
    t: np.ndarray  # (n,) steps elapsed


def squash_actions(a: np.ndarray, mode: str = "clip") -> np.ndarray:
    """Map raw actions into the unit box.

    The first two entries form a planar force. Under ``clip`` the force vector
    is shrunk radially onto the unit disk (so its direction always follows the
    raw action) and pose entries are clipped to [-1, 1]; ``tanh`` squashes
    every entry independently.
    """
    if mode == "tanh":
        return np.tanh(a)
    out = np.clip(a, -1.0, 1.0)
    force = a[..., :2]
    norm = np.linalg.norm(force, axis=-1, keepdims=True)
    out[..., :2] = force / np.maximum(norm, 1.0)
    return out


def step_physics(state: GameState, a0: np.ndarray, a1: np.ndarray, config: EnvConfig,
                 speed_limits=(1.0, 1.0), extra_accel: np.ndarray | None = None) -> GameState:
    """One integration step shared by both games (no win logic, no walls).

    Forces come from the first two action entries, clipped and scaled by
    ``force_limit``; velocity follows semi-implicit Euler with linear drag and
    is capped at ``max_speed * speed_limits[p]``; poses move a fraction
    ``pose_lag`` of the way to the remaining action entries.
    """
    a = np.stack([np.asarray(a0, dtype=np.float64), np.asarray(a1, dtype=np.float64)], axis=1)
    if not np.all(np.isfinite(a)):
        raise NumericalFault("non-finite action")
    a = squash_actions(a, config.squash)
    accel = config.force_limit * config.arena_scale * a[..., :2]
    if extra_accel is not None:
        accel = accel + extra_accel
    vel = state.vel * (1.0 - config.drag * config.dt) + accel * config.dt
    cap = config.max_speed * config.arena_scale * np.asarray(speed_limits, dtype=np.float64)[None, :]
    speed = np.linalg.norm(vel, axis=-1)
    over = speed > cap
    if over.any():
        vel = np.where(over[..., None], vel * (cap / np.maximum(speed, 1e-300))[..., None], vel)
    pos = state.pos + vel * config.dt
    pose = state.pose + config.pose_lag * (a[..., 2:] - state.pose)
    return GameState(pos, vel, pose, state.t + 1)


class PointMassGame(MarkovGame):
    reset_noise_dim = 4
    step_noise_dim = 0

    def __init__(self, config: EnvConfig):
        self.config = config
        self.action_dim = 2 + config.pose_dim
        self.max_steps = config.time_limit
        self.layout = ObservationLayout.build(config.pose_dim, config.observe_opponent_velocity)
        s = config.arena_scale
        if config.env_name == "CorridorPass":
            self.player_names = ("runner", "blocker")
            self.half_length, self.half_width = 1.0 * s, 0.5 * s
            self.finish_x = 0.8 * s
            self.speed_limits = (1.0, config.blocker_speed_ratio)
            # start regions: (x_low, x_high, y_low, y_high) per player
            yr, yb = (f * self.half_width for f in config.start_spread)
            self.start = ((-0.8 * s, -0.8 * s, -yr, yr), (0.0, 0.2 * s, -yb, yb))
        else:
            self.player_names = ("player0", "player1")
            self.radius = 1.0 * s
            self.speed_limits = (1.0, 1.0)
            self.start = ((-0.6 * s, -0.4 * s, -0.2 * s, 0.2 * s), (0.4 * s, 0.6 * s, -0.2 * s, 0.2 * s))

    @property
    def env_name(self) -> str:
        return self.config.env_name

    def obs_dim(self, player: int = 0) -> int:
        return self.layout.total_dim

    def canonical_start(self, player: int) -> np.ndarray:
        x0, x1, y0, y1 = self.start[player]
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])

    def default_mask(self, player: int) -> MaskSpec:
        """Mask showing the opponent at its canonical start with a zero pose."""
        value = np.zeros(self.layout.maskable_dim)
        value[:2] = self.canonical_start(1 - player)
        return MaskSpec(True, value)

    def reset(self, noise: np.ndarray) -> GameState:
        n = noise.shape[0]
        pos = np.zeros((n, 2, 2))
        for p in (0, 1):
            x0, x1, y0, y1 = self.start[p]
            pos[:, p, 0] = x0 + (x1 - x0) * noise[:, 2 * p]
            pos[:, p, 1] = y0 + (y1 - y0) * noise[:, 2 * p + 1]
        return GameState(pos, np.zeros((n, 2, 2)), np.zeros((n, 2, self.config.pose_dim)),
                         np.zeros(n, dtype=np.int64))

    def _contact_accel(self, pos: np.ndarray) -> np.ndarray:
        d = pos[:, 0] - pos[:, 1]
        dist = np.linalg.norm(d, axis=-1)
        overlap = np.maximum(0.0, 2 * self.config.contact_radius * self.config.arena_scale - dist)
        normal = d / np.maximum(dist, 1e-9)[:, None]
        push = (self.config.contact_stiffness * overlap)[:, None] * normal
        return np.stack([push, -push], axis=1)

    def step(self, state: GameState, a0, a1, noise=None) -> StepResult:
        cfg = self.config
        extra = self._contact_accel(state.pos) if cfg.env_name == "DiskSumo" else None
        nxt = step_physics(state, a0, a1, cfg, self.speed_limits, extra)
        n = nxt.t.shape[0]
        winner = np.full(n, NOT_DONE, dtype=np.int64)
        timeout = nxt.t >= self.max_steps
        if cfg.env_name == "CorridorPass":
            # walls: clamp to the strip and kill the normal velocity component
            for axis, half in ((0, self.half_length), (1, self.half_width)):
                hit = np.abs(nxt.pos[..., axis]) > half
                nxt.pos[..., axis] = np.clip(nxt.pos[..., axis], -half, half)
                nxt.vel[..., axis] = np.where(hit, 0.0, nxt.vel[..., axis])
            crossed = nxt.pos[:, 0, 0] >= self.finish_x
            tagged = np.linalg.norm(nxt.pos[:, 0] - nxt.pos[:, 1], axis=-1) < cfg.tag_radius * cfg.arena_scale
            winner[crossed] = 0
            winner[~crossed & (tagged | timeout)] = 1
            progress = (nxt.pos[:, 0, 0] - state.pos[:, 0, 0]) / (self.finish_x - self.start[0][0])
            shaping = np.stack([progress, -progress], axis=1)
        else:
            r = np.linalg.norm(nxt.pos, axis=-1)
            out = r > self.radius
            winner[out[:, 1] & ~out[:, 0]] = 0
            winner[out[:, 0] & ~out[:, 1]] = 1
            winner[(out[:, 0] & out[:, 1]) | (timeout & ~out.any(axis=1))] = TIE
            r_prev = np.linalg.norm(state.pos, axis=-1)
            dr = (r - r_prev) / self.radius
            shaping = np.stack([dr[:, 1] - dr[:, 0], dr[:, 0] - dr[:, 1]], axis=1)
        done = winner != NOT_DONE
        return StepResult(nxt, payoff(winner), done, winner, shaping)

    def observe(self, state: GameState, player: int, mask: MaskSpec | None = None) -> np.ndarray:
        lay = self.layout
        opp = 1 - player
        obs = np.empty((state.t.shape[0], lay.total_dim))
        obs[:, lay.own_position] = state.pos[:, player]
        obs[:, lay.own_velocity] = state.vel[:, player]
        obs[:, lay.own_pose] = state.pose[:, player]
        obs[:, lay.opponent_position] = state.pos[:, opp]
        if lay.opponent_velocity is not None:
            obs[:, lay.opponent_velocity] = state.vel[:, opp]
        obs[:, lay.opponent_pose] = state.pose[:, opp]
        if mask is not None and mask.enabled:
            obs[:, lay.maskable] = mask.static_value
        return obs

    def observation_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-entry bounds every reachable observation satisfies."""
        cfg, lay = self.config, self.layout
        s = cfg.arena_scale
        if cfg.env_name == "CorridorPass":
            pos_hi = np.array([self.half_length, self.half_width])
        else:
            reach = self.radius + cfg.max_speed * s * cfg.dt * 1.0001
            pos_hi = np.array([reach, reach])
        vmax = cfg.max_speed * s * 1.0001
        hi = np.empty(lay.total_dim)
        hi[lay.own_position] = pos_hi
        hi[lay.own_velocity] = vmax
        hi[lay.own_pose] = 1.0
        hi[lay.opponent_position] = pos_hi
        if lay.opponent_velocity is not None:
            hi[lay.opponent_velocity] = vmax
        hi[lay.opponent_pose] = 1.0
        return -hi, hi


def make_env(config: EnvConfig | dict) -> PointMassGame:
    if isinstance(config, dict):
        config = EnvConfig.from_dict(config)
    return PointMassGame(config)
