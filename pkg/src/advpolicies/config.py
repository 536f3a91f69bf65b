"""Experiment configuration files and run manifests.

The config is a YAML mapping (schema version 1)::

    version: 1
    seed: 0
    env:        {name: CorridorPass, pose_dim: 24, ...}   # name is required
    victim_ppo: {total_steps: ..., batch_size: ..., ...}
    adversary_ppo: {...}
    selfplay:   {pool_interval: ..., shaping_fraction: 0.1, shaping_scale: 1.0}
    adversary:  {victim_index: 0, checkpoints: 10}
    evaluation: {n_episodes: 1000}
    analysis:   {n_steps: 20000, k_list: [...], cov_types: [...], perplexity: 250, ...}
    sweep:      {pose_dims: [2, 8, 24], seeds: [0, 1, 2, 3, 4]}
    paths:      {out: results}

Every section except ``env`` is optional. Unknown keys anywhere are errors,
reported with the file line they appear on.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from .envs import EnvConfig
from .errors import ConfigurationError
from .rl import PpoConfig

SCHEMA_VERSION = 1

# config-file key -> EnvConfig field
_ENV_KEYS = {"name": "env_name", **{f.name: f.name for f in fields(EnvConfig) if f.name != "env_name"}}


@dataclass(frozen=True)
class SelfPlaySettings:
    pool_interval: int = 100_000
    shaping_fraction: float = 0.1
    shaping_scale: float = 1.0


@dataclass(frozen=True)
class AdversarySettings:
    victim_index: int = 0
    checkpoints: int = 10


@dataclass(frozen=True)
class EvaluationSettings:
    n_episodes: int = 1000


@dataclass(frozen=True)
class AnalysisSettings:
    n_steps: int = 20000
    k_list: tuple = (5, 10, 20, 40, 80)
    cov_types: tuple = ("full", "diagonal")
    perplexity: float = 250.0
    perplexities: tuple = (5, 10, 20, 50, 75, 100, 250, 1000)
    tsne_rows_per_opponent: int = 250
    tsne_iters: int = 1000
    max_iters: int = 200
    include_value_net: bool = False


@dataclass(frozen=True)
class SweepSettings:
    pose_dims: tuple = (2, 8, 24)
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    victim_ppo: PpoConfig = field(default_factory=lambda: PpoConfig(total_steps=2_000_000, n_envs=64))
    adversary_ppo: PpoConfig = field(default_factory=lambda: PpoConfig(total_steps=500_000, n_envs=64))
    selfplay: SelfPlaySettings = SelfPlaySettings()
    adversary: AdversarySettings = AdversarySettings()
    evaluation: EvaluationSettings = EvaluationSettings()
    analysis: AnalysisSettings = AnalysisSettings()
    sweep: SweepSettings = SweepSettings()
    seed: int = 0
    out: str = "results"
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        env = asdict(self.env)
        env["name"] = env.pop("env_name")
        return {
            "version": self.version, "seed": self.seed, "env": env,
            "victim_ppo": asdict(self.victim_ppo), "adversary_ppo": asdict(self.adversary_ppo),
            "selfplay": asdict(self.selfplay), "adversary": asdict(self.adversary),
            "evaluation": asdict(self.evaluation),
            "analysis": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.analysis).items()},
            "sweep": {k: list(v) for k, v in asdict(self.sweep).items()},
            "paths": {"out": self.out},
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


class _Located:
    """Maps dotted key paths to 1-based source lines."""

    def __init__(self, source: str, node):
        self.source = source
        self.lines: dict[str, int] = {}
        self._walk(node, "")

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                self.lines[key] = k.start_mark.line + 1
                self._walk(v, key)

    def where(self, key: str) -> str:
        while key and key not in self.lines:
            key = key.rpartition(".")[0]
        line = self.lines.get(key, 1)
        return f"{self.source}:{line}"


def _section(raw: dict, name: str, cls, loc: _Located, rename: dict | None = None, tuples=()):
    data = raw.get(name) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{loc.where(name)}: section '{name}' must be a mapping")
    allowed = rename or {f.name: f.name for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in allowed:
            raise ConfigurationError(f"{loc.where(f'{name}.{k}')}: unknown key '{name}.{k}'")
        kwargs[allowed[k]] = tuple(v) if k in tuples and isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(f"{loc.where(name)}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{loc.where(name)}: invalid '{name}' section: {e}") from None


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark else 1
        raise ConfigurationError(f"{source}:{line}: malformed YAML: {getattr(e, 'problem', e)}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}:1: top level must be a mapping")
    loc = _Located(source, node)
    top = {"version", "seed", "env", "victim_ppo", "adversary_ppo", "selfplay", "adversary", "evaluation",
           "analysis", "sweep", "paths"}
    for k in raw:
        if k not in top:
            raise ConfigurationError(f"{loc.where(str(k))}: unknown key '{k}'")
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"{loc.where('version')}: unsupported config version {version}")
    env_raw = raw.get("env")
    if not isinstance(env_raw, dict) or "name" not in env_raw:
        raise ConfigurationError(f"{loc.where('env')}: missing required key 'env.name'")
    env = _section(raw, "env", EnvConfig, loc, _ENV_KEYS)
    defaults = ExperimentConfig(env)
    ppo_keys = {f.name: f.name for f in fields(PpoConfig)}

    def ppo(name, base: PpoConfig) -> PpoConfig:
        data = raw.get(name) or {}
        for k in data:
            if k not in ppo_keys:
                raise ConfigurationError(f"{loc.where(f'{name}.{k}')}: unknown key '{name}.{k}'")
        try:
            return base.replace(**data)
        except (ConfigurationError, TypeError, ValueError) as e:
            raise ConfigurationError(f"{loc.where(name)}: {e}") from None

    paths = raw.get("paths") or {}
    for k in paths:
        if k != "out":
            raise ConfigurationError(f"{loc.where(f'paths.{k}')}: unknown key 'paths.{k}'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"{loc.where('seed')}: seed must be a non-negative integer")
    cfg = ExperimentConfig(
        env=env,
        victim_ppo=ppo("victim_ppo", defaults.victim_ppo),
        adversary_ppo=ppo("adversary_ppo", defaults.adversary_ppo),
        selfplay=_section(raw, "selfplay", SelfPlaySettings, loc),
        adversary=_section(raw, "adversary", AdversarySettings, loc),
        evaluation=_section(raw, "evaluation", EvaluationSettings, loc),
        analysis=_section(raw, "analysis", AnalysisSettings, loc,
                          tuples=("k_list", "cov_types", "perplexities")),
        sweep=_section(raw, "sweep", SweepSettings, loc, tuples=("pose_dims", "seeds")),
        seed=seed,
        out=str(paths.get("out", "results")),
    )
    if overrides:
        cfg = _apply_overrides(cfg, overrides)
    return cfg


def _apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**d)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path), overrides)


# --- manifests ---------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    seed_schedule: dict
    code_version: str = __version__
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    environment: dict = field(default_factory=lambda: {"python": platform.python_version()})

    def record(self, root, path) -> None:
        rel = Path(path).resolve().relative_to(Path(root).resolve())
        self.artifacts[rel.as_posix()] = file_digest(path)

    def record_tree(self, root) -> None:
        root = Path(root)
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                self.record(root, p)

    def write(self, root) -> Path:
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, root) -> RunManifest:
        return cls(**json.loads((Path(root) / "manifest.json").read_text()))
