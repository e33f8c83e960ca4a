"""Run configuration: a flat `key = value` file format with dotted sections.

The format is deliberately dependency-free and diff-friendly: one setting
per line, `#` comments, randomization ranges as `lo, hi` pairs. Unknown
keys are rejected by name. dump_config() emits a canonical snapshot whose
re-parse reproduces the configuration exactly; run directories store that
snapshot byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .embodiment import _DEFAULT_RANGES, GENERAL_FIELDS, JOINT_FIELDS, RandomizationRanges
from .errors import ConfigError
from .training import IdTrainConfig, PpoConfig


@dataclass
class RunConfig:
    seed: int = 0
    n_joints: int = 2
    n_envs: int = 64
    iterations: int = 500
    episode_steps: int = 400
    dt_ctrl: float = 0.01
    substeps: int = 5
    gravity: float = 9.81
    obs_noise_std: float = 0.0
    mean_env_fraction: float = 0.25
    checkpoint_interval: int = 100
    eval_episodes: int = 200
    workers: int = 1

    ranges: dict[str, tuple[float, float]] = field(
        default_factory=lambda: dict(_DEFAULT_RANGES)
    )

    reward_tau: float = 0.1
    reward_exclude: tuple[str, ...] = ("child_count",)

    net_encoder: int = 64
    net_hidden: int = 128
    net_head: int = 64

    ppo_clip: float = 0.2
    ppo_lr: float = 3e-4
    ppo_epochs: int = 4
    ppo_minibatch_envs: int = 4
    ppo_chunk_steps: int = 100
    ppo_value_coef: float = 0.5
    ppo_entropy_coef: float = 0.005
    ppo_max_grad_norm: float = 0.5
    ppo_gamma: float = 0.99
    ppo_lam: float = 0.95

    id_lr: float = 1e-3
    id_max_grad_norm: float = 1.0
    id_minibatch_envs: int = 8

    def validate(self):
        positive_ints = (
            "n_joints", "n_envs", "iterations", "episode_steps", "substeps",
            "checkpoint_interval", "workers", "net_encoder", "net_hidden",
            "net_head", "ppo_epochs", "ppo_minibatch_envs", "ppo_chunk_steps",
            "id_minibatch_envs",
        )
        for name in positive_ints:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"'{_key_for_attr(name)}' must be a positive integer, got {v!r}")
        positive_floats = (
            "dt_ctrl", "reward_tau", "ppo_clip", "ppo_lr", "ppo_max_grad_norm",
            "id_lr", "id_max_grad_norm",
        )
        for name in positive_floats:
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"'{_key_for_attr(name)}' must be > 0, got {v!r}")
        if self.eval_episodes < 1:
            raise ConfigError(f"'eval_episodes' must be >= 1, got {self.eval_episodes}")
        if not 0.0 < self.dt_ctrl / self.substeps <= 0.01:
            raise ConfigError(
                f"physics step dt_ctrl/substeps = {self.dt_ctrl / self.substeps} "
                "must lie in (0, 0.01]"
            )
        if self.obs_noise_std < 0:
            raise ConfigError("'obs_noise_std' must be >= 0")
        if not 0.0 <= self.mean_env_fraction < 1.0:
            raise ConfigError("'mean_env_fraction' must lie in [0, 1)")
        stochastic = self.n_envs - min(
            int(round(self.mean_env_fraction * self.n_envs)), self.n_envs - 1
        )
        if stochastic < self.ppo_minibatch_envs:
            raise ConfigError(
                "'mean_env_fraction' leaves fewer stochastic environments "
                "than 'ppo.minibatch_envs'"
            )
        if not 0.0 <= self.ppo_gamma <= 1.0 or not 0.0 <= self.ppo_lam <= 1.0:
            raise ConfigError("'ppo.gamma' and 'ppo.lam' must lie in [0, 1]")
        if self.ppo_minibatch_envs > self.n_envs:
            raise ConfigError("'ppo.minibatch_envs' cannot exceed n_envs")
        for name in self.reward_exclude:
            if name not in JOINT_FIELDS and name not in GENERAL_FIELDS:
                raise ConfigError(f"'reward.exclude' names unknown field '{name}'")
        self.randomization_ranges()  # raises ConfigError on bad ranges

    def randomization_ranges(self) -> RandomizationRanges:
        return RandomizationRanges(dict(self.ranges))

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            clip=self.ppo_clip, lr=self.ppo_lr, epochs=self.ppo_epochs,
            minibatch_envs=self.ppo_minibatch_envs, chunk_steps=self.ppo_chunk_steps,
            value_coef=self.ppo_value_coef, entropy_coef=self.ppo_entropy_coef,
            max_grad_norm=self.ppo_max_grad_norm, gamma=self.ppo_gamma,
            lam=self.ppo_lam,
        )

    def id_config(self) -> IdTrainConfig:
        return IdTrainConfig(
            lr=self.id_lr, max_grad_norm=self.id_max_grad_norm,
            minibatch_envs=self.id_minibatch_envs,
        )


# config-file key <-> dataclass attribute. Order here is the dump order.
_KEY_TABLE: list[tuple[str, str]] = [
    ("seed", "seed"),
    ("n_joints", "n_joints"),
    ("n_envs", "n_envs"),
    ("iterations", "iterations"),
    ("episode_steps", "episode_steps"),
    ("dt_ctrl", "dt_ctrl"),
    ("substeps", "substeps"),
    ("gravity", "gravity"),
    ("obs_noise_std", "obs_noise_std"),
    ("mean_env_fraction", "mean_env_fraction"),
    ("checkpoint_interval", "checkpoint_interval"),
    ("eval_episodes", "eval_episodes"),
    ("workers", "workers"),
    ("reward.tau", "reward_tau"),
    ("reward.exclude", "reward_exclude"),
    ("net.encoder", "net_encoder"),
    ("net.hidden", "net_hidden"),
    ("net.head", "net_head"),
    ("ppo.clip", "ppo_clip"),
    ("ppo.lr", "ppo_lr"),
    ("ppo.epochs", "ppo_epochs"),
    ("ppo.minibatch_envs", "ppo_minibatch_envs"),
    ("ppo.chunk_steps", "ppo_chunk_steps"),
    ("ppo.value_coef", "ppo_value_coef"),
    ("ppo.entropy_coef", "ppo_entropy_coef"),
    ("ppo.max_grad_norm", "ppo_max_grad_norm"),
    ("ppo.gamma", "ppo_gamma"),
    ("ppo.lam", "ppo_lam"),
    ("id.lr", "id_lr"),
    ("id.max_grad_norm", "id_max_grad_norm"),
    ("id.minibatch_envs", "id_minibatch_envs"),
]
_KEY_TO_ATTR = dict(_KEY_TABLE)
_ATTR_TO_KEY = {attr: key for key, attr in _KEY_TABLE}
_RANGE_KEYS = {f"ranges.{name}": name for name in _DEFAULT_RANGES}

_INT_ATTRS = {
    "seed", "n_joints", "n_envs", "iterations", "episode_steps", "substeps",
    "checkpoint_interval", "eval_episodes", "workers", "net_encoder",
    "net_hidden", "net_head", "ppo_epochs", "ppo_minibatch_envs",
    "ppo_chunk_steps", "id_minibatch_envs",
}


def _key_for_attr(attr: str) -> str:
    return _ATTR_TO_KEY.get(attr, attr)


def _parse_value(key: str, attr: str, raw: str):
    raw = raw.strip()
    if attr == "reward_exclude":
        if raw in ("", "none"):
            return ()
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if attr in _INT_ATTRS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"'{key}' expects an integer, got '{raw}'") from None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"'{key}' expects a number, got '{raw}'") from None


def _parse_range(key: str, raw: str) -> tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"'{key}' expects 'lo, hi', got '{raw}'")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError:
        raise ConfigError(f"'{key}' expects numeric 'lo, hi', got '{raw}'") from None


def apply_setting(config: RunConfig, key: str, raw: str) -> RunConfig:
    """Apply one `key = value` setting, returning an updated copy."""
    key = key.strip()
    if key in _KEY_TO_ATTR:
        attr = _KEY_TO_ATTR[key]
        return replace(config, **{attr: _parse_value(key, attr, raw)})
    if key in _RANGE_KEYS:
        ranges = dict(config.ranges)
        ranges[_RANGE_KEYS[key]] = _parse_range(key, raw)
        return replace(config, ranges=ranges)
    raise ConfigError(f"unknown configuration key '{key}'")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text over a base (default) configuration."""
    config = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.strip()}'")
        key, raw = stripped.split("=", 1)
        try:
            config = apply_setting(config, key, raw)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return config


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Load a config file, apply CLI `key=value` overrides, validate."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file '{path}': {e.strerror}") from None
    config = parse_config(text)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, raw = item.split("=", 1)
        config = apply_setting(config, key, raw)
    config.validate()
    return config


def _format_value(attr: str, value) -> str:
    if attr == "reward_exclude":
        return ", ".join(value) if value else "none"
    if attr in _INT_ATTRS:
        return str(value)
    return repr(float(value))


def dump_config(config: RunConfig) -> str:
    """Canonical text form; parse_config(dump_config(c)) == c."""
    lines = ["# run configuration"]
    for key, attr in _KEY_TABLE:
        if key == "reward.tau":
            lines.append("")
            lines.append("# identification reward")
        elif key == "net.encoder":
            lines.append("")
            lines.append("# network widths")
        elif key == "ppo.clip":
            lines.append("")
            lines.append("# policy optimization")
        elif key == "id.lr":
            lines.append("")
            lines.append("# identification updates")
        lines.append(f"{key} = {_format_value(attr, getattr(config, attr))}")
    lines.append("")
    lines.append("# randomization ranges (lo, hi); lo == hi freezes a field")
    for name in _DEFAULT_RANGES:
        lo, hi = config.ranges[name]
        lines.append(f"ranges.{name} = {lo!r}, {hi!r}")
    return "\n".join(lines) + "\n"
