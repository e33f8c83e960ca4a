"""Per-parameter identification error reports on fresh embodiments.

Evaluation rolls n_episodes newly randomized robots under deterministic
(mean) policy actions or a fixed baseline, takes the identification
network's final-step estimate of each episode, and reports per-field mean
absolute errors in normalized and physical units with bootstrap confidence
intervals. Every random draw derives from the run seed, so a reloaded
checkpoint reproduces its report byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embodiment import (
    GENERAL_FIELDS,
    JOINT_FIELDS,
    nominal_embodiment,
    normalize_descriptors,
)
from .errors import UsageError
from .networks import NetDims
from .nn import ParamSet
from .training import EpisodeBatch, RewardConfig, collect_rollout, seed_streams

UNITS = {
    "link_length": "m",
    "link_mass": "kg",
    "link_inertia_com": "kg*m^2",
    "com_offset": "fraction",
    "damping": "N*m*s/rad",
    "rotor_inertia": "kg*m^2",
    "stiction": "N*m",
    "stiffness": "N*m/rad",
    "nominal_pos": "rad",
    "range_lo": "rad",
    "range_hi": "rad",
    "max_torque": "N*m",
    "max_velocity": "rad/s",
    "child_count": "count",
    "kp": "N*m/rad",
    "kd": "N*m*s/rad",
    "action_scale": "rad",
    "total_mass": "kg",
    "total_length": "m",
}

REPORT_CSV_COLUMNS = (
    "field",
    "group",
    "mae_physical",
    "unit",
    "mae_normalized",
    "range_lo",
    "range_hi",
    "ci_lo",
    "ci_hi",
)

BOOTSTRAP_RESAMPLES = 1000


@dataclass
class FieldError:
    field: str
    group: str
    mae_physical: float
    unit: str
    mae_normalized: float
    range_lo: float
    range_hi: float
    ci_lo: float
    ci_hi: float


@dataclass
class PerParameterErrorReport:
    rows: list[FieldError]
    n_episodes: int

    def by_field(self) -> dict[str, FieldError]:
        return {r.field: r for r in self.rows}

    def to_csv_text(self) -> str:
        lines = [",".join(REPORT_CSV_COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        r.field,
                        r.group,
                        repr(r.mae_physical),
                        r.unit,
                        repr(r.mae_normalized),
                        repr(r.range_lo),
                        repr(r.range_hi),
                        repr(r.ci_lo),
                        repr(r.ci_hi),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [
            f"identification error over {self.n_episodes} episodes "
            "(final-step estimates)",
            f"{'field':<18} {'group':<8} {'mae (norm)':>12} {'95% ci':>22} "
            f"{'mae (phys)':>12} unit",
        ]
        for r in self.rows:
            ci = f"[{r.ci_lo:.4f}, {r.ci_hi:.4f}]"
            lines.append(
                f"{r.field:<18} {r.group:<8} {r.mae_normalized:>12.4f} {ci:>22} "
                f"{r.mae_physical:>12.4g} {r.unit}"
            )
        return "\n".join(lines)


def _bootstrap_ci(per_episode: np.ndarray, rng: np.random.Generator):
    """Percentile bootstrap of the mean over the episode axis."""
    n = per_episode.shape[0]
    idx = rng.integers(0, n, size=(BOOTSTRAP_RESAMPLES, n))
    means = per_episode[idx].mean(axis=1)
    return (
        np.percentile(means, 2.5, axis=0),
        np.percentile(means, 97.5, axis=0),
    )


def evaluate(
    pi_params: ParamSet | None,
    id_params: ParamSet,
    config,
    n_episodes: int,
    dims: NetDims,
    baseline_kind: str | None = None,
    predict_override=None,
) -> PerParameterErrorReport:
    """Report final-step identification errors on fresh embodiments.

    predict_override, when given, replaces the network's final estimates
    with predict_override(target_joint, target_general) -> (est_j, est_g);
    it exists so oracle and constant predictors can calibrate the report.
    """
    if n_episodes < 1:
        raise UsageError(f"n_episodes must be >= 1, got {n_episodes}")
    if pi_params is None and baseline_kind is None:
        raise UsageError("evaluation needs a policy or a baseline kind")
    streams = seed_streams(config.seed)
    episode_seeds = streams["eval"].spawn(n_episodes + 2)
    action_rng = np.random.default_rng(episode_seeds[n_episodes])
    ci_rng = np.random.default_rng(episode_seeds[n_episodes + 1])
    ranges = config.randomization_ranges()
    reward_cfg = RewardConfig.from_excluded(config.reward_tau, config.reward_exclude)
    nominal = normalize_descriptors(nominal_embodiment(ranges, config.n_joints), ranges)

    err_joint = np.zeros((n_episodes, len(JOINT_FIELDS)))
    err_general = np.zeros((n_episodes, len(GENERAL_FIELDS)))
    done = 0
    while done < n_episodes:
        b = min(config.n_envs, n_episodes - done)
        rngs = [np.random.default_rng(episode_seeds[done + i]) for i in range(b)]
        noise_rng = np.random.default_rng(episode_seeds[done])
        episode = EpisodeBatch(config, ranges, rngs, nominal)
        batch = collect_rollout(
            episode, pi_params, None, id_params, reward_cfg, config,
            action_rng, noise_rng, dims.hidden,
            baseline_kind=baseline_kind, deterministic=True,
        )
        est_j = batch.est_joint[:, -1]
        est_g = batch.est_general[:, -1]
        if predict_override is not None:
            est_j, est_g = predict_override(batch.target_joint, batch.target_general)
        err_joint[done:done + b] = np.abs(est_j - batch.target_joint).mean(axis=1)
        err_general[done:done + b] = np.abs(est_g - batch.target_general)
        done += b

    jb = ranges.joint_bounds()
    gb = ranges.general_bounds(config.n_joints)
    ci_j_lo, ci_j_hi = _bootstrap_ci(err_joint, ci_rng)
    ci_g_lo, ci_g_hi = _bootstrap_ci(err_general, ci_rng)

    rows = []
    for i, name in enumerate(JOINT_FIELDS):
        width = jb[i, 1] - jb[i, 0]
        mae_n = float(err_joint[:, i].mean())
        rows.append(
            FieldError(
                field=name, group="joint",
                mae_physical=float(mae_n * width), unit=UNITS[name],
                mae_normalized=mae_n,
                range_lo=float(jb[i, 0]), range_hi=float(jb[i, 1]),
                ci_lo=float(ci_j_lo[i]), ci_hi=float(ci_j_hi[i]),
            )
        )
    for i, name in enumerate(GENERAL_FIELDS):
        width = gb[i, 1] - gb[i, 0]
        mae_n = float(err_general[:, i].mean())
        rows.append(
            FieldError(
                field=name, group="general",
                mae_physical=float(mae_n * width), unit=UNITS[name],
                mae_normalized=mae_n,
                range_lo=float(gb[i, 0]), range_hi=float(gb[i, 1]),
                ci_lo=float(ci_g_lo[i]), ci_hi=float(ci_g_hi[i]),
            )
        )
    return PerParameterErrorReport(rows=rows, n_episodes=n_episodes)
