"""Reward, losses, PPO, identification updates, and the end-to-end loop.

Each iteration: every environment gets a freshly randomized embodiment and
runs one full episode. During collection the identification network runs
causally alongside the policy, and each step is rewarded with

    r_id = 1/2 [ exp(-L_joint / tau) + exp(-L_general / tau) ]

where the losses are mean squared errors between the current normalized
parameter estimates and the true normalized descriptors. The policy/critic
get a clipped-surrogate PPO update on that reward; the identification
network gets a supervised update with full-episode backpropagation through
time. Gradients never flow between the two: the only coupling is r_id,
computed from the identification parameters the rollout actually used.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .embodiment import (
    D_GENERAL,
    D_JOINT,
    GENERAL_FIELDS,
    JOINT_FIELDS,
    NormalizedDescriptors,
    RandomizationRanges,
    nominal_embodiment,
    normalize_descriptors,
    sample_embodiment,
)
from .errors import ConfigError, NumericError, ShapeError
from .networks import (
    IdEstimate,
    NetDims,
    entropy,
    fresh_hidden,
    gaussian_log_prob,
    id_forward,
    init_critic_params,
    init_id_params,
    init_policy_params,
    policy_forward,
    value_forward,
)
from .nn import OptState, ParamSet, adam_update, backward, clip_grad_norm
from .sim import ChainBatch
from .tensor import Tensor, masked_sq_loss, minimum, no_grad

TRAIN_CSV_COLUMNS = (
    "iteration",
    "env_steps",
    "mean_r_id",
    "L_joint",
    "L_general",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_frac",
    "approx_kl",
    "wall_s",
)

BASELINE_KINDS = ("zero", "random", "sine-sweep")


@dataclass
class RewardConfig:
    """Temperature and per-field loss masks for the identification reward."""

    tau: float = 0.1
    joint_mask: np.ndarray = field(
        default_factory=lambda: np.array([f != "child_count" for f in JOINT_FIELDS])
    )
    general_mask: np.ndarray = field(default_factory=lambda: np.ones(D_GENERAL, dtype=bool))

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"reward temperature must be > 0, got {self.tau}")
        self.joint_mask = np.asarray(self.joint_mask, dtype=bool)
        self.general_mask = np.asarray(self.general_mask, dtype=bool)
        if self.joint_mask.shape != (D_JOINT,):
            raise ConfigError("joint loss mask must have one entry per joint field")
        if self.general_mask.shape != (D_GENERAL,):
            raise ConfigError("general loss mask must have one entry per general field")
        if not self.joint_mask.any() or not self.general_mask.any():
            raise ConfigError("loss masks must keep at least one field per group")

    @classmethod
    def from_excluded(cls, tau: float, exclude: tuple[str, ...]) -> "RewardConfig":
        for name in exclude:
            if name not in JOINT_FIELDS and name not in GENERAL_FIELDS:
                raise ConfigError(f"unknown descriptor field in loss mask: '{name}'")
        jm = np.array([f not in exclude for f in JOINT_FIELDS])
        gm = np.array([f not in exclude for f in GENERAL_FIELDS])
        return cls(tau=tau, joint_mask=jm, general_mask=gm)


@dataclass
class IdLosses:
    joint: float
    general: float


@dataclass
class PpoConfig:
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatch_envs: int = 4
    chunk_steps: int = 100
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    lam: float = 0.95


@dataclass
class IdTrainConfig:
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    minibatch_envs: int = 16


@dataclass
class RolloutBatch:
    """One iteration of experience from n_envs parallel episodes.

    All arrays are env-major and rectangular: (B, T, ...). `valid` marks
    steps whose observations are real (False after a divergence); rewards
    there are zero by construction. `stochastic` marks environments whose
    actions were sampled (PPO data); the rest acted on the policy mean and
    only train the identification network.
    """

    obs_joint: np.ndarray      # (B, T, n, 3)
    obs_global: np.ndarray     # (B, T, 1)
    actions: np.ndarray        # (B, T, n)
    log_probs: np.ndarray      # (B, T)
    values: np.ndarray         # (B, T)
    rewards: np.ndarray        # (B, T)
    dones: np.ndarray          # (B, T)
    valid: np.ndarray          # (B, T)
    est_joint: np.ndarray      # (B, T, n, D_JOINT)
    est_general: np.ndarray    # (B, T, D_GENERAL)
    target_joint: np.ndarray   # (B, n, D_JOINT)
    target_general: np.ndarray  # (B, D_GENERAL)
    nominal_joint: np.ndarray  # (B, n, D_JOINT)
    nominal_general: np.ndarray  # (B, D_GENERAL)
    joint_mask: np.ndarray     # (B, n)
    bootstrap_value: np.ndarray  # (B,)
    stochastic: np.ndarray     # (B,) bool

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_steps(self) -> int:
        return self.rewards.shape[1]

    def ppo_view(self) -> "RolloutBatch":
        """The stochastic-env subset, the data PPO is allowed to use."""
        if self.stochastic.all():
            return self
        idx = np.flatnonzero(self.stochastic)
        return RolloutBatch(
            obs_joint=self.obs_joint[idx],
            obs_global=self.obs_global[idx],
            actions=self.actions[idx],
            log_probs=self.log_probs[idx],
            values=self.values[idx],
            rewards=self.rewards[idx],
            dones=self.dones[idx],
            valid=self.valid[idx],
            est_joint=self.est_joint[idx],
            est_general=self.est_general[idx],
            target_joint=self.target_joint[idx],
            target_general=self.target_general[idx],
            nominal_joint=self.nominal_joint[idx],
            nominal_general=self.nominal_general[idx],
            joint_mask=self.joint_mask[idx],
            bootstrap_value=self.bootstrap_value[idx],
            stochastic=self.stochastic[idx],
        )


def batched_mse(est_joint, est_general, target_joint, target_general, cfg: RewardConfig):
    """Per-robot masked MSEs: (B,) joint losses and (B,) general losses."""
    jw = cfg.joint_mask.astype(np.float64)
    gw = cfg.general_mask.astype(np.float64)
    dj = (est_joint - target_joint) ** 2 * jw
    n = est_joint.shape[-2]
    l_joint = dj.sum(axis=(-1, -2)) / (n * jw.sum())
    dg = (est_general - target_general) ** 2 * gw
    l_general = dg.sum(axis=-1) / gw.sum()
    return l_joint, l_general


def normalized_mse(
    est: IdEstimate, targets: NormalizedDescriptors, cfg: RewardConfig | None = None
) -> IdLosses:
    """MSE over unmasked joint entries and unmasked general entries."""
    if cfg is None:
        cfg = RewardConfig()
    if est.joint_pred.shape != targets.joint_matrix.shape:
        raise ShapeError(
            f"joint prediction shape {est.joint_pred.shape} != target "
            f"{targets.joint_matrix.shape}"
        )
    if est.general_pred.shape != targets.general_vector.shape:
        raise ShapeError(
            f"general prediction shape {est.general_pred.shape} != target "
            f"{targets.general_vector.shape}"
        )
    lj, lg = batched_mse(
        est.joint_pred[None],
        est.general_pred[None],
        targets.joint_matrix[None],
        targets.general_vector[None],
        cfg,
    )
    return IdLosses(joint=float(lj[0]), general=float(lg[0]))


def identification_reward(losses: IdLosses, cfg: RewardConfig) -> float:
    """Exponentially shaped reward in (0, 1]; 1 iff both losses vanish."""
    return 0.5 * (np.exp(-losses.joint / cfg.tau) + np.exp(-losses.general / cfg.tau))


def _reward_array(l_joint: np.ndarray, l_general: np.ndarray, tau: float) -> np.ndarray:
    return 0.5 * (np.exp(-l_joint / tau) + np.exp(-l_general / tau))


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap_value):
    """Generalized advantage estimation along the trailing time axis.

    dones mask bootstrapping across episode boundaries; bootstrap_value is
    the value estimate for the state following the final step. Returns
    (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ShapeError(
            f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape} "
            "must share a shape"
        )
    T = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    gae = np.zeros_like(np.asarray(bootstrap_value, dtype=np.float64))
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[..., t]
        delta = rewards[..., t] + gamma * next_value * nonterminal - values[..., t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[..., t] = gae
        next_value = values[..., t]
    return adv, adv + values


def baseline_policy(
    kind: str,
    t: int,
    n_joints: int,
    rng: np.random.Generator | None = None,
    episode_steps: int = 400,
    dt_ctrl: float = 0.01,
) -> np.ndarray:
    """Fixed excitation policies for passive-identification baselines.

    zero holds the nominal pose; random draws i.i.d. uniform actions;
    sine-sweep drives every joint with a chirp from 0.2 to 3 Hz across the
    episode, phase-staggered by joint index.
    """
    if kind == "zero":
        return np.zeros(n_joints)
    if kind == "random":
        if rng is None:
            raise ConfigError("random baseline needs an rng")
        return rng.uniform(-1.0, 1.0, size=n_joints)
    if kind == "sine-sweep":
        f = 0.2 + (3.0 - 0.2) * (t / episode_steps)
        phases = np.arange(n_joints) * 2.0 * np.pi / n_joints
        return 0.8 * np.sin(2.0 * np.pi * f * t * dt_ctrl + phases)
    raise ConfigError(f"unknown baseline kind '{kind}' (expected one of {BASELINE_KINDS})")


# -- rollout collection -------------------------------------------------------


class EpisodeBatch:
    """Fresh embodiments, targets and initial states for a batch of episodes.

    Each episode owns one rng stream: its embodiment draw and initial pose
    come from that stream alone, so results do not depend on how episodes
    are grouped into batches.
    """

    def __init__(self, config, ranges: RandomizationRanges, env_rngs, nominal):
        n_envs = len(env_rngs)
        self.specs = [
            sample_embodiment(ranges, env_rngs[e], config.n_joints)
            for e in range(n_envs)
        ]
        self.chains = ChainBatch(self.specs, gravity=config.gravity)
        targets = [normalize_descriptors(s, ranges) for s in self.specs]
        self.target_joint = np.stack([t.joint_matrix for t in targets])
        self.target_general = np.stack([t.general_vector for t in targets])
        self.nominal_joint = np.broadcast_to(
            nominal.joint_matrix, (n_envs,) + nominal.joint_matrix.shape
        ).copy()
        self.nominal_general = np.broadcast_to(
            nominal.general_vector, (n_envs,) + nominal.general_vector.shape
        ).copy()
        self.joint_mask = np.ones((n_envs, config.n_joints), dtype=bool)
        width = self.chains.range_hi - self.chains.range_lo
        u = np.stack([env_rngs[e].uniform(size=config.n_joints) for e in range(n_envs)])
        self.q0 = self.chains.range_lo + width * (0.25 + 0.5 * u)


def collect_rollout(
    episode: EpisodeBatch,
    pi_params: ParamSet | None,
    vf_params: ParamSet | None,
    id_params: ParamSet,
    reward_cfg: RewardConfig,
    config,
    action_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    hidden_width: int,
    baseline_kind: str | None = None,
    deterministic: bool = False,
    with_estimates: bool = True,
) -> RolloutBatch:
    """Roll all environments through one episode with the current networks.

    The identification network runs causally: the estimate stored (and
    rewarded) at step t has seen observations up to and including step t.
    Observations carry the *executed* (clamped) action, matching what the
    actuators did. The trailing mean_envs environments act on the policy
    mean instead of sampling: they feed only the identification update, so
    the network also covers the deterministic behavior that evaluation
    uses. With baseline_kind set, actions come from the fixed baseline;
    with with_estimates=False the identification forward pass is skipped
    (rewards/estimates are filled post hoc by the update, which evaluates
    the same pre-update parameters on the same observations).
    """
    chains = episode.chains
    B, n = chains.n_robots, config.n_joints
    T = config.episode_steps
    dt = config.dt_ctrl / config.substeps
    mean_envs = 0 if (baseline_kind is not None or deterministic) else min(
        int(round(config.mean_env_fraction * B)), B - 1
    )
    stochastic = np.ones(B, dtype=bool)
    if mean_envs > 0:
        stochastic[B - mean_envs:] = False

    q = episode.q0.copy()
    qdot = np.zeros((B, n))
    prev_action = np.zeros((B, n))
    diverged = np.zeros(B, dtype=bool)
    hj, hg = fresh_hidden(B, n, hidden_width)

    out = RolloutBatch(
        obs_joint=np.zeros((B, T, n, 3)),
        obs_global=np.zeros((B, T, 1)),
        actions=np.zeros((B, T, n)),
        log_probs=np.zeros((B, T)),
        values=np.zeros((B, T)),
        rewards=np.zeros((B, T)),
        dones=np.zeros((B, T)),
        valid=np.zeros((B, T)),
        est_joint=np.zeros((B, T, n, D_JOINT)),
        est_general=np.zeros((B, T, D_GENERAL)),
        target_joint=episode.target_joint,
        target_general=episode.target_general,
        nominal_joint=episode.nominal_joint,
        nominal_general=episode.nominal_general,
        joint_mask=episode.joint_mask,
        bootstrap_value=np.zeros(B),
        stochastic=stochastic,
    )

    def make_obs(step):
        obs_j = np.stack([q, qdot, prev_action], axis=2)
        if config.obs_noise_std > 0.0:
            obs_j[:, :, :2] += config.obs_noise_std * noise_rng.standard_normal((B, n, 2))
        obs_g = np.full((B, 1), step / T, dtype=np.float64)
        return obs_j, obs_g

    with no_grad():
        for k in range(T):
            was_diverged = diverged.copy()
            obs_j, obs_g = make_obs(k)
            out.obs_joint[:, k] = obs_j
            out.obs_global[:, k] = obs_g
            out.valid[:, k] = ~was_diverged

            if with_estimates:
                jp, gp, hj, hg = id_forward(
                    id_params, obs_j, obs_g, episode.nominal_joint,
                    episode.joint_mask, hj, hg,
                )
                out.est_joint[:, k] = jp.data
                out.est_general[:, k] = gp.data
                lj, lg = batched_mse(
                    jp.data, gp.data, episode.target_joint, episode.target_general,
                    reward_cfg,
                )
                out.rewards[:, k] = np.where(
                    was_diverged, 0.0, _reward_array(lj, lg, reward_cfg.tau)
                )

            if baseline_kind is not None:
                if baseline_kind == "random":
                    actions = action_rng.uniform(-1.0, 1.0, size=(B, n))
                else:
                    act_row = baseline_policy(
                        baseline_kind, k, n,
                        episode_steps=T, dt_ctrl=config.dt_ctrl,
                    )
                    actions = np.broadcast_to(act_row, (B, n)).copy()
                log_probs = np.zeros(B)
            else:
                mean, log_std = policy_forward(
                    pi_params, obs_j, obs_g, episode.nominal_joint,
                    episode.nominal_general, episode.joint_mask,
                )
                if deterministic:
                    actions = mean.data.copy()
                else:
                    sigma = float(np.exp(log_std.data))
                    actions = mean.data + sigma * action_rng.standard_normal((B, n))
                    if mean_envs > 0:
                        actions[~stochastic] = mean.data[~stochastic]
                log_probs = gaussian_log_prob(actions, mean, log_std).data
            if vf_params is not None:
                out.values[:, k] = value_forward(
                    vf_params, obs_j, obs_g, episode.nominal_joint,
                    episode.nominal_general, episode.joint_mask,
                ).data
            out.actions[:, k] = actions
            out.log_probs[:, k] = log_probs

            executed = np.clip(actions, -1.0, 1.0)
            for _ in range(config.substeps):
                torques = chains.pd_torque(actions, q, qdot)
                q_new, qd_new, div_new = chains.step(q, qdot, torques, dt)
                frozen = diverged[:, None]
                q = np.where(frozen, q, q_new)
                qdot = np.where(frozen, qdot, qd_new)
                diverged = diverged | div_new
            prev_action = np.where(was_diverged[:, None], prev_action, executed)

            out.dones[:, k] = np.where(
                (k == T - 1) | diverged, 1.0, 0.0
            )

        if vf_params is not None:
            obs_j, obs_g = make_obs(T)
            out.bootstrap_value[:] = value_forward(
                vf_params, obs_j, obs_g, episode.nominal_joint,
                episode.nominal_general, episode.joint_mask,
            ).data
    return out


# -- updates ------------------------------------------------------------------


@dataclass
class Minibatch:
    """One flattened PPO minibatch (samples from env-group x time-chunk)."""

    obs_joint: np.ndarray
    obs_global: np.ndarray
    nominal_joint: np.ndarray
    nominal_general: np.ndarray
    joint_mask: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def slice_minibatch(batch: RolloutBatch, adv, ret, e0, e1, t0, t1) -> Minibatch:
    me, ct = e1 - e0, t1 - t0
    m = me * ct
    n = batch.actions.shape[2]
    return Minibatch(
        obs_joint=batch.obs_joint[e0:e1, t0:t1].reshape(m, n, 3),
        obs_global=batch.obs_global[e0:e1, t0:t1].reshape(m, 1),
        nominal_joint=np.broadcast_to(
            batch.nominal_joint[e0:e1, None], (me, ct, n, D_JOINT)
        ).reshape(m, n, D_JOINT),
        nominal_general=np.broadcast_to(
            batch.nominal_general[e0:e1, None], (me, ct, D_GENERAL)
        ).reshape(m, D_GENERAL),
        joint_mask=np.broadcast_to(
            batch.joint_mask[e0:e1, None], (me, ct, n)
        ).reshape(m, n),
        actions=batch.actions[e0:e1, t0:t1].reshape(m, n),
        log_probs_old=batch.log_probs[e0:e1, t0:t1].reshape(m),
        advantages=adv[e0:e1, t0:t1].reshape(m),
        returns=ret[e0:e1, t0:t1].reshape(m),
    )


def ppo_loss(pi_params: ParamSet, vf_params: ParamSet, mb: Minibatch, cfg: PpoConfig):
    """Clipped surrogate + value + entropy objective on one minibatch.

    Returns (loss Tensor, info dict with the detached diagnostic scalars).
    """
    n = mb.actions.shape[1]
    mean, log_std = policy_forward(
        pi_params, mb.obs_joint, mb.obs_global, mb.nominal_joint,
        mb.nominal_general, mb.joint_mask,
    )
    lp_new = gaussian_log_prob(mb.actions, mean, log_std)
    ratio = (lp_new - Tensor(mb.log_probs_old)).exp()
    adv_t = Tensor(mb.advantages)
    surr = minimum(ratio * adv_t, ratio.clip(1.0 - cfg.clip, 1.0 + cfg.clip) * adv_t)
    policy_loss = -surr.mean()
    values = value_forward(
        vf_params, mb.obs_joint, mb.obs_global, mb.nominal_joint,
        mb.nominal_general, mb.joint_mask,
    )
    diff = values - Tensor(mb.returns)
    value_loss = (diff * diff).mean()
    ent = entropy(log_std, n)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
    info = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(ent.data),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip)),
        "approx_kl": float(np.mean(mb.log_probs_old - lp_new.data)),
    }
    return loss, info


def ppo_update(
    batch: RolloutBatch,
    pi_params: ParamSet,
    vf_params: ParamSet,
    cfg: PpoConfig,
    opt: OptState,
) -> dict:
    """Clipped-surrogate PPO over minibatches of env groups x time chunks.

    Only stochastic environments carry usable importance ratios, so the
    batch is restricted to them first. Advantages are normalized once over
    that whole batch; minibatches sweep env-index and time order, for a
    fixed number of epochs.
    """
    batch = batch.ppo_view()
    B, T = batch.n_envs, batch.n_steps
    adv, ret = compute_gae(
        batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam,
        batch.bootstrap_value,
    )
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    combined = pi_params.merged(vf_params)

    stats = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl")}
    n_minibatches = 0
    for _ in range(cfg.epochs):
        for e0 in range(0, B, cfg.minibatch_envs):
            e1 = min(e0 + cfg.minibatch_envs, B)
            for t0 in range(0, T, cfg.chunk_steps):
                t1 = min(t0 + cfg.chunk_steps, T)
                mb = slice_minibatch(batch, adv, ret, e0, e1, t0, t1)
                loss, info = ppo_loss(pi_params, vf_params, mb, cfg)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite PPO loss; aborting update")
                grads = backward(loss, combined)
                clip_grad_norm(grads, cfg.max_grad_norm)
                adam_update(combined, grads, opt, cfg.lr)
                for k in stats:
                    stats[k] += info[k]
                n_minibatches += 1
    return {k: v / n_minibatches for k, v in stats.items()}


def id_update(
    batch: RolloutBatch,
    id_params: ParamSet,
    cfg: IdTrainConfig,
    opt: OptState,
    reward_cfg: RewardConfig,
    hidden_width: int,
    fill_estimates: bool = False,
) -> IdLosses:
    """Supervised sweep with full-episode BPTT through both GRU cores.

    The loss is the valid-step mean of (L_joint + L_general), minimized by
    one Adam step per env-minibatch (time is never truncated). One step on
    the whole batch per iteration turned out to sit on the
    constant-prediction plateau for over a hundred iterations, so the
    sweep follows the same minibatch pattern as the policy update. With
    fill_estimates=True the per-step estimates and rewards are written
    back into the batch, for rollouts collected without the
    identification pass.
    """
    B, T = batch.n_envs, batch.n_steps
    n = batch.actions.shape[2]
    jw = (batch.joint_mask[:, :, None] * reward_cfg.joint_mask).astype(np.float64)
    gw = reward_cfg.general_mask.astype(np.float64)
    if batch.valid.sum() == 0:
        raise NumericError("no valid steps in batch")

    sum_lj = 0.0
    sum_lg = 0.0
    sum_valid = 0.0
    inv_cnt_g = 1.0 / gw.sum()
    for e0 in range(0, B, cfg.minibatch_envs):
        e1 = min(e0 + cfg.minibatch_envs, B)
        ce = e1 - e0
        chunk_valid = batch.valid[e0:e1].sum()
        if chunk_valid == 0:
            continue
        hj, hg = fresh_hidden(ce, n, hidden_width)
        inv_cnt_j = 1.0 / jw[e0:e1].sum(axis=(1, 2))
        chunk_terms = None
        for t in range(T):
            jp, gp, hj, hg = id_forward(
                id_params,
                batch.obs_joint[e0:e1, t],
                batch.obs_global[e0:e1, t],
                batch.nominal_joint[e0:e1],
                batch.joint_mask[e0:e1],
                hj,
                hg,
            )
            lj = masked_sq_loss(jp, batch.target_joint[e0:e1], jw[e0:e1]) * inv_cnt_j
            lg = masked_sq_loss(gp, batch.target_general[e0:e1], gw) * inv_cnt_g
            v = batch.valid[e0:e1, t]
            term = ((lj + lg) * Tensor(v)).sum()
            chunk_terms = term if chunk_terms is None else chunk_terms + term
            sum_lj += float((lj.data * v).sum())
            sum_lg += float((lg.data * v).sum())
            if fill_estimates:
                batch.est_joint[e0:e1, t] = jp.data
                batch.est_general[e0:e1, t] = gp.data
                batch.rewards[e0:e1, t] = np.where(
                    v > 0.0, _reward_array(lj.data, lg.data, reward_cfg.tau), 0.0
                )
        chunk_loss = chunk_terms * (1.0 / chunk_valid)
        if not np.isfinite(chunk_loss.data):
            raise NumericError("non-finite identification loss; aborting update")
        grads = backward(chunk_loss, id_params)
        clip_grad_norm(grads, cfg.max_grad_norm)
        adam_update(id_params, grads, opt, cfg.lr)
        sum_valid += float(chunk_valid)
    return IdLosses(joint=float(sum_lj / sum_valid), general=float(sum_lg / sum_valid))


# -- the end-to-end loop ------------------------------------------------------


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Named, stable child seed sequences for one run."""
    children = np.random.SeedSequence(seed).spawn(5)
    return {
        "init": children[0],
        "envs": children[1],
        "actions": children[2],
        "noise": children[3],
        "eval": children[4],
    }


@dataclass
class TrainResult:
    history: list[dict]
    pi_params: ParamSet | None
    vf_params: ParamSet | None
    id_params: ParamSet
    dims: NetDims
    interrupted: bool = False


def _format_row(row: dict) -> str:
    parts = []
    for c in TRAIN_CSV_COLUMNS:
        v = row[c]
        parts.append(str(v) if isinstance(v, int) else repr(float(v)))
    return ",".join(parts)


def train(
    config,
    csv_path=None,
    checkpoint_cb=None,
    stop_flag=None,
    baseline_kind: str | None = None,
) -> TrainResult:
    """Run the full training loop (or a baseline identification-only run).

    Per iteration: fresh embodiments for every env, one collected episode,
    a PPO update on the rollout-time rewards, then the identification
    update on the same batch. checkpoint_cb(iteration, result) is invoked
    at the configured interval, after an interrupt, and on numeric abort.
    stop_flag is polled between iterations (checkpoint-then-exit).
    """
    if baseline_kind is not None and baseline_kind not in BASELINE_KINDS:
        raise ConfigError(
            f"unknown baseline kind '{baseline_kind}' (expected one of {BASELINE_KINDS})"
        )
    streams = seed_streams(config.seed)
    init_rng = np.random.default_rng(streams["init"])
    env_rngs = [np.random.default_rng(s) for s in streams["envs"].spawn(config.n_envs)]
    action_rng = np.random.default_rng(streams["actions"])
    noise_rng = np.random.default_rng(streams["noise"])

    dims = NetDims(
        encoder=config.net_encoder, hidden=config.net_hidden, head=config.net_head
    )
    id_params = init_id_params(init_rng, dims)
    pi_params = None
    vf_params = None
    if baseline_kind is None:
        pi_params = init_policy_params(init_rng, dims)
        vf_params = init_critic_params(init_rng, dims)
    opt_ppo = OptState(pi_params.merged(vf_params)) if baseline_kind is None else None
    opt_id = OptState(id_params)

    ranges = config.randomization_ranges()
    reward_cfg = RewardConfig.from_excluded(config.reward_tau, config.reward_exclude)
    ppo_cfg = config.ppo_config()
    id_cfg = config.id_config()
    nominal = normalize_descriptors(
        nominal_embodiment(ranges, config.n_joints), ranges
    )

    result = TrainResult(
        history=[], pi_params=pi_params, vf_params=vf_params,
        id_params=id_params, dims=dims,
    )
    csv_file = open(csv_path, "w") if csv_path is not None else None
    if csv_file:
        csv_file.write(",".join(TRAIN_CSV_COLUMNS) + "\n")
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            if stop_flag is not None and stop_flag():
                result.interrupted = True
                if checkpoint_cb:
                    checkpoint_cb(it, result)
                break
            episode = EpisodeBatch(config, ranges, env_rngs, nominal)
            batch = collect_rollout(
                episode, pi_params, vf_params, id_params, reward_cfg, config,
                action_rng, noise_rng, dims.hidden,
                baseline_kind=baseline_kind,
                with_estimates=baseline_kind is None,
            )
            try:
                if baseline_kind is None:
                    ppo_stats = ppo_update(batch, pi_params, vf_params, ppo_cfg, opt_ppo)
                else:
                    ppo_stats = {
                        k: 0.0
                        for k in ("policy_loss", "value_loss", "entropy",
                                  "clip_frac", "approx_kl")
                    }
                id_losses = id_update(
                    batch, id_params, id_cfg, opt_id, reward_cfg, dims.hidden,
                    fill_estimates=baseline_kind is not None,
                )
            except NumericError:
                if checkpoint_cb:
                    checkpoint_cb(it, result)
                raise
            row = {
                "iteration": it,
                "env_steps": (it + 1) * config.n_envs * config.episode_steps,
                "mean_r_id": float(batch.rewards.mean()),
                "L_joint": id_losses.joint,
                "L_general": id_losses.general,
                "policy_loss": ppo_stats["policy_loss"],
                "value_loss": ppo_stats["value_loss"],
                "entropy": ppo_stats["entropy"],
                "clip_frac": ppo_stats["clip_frac"],
                "approx_kl": ppo_stats["approx_kl"],
                "wall_s": time.perf_counter() - start,
            }
            result.history.append(row)
            if csv_file:
                csv_file.write(_format_row(row) + "\n")
                csv_file.flush()
            if checkpoint_cb and (it + 1) % config.checkpoint_interval == 0:
                checkpoint_cb(it + 1, result)
        if checkpoint_cb and not result.interrupted:
            checkpoint_cb(config.iterations, result, final=True)
    finally:
        if csv_file:
            csv_file.close()
    return result
