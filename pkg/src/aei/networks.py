"""The three networks: identification (recurrent), policy and critic.

All of them consume per-joint tokens [observation row | nominal descriptor
row] through a shared-weight joint encoder, so one parameter set serves any
joint count. Joint-level outputs come from shared-weight per-joint heads
(as many output rows as the robot has joints); fixed-length outputs go
through a masked mean over joint latents, which is permutation invariant
by construction.

Identification network:  token -> encoder -> per-joint GRU -> joint head
                         pooled per-joint hidden + global obs -> global GRU
                         -> global head.
Policy:                  token -> encoder -> pooled latent + global obs +
                         nominal general -> trunk -> universal latent;
                         (universal latent | nominal row) -> action decoder
                         -> per-joint mean. log_std is one learned scalar,
                         clamped to [-5, 1].
Critic:                  same encoding pipeline, scalar value head.

Only the identification network is recurrent; the coupling between policy
and identification runs through the reward, not through gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .embodiment import D_GENERAL, D_JOINT, NormalizedDescriptors
from .errors import FormatError, ShapeError
from .nn import ParamSet, forward_mlp, gru_step, init_gru, init_mlp
from .sim import Observation
from .tensor import Tensor, concat, masked_mean_rows, no_grad, repeat_rows

OBS_PER_JOINT = 3   # q, qdot, prev_action
OBS_GLOBAL = 1      # normalized episode time

# fixed input scaling: joint velocities reach tens of rad/s, which would
# saturate the tanh encoders; everything entering a token stays O(1)
OBS_JOINT_SCALE = np.array([1.0, 0.1, 1.0])

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
LOG_STD_INIT = 0.0

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class NetDims:
    """Width configuration shared by all three networks."""

    encoder: int = 64
    hidden: int = 128
    head: int = 64
    d_joint: int = D_JOINT
    d_general: int = D_GENERAL

    @property
    def token(self) -> int:
        return OBS_PER_JOINT + self.d_joint


@dataclass
class IdHidden:
    """Recurrent state of the identification network for one robot."""

    joint: np.ndarray   # (n_joints, hidden)
    global_: np.ndarray  # (hidden,)


@dataclass
class IdEstimate:
    """Current normalized parameter predictions for one robot."""

    joint_pred: np.ndarray    # (n_joints, D_JOINT)
    general_pred: np.ndarray  # (D_GENERAL,)


@dataclass
class PolicyOutput:
    mean: np.ndarray  # (n_joints,)
    log_std: float


def init_id_params(rng: np.random.Generator, dims: NetDims) -> ParamSet:
    # prediction heads start near zero so untrained estimates sit inside the
    # normalized target scale instead of dominating the early reward
    p = ParamSet()
    init_mlp(p, "id.enc.", [dims.token, dims.encoder, dims.encoder], rng)
    init_gru(p, "id.jgru.", dims.encoder, dims.hidden, rng)
    init_mlp(p, "id.jhead.", [dims.hidden, dims.head, dims.d_joint], rng, out_gain=0.1)
    init_gru(p, "id.ggru.", dims.hidden + OBS_GLOBAL, dims.hidden, rng)
    init_mlp(p, "id.ghead.", [dims.hidden, dims.head, dims.d_general], rng, out_gain=0.1)
    return p


def init_policy_params(rng: np.random.Generator, dims: NetDims) -> ParamSet:
    p = ParamSet()
    init_mlp(p, "pi.enc.", [dims.token, dims.encoder, dims.encoder], rng)
    trunk_in = dims.encoder + OBS_GLOBAL + dims.d_general
    init_mlp(p, "pi.trunk.", [trunk_in, dims.head, dims.head], rng)
    init_mlp(p, "pi.dec.", [dims.head + dims.d_joint, dims.head, 1], rng, out_gain=0.01)
    p.add("pi.log_std", np.array(LOG_STD_INIT))
    return p


def init_critic_params(rng: np.random.Generator, dims: NetDims) -> ParamSet:
    p = ParamSet()
    init_mlp(p, "vf.enc.", [dims.token, dims.encoder, dims.encoder], rng)
    trunk_in = dims.encoder + OBS_GLOBAL + dims.d_general
    init_mlp(p, "vf.trunk.", [trunk_in, dims.head, dims.head], rng)
    init_mlp(p, "vf.head.", [dims.head, 1], rng)
    return p


def _tokens(obs_joint: np.ndarray, nominal_joint: np.ndarray) -> Tensor:
    """(B, n, obs) and (B, n, D_JOINT) -> constant (B*n, token) tensor."""
    if obs_joint.shape[:2] != nominal_joint.shape[:2]:
        raise ShapeError(
            f"observation rows {obs_joint.shape[:2]} != descriptor rows "
            f"{nominal_joint.shape[:2]}"
        )
    b, n = obs_joint.shape[:2]
    data = np.concatenate([obs_joint * OBS_JOINT_SCALE, nominal_joint], axis=2)
    return Tensor(data.reshape(b * n, data.shape[2]))


def encode_joint(params: ParamSet, tokens: Tensor, prefix: str = "id.enc.") -> Tensor:
    """Shared-weight joint encoder; rows in, latent rows out."""
    return forward_mlp(params, prefix, tokens, 2)


def aggregate_latents(latents: Tensor, mask: np.ndarray) -> Tensor:
    """Permutation-invariant masked mean over joint rows: (B, n, E) -> (B, E)."""
    return masked_mean_rows(latents, mask)


def fresh_hidden(n_robots: int, n_joints: int, hidden: int) -> tuple[Tensor, Tensor]:
    """Zeroed per-joint and global recurrent state for a rollout batch."""
    return (
        Tensor(np.zeros((n_robots * n_joints, hidden))),
        Tensor(np.zeros((n_robots, hidden))),
    )


def id_forward(
    params: ParamSet,
    obs_joint: np.ndarray,
    obs_global: np.ndarray,
    nominal_joint: np.ndarray,
    mask: np.ndarray,
    hidden_joint: Tensor,
    hidden_global: Tensor,
):
    """Batched identification step.

    Returns (joint_pred (B,n,Dj) Tensor, general_pred (B,Dg) Tensor,
    new hidden pair). Estimates are unbounded; targets live in [0, 1].
    """
    b, n = obs_joint.shape[:2]
    h = params["id.jgru.Uz"].data.shape[0]
    if hidden_joint.data.shape[0] != b * n:
        raise ShapeError(
            f"id hidden rows {hidden_joint.data.shape[0]} != robots*joints {b * n}"
        )
    tokens = _tokens(obs_joint, nominal_joint)
    latents = encode_joint(params, tokens, "id.enc.")
    hj = gru_step(params, "id.jgru.", latents, hidden_joint)
    joint_pred = forward_mlp(params, "id.jhead.", hj, 2)
    pooled = aggregate_latents(hj.reshape(b, n, h), mask)
    global_in = concat([pooled, Tensor(obs_global)], axis=1)
    hg = gru_step(params, "id.ggru.", global_in, hidden_global)
    general_pred = forward_mlp(params, "id.ghead.", hg, 2)
    d_joint = joint_pred.data.shape[1]
    return joint_pred.reshape(b, n, d_joint), general_pred, hj, hg


def policy_forward(
    params: ParamSet,
    obs_joint: np.ndarray,
    obs_global: np.ndarray,
    nominal_joint: np.ndarray,
    nominal_general: np.ndarray,
    mask: np.ndarray,
):
    """Batched policy: returns (mean (B,n) Tensor, log_std scalar Tensor)."""
    b, n = obs_joint.shape[:2]
    e = params["pi.enc.w1"].data.shape[1]
    tokens = _tokens(obs_joint, nominal_joint)
    latents = encode_joint(params, tokens, "pi.enc.")
    pooled = aggregate_latents(latents.reshape(b, n, e), mask)
    trunk_in = concat([pooled, Tensor(obs_global), Tensor(nominal_general)], axis=1)
    universal = forward_mlp(params, "pi.trunk.", trunk_in, 2)
    dec_in = concat(
        [repeat_rows(universal, n), Tensor(nominal_joint.reshape(b * n, -1))], axis=1
    )
    mean = forward_mlp(params, "pi.dec.", dec_in, 2).reshape(b, n)
    log_std = params["pi.log_std"].clip(LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def value_forward(
    params: ParamSet,
    obs_joint: np.ndarray,
    obs_global: np.ndarray,
    nominal_joint: np.ndarray,
    nominal_general: np.ndarray,
    mask: np.ndarray,
) -> Tensor:
    """Batched critic: returns values as a (B,) Tensor."""
    b, n = obs_joint.shape[:2]
    e = params["vf.enc.w1"].data.shape[1]
    tokens = _tokens(obs_joint, nominal_joint)
    latents = encode_joint(params, tokens, "vf.enc.")
    pooled = aggregate_latents(latents.reshape(b, n, e), mask)
    trunk_in = concat([pooled, Tensor(obs_global), Tensor(nominal_general)], axis=1)
    trunk = forward_mlp(params, "vf.trunk.", trunk_in, 2)
    return forward_mlp(params, "vf.head.", trunk, 1).reshape(b)


def gaussian_log_prob(actions: np.ndarray, mean: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal-Gaussian log density of given actions: (B,) Tensor.

    Used both when sampling (under no_grad) and when re-evaluating during
    updates, so stored and recomputed log-probs agree bitwise for unchanged
    parameters.
    """
    n = mean.data.shape[1]
    z = (Tensor(actions) - mean) * (-log_std).exp()
    return (z * z).sum(axis=1) * (-0.5) - float(n) * log_std - 0.5 * n * _LOG_2PI


def sample_gaussian(mean: Tensor, log_std: Tensor, rng: np.random.Generator):
    """Sample actions and their log-probs; returns plain arrays."""
    with no_grad():
        sigma = float(np.exp(log_std.data))
        noise = rng.standard_normal(mean.data.shape)
        actions = mean.data + sigma * noise
        log_prob = gaussian_log_prob(actions, mean, log_std).data
    return actions, log_prob


def entropy(log_std: Tensor, n_joints: int) -> Tensor:
    """Entropy of the n-dim diagonal Gaussian (state independent)."""
    return float(n_joints) * (log_std + 0.5 * (_LOG_2PI + 1.0))


# -- single-robot wrappers ---------------------------------------------------


def id_step(
    params: ParamSet,
    obs: Observation,
    nominal: NormalizedDescriptors,
    hidden: IdHidden,
) -> tuple[IdEstimate, IdHidden]:
    """One identification step for a single robot (no gradient recording)."""
    n = obs.per_joint.shape[0]
    if hidden.joint.shape[0] != n:
        raise ShapeError(f"hidden rows {hidden.joint.shape[0]} != n_joints {n}")
    with no_grad():
        jp, gp, hj, hg = id_forward(
            params,
            obs.per_joint[None],
            obs.global_feats[None],
            nominal.joint_matrix[None],
            nominal.joint_mask[None],
            Tensor(hidden.joint),
            Tensor(hidden.global_[None]),
        )
    return (
        IdEstimate(joint_pred=jp.data[0], general_pred=gp.data[0]),
        IdHidden(joint=hj.data, global_=hg.data[0]),
    )


def policy_step(
    params: ParamSet, obs: Observation, nominal: NormalizedDescriptors
) -> PolicyOutput:
    """Single-robot policy evaluation (no gradient recording)."""
    with no_grad():
        mean, log_std = policy_forward(
            params,
            obs.per_joint[None],
            obs.global_feats[None],
            nominal.joint_matrix[None],
            nominal.general_vector[None],
            nominal.joint_mask[None],
        )
    return PolicyOutput(mean=mean.data[0], log_std=float(log_std.data))


def value_step(
    params: ParamSet, obs: Observation, nominal: NormalizedDescriptors
) -> float:
    """Single-robot value evaluation (no gradient recording)."""
    with no_grad():
        v = value_forward(
            params,
            obs.per_joint[None],
            obs.global_feats[None],
            nominal.joint_matrix[None],
            nominal.general_vector[None],
            nominal.joint_mask[None],
        )
    return float(v.data[0])


def sample_action(
    out: PolicyOutput, rng: np.random.Generator, deterministic: bool = False
) -> tuple[np.ndarray, float]:
    """Draw an action from a PolicyOutput; log-prob of what was drawn."""
    mean = Tensor(out.mean[None])
    log_std = Tensor(np.array(out.log_std))
    if deterministic:
        with no_grad():
            lp = gaussian_log_prob(out.mean[None], mean, log_std).data
        return out.mean.copy(), float(lp[0])
    actions, log_prob = sample_gaussian(mean, log_std, rng)
    return actions[0], float(log_prob[0])


def fresh_id_hidden(n_joints: int, hidden: int) -> IdHidden:
    return IdHidden(joint=np.zeros((n_joints, hidden)), global_=np.zeros(hidden))


# -- checkpointing ------------------------------------------------------------

_BASELINE_CODES = {None: 0, "zero": 1, "random": 2, "sine-sweep": 3}
_BASELINE_NAMES = {v: k for k, v in _BASELINE_CODES.items()}


def save_networks(
    path,
    id_params: ParamSet,
    pi_params: ParamSet | None,
    vf_params: ParamSet | None,
    dims: NetDims,
    n_joints: int,
    iteration: int,
    baseline_kind: str | None = None,
):
    """Write all network parameters plus architecture scalars to one file."""
    arrays = {name: t.data for name, t in id_params.items()}
    if pi_params is not None:
        arrays.update({name: t.data for name, t in pi_params.items()})
    if vf_params is not None:
        arrays.update({name: t.data for name, t in vf_params.items()})
    arrays["meta/encoder"] = np.array(float(dims.encoder))
    arrays["meta/hidden"] = np.array(float(dims.hidden))
    arrays["meta/head"] = np.array(float(dims.head))
    arrays["meta/d_joint"] = np.array(float(dims.d_joint))
    arrays["meta/d_general"] = np.array(float(dims.d_general))
    arrays["meta/n_joints"] = np.array(float(n_joints))
    arrays["meta/iteration"] = np.array(float(iteration))
    arrays["meta/baseline"] = np.array(float(_BASELINE_CODES[baseline_kind]))
    nn.save_tensors(path, arrays)


def load_networks(path):
    """Rebuild parameter sets from a checkpoint.

    Returns (id_params, pi_params, vf_params, dims, meta) where the policy
    and critic are None for identification-only (baseline) checkpoints.
    Raises FormatError naming the first missing or mismatched tensor.
    """
    arrays = nn.load_tensors(path)
    for key in ("meta/encoder", "meta/hidden", "meta/head", "meta/d_joint",
                "meta/d_general", "meta/n_joints"):
        if key not in arrays:
            raise FormatError(f"checkpoint missing '{key}'")
    dims = NetDims(
        encoder=int(arrays["meta/encoder"]),
        hidden=int(arrays["meta/hidden"]),
        head=int(arrays["meta/head"]),
        d_joint=int(arrays["meta/d_joint"]),
        d_general=int(arrays["meta/d_general"]),
    )
    meta = {
        "n_joints": int(arrays["meta/n_joints"]),
        "iteration": int(arrays.get("meta/iteration", np.array(0.0))),
        "baseline": _BASELINE_NAMES.get(int(arrays.get("meta/baseline", np.array(0.0)))),
    }
    scratch = np.random.default_rng(0)
    id_params = init_id_params(scratch, dims)
    id_params.load_state(arrays)
    pi_params = None
    vf_params = None
    if "pi.log_std" in arrays:
        pi_params = init_policy_params(scratch, dims)
        pi_params.load_state(arrays)
        vf_params = init_critic_params(scratch, dims)
        vf_params.load_state(arrays)
    return id_params, pi_params, vf_params, dims, meta
