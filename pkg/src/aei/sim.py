"""Deterministic fixed-base planar n-link chain dynamics.

The chain hangs off a fixed base in the x-y plane with gravity along -y.
Joint i rotates link i about the distal end of link i-1; q holds relative
joint angles, so absolute link angles are theta = cumsum(q).

In absolute angles the kinetic energy of the chain is

    KE = 1/2 sum_jl b_jl cos(theta_j - theta_l) thdot_j thdot_l
         + 1/2 sum_j I_com_j thdot_j^2

with configuration-independent coefficients b_jl = sum_k m_k a_kj a_kl,
where a_kj is L_j for j < k, the COM offset d_k for j = k, and 0 otherwise.
That makes the joint-space mass matrix

    M(q) = T^T [ b * cos(dtheta) + diag(I_com) ] T + diag(rotor)

(T the lower-triangular ones matrix mapping q to theta, rotor the reflected
rotor inertia on the diagonal), the velocity bias a pure centrifugal term
h_j = sum_l b_jl sin(theta_j - theta_l) thdot_l^2, and gravity
g_j = g beta_j cos(theta_j) with beta_j = sum_k m_k a_kj. Everything here
is vectorized over a leading batch axis so thousands of differently
parameterized chains step together.

Integration is semi-implicit Euler (velocity first), followed by velocity
saturation and hard joint-limit clamps with velocity zeroing on contact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embodiment import EmbodimentSpec, validate_spec
from .errors import NumericError, UsageError

STICTION_V_EPS = 0.05  # rad/s scale of the smoothed Coulomb transition
DIVERGENCE_QDOT = 100.0
MAX_COND = 1e12


@dataclass
class SimState:
    """Instantaneous state of one chain."""

    q: np.ndarray
    qdot: np.ndarray
    t: float
    prev_action: np.ndarray
    diverged: bool = False


@dataclass
class Observation:
    """What the networks see at one control step.

    per_joint rows are [q_i, qdot_i, prev_action_i]; the global part is the
    normalized episode time t / T_episode. No ground-truth parameters leak.
    """

    per_joint: np.ndarray
    global_feats: np.ndarray


class ChainBatch:
    """Precomputed dynamics constants for B same-length chains, stacked.

    All per-joint arrays are (B, n); per-robot scalars are (B,). The step
    kernels below are the only integration code path: single-chain
    operations wrap a batch of one, so unit-level and training-level
    results match bitwise.
    """

    def __init__(self, specs: list[EmbodimentSpec], gravity: float = 9.81):
        if not specs:
            raise UsageError("ChainBatch needs at least one spec")
        n = specs[0].n_joints
        for s in specs:
            validate_spec(s)
            if s.n_joints != n:
                raise UsageError("all specs in a batch must share n_joints")
        self.n_joints = n
        self.n_robots = len(specs)
        self.gravity = float(gravity)

        def j(field):
            return np.array(
                [[getattr(jp, field) for jp in s.joints] for s in specs], dtype=np.float64
            )

        self.link_length = j("link_length")
        self.link_mass = j("link_mass")
        self.inertia_com = j("link_inertia_com")
        self.com_offset = j("com_offset")
        self.damping = j("damping")
        self.rotor_inertia = j("rotor_inertia")
        self.stiction = j("stiction")
        self.stiffness = j("stiffness")
        self.nominal_pos = j("nominal_pos")
        self.range_lo = j("range_lo")
        self.range_hi = j("range_hi")
        self.max_torque = j("max_torque")
        self.max_velocity = j("max_velocity")
        self.kp = np.array([s.general.kp for s in specs], dtype=np.float64)
        self.kd = np.array([s.general.kd for s in specs], dtype=np.float64)
        self.action_scale = np.array([s.general.action_scale for s in specs], dtype=np.float64)

        # a[k, j]: sensitivity of COM k to absolute angle j (see module doc)
        B = self.n_robots
        a = np.zeros((B, n, n))
        for k in range(n):
            a[:, k, :k] = self.link_length[:, :k]
            a[:, k, k] = self.com_offset[:, k]
        self.b_coef = np.einsum("bk,bkj,bkl->bjl", self.link_mass, a, a)
        self.beta = np.einsum("bk,bkj->bj", self.link_mass, a)
        self.inertia_about_joint = self.inertia_com + self.link_mass * self.com_offset**2
        self._tril = np.tril(np.ones((n, n)))
        self._eye = np.eye(n)

    # -- kernels (all take/return plain (B, n) arrays) -----------------------

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        theta = np.cumsum(q, axis=1)
        dtheta = theta[:, :, None] - theta[:, None, :]
        m_theta = self.b_coef * np.cos(dtheta) + self._eye * self.inertia_com[:, :, None]
        m_q = self._tril.T @ m_theta @ self._tril
        return m_q + self._eye * self.rotor_inertia[:, :, None]

    def bias(self, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        theta = np.cumsum(q, axis=1)
        thdot = np.cumsum(qdot, axis=1)
        dtheta = theta[:, :, None] - theta[:, None, :]
        centrifugal = np.einsum("bjl,bl->bj", self.b_coef * np.sin(dtheta), thdot**2)
        grav = self.gravity * self.beta * np.cos(theta)
        return (centrifugal + grav) @ self._tril

    def pd_torque(self, action: np.ndarray, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        a = np.clip(action, -1.0, 1.0)
        target = self.nominal_pos + self.action_scale[:, None] * a
        target = np.clip(target, self.range_lo, self.range_hi)
        raw = (
            self.kp[:, None] * (target - q)
            - self.kd[:, None] * qdot
            - self.stiffness * (q - self.nominal_pos)
            - self.damping * qdot
            - self.stiction * np.tanh(qdot / STICTION_V_EPS)
        )
        return np.clip(raw, -self.max_torque, self.max_torque)

    def step(self, q, qdot, torques, dt):
        """One semi-implicit Euler substep; returns (q', qdot', diverged).

        Diverged robots are detected on the pre-saturation velocity and
        returned frozen at their previous state.
        """
        m = self.mass_matrix(q)
        rhs = (torques - self.bias(q, qdot))[:, :, None]
        try:
            qddot = np.linalg.solve(m, rhs)[:, :, 0]
        except np.linalg.LinAlgError:
            qddot = np.full_like(q, np.nan)
            for i in range(self.n_robots):
                try:
                    qddot[i] = np.linalg.solve(m[i], rhs[i])[:, 0]
                except np.linalg.LinAlgError:
                    pass
        qdot_raw = qdot + dt * qddot
        with np.errstate(invalid="ignore"):
            diverged = ~np.all(np.isfinite(qdot_raw), axis=1) | np.any(
                np.abs(qdot_raw) > DIVERGENCE_QDOT, axis=1
            )
        qdot_new = np.clip(qdot_raw, -self.max_velocity, self.max_velocity)
        q_new = q + dt * qdot_new
        q_clipped = np.clip(q_new, self.range_lo, self.range_hi)
        qdot_new = np.where(q_clipped != q_new, 0.0, qdot_new)
        frozen = diverged[:, None]
        return (
            np.where(frozen, q, q_clipped),
            np.where(frozen, qdot, qdot_new),
            diverged,
        )

    def energy(self, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        """Kinetic + gravitational + joint-spring energy, (B,)."""
        m = self.mass_matrix(q)
        kinetic = 0.5 * np.einsum("bi,bij,bj->b", qdot, m, qdot)
        theta = np.cumsum(q, axis=1)
        potential = self.gravity * np.sum(self.beta * np.sin(theta), axis=1)
        spring = 0.5 * np.sum(self.stiffness * (q - self.nominal_pos) ** 2, axis=1)
        return kinetic + potential + spring

    def reset_q(self, rng: np.random.Generator) -> np.ndarray:
        """Initial positions: uniform over the middle 50% of each range."""
        u = rng.uniform(size=(self.n_robots, self.n_joints))
        width = self.range_hi - self.range_lo
        return self.range_lo + width * (0.25 + 0.5 * u)


class ChainModel:
    """Single-chain view over a batch of one; the unit-test-facing API."""

    def __init__(self, spec: EmbodimentSpec, gravity: float = 9.81):
        self.spec = spec
        self.gravity = float(gravity)
        self.batch = ChainBatch([spec], gravity)
        self.n_joints = spec.n_joints
        self.mass = self.batch.link_mass[0]
        self.first_moment = self.batch.link_mass[0] * self.batch.com_offset[0]
        self.inertia_about_joint = self.batch.inertia_about_joint[0]


def build_model(spec: EmbodimentSpec, gravity: float = 9.81) -> ChainModel:
    """Validate the spec and precompute dynamics constants."""
    validate_spec(spec)
    return ChainModel(spec, gravity)


def pd_torque(action: np.ndarray, state: SimState, spec: EmbodimentSpec) -> np.ndarray:
    """PD position control toward nominal + scaled action, with spring,
    damping and smoothed stiction terms, saturated at the torque limit."""
    batch = ChainBatch([spec])
    action = np.asarray(action, dtype=np.float64)
    return batch.pd_torque(action[None, :], state.q[None, :], state.qdot[None, :])[0]


def dynamics_step(model: ChainModel, state: SimState, torques: np.ndarray, dt: float) -> SimState:
    """Advance one substep. dt must lie in (0, 0.01]; diverged states are
    not steppable. Raises NumericError if the mass matrix is ill-conditioned
    (unreachable for valid specs; kept as a guard)."""
    if not 0.0 < dt <= 0.01:
        raise UsageError(f"dt must be in (0, 0.01], got {dt}")
    if state.diverged:
        raise UsageError("cannot step a diverged state")
    m = model.batch.mass_matrix(state.q[None, :])[0]
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise NumericError(f"mass matrix condition estimate {cond:.3g} exceeds {MAX_COND:.0e}")
    torques = np.asarray(torques, dtype=np.float64)
    q, qdot, diverged = model.batch.step(
        state.q[None, :], state.qdot[None, :], torques[None, :], dt
    )
    return SimState(
        q=q[0],
        qdot=qdot[0],
        t=state.t + dt,
        prev_action=state.prev_action.copy(),
        diverged=bool(diverged[0]),
    )


def total_energy(model: ChainModel, state: SimState) -> float:
    """Energy oracle: kinetic (rotor included) + gravitational + spring."""
    return float(model.batch.energy(state.q[None, :], state.qdot[None, :])[0])


def observe(state: SimState, episode_time: float = 4.0) -> Observation:
    """Assemble the per-joint and global observation rows for one state."""
    per_joint = np.stack([state.q, state.qdot, state.prev_action], axis=1)
    return Observation(
        per_joint=per_joint,
        global_feats=np.array([state.t / episode_time], dtype=np.float64),
    )


def reset(model: ChainModel, rng: np.random.Generator) -> SimState:
    """Fresh state: positions in the middle 50% of each joint range, at rest."""
    q = model.batch.reset_q(rng)[0]
    n = model.n_joints
    return SimState(q=q, qdot=np.zeros(n), t=0.0, prev_action=np.zeros(n), diverged=False)
