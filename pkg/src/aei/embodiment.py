"""Embodiment parameter space: randomization, sampling and descriptor encoding.

An embodiment is the full set of physical and actuation parameters of one
planar serial-chain robot: per-joint quantities (link geometry, inertia,
friction, actuator limits) and global quantities (PD gains, action scaling,
totals). Training randomizes embodiments per episode; the identification
network predicts them in range-normalized units.

Descriptor layout
-----------------
Joint-level descriptor columns (order is the wire contract everywhere):

    link_length, link_mass, link_inertia_com, com_offset, damping,
    rotor_inertia, stiction, stiffness, nominal_pos, range_lo, range_hi,
    max_torque, max_velocity, child_count

The com_offset column encodes the offset as a *fraction of link length*
(its randomization is a fraction, and the fraction is what stays uniform
across link lengths). range_lo/range_hi are derived from nominal_pos and a
randomized half-width; their normalization bounds are derived accordingly.

General descriptor columns:

    kp, kd, action_scale, total_mass, total_length
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError

JOINT_FIELDS = (
    "link_length",
    "link_mass",
    "link_inertia_com",
    "com_offset",
    "damping",
    "rotor_inertia",
    "stiction",
    "stiffness",
    "nominal_pos",
    "range_lo",
    "range_hi",
    "max_torque",
    "max_velocity",
    "child_count",
)

GENERAL_FIELDS = ("kp", "kd", "action_scale", "total_mass", "total_length")

D_JOINT = len(JOINT_FIELDS)
D_GENERAL = len(GENERAL_FIELDS)

# Independently randomized quantities, in draw order. Everything else in the
# descriptor is derived from these.
JOINT_PRIMITIVES = (
    "link_length",
    "link_mass",
    "link_inertia_com",
    "com_offset_frac",
    "damping",
    "rotor_inertia",
    "stiction",
    "stiffness",
    "nominal_pos",
    "range_half_width",
    "max_torque",
    "max_velocity",
)

GENERAL_PRIMITIVES = ("kp", "kd", "action_scale")

_DEFAULT_RANGES = {
    "link_length": (0.2, 0.6),
    "link_mass": (0.5, 3.0),
    "link_inertia_com": (0.005, 0.1),
    "com_offset_frac": (0.3, 0.7),
    "damping": (0.0, 0.5),
    "rotor_inertia": (0.0, 0.015),
    "stiction": (0.0, 0.3),
    "stiffness": (0.0, 2.0),
    "nominal_pos": (-1.0, 1.0),
    "range_half_width": (0.5, 3.14),
    "max_torque": (5.0, 40.0),
    "max_velocity": (5.0, 30.0),
    "kp": (20.0, 80.0),
    "kd": (0.5, 4.0),
    "action_scale": (0.25, 1.0),
}

# Tolerance for "value sits on its range boundary" checks, scaled per field.
_EDGE_TOL = 1e-9


@dataclass
class JointParams:
    """Physical parameters of one joint and the link it drives.

    com_offset is the COM distance from the proximal joint along the link,
    in meters. child_count is 1 for every joint except the distal one (0).
    """

    link_length: float
    link_mass: float
    link_inertia_com: float
    com_offset: float
    damping: float
    rotor_inertia: float
    stiction: float
    stiffness: float
    nominal_pos: float
    range_lo: float
    range_hi: float
    max_torque: float
    max_velocity: float
    child_count: int


@dataclass
class GeneralParams:
    """Global parameters shared by all joints.

    total_mass and total_length are redundant sums over the joints, stored
    explicitly because they are identification targets in their own right.
    """

    kp: float
    kd: float
    action_scale: float
    total_mass: float
    total_length: float


@dataclass
class EmbodimentSpec:
    """Ground-truth embodiment of one robot: the identification target."""

    joints: list[JointParams]
    general: GeneralParams

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass
class NormalizedDescriptors:
    """Range-normalized encoding of an EmbodimentSpec.

    joint_matrix is (n_joints, D_JOINT), general_vector is (D_GENERAL,).
    Frozen fields (zero-width range) map to 0.5 by convention.
    """

    joint_matrix: np.ndarray
    general_vector: np.ndarray
    joint_mask: np.ndarray

    @property
    def n_joints(self) -> int:
        return self.joint_matrix.shape[0]


@dataclass
class RandomizationRanges:
    """Per-primitive (lo, hi) intervals. Frozen fields have lo == hi."""

    table: dict[str, tuple[float, float]] = field(
        default_factory=lambda: dict(_DEFAULT_RANGES)
    )

    def __post_init__(self):
        for name in self.table:
            if name not in _DEFAULT_RANGES:
                raise ConfigError(f"unknown randomization field '{name}'")
        for name in _DEFAULT_RANGES:
            if name not in self.table:
                raise ConfigError(f"missing randomization field '{name}'")
        self.validate()

    def validate(self):
        for name, (lo, hi) in self.table.items():
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ConfigError(f"range for '{name}' is not finite: ({lo}, {hi})")
            if lo > hi:
                raise ConfigError(f"range for '{name}' has lo > hi: ({lo}, {hi})")
        for name in ("link_length", "link_mass", "link_inertia_com",
                     "max_torque", "max_velocity", "kp", "kd", "action_scale"):
            if self.table[name][0] <= 0:
                raise ConfigError(f"range for '{name}' must be strictly positive")
        for name in ("damping", "rotor_inertia", "stiction", "stiffness"):
            if self.table[name][0] < 0:
                raise ConfigError(f"range for '{name}' must be non-negative")
        lo, hi = self.table["com_offset_frac"]
        if lo < 0.0 or hi > 1.0:
            raise ConfigError("com_offset_frac range must lie within [0, 1]")
        if self.table["range_half_width"][0] <= 0:
            raise ConfigError("range_half_width must be strictly positive")

    def frozen(self, name: str) -> bool:
        lo, hi = self.table[name]
        return lo == hi

    def freeze(self, *names: str) -> "RandomizationRanges":
        """Return a copy with the given primitives pinned to their midpoints."""
        table = dict(self.table)
        for name in names:
            if name not in table:
                raise ConfigError(f"unknown randomization field '{name}'")
            lo, hi = table[name]
            mid = 0.5 * (lo + hi)
            table[name] = (mid, mid)
        return RandomizationRanges(table)

    def freeze_all_except(self, *names: str) -> "RandomizationRanges":
        for name in names:
            if name not in self.table:
                raise ConfigError(f"unknown randomization field '{name}'")
        frozen = [n for n in self.table if n not in names]
        return self.freeze(*frozen)

    def joint_bounds(self) -> np.ndarray:
        """(D_JOINT, 2) normalization bounds per joint descriptor column."""
        t = self.table
        np_lo, np_hi = t["nominal_pos"]
        hw_lo, hw_hi = t["range_half_width"]
        bounds = {
            "link_length": t["link_length"],
            "link_mass": t["link_mass"],
            "link_inertia_com": t["link_inertia_com"],
            "com_offset": t["com_offset_frac"],
            "damping": t["damping"],
            "rotor_inertia": t["rotor_inertia"],
            "stiction": t["stiction"],
            "stiffness": t["stiffness"],
            "nominal_pos": (np_lo, np_hi),
            "range_lo": (np_lo - hw_hi, np_hi - hw_lo),
            "range_hi": (np_lo + hw_lo, np_hi + hw_hi),
            "max_torque": t["max_torque"],
            "max_velocity": t["max_velocity"],
            "child_count": (0.0, 1.0),
        }
        return np.array([bounds[f] for f in JOINT_FIELDS], dtype=np.float64)

    def general_bounds(self, n_joints: int) -> np.ndarray:
        """(D_GENERAL, 2) normalization bounds per general descriptor entry."""
        t = self.table
        m_lo, m_hi = t["link_mass"]
        l_lo, l_hi = t["link_length"]
        bounds = {
            "kp": t["kp"],
            "kd": t["kd"],
            "action_scale": t["action_scale"],
            "total_mass": (n_joints * m_lo, n_joints * m_hi),
            "total_length": (n_joints * l_lo, n_joints * l_hi),
        }
        return np.array([bounds[f] for f in GENERAL_FIELDS], dtype=np.float64)


def default_ranges() -> RandomizationRanges:
    return RandomizationRanges()


def validate_spec(spec: EmbodimentSpec):
    """Check every structural invariant; raise ConfigError on the first hit."""
    if spec.n_joints < 1:
        raise ConfigError("spec must have at least one joint")
    for i, j in enumerate(spec.joints):
        if not j.link_length > 0:
            raise ConfigError(f"joint {i}: link_length must be > 0")
        if not j.link_mass > 0:
            raise ConfigError(f"joint {i}: link_mass must be > 0")
        if not j.link_inertia_com > 0:
            raise ConfigError(f"joint {i}: link_inertia_com must be > 0")
        if not (0.0 <= j.com_offset <= j.link_length):
            raise ConfigError(f"joint {i}: com_offset must lie in [0, link_length]")
        if not j.range_lo < j.range_hi:
            raise ConfigError(f"joint {i}: range_lo must be < range_hi")
        if not (j.range_lo <= j.nominal_pos <= j.range_hi):
            raise ConfigError(f"joint {i}: nominal_pos outside joint range")
        for name in ("damping", "rotor_inertia", "stiction", "stiffness"):
            if getattr(j, name) < 0:
                raise ConfigError(f"joint {i}: {name} must be >= 0")
        if not j.max_torque > 0:
            raise ConfigError(f"joint {i}: max_torque must be > 0")
        if not j.max_velocity > 0:
            raise ConfigError(f"joint {i}: max_velocity must be > 0")
        expected_children = 1 if i < spec.n_joints - 1 else 0
        if j.child_count != expected_children:
            raise ConfigError(
                f"joint {i}: child_count must be {expected_children} on a serial chain"
            )
    g = spec.general
    for name in ("kp", "kd", "action_scale"):
        if getattr(g, name) <= 0:
            raise ConfigError(f"general: {name} must be > 0")
    mass_sum = sum(j.link_mass for j in spec.joints)
    length_sum = sum(j.link_length for j in spec.joints)
    if abs(g.total_mass - mass_sum) > 1e-9 * max(1.0, abs(mass_sum)):
        raise ConfigError("general: total_mass does not match sum of link masses")
    if abs(g.total_length - length_sum) > 1e-9 * max(1.0, abs(length_sum)):
        raise ConfigError("general: total_length does not match sum of link lengths")


def _build_spec(joint_draws: list[dict], general_draws: dict, n_joints: int) -> EmbodimentSpec:
    joints = []
    for i, d in enumerate(joint_draws):
        com_offset = min(d["com_offset_frac"] * d["link_length"], d["link_length"])
        joints.append(
            JointParams(
                link_length=d["link_length"],
                link_mass=d["link_mass"],
                link_inertia_com=d["link_inertia_com"],
                com_offset=com_offset,
                damping=d["damping"],
                rotor_inertia=d["rotor_inertia"],
                stiction=d["stiction"],
                stiffness=d["stiffness"],
                nominal_pos=d["nominal_pos"],
                range_lo=d["nominal_pos"] - d["range_half_width"],
                range_hi=d["nominal_pos"] + d["range_half_width"],
                max_torque=d["max_torque"],
                max_velocity=d["max_velocity"],
                child_count=1 if i < n_joints - 1 else 0,
            )
        )
    general = GeneralParams(
        kp=general_draws["kp"],
        kd=general_draws["kd"],
        action_scale=general_draws["action_scale"],
        total_mass=sum(j.link_mass for j in joints),
        total_length=sum(j.link_length for j in joints),
    )
    spec = EmbodimentSpec(joints=joints, general=general)
    validate_spec(spec)
    return spec


def sample_embodiment(
    ranges: RandomizationRanges, rng: np.random.Generator, n_joints: int
) -> EmbodimentSpec:
    """Draw one embodiment uniformly from the given ranges.

    Draw order is fixed (joints in order, JOINT_PRIMITIVES per joint, then
    GENERAL_PRIMITIVES) so a seeded stream always yields the same spec.
    Frozen fields still consume one draw, keeping streams aligned across
    configs that differ only in which fields are frozen.
    """
    if n_joints < 1:
        raise ConfigError("n_joints must be >= 1")
    ranges.validate()
    joint_draws = []
    for _ in range(n_joints):
        joint_draws.append(
            {name: rng.uniform(*ranges.table[name]) for name in JOINT_PRIMITIVES}
        )
    general_draws = {name: rng.uniform(*ranges.table[name]) for name in GENERAL_PRIMITIVES}
    return _build_spec(joint_draws, general_draws, n_joints)


def nominal_embodiment(ranges: RandomizationRanges, n_joints: int) -> EmbodimentSpec:
    """The range-midpoint embodiment: what the policy is told it controls."""
    if n_joints < 1:
        raise ConfigError("n_joints must be >= 1")
    ranges.validate()
    mid = {name: 0.5 * (lo + hi) for name, (lo, hi) in ranges.table.items()}
    joint_draws = [{name: mid[name] for name in JOINT_PRIMITIVES} for _ in range(n_joints)]
    general_draws = {name: mid[name] for name in GENERAL_PRIMITIVES}
    return _build_spec(joint_draws, general_draws, n_joints)


def _joint_descriptor_values(spec: EmbodimentSpec) -> np.ndarray:
    """(n, D_JOINT) raw descriptor values; com_offset as fraction of length."""
    rows = []
    for j in spec.joints:
        rows.append(
            [
                j.link_length,
                j.link_mass,
                j.link_inertia_com,
                j.com_offset / j.link_length,
                j.damping,
                j.rotor_inertia,
                j.stiction,
                j.stiffness,
                j.nominal_pos,
                j.range_lo,
                j.range_hi,
                j.max_torque,
                j.max_velocity,
                float(j.child_count),
            ]
        )
    return np.array(rows, dtype=np.float64)


def _general_descriptor_values(spec: EmbodimentSpec) -> np.ndarray:
    g = spec.general
    return np.array(
        [g.kp, g.kd, g.action_scale, g.total_mass, g.total_length], dtype=np.float64
    )


def _normalize_block(values, bounds, field_names, what):
    lo = bounds[:, 0]
    hi = bounds[:, 1]
    width = hi - lo
    frozen = width == 0.0
    tol = _EDGE_TOL * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    below = values < lo - tol
    above = values > hi + tol
    if np.any(below | above):
        idx = np.argwhere(below | above)[0]
        name = field_names[idx[-1]]
        where = f"joint {idx[0]}, " if values.ndim == 2 else ""
        raise DataError(
            f"{what} field '{name}' ({where}value {values[tuple(idx)]:.6g}) "
            f"outside range [{lo[idx[-1]]:.6g}, {hi[idx[-1]]:.6g}]"
        )
    clipped = np.clip(values, lo, hi)
    if np.any(clipped != values):
        warnings.warn(f"{what} descriptor clamped to range boundary", stacklevel=3)
    out = np.empty_like(clipped)
    safe_width = np.where(frozen, 1.0, width)
    out = (clipped - lo) / safe_width
    out = np.where(frozen, 0.5, out)
    return out


def normalize_descriptors(
    spec: EmbodimentSpec, ranges: RandomizationRanges
) -> NormalizedDescriptors:
    """Map a spec to unit-interval descriptors against the given ranges.

    Values outside their range by more than a boundary tolerance raise
    DataError naming the field; boundary-tolerance violations are clamped.
    """
    jb = ranges.joint_bounds()
    gb = ranges.general_bounds(spec.n_joints)
    joint_matrix = _normalize_block(
        _joint_descriptor_values(spec), jb, JOINT_FIELDS, "joint"
    )
    general_vector = _normalize_block(
        _general_descriptor_values(spec), gb, GENERAL_FIELDS, "general"
    )
    return NormalizedDescriptors(
        joint_matrix=joint_matrix,
        general_vector=general_vector,
        joint_mask=np.ones(spec.n_joints, dtype=bool),
    )


def denormalize_descriptors(
    norm: NormalizedDescriptors, ranges: RandomizationRanges
) -> EmbodimentSpec:
    """Inverse of normalize_descriptors, without re-imposing consistency.

    Network predictions may land outside [0, 1] and need not satisfy the
    redundancy invariants (total_mass vs link masses, etc.); the returned
    spec is *not* validated. com_offset is reconstructed from the predicted
    fraction and the predicted link_length of the same row.
    """
    if not (np.all(np.isfinite(norm.joint_matrix)) and np.all(np.isfinite(norm.general_vector))):
        raise NumericError("descriptors contain non-finite entries")
    jb = ranges.joint_bounds()
    gb = ranges.general_bounds(norm.n_joints)
    jm = jb[:, 0] + norm.joint_matrix * (jb[:, 1] - jb[:, 0])
    gv = gb[:, 0] + norm.general_vector * (gb[:, 1] - gb[:, 0])
    col = {name: i for i, name in enumerate(JOINT_FIELDS)}
    joints = []
    for i in range(norm.n_joints):
        row = jm[i]
        joints.append(
            JointParams(
                link_length=row[col["link_length"]],
                link_mass=row[col["link_mass"]],
                link_inertia_com=row[col["link_inertia_com"]],
                com_offset=row[col["com_offset"]] * row[col["link_length"]],
                damping=row[col["damping"]],
                rotor_inertia=row[col["rotor_inertia"]],
                stiction=row[col["stiction"]],
                stiffness=row[col["stiffness"]],
                nominal_pos=row[col["nominal_pos"]],
                range_lo=row[col["range_lo"]],
                range_hi=row[col["range_hi"]],
                max_torque=row[col["max_torque"]],
                max_velocity=row[col["max_velocity"]],
                child_count=row[col["child_count"]],
            )
        )
    general = GeneralParams(
        kp=gv[0], kd=gv[1], action_scale=gv[2], total_mass=gv[3], total_length=gv[4]
    )
    return EmbodimentSpec(joints=joints, general=general)


def default_loss_mask() -> tuple[np.ndarray, np.ndarray]:
    """(joint_mask, general_mask) over descriptor columns for the id loss.

    child_count is deterministic on a serial chain, so it is excluded by
    default; everything else is a target.
    """
    joint_mask = np.array([f != "child_count" for f in JOINT_FIELDS], dtype=bool)
    general_mask = np.ones(D_GENERAL, dtype=bool)
    return joint_mask, general_mask
