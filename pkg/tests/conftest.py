# BLAS thread pools must be pinned before numpy loads: the suite runs
# thousands of small-matrix ops where pool handoff costs more than the math.
import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from aei.embodiment import EmbodimentSpec, GeneralParams, JointParams


def make_joint(**overrides) -> JointParams:
    """A benign single joint; override what the test cares about."""
    values = dict(
        link_length=0.4,
        link_mass=1.5,
        link_inertia_com=0.02,
        com_offset=0.2,
        damping=0.0,
        rotor_inertia=0.0,
        stiction=0.0,
        stiffness=0.0,
        nominal_pos=0.0,
        range_lo=-6.0,
        range_hi=6.0,
        max_torque=1e6,
        max_velocity=1e6,
        child_count=0,
    )
    values.update(overrides)
    return JointParams(**values)


def make_spec(joints, kp=50.0, kd=2.0, action_scale=0.6) -> EmbodimentSpec:
    """Assemble a consistent spec from joints, fixing child counts/totals."""
    for i, j in enumerate(joints):
        j.child_count = 1 if i < len(joints) - 1 else 0
    general = GeneralParams(
        kp=kp,
        kd=kd,
        action_scale=action_scale,
        total_mass=sum(j.link_mass for j in joints),
        total_length=sum(j.link_length for j in joints),
    )
    return EmbodimentSpec(joints=joints, general=general)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
