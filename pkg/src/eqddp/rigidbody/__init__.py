from .dynamics import (
    ContactKinematics,
    DynamicsError,
    DynamicsPoint,
    assemble_condensed,
    assemble_redundant,
    bias,
    centre_of_mass,
    contact_forward_dynamics,
    contact_kinematics,
    contact_positions,
    contact_velocities,
    evaluate,
    impulse_dynamics,
    kinetic_energy,
    mass_matrix,
    potential_energy,
    recover_torque,
    rnea,
    rnea_derivatives,
    stabilize,
)
from .model import (
    Actuation,
    BirotorActuation,
    ContactFrame,
    ContactSet,
    JointActuation,
    ModelSpecError,
    PlanarModel,
    actuation_from_dict,
)
