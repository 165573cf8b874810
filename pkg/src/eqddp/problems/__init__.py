from .builder import (
    BUILTIN,
    NodeSlot,
    ProblemSpec,
    SpecError,
    build_model,
    build_problem,
    initial_guess,
    load_spec,
    quasi_static_control,
    schedule,
)
from .costs import CostTerm, barrier_cost, friction_cone, friction_cone_penalty, soft_contact_terms
from .nodes import ForwardDynamicsNode, ImpulseNode, InverseDynamicsNode, RobotTerminal
