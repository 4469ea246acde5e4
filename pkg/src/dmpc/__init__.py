"""Distributed model predictive control for robot formations.

Robots solve one coupled optimal control problem cooperatively: consensus
ADMM for convex problems, decentralized SQP with inner ADMM for problems
with minimum-distance constraints. Agents exchange iterates in process or
over UDP multicast.
"""

from .admm import AdmmConfig, AdmmState, run_admm
from .controller import RunArtifacts, run_scenario
from .dsqp import DsqpConfig, SqpIterate, run_dsqp
from .problem import (
    ConstraintSet,
    CouplingGraph,
    PairConstraint,
    PartialNLP,
    RobotModel,
    StageCost,
    build_coupling_graph,
    build_partial_nlp,
)
from .qp import DenseQP, QPSolver
from .scenario import Scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "ConstraintSet",
    "CouplingGraph",
    "DenseQP",
    "DsqpConfig",
    "PairConstraint",
    "PartialNLP",
    "QPSolver",
    "RobotModel",
    "RunArtifacts",
    "Scenario",
    "SqpIterate",
    "StageCost",
    "build_coupling_graph",
    "build_partial_nlp",
    "load_scenario",
    "run_admm",
    "run_dsqp",
    "run_scenario",
]
