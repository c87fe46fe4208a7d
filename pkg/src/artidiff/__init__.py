"""Differentiable articulated rigid-body simulation.

Forward dynamics by the Articulated Body Algorithm, contact by projected
Gauss-Seidel, and exact reverse-mode gradients from hand-written adjoints of
every operator, with per-step checkpointing for constant-memory backward passes.
"""

from .model import (ContactMaterial, ContactSettings, JointSpec, LinkSpec, RobotModel, Scene,
                    Shape, SystemState, load_model, load_scene, read_scene, state_pack,
                    state_unpack)
from .objectives import ObjectiveSpec, make_objective
from .step import StepSettings
from .timeline import GradientReport, backward, predict_cost, rollout

__all__ = [
    "ContactMaterial", "ContactSettings", "GradientReport", "JointSpec", "LinkSpec",
    "ObjectiveSpec", "RobotModel", "Scene", "Shape", "StepSettings", "SystemState", "backward",
    "load_model", "load_scene", "make_objective", "predict_cost", "read_scene", "rollout",
    "state_pack", "state_unpack",
]

__version__ = "0.1.0"
