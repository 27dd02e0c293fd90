"""Birth-death-move processes with mutations: simulation and likelihood inference."""
from .core import (BIRTH, DEATH, MUTATION, Configuration, DomainBox, JumpEvent, ParameterVector,
                   Particle, Track, Trajectory, configuration_at, d1_distance, validate_trajectory)
from .model import ModelSpec, load_model, model_from_config
from .simulate import SimOptions, TruncatedTrajectoryError, simulate

__version__ = "0.1.0"

__all__ = ["BIRTH", "DEATH", "MUTATION", "Configuration", "DomainBox", "JumpEvent", "ParameterVector",
           "Particle", "Track", "Trajectory", "configuration_at", "d1_distance", "validate_trajectory",
           "ModelSpec", "load_model", "model_from_config", "SimOptions", "TruncatedTrajectoryError",
           "simulate"]
