"""Mobility model lab.

Learns where agents move and how long they dwell by pitting a recurrent
policy against a discriminator while a stochastic dwell-constraint model
shapes both the observations and the reward.
"""

__version__ = "0.1.0"

from .core import (AgentState, ParseError, ConfigError, StepRecord, Trajectory,
                   read_trajectories, rescale_duration, unscale_duration,
                   write_trajectories)
from .envsim import (GridParkConfig, RoadNetConfig, FacilitySpec, env_reset,
                     env_step, generate_demonstrations, ring_road_config)
from .dynamics import DynamicsModel, beta_log_pdf, pretrain_dynamics, sample_beta
from .agentnets import DiscriminatorNet, PolicyNet
from .gailtrain import TrainConfig, TrainingDiverged, generate, train
from .trpo import TrpoConfig
from .evalbench import MarkovModel, evaluate_generation, evaluate_next_loc

__all__ = [
    "__version__",
    "AgentState", "ParseError", "ConfigError", "StepRecord", "Trajectory",
    "read_trajectories", "write_trajectories", "rescale_duration",
    "unscale_duration",
    "GridParkConfig", "RoadNetConfig", "FacilitySpec", "env_reset", "env_step",
    "generate_demonstrations", "ring_road_config",
    "DynamicsModel", "beta_log_pdf", "pretrain_dynamics", "sample_beta",
    "DiscriminatorNet", "PolicyNet",
    "TrainConfig", "TrainingDiverged", "generate", "train",
    "TrpoConfig",
    "MarkovModel", "evaluate_generation", "evaluate_next_loc",
]
