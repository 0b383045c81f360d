"""Voxel-flow video frame synthesis in numpy with a compiled sampling core."""
from ._backend import NAME as BACKEND
from .model import NetworkConfig, build_network
from .sampler import VoxelFlowField, sample_backward, sample_forward
from .trainer import Checkpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["BACKEND", "Checkpoint", "NetworkConfig", "TrainConfig", "VoxelFlowField",
           "build_network", "evaluate", "sample_backward", "sample_forward", "train"]
