"""Orientation-aware vector neurons, planar symmetry detection and a small
reverse-mode autodiff engine for point clouds."""

from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateCloudError,
    DegenerateDirectionError,
    DivergenceError,
    DomainError,
    FormatError,
    NumericalError,
    OavnnError,
    ParseError,
)
from .geometry import PointCloud, ShapeSpec, TransformO3, gen_shape, load_xyz, random_o3, save_xyz
from .model import ModelConfig, build_model, evaluate, forward_segmentation, train
from .symmetry import planar_symmetry_direction, plane_classifier

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DegenerateCloudError",
    "DegenerateDirectionError",
    "DivergenceError",
    "DomainError",
    "FormatError",
    "ModelConfig",
    "NumericalError",
    "OavnnError",
    "ParseError",
    "PointCloud",
    "ShapeSpec",
    "TransformO3",
    "build_model",
    "evaluate",
    "forward_segmentation",
    "gen_shape",
    "load_xyz",
    "planar_symmetry_direction",
    "plane_classifier",
    "random_o3",
    "save_xyz",
    "train",
]
