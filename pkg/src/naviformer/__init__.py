"""Navigation orienteering: environment, attention policy, training and baselines."""

from .core import NopInstance, Obstacle, verify_solution
from .generate import GenConfig, generate_instance

__all__ = ["NopInstance", "Obstacle", "verify_solution", "GenConfig", "generate_instance"]
__version__ = "0.1.0"
