"""Index policies and Thompson-sampling learners for multi-AP packet routing with per-AP budgets."""

from .domain import InstanceConfig, FrameSchedule, synthetic_instance, validate_instance
from .env import IndexPolicy, build_kernel, instance_kernels, rollout
from .relaxation import build_lp, mmdpt_indices, solve_lp
from .scheduler import assign

__all__ = [
    "FrameSchedule", "IndexPolicy", "InstanceConfig", "assign", "build_kernel", "build_lp",
    "instance_kernels", "mmdpt_indices", "rollout", "solve_lp", "synthetic_instance",
    "validate_instance",
]
__version__ = "0.1.0"
