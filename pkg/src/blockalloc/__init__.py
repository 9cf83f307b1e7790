"""Latency-optimal assignment of fine-tuning blocks to edge devices."""
from .crunch import crunch_solve
from .jbba import JbbaOptions, jbba_solve
from .matching import bottleneck_via_search, min_weight_perfect_matching
from .model import (
    Assignment, BlockCostModel, ChannelEnv, CostMatrix, DeviceProfile,
    InfeasibleInstanceError, Instance, InstanceError, build_cost_matrix,
)

__version__ = "0.1.0"
