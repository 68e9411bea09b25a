"""Cycle-level model of one accelerator node."""

from .config import NodeConfig, WDU_INTERVAL_CYCLES
from .lanes import LaneSchedule, lane_schedule
from .modes import PASS_ORDER, SCENARIO_ORDER, Pass, Scenario
from .simulator import CycleStats, Operands, simulate_layer
from .tiling import (BlockingPlan, TileAssignment, TreePlan, configure_adder_tree, plan_blocking,
                     tile_partition)
from .wdu import RedistributionCommand, TileState, wdu_step

__all__ = [
    "BlockingPlan", "CycleStats", "LaneSchedule", "NodeConfig", "Operands", "PASS_ORDER", "Pass",
    "RedistributionCommand", "SCENARIO_ORDER", "Scenario", "TileAssignment", "TileState", "TreePlan",
    "WDU_INTERVAL_CYCLES", "configure_adder_tree", "lane_schedule", "plan_blocking", "simulate_layer",
    "tile_partition", "wdu_step",
]
