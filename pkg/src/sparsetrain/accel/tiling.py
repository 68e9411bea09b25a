"""Work decomposition: spatial tiles, synapse blocking and adder-tree plans."""

import math
from dataclasses import dataclass

from .._geometry import split_extent
from ..errors import ConfigError
from .config import OPERAND_BYTES
from .modes import Pass


@dataclass(frozen=True)
class TileAssignment:
    pe: int
    rows: tuple  # (start, stop) of the output fragment
    cols: tuple
    in_fragment: tuple  # (channels, rows, cols) including the halo
    halo_bytes: int

    @property
    def out_shape(self):
        return (self.rows[1] - self.rows[0], self.cols[1] - self.cols[0])

    @property
    def positions(self):
        return self.out_shape[0] * self.out_shape[1]


def output_grid(spec, pass_):
    """Spatial extent that the PE grid partitions, and the channel count of the streamed input."""
    pass_ = Pass(pass_)
    if pass_ is Pass.BP:
        return spec.in_shape[1:], spec.filter_shape[0]
    return spec.out_hw, spec.in_shape[0]


def _fragment_extent(n, stride, tap, pass_):
    halo = 2 * (tap // 2)
    if pass_ is Pass.BP:
        core = -(-n // stride)
    else:
        core = (n - 1) * stride + 1
    return core + halo, core


def tile_partition(spec, cfg, pass_=Pass.FP):
    """Split the pass's output plane over the Tx x Ty grid.

    The first ``n % T`` tiles in each dimension get one extra row or column.
    Each input fragment carries a halo of ``floor(R/2)`` rows (``floor(S/2)``
    columns) on both sides.
    """
    pass_ = Pass(pass_)
    (nu, nv), channels = output_grid(spec, pass_)
    if cfg.Tx > nu or cfg.Ty > nv:
        raise ConfigError(f"PE grid {cfg.Tx}x{cfg.Ty} is larger than the {nu}x{nv} output")
    _, _, r, s = spec.filter_shape
    tiles = []
    pe = 0
    for rows in split_extent(nu, cfg.Tx):
        for cols in split_extent(nv, cfg.Ty):
            fr, cr = _fragment_extent(rows[1] - rows[0], spec.stride, r, pass_)
            fc, cc = _fragment_extent(cols[1] - cols[0], spec.stride, s, pass_)
            halo = channels * (fr * fc - cr * cc) * OPERAND_BYTES
            tiles.append(TileAssignment(pe, rows, cols, (channels, fr, fc), halo))
            pe += 1
    return tiles


@dataclass(frozen=True)
class BlockingPlan:
    crs: int
    capacity: int
    sizes: tuple

    @property
    def iterations(self):
        return len(self.sizes)

    def iteration_of(self, index):
        """Iteration that stream element ``index`` belongs to."""
        return index // self.capacity


def plan_blocking(spec_or_crs, cfg):
    crs = spec_or_crs if isinstance(spec_or_crs, int) else spec_or_crs.crs
    if crs < 1:
        raise ValueError("crs must be >= 1")
    cap = cfg.capacity
    n = math.ceil(crs / cap)
    sizes = tuple(min(cap, crs - i * cap) for i in range(n))
    return BlockingPlan(crs, cap, sizes)


@dataclass(frozen=True)
class TreePass:
    lanes_per_output: int
    outputs_per_job: int
    first_chunk: int  # chunk offset into each output's stream
    jobs_per_output: int = 1


@dataclass(frozen=True)
class TreePlan:
    crs: int
    occupancy: int
    lanes: int
    passes: tuple
    reconfigured: bool

    @property
    def concurrent_outputs(self):
        """Outputs reduced side by side in the first pass."""
        return self.passes[0].outputs_per_job

    @property
    def steady_state_utilization(self):
        """Scheduled-lane fraction, assuming full chunks and full jobs."""
        used = sum(p.lanes_per_output * p.outputs_per_job * p.jobs_per_output for p in self.passes)
        return used / (self.lanes * sum(p.jobs_per_output for p in self.passes))


def configure_adder_tree(crs, cfg, reconfigurable=None):
    """Lay one output's chunks onto the lanes.

    Chunks beyond a multiple of the lane count form the residual. With a
    reconfigurable tree the residual is cut into power-of-two blocks, largest
    first, and each block is packed ``lanes / block`` outputs to a job.
    Otherwise every output keeps its residual lanes to itself.
    """
    if crs < 1:
        raise ValueError("crs must be >= 1")
    if reconfigurable is None:
        reconfigurable = cfg.reconfigurable_tree
    lanes = cfg.lanes_per_pe
    occ = math.ceil(crs / cfg.entries_per_group)
    full, resid = divmod(occ, lanes)
    passes = []
    if full:
        passes.append(TreePass(lanes, 1, 0, full))
    start = full * lanes
    if resid and not reconfigurable:
        passes.append(TreePass(resid, 1, start))
    elif resid:
        bit = 1 << (resid.bit_length() - 1)
        while resid:
            if resid & bit:
                passes.append(TreePass(bit, lanes // bit, start))
                start += bit
                resid -= bit
            bit >>= 1
    return TreePlan(crs, occ, lanes, tuple(passes), bool(reconfigurable))
