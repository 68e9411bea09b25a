"""Lane-level timing: group drains, job packing and the double-buffered pipeline."""

import math
from dataclasses import dataclass

import numpy as np

from .config import OFFSET_BITS, OPERAND_BYTES


@dataclass(frozen=True)
class LaneSchedule:
    drain: int
    stalls: np.ndarray

    @property
    def total_stall(self):
        return int(self.stalls.sum())


def lane_schedule(nz_counts, entries_per_group=32):
    """Drain time of one group: the slowest lane sets the pace, the rest stall."""
    nz = np.asarray(nz_counts, dtype=np.int64)
    if nz.ndim != 1 or nz.size == 0:
        raise ValueError("nz_counts must be a non-empty 1-d sequence")
    if nz.min() < 0 or nz.max() > entries_per_group:
        raise ValueError(f"lane counts must lie in [0, {entries_per_group}]")
    drain = int(nz.max())
    return LaneSchedule(drain, drain - nz)


def lane_load_cycles(cfg, indexed, operands=1):
    """SRAM cycles to fill one lane's group slot."""
    per_operand = cfg.entries_per_group * OPERAND_BYTES
    if indexed:
        per_operand += math.ceil(cfg.entries_per_group * OFFSET_BITS / 8)
    return math.ceil(operands * per_operand / cfg.sram_bw_bytes_per_cycle)


@dataclass
class Jobs:
    """One row per group load. Lanes in a job share a single drain."""

    out_lo: np.ndarray
    out_hi: np.ndarray
    chunk_lo: np.ndarray
    tree_pass: np.ndarray
    iteration: np.ndarray
    lanes: np.ndarray
    drain: np.ndarray
    min_nz: np.ndarray
    useful: np.ndarray
    load: np.ndarray
    index_bytes: np.ndarray  # offset-map bytes fetched for the non-zeros

    def __len__(self):
        return len(self.drain)

    def take(self, idx):
        return Jobs(**{k: v[idx] for k, v in vars(self).items()})

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(*([z] * 11))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in vars(parts[0])})


def _pack(block, k, first_out, chunk_lo, sweep, tree_pass, lane_load):
    """Group rows of ``block`` (outputs x lanes) ``k`` outputs to a job."""
    n_out, width = block.shape
    n_jobs = -(-n_out // k)
    padded = np.full((n_jobs * k, width), -1, dtype=np.int64)
    padded[:n_out] = block
    lanes = padded.reshape(n_jobs, k * width)
    live = lanes >= 0
    n_lanes = live.sum(axis=1)
    lo = first_out + np.arange(n_jobs) * k
    return Jobs(
        out_lo=lo,
        out_hi=np.minimum(lo + k, first_out + n_out),
        chunk_lo=np.broadcast_to(chunk_lo, n_jobs).copy(),
        tree_pass=np.full(n_jobs, tree_pass),
        iteration=np.full(n_jobs, sweep),
        lanes=n_lanes,
        drain=lanes.max(axis=1),
        min_nz=np.where(live, lanes, np.iinfo(np.int64).max).min(axis=1),
        useful=np.where(live, lanes, 0).sum(axis=1),
        load=n_lanes * lane_load,
        index_bytes=np.where(live, (lanes * OFFSET_BITS + 7) // 8 + 1, 0).sum(axis=1),
    )


def build_jobs(nz, plan, lane_load, groups):
    """Pack per-output chunk counts ``nz`` (n_outputs, occupancy) into jobs.

    Work is ordered in sweeps. Each blocked iteration's full-width groups form
    one sweep, visited output by output, each output taking ``groups``
    consecutive group loads. Every residual tree pass then forms its own sweep.
    A job's ``iteration`` is its sweep index, so ``(iteration, output)`` never
    decreases along the list.
    """
    nz = np.asarray(nz, dtype=np.int64)
    n_out = nz.shape[0]
    if n_out == 0:
        return Jobs.empty()
    parts = []
    sweep = 0
    for p_idx, tp in enumerate(plan.passes):
        lanes = tp.lanes_per_output
        if lanes == plan.lanes:  # full-width groups, one output per job
            for r0 in range(0, tp.jobs_per_output, groups):
                r1 = min(r0 + groups, tp.jobs_per_output)
                nrep = r1 - r0
                c0 = tp.first_chunk + r0 * lanes
                block = nz[:, c0:c0 + nrep * lanes].reshape(n_out * nrep, lanes)
                job = _pack(block, 1, 0, 0, sweep, p_idx, lane_load)
                job.out_lo = np.repeat(np.arange(n_out), nrep)
                job.out_hi = job.out_lo + 1
                job.chunk_lo = np.tile(c0 + np.arange(nrep) * lanes, n_out)
                parts.append(job)
                sweep += 1
        else:
            block = nz[:, tp.first_chunk:tp.first_chunk + lanes]
            parts.append(_pack(block, tp.outputs_per_job, 0, tp.first_chunk, sweep, p_idx, lane_load))
            sweep += 1
    return Jobs.concat(parts)


def pipeline(loads, drains, start, groups):
    """Drain start/end times for jobs run back to back on one PE.

    Group ``j`` may start loading once the port is free and the buffer used by
    job ``j - groups`` has drained; it drains once loaded and once job ``j-1``
    has finished. One group means no overlap at all.
    """
    n = len(drains)
    s = np.empty(n, dtype=np.int64)
    e = np.empty(n, dtype=np.int64)
    port = start
    ends = []
    prev_end = start
    for j in range(n):
        ld_start = port
        if j >= groups:
            ld_start = max(ld_start, ends[j - groups])
        port = ld_start + int(loads[j])
        s[j] = max(port, prev_end)
        prev_end = s[j] + int(drains[j])
        e[j] = prev_end
        ends.append(prev_end)
    return s, e
