"""Cycle model of one node running one pass of one layer.

The numeric result always comes from the functional kernels; the timing model
only decides how long the node would take. Work is split into filter periods
(one output channel in FP, one input-gradient channel in BP, one gradient map
in WG). Every PE serves the same filter during a period, so periods end on a
node-wide barrier. Within a period, each PE drains its jobs through the
double-buffered lane pipeline.
"""

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import sparse_kernels as sk
from .._geometry import pad_chw
from ..errors import IntegrityError, MissingOperandError
from ..sparsity_index import OffsetMap, OutputBitmap
from .config import OPERAND_BYTES, WDU_INTERVAL_CYCLES, NodeConfig
from .lanes import Jobs, build_jobs, lane_load_cycles, pipeline
from .modes import Pass, Scenario
from .tiling import configure_adder_tree, tile_partition
from .wdu import TileState, wdu_step


@dataclass
class Operands:
    """Tensors for one layer pass. Which fields matter depends on the pass.

    FP reads ``x``, ``w`` and ``x_offsets``; BP reads ``dy``, ``w``,
    ``dy_offsets`` and ``out_bitmap``; WG reads ``x``, ``dy`` and both offset
    maps.
    """

    x: np.ndarray = None
    w: np.ndarray = None
    dy: np.ndarray = None
    x_offsets: OffsetMap = None
    dy_offsets: OffsetMap = None
    out_bitmap: OutputBitmap = None


CATEGORIES = ("busy", "lane_stall", "load", "reduce", "comm", "idle")


@dataclass(frozen=True)
class CycleStats:
    busy: tuple
    lane_stall: tuple
    load: tuple
    reduce: tuple
    comm: tuple
    idle: tuple
    total: tuple
    total_cycles: int
    wr_events: int = 0
    wr_commands: int = 0
    halo_bytes: int = 0
    wr_bytes: int = 0
    useful_lane_cycles: int = 0
    scheduled_lane_cycles: int = 0
    events: dict = field(default_factory=dict)

    def __post_init__(self):
        for pe, tot in enumerate(self.total):
            parts = sum(getattr(self, c)[pe] for c in CATEGORIES)
            if parts != tot:
                raise IntegrityError(f"PE {pe}: categories sum to {parts}, total is {tot}")
        if self.total and self.total_cycles != max(self.total):
            raise IntegrityError("node total is not the maximum PE total")

    @property
    def num_pes(self):
        return len(self.total)

    @property
    def active(self):
        """Per-PE latency: everything except waiting."""
        return tuple(t - i for t, i in zip(self.total, self.idle))

    @property
    def avg_max_ratio(self):
        act = self.active
        if not act or max(act) == 0:
            return 1.0
        return float(np.mean(act) / max(act))

    @property
    def lane_utilization(self):
        if self.scheduled_lane_cycles == 0:
            return 0.0
        return self.useful_lane_cycles / self.scheduled_lane_cycles

    @property
    def compute_cycles(self):
        """Longest per-PE drain time."""
        return max((b + s for b, s in zip(self.busy, self.lane_stall)), default=0)

    def to_dict(self):
        d = {c: list(getattr(self, c)) for c in CATEGORIES + ("total",)}
        d.update(
            total_cycles=self.total_cycles,
            avg_max_ratio=self.avg_max_ratio,
            lane_utilization=self.lane_utilization,
            wr_events=self.wr_events,
            wr_commands=self.wr_commands,
            halo_bytes=self.halo_bytes,
            wr_bytes=self.wr_bytes,
            useful_lane_cycles=self.useful_lane_cycles,
            scheduled_lane_cycles=self.scheduled_lane_cycles,
            events=dict(self.events),
        )
        return d


# ---------------------------------------------------------------- streams

def _chunk_counts(mask, entries):
    """Sum a (n, L) boolean stream matrix over 32-entry chunks -> (n, occupancy)."""
    n, length = mask.shape
    occ = -(-length // entries)
    padded = np.zeros((n, occ * entries), dtype=np.int64)
    padded[:, :length] = mask
    return padded.reshape(n, occ, entries).sum(axis=2)


def _dense_counts(n, length, entries):
    occ = -(-length // entries)
    sizes = np.full(occ, entries, dtype=np.int64)
    sizes[-1] = length - (occ - 1) * entries
    return np.broadcast_to(sizes, (n, occ))


def _windows(mask, spec):
    """Forward receptive-field masks, (U, V, R, S, C). Padding reads as False."""
    _, _, r, s = spec.filter_shape
    u, v = spec.out_hw
    st = spec.stride
    win = sliding_window_view(pad_chw(mask, spec.padding), (r, s), axis=(1, 2))
    win = win[:, ::st, ::st][:, :u, :v]
    return win.transpose(1, 2, 3, 4, 0)


def _tap_index(n_in, n_out, stride, pad, tap):
    t = np.arange(n_in) + pad - tap
    valid = (t >= 0) & (t % stride == 0) & (t // stride < n_out)
    return np.where(valid, t // stride, 0), valid


def _bp_taps(spec, dynz):
    """Which of the (r, s, m) stream entries each input-gradient location reads. (H, W, RSM)."""
    m, _, r, s = spec.filter_shape
    _, h, w = spec.in_shape
    u, v = spec.out_hw
    out = np.zeros((h, w, r, s, m), dtype=bool)
    for i in range(r):
        uidx, hval = _tap_index(h, u, spec.stride, spec.padding, i)
        for j in range(s):
            vidx, wval = _tap_index(w, v, spec.stride, spec.padding, j)
            tap = hval[:, None] & wval[None, :]
            g = dynz[:, uidx][:, :, vidx] & tap[None]
            out[:, :, i, j, :] = g.transpose(1, 2, 0)
    return out.reshape(h, w, r * s * m)


@dataclass
class _Period:
    nz: list  # per PE: (n_outputs, occupancy)
    coords: list  # per PE: (n_outputs, 2)
    repeat: int = 1


def _tile_coords(tile):
    rr, cc = np.meshgrid(np.arange(*tile.rows), np.arange(*tile.cols), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def _fp_periods(spec, xnz, tiles, entries):
    m = spec.filter_shape[0]
    crs = spec.crs
    if xnz is None:
        u, v = spec.out_hw
        counts = _dense_counts(u * v, crs, entries).reshape(u, v, -1)
    else:
        win = _windows(xnz, spec)
        u, v = win.shape[:2]
        counts = _chunk_counts(win.reshape(u * v, crs), entries).reshape(u, v, -1)
    nz = [counts[slice(*t.rows), slice(*t.cols)].reshape(t.positions, -1) for t in tiles]
    coords = [_tile_coords(t) for t in tiles]
    return [_Period(nz, coords, m)]


def _bp_periods(spec, dynz, bitmap, tiles, entries):
    c = spec.in_shape[0]
    _, h, w = spec.in_shape
    m, _, r, s = spec.filter_shape
    length = m * r * s
    if dynz is None:
        counts = _dense_counts(h * w, length, entries).reshape(h, w, -1)
    else:
        counts = _chunk_counts(_bp_taps(spec, dynz).reshape(h * w, length), entries).reshape(h, w, -1)
    base = [counts[slice(*t.rows), slice(*t.cols)].reshape(t.positions, -1) for t in tiles]
    coords = [_tile_coords(t) for t in tiles]
    if bitmap is None:
        return [_Period(base, coords, c)]
    periods = []
    for ch in range(c):
        keep = [bitmap[ch][slice(*t.rows), slice(*t.cols)].ravel() for t in tiles]
        periods.append(_Period([b[k] for b, k in zip(base, keep)], [q[k] for q, k in zip(coords, keep)]))
    return periods


def _wg_periods(spec, xnz, dynz, tiles, entries):
    m, c, r, s = spec.filter_shape
    crs = spec.crs
    out_coords = np.stack([np.repeat(np.arange(c), r * s), np.tile(np.arange(r * s), c)], axis=1)
    coords = [out_coords for _ in tiles]
    if xnz is None and dynz is None:
        nz = [_dense_counts(crs, t.positions, entries) for t in tiles]
        return [_Period(nz, coords, m)]
    xm = np.ones(spec.in_shape, dtype=bool) if xnz is None else xnz
    win = _windows(xm, spec)  # (U, V, R, S, C)
    xt = []
    for t in tiles:
        part = win[slice(*t.rows), slice(*t.cols)].reshape(t.positions, r, s, c)
        xt.append(part.transpose(3, 1, 2, 0).reshape(crs, t.positions))
    if dynz is None:
        return [_Period([_chunk_counts(x, entries) for x in xt], coords, m)]
    periods = []
    for mi in range(m):
        nz = []
        for t, x in zip(tiles, xt):
            g = dynz[mi][slice(*t.rows), slice(*t.cols)].ravel()
            nz.append(_chunk_counts(x & g[None], entries))
        periods.append(_Period(nz, coords))
    return periods


# ---------------------------------------------------------------- footprints

def _span(lo, hi, extent):
    return max(0, min(hi, extent - 1) - max(lo, 0) + 1)


def _fp_footprint(spec, tile, coords):
    c, h, w = spec.in_shape
    _, _, r, s = spec.filter_shape
    st, p = spec.stride, spec.padding
    u, v = coords[:, 0], coords[:, 1]
    rows = _span(u.min() * st - p, u.max() * st - p + r - 1, h)
    cols = _span(v.min() * st - p, v.max() * st - p + s - 1, w)
    return c * rows * cols


def _bp_footprint(spec, tile, coords):
    m, _, r, s = spec.filter_shape
    u_out, v_out = spec.out_hw
    st, p = spec.stride, spec.padding
    hh, ww = coords[:, 0], coords[:, 1]
    rows = _span(-(-(hh.min() + p - r + 1) // st), (hh.max() + p) // st, u_out)
    cols = _span(-(-(ww.min() + p - s + 1) // st), (ww.max() + p) // st, v_out)
    return m * rows * cols


def _wg_footprint(spec, tile, coords):
    _, fr, fc = tile.in_fragment
    channels = len(np.unique(coords[:, 0]))
    return channels * fr * fc + tile.positions


# ---------------------------------------------------------------- period timing

@dataclass
class _Run:
    arrive: int
    comm: int
    load: int
    jobs: Jobs
    s: np.ndarray
    e: np.ndarray
    fills: int
    end: int


def _make_run(arrive, comm, load, jobs, cfg):
    begin = arrive + comm + load
    s, e = pipeline(jobs.load, jobs.drain, begin, cfg.groups)
    fills = len(np.unique(jobs.tree_pass)) * cfg.adder_latency_cycles if len(jobs) else 0
    end = (int(e[-1]) if len(jobs) else begin) + fills
    return _Run(arrive, comm, load, jobs, s, e, fills, end)


def _truncate(run, keep, cfg):
    jobs = run.jobs.take(slice(0, keep))
    fills = len(np.unique(jobs.tree_pass)) * cfg.adder_latency_cycles if keep else 0
    begin = run.arrive + run.comm + run.load
    end = (int(run.e[keep - 1]) if keep else begin) + fills
    return _Run(run.arrive, run.comm, run.load, jobs, run.s[:keep], run.e[:keep], fills, end)


def _state(pe, run, t, coords):
    n = len(run.jobs)
    if n == 0:
        z = (0, 0, 0)
        return TileState(pe, z, z, z, 0, 0, True)

    def tup(j):
        o = run.jobs.out_lo[j]
        return (int(run.jobs.iteration[j]), int(coords[o, 0]), int(coords[o, 1]))

    done = t >= run.end
    started = n if done else int(np.searchsorted(run.s, t, side="right"))
    pos = min(max(started - 1, 0), n - 1)
    return TileState(pe, tup(0), tup(pos), tup(n - 1), n, n - started, done)


def _run_period(pe_jobs, coords, start_comm, start_load, tail_comm, cfg, use_wdu, price):
    """Time one filter period. Returns per-PE category arrays, length and WR counters."""
    num = len(pe_jobs)
    runs = [[_make_run(0, start_comm, ld, j, cfg)] for j, ld in zip(pe_jobs, start_load)]
    commands = events = wr_bytes = 0
    if use_wdu:
        t = WDU_INTERVAL_CYCLES
        while True:
            last = [r[-1] for r in runs]
            if t >= max(r.end for r in last):
                break
            states = [_state(p, last[p], t, coords) for p in range(num)]

            def cost(state, moved):
                run = last[state.pe]
                return price(run.jobs.take(slice(len(run.jobs) - moved, None)))

            cmd = wdu_step(states, cfg, cost)
            if cmd is not None:
                commands += 1
                src = last[cmd.source]
                n = len(src.jobs)
                moved = src.jobs.take(slice(n - cmd.moved, None))
                kept = _truncate(src, n - cmd.moved, cfg)
                transfer = math.ceil(cmd.transfer_bytes / cfg.broadcast_bw_bytes_per_cycle)
                recv = _make_run(t, transfer, 0, moved, cfg)
                # only act when it shortens the critical path
                if max(kept.end, recv.end) < src.end:
                    runs[cmd.source][-1] = kept
                    runs[cmd.target].append(recv)
                    events += 1
                    wr_bytes += cmd.transfer_bytes
            t += WDU_INTERVAL_CYCLES
    length = max(r[-1].end for r in runs) + tail_comm
    cats = {c: np.zeros(num, dtype=np.int64) for c in CATEGORIES}
    sched = useful = loaded_lanes = index_bytes = 0
    for p, pe_runs in enumerate(runs):
        cats["comm"][p] += tail_comm
        for run in pe_runs:
            jobs = run.jobs
            cats["comm"][p] += run.comm
            cats["reduce"][p] += run.fills
            drain = int(jobs.drain.sum())
            busy = int(jobs.min_nz.sum())
            cats["busy"][p] += busy
            cats["lane_stall"][p] += drain - busy
            begin = run.arrive + run.comm + run.load
            last_e = int(run.e[-1]) if len(jobs) else begin
            cats["load"][p] += run.load + (last_e - begin - drain)
            sched += drain * cfg.lanes_per_pe
            useful += int(jobs.useful.sum())
            loaded_lanes += int(jobs.lanes.sum())
            index_bytes += int(jobs.index_bytes.sum())
        used = sum(cats[c][p] for c in CATEGORIES if c != "idle")
        cats["idle"][p] = length - used
    return cats, length, dict(commands=commands, events=events, wr_bytes=wr_bytes,
                              scheduled=sched, useful=useful, loaded_lanes=loaded_lanes,
                              index_bytes=index_bytes)


# ---------------------------------------------------------------- entry point

def _mask_of(offsets, use):
    return offsets.nonzero_mask() if (use and offsets is not None) else None


def simulate_layer(spec, operands, cfg=None, scenario=Scenario.IN, pass_=Pass.FP, backend=None):
    """Run one pass of ``spec`` under ``scenario``.

    Returns ``(CycleStats, MacStats, output)``; the output is exactly what the
    matching sparse-kernel call returns.
    """
    cfg = cfg or NodeConfig()
    scenario = Scenario(scenario)
    pass_ = Pass(pass_)
    ops = operands
    use_in = scenario.uses_input
    block = cfg.capacity
    entries = cfg.entries_per_group
    tiles = tile_partition(spec, cfg, pass_)
    m, c, r, s = spec.filter_shape
    bbw = cfg.broadcast_bw_bytes_per_cycle
    bitmap = None

    if pass_ is Pass.FP:
        xo = ops.x_offsets if use_in else None
        out, macs = sk.sparse_conv_forward(ops.x, xo, ops.w, spec, block=block, backend=backend)
        xnz = _mask_of(xo, use_in)
        indexed = xnz is not None
        periods = _fp_periods(spec, xnz, tiles, entries)
        stream_len = spec.crs
        weight_bytes = spec.crs * OPERAND_BYTES
        footprint = partial(_fp_footprint, spec)
    elif pass_ is Pass.BP:
        dyo = ops.dy_offsets if use_in else None
        if scenario.uses_output:
            if ops.out_bitmap is None:
                raise MissingOperandError(f"scenario {scenario.value} needs the forward output bitmap in BP")
            bm = ops.out_bitmap if isinstance(ops.out_bitmap, OutputBitmap) else OutputBitmap(ops.out_bitmap)
            bitmap = bm.bits
        out, macs = sk.sparse_conv_backward_data(ops.dy, dyo, ops.w, None if bitmap is None else bm,
                                                 spec, block=block, backend=backend)
        dynz = _mask_of(dyo, use_in)
        indexed = dynz is not None
        periods = _bp_periods(spec, dynz, bitmap, tiles, entries)
        stream_len = m * r * s
        weight_bytes = m * r * s * OPERAND_BYTES
        footprint = partial(_bp_footprint, spec)
    else:
        xo = ops.x_offsets if use_in else None
        dyo = ops.dy_offsets if use_in else None
        out, macs = sk._weight_grad(ops.x, ops.dy, spec, xo, dyo, block=block, backend=backend)
        xnz = _mask_of(xo, use_in)
        dynz = _mask_of(dyo, use_in)
        indexed = xnz is not None or dynz is not None
        periods = _wg_periods(spec, xnz, dynz, tiles, entries)
        stream_len = None
        weight_bytes = 0
        footprint = partial(_wg_footprint, spec)

    plans = {}

    def plan_for(length):
        if length not in plans:
            plans[length] = configure_adder_tree(length, cfg)
        return plans[length]

    lane_load = lane_load_cycles(cfg, indexed)
    halo_bytes = sum(t.halo_bytes for t in tiles)
    halo_cycles = math.ceil(halo_bytes / bbw)
    weight_cycles = math.ceil(weight_bytes / bbw)
    if pass_ is Pass.WG:
        per_pe_load = [math.ceil(t.positions * OPERAND_BYTES / cfg.sram_bw_bytes_per_cycle) for t in tiles]
        reduce_bytes = spec.crs * OPERAND_BYTES * cfg.num_pes
        tail = math.ceil(reduce_bytes / bbw)
    else:
        per_pe_load = [0] * len(tiles)
        reduce_bytes = 0
        tail = 0
    resident_bytes = sum(t.positions for t in tiles) * OPERAND_BYTES if pass_ is Pass.WG else 0

    num = cfg.num_pes
    totals = {k: np.zeros(num, dtype=np.int64) for k in CATEGORIES}
    totals["comm"] += halo_cycles
    length_total = halo_cycles
    agg = dict(commands=0, events=0, wr_bytes=0, scheduled=0, useful=0, loaded_lanes=0, index_bytes=0)
    n_periods = 0
    unit = cfg.wr_transfer_cost_bytes_per_element

    for period in periods:
        pe_jobs = []
        base = 0
        glob_coords = []
        owner = []
        for p, nz in enumerate(period.nz):
            length = stream_len if stream_len is not None else tiles[p].positions
            pcoords = period.coords[p]
            if indexed:
                # an output whose offset segments are all empty is known zero without a lane
                live = np.asarray(nz).sum(axis=1) > 0
                nz, pcoords = nz[live], pcoords[live]
            jobs = build_jobs(nz, plan_for(length), lane_load, cfg.groups)
            jobs.out_lo = jobs.out_lo + base
            jobs.out_hi = jobs.out_hi + base
            pe_jobs.append(jobs)
            glob_coords.append(pcoords)
            owner.append(np.full(len(nz), p))
            base += len(nz)
        coords = np.concatenate(glob_coords) if glob_coords else np.zeros((0, 2), dtype=np.int64)
        owners = np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64)

        def price(jobs):
            idx = np.concatenate([np.arange(lo, hi) for lo, hi in zip(jobs.out_lo, jobs.out_hi)])
            elems = 0
            for p in np.unique(owners[idx]):
                sel = idx[owners[idx] == p]
                elems += footprint(tiles[p], coords[sel])
            carried = int((jobs.out_hi - jobs.out_lo)[jobs.chunk_lo > 0].sum())
            return (elems + carried) * unit

        cats, length, info = _run_period(pe_jobs, coords, weight_cycles, per_pe_load, tail, cfg,
                                         scenario.uses_wdu, price)
        for k in CATEGORIES:
            totals[k] += cats[k] * period.repeat
        length_total += length * period.repeat
        for k in agg:
            agg[k] += info[k] * period.repeat
        n_periods += period.repeat

    useful = agg["useful"]
    if indexed and useful != macs.macs_performed:
        raise IntegrityError(f"lane model issued {useful} MACs, kernel performed {macs.macs_performed}")

    total = tuple(int(length_total) for _ in range(num))
    events = {
        "macs": useful,
        # only the indexed non-zeros and their offsets leave the SRAM
        "sram_bytes": OPERAND_BYTES * useful + (agg["index_bytes"] if indexed else 0)
        + resident_bytes * n_periods,
        "broadcast_bytes": halo_bytes + weight_bytes * n_periods + agg["wr_bytes"] + reduce_bytes * n_periods,
        "offset_decodes": useful if indexed else 0,
        "bitmap_tests": int(bitmap.size) if bitmap is not None else 0,
    }
    stats = CycleStats(
        busy=tuple(int(v) for v in totals["busy"]),
        lane_stall=tuple(int(v) for v in totals["lane_stall"]),
        load=tuple(int(v) for v in totals["load"]),
        reduce=tuple(int(v) for v in totals["reduce"]),
        comm=tuple(int(v) for v in totals["comm"]),
        idle=tuple(int(v) for v in totals["idle"]),
        total=total,
        total_cycles=int(length_total),
        wr_events=agg["events"],
        wr_commands=agg["commands"],
        halo_bytes=halo_bytes,
        wr_bytes=agg["wr_bytes"],
        useful_lane_cycles=useful,
        scheduled_lane_cycles=agg["scheduled"],
        events=events,
    )
    return stats, macs, out
