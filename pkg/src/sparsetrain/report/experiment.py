"""Scenario ladders over recorded traces."""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..accel import NodeConfig, Operands, Pass, Scenario, simulate_layer
from ..accel.modes import PASS_ORDER, SCENARIO_ORDER
from ..accel.tiling import output_grid
from ..errors import MissingOperandError, ShapeError
from ..sparse_kernels import MacStats
from ..sparsity_index import OutputBitmap
from ..tensor_core import LayerSpec, PostOp
from ..trace_io import PassTag, Role, index_records, read_trace
from .energy import EnergyModel, energy_estimate

SCHEMA_VERSION = 1


@dataclass
class ReportRow:
    layer: int
    pass_: str
    scenario: str
    cycles: int
    speedup: float
    macs_performed: int
    macs_skipped_input: int
    macs_skipped_output: int
    dense_total: int
    avg_max_ratio: float
    lane_utilization: float
    wr_events: int
    wr_commands: int
    input_sparsity: bool
    output_sparsity: bool
    energy_pj: float
    grid: list = None

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("pass_")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pass_"] = d.pop("pass")
        return cls(**d)


@dataclass
class ExperimentReport:
    node: dict
    scenarios: list
    passes: list
    traces: list
    rows: list = field(default_factory=list)
    end_to_end: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    ordering_violations: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "node": self.node,
            "scenarios": list(self.scenarios),
            "passes": list(self.passes),
            "traces": list(self.traces),
            "rows": [r.to_dict() for r in self.rows],
            "end_to_end": self.end_to_end,
            "energy": self.energy,
            "ordering_violations": list(self.ordering_violations),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        return cls(
            node=d["node"],
            scenarios=list(d["scenarios"]),
            passes=list(d["passes"]),
            traces=list(d["traces"]),
            rows=[ReportRow.from_dict(r) for r in d["rows"]],
            end_to_end=d["end_to_end"],
            energy=d["energy"],
            ordering_violations=list(d["ordering_violations"]),
        )

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)

    def row(self, layer, pass_, scenario):
        for r in self.rows:
            if r.layer == layer and r.pass_ == Pass(pass_).value and r.scenario == Scenario(scenario).value:
                return r
        raise KeyError((layer, pass_, scenario))


@dataclass
class _Cell:
    grid: list = None
    cycles: int = 0
    macs: MacStats = None
    active: np.ndarray = None
    useful: int = 0
    scheduled: int = 0
    wr_events: int = 0
    wr_commands: int = 0
    events: dict = field(default_factory=dict)

    def add(self, stats, macs):
        self.cycles += stats.total_cycles
        self.macs = macs if self.macs is None else self.macs + macs
        act = np.asarray(stats.active, dtype=np.int64)
        self.active = act if self.active is None else self.active + act
        self.useful += stats.useful_lane_cycles
        self.scheduled += stats.scheduled_lane_cycles
        self.wr_events += stats.wr_events
        self.wr_commands += stats.wr_commands
        for k, v in stats.events.items():
            self.events[k] = self.events.get(k, 0) + v

    @property
    def avg_max_ratio(self):
        top = self.active.max()
        return float(self.active.mean() / top) if top else 1.0


def _load_meta(trace_path):
    meta_path = Path(trace_path).parent / "model.json"
    if not meta_path.exists():
        raise MissingOperandError(f"no model.json next to {trace_path}")
    return json.loads(meta_path.read_text())


def _weights_for(trace_path):
    p = Path(trace_path)
    wpath = p.with_name(p.name.replace("step_", "weights_", 1))
    if wpath == p or not wpath.exists():
        raise MissingOperandError(f"no weights file for {p.name}")
    return {r.layer: r.values() for r in read_trace(wpath) if r.role is Role.WEIGHTS}


def _need(table, layer, key, what):
    try:
        return table[layer][key]
    except KeyError:
        raise MissingOperandError(f"layer {layer}: trace has no {what} record") from None


def _check_dims(rec, shape, what):
    if tuple(rec.dims) != tuple(shape):
        raise ShapeError(f"{what} record has dims {rec.dims}, layer expects {tuple(shape)}")
    return rec


def layer_operands(specs, table, weights, k):
    """Operands for layer ``k`` plus which sparsity sources the structural rules allow.

    The input gradient of a BN-then-ReLU layer is dense, so its offsets are
    dropped. The backward output bitmap is the ReLU mask of the layer feeding
    this one; when that layer ends in pooling or has no ReLU (or ``k == 0``),
    output sparsity is switched off with an all-ones bitmap.
    """
    spec = specs[k]
    x = _check_dims(_need(table, k, (PassTag.FP, Role.F_IN), "forward input"), spec.in_shape, "forward input")
    dy = _check_dims(_need(table, k, (PassTag.BP, Role.G_IN), "backward input"), spec.out_shape,
                     "backward input")
    x_off = _need(table, k, (PassTag.FP, Role.OFFSETS), "forward offsets").payload
    dy_off = _need(table, k, (PassTag.BP, Role.OFFSETS), "backward offsets").payload
    bn_grad = spec.post_op is PostOp.BN_RELU
    if bn_grad:
        dy_off = None
    prev_relu = k > 0 and specs[k - 1].post_op in (PostOp.RELU, PostOp.BN_RELU)
    if prev_relu:
        rec = _need(table, k - 1, (PassTag.FP, Role.BITMAP), "bitmap")
        bitmap = _check_dims(rec, spec.in_shape, "bitmap").payload
    else:
        bitmap = OutputBitmap.ones(spec.in_shape)
    if k not in weights:
        raise MissingOperandError(f"layer {k}: no weights")
    ops = Operands(x=x.values(), w=weights[k], dy=dy.values(), x_offsets=x_off, dy_offsets=dy_off,
                   out_bitmap=bitmap)
    return ops, {"bn_grad": bn_grad, "output_sparsity": prev_relu}


def fit_grid(spec, cfg, pass_):
    """Shrink the PE grid to the pass's output plane; surplus PEs stay idle."""
    (nu, nv), _ = output_grid(spec, pass_)
    if cfg.Tx <= nu and cfg.Ty <= nv:
        return cfg
    return replace(cfg, Tx=min(cfg.Tx, nu), Ty=min(cfg.Ty, nv))


def run_experiment(trace_paths, cfg=None, scenarios=SCENARIO_ORDER, passes=PASS_ORDER, specs=None,
                   energy_model=None, backend=None):
    """Simulate every (layer, pass, scenario) cell over the given step traces.

    DC always runs as the speedup reference. Cells are summed over traces.
    """
    cfg = cfg or NodeConfig()
    energy_model = energy_model or EnergyModel()
    scenarios = [Scenario(s) for s in scenarios]
    passes = [Pass(p) for p in passes]
    run_set = sorted(set(scenarios) | {Scenario.DC}, key=SCENARIO_ORDER.index)
    passes = sorted(set(passes), key=PASS_ORDER.index)
    scenarios = sorted(set(scenarios), key=SCENARIO_ORDER.index)
    trace_paths = [Path(p) for p in trace_paths]
    cells = {}
    flags = {}
    for path in trace_paths:
        layer_specs = specs
        if layer_specs is None:
            layer_specs = [LayerSpec.from_dict(d) for d in _load_meta(path)["layers"]]
        table = index_records(read_trace(path))
        weights = _weights_for(path)
        for k, spec in enumerate(layer_specs):
            ops, info = layer_operands(layer_specs, table, weights, k)
            for p in passes:
                lcfg = fit_grid(spec, cfg, p)
                for sc in run_set:
                    stats, macs, _ = simulate_layer(spec, ops, lcfg, sc, p, backend=backend)
                    cell = cells.setdefault((k, p, sc), _Cell(grid=[lcfg.Tx, lcfg.Ty]))
                    cell.add(stats, macs)
                    flags[(k, p, sc)] = _sources(p, sc, info)
    report = ExperimentReport(
        node=cfg.to_dict(),
        scenarios=[s.value for s in scenarios],
        passes=[p.value for p in passes],
        traces=[p.name for p in trace_paths],
    )
    layers = sorted({k for k, _, _ in cells})
    for k in layers:
        for p in passes:
            dc = cells[(k, p, Scenario.DC)].cycles
            for sc in scenarios:
                cell = cells[(k, p, sc)]
                energy = energy_estimate(cell.events, cell.cycles, energy_model)
                report.rows.append(ReportRow(
                    layer=k, pass_=p.value, scenario=sc.value, cycles=cell.cycles,
                    speedup=dc / cell.cycles if cell.cycles else 1.0,
                    macs_performed=cell.macs.macs_performed,
                    macs_skipped_input=cell.macs.macs_skipped_input,
                    macs_skipped_output=cell.macs.macs_skipped_output,
                    dense_total=cell.macs.dense_total,
                    avg_max_ratio=cell.avg_max_ratio,
                    lane_utilization=cell.useful / cell.scheduled if cell.scheduled else 0.0,
                    wr_events=cell.wr_events, wr_commands=cell.wr_commands,
                    input_sparsity=flags[(k, p, sc)][0], output_sparsity=flags[(k, p, sc)][1],
                    energy_pj=energy["total"], grid=cell.grid,
                ))
            ladder = [cells[(k, p, sc)].cycles for sc in run_set]
            if any(a < b for a, b in zip(ladder, ladder[1:])):
                report.ordering_violations.append(f"layer {k} {p.value}: {ladder}")
    for sc in scenarios:
        per_pass = {p.value: sum(cells[(k, p, sc)].cycles for k in layers) for p in passes}
        total = sum(per_pass.values())
        dc_total = sum(cells[(k, p, Scenario.DC)].cycles for k in layers for p in passes)
        report.end_to_end[sc.value] = dict(per_pass, total=total, speedup=dc_total / total if total else 1.0)
        cat = {}
        for k in layers:
            for p in passes:
                cell = cells[(k, p, sc)]
                for name, v in energy_estimate(cell.events, cell.cycles, energy_model).items():
                    cat[name] = cat.get(name, 0.0) + v
        report.energy[sc.value] = cat
    return report


def _sources(pass_, scenario, info):
    """(input sparsity used, output sparsity used) for a cell."""
    use_in = scenario.uses_input and not (pass_ is Pass.BP and info["bn_grad"])
    use_out = scenario.uses_output and pass_ is Pass.BP and info["output_sparsity"]
    return use_in, use_out
