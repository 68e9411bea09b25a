"""Command-line entry point: ``sparsetrain gen-traces | simulate | report``."""

import argparse
import json
import sys
from pathlib import Path

from .accel import NodeConfig, Pass, Scenario
from .accel.modes import PASS_ORDER, SCENARIO_ORDER
from .errors import IntegrityError, SparseTrainError, TraceFormatError
from .report import EnergyModel, emit_report, from_json, run_experiment
from .trace_io import generate_traces, load_model_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INTEGRITY = 3


def _csv_enum(enum_cls):
    def parse(text):
        try:
            return [enum_cls(t.strip().lower()) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _trace_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"trace directory {d} does not exist")
    files = sorted(d.glob("step_*.sgtr"))
    if not files:
        raise FileNotFoundError(f"no step_*.sgtr files in {d}")
    return files


def _add_sim_flags(p):
    p.add_argument("--config", help="node config file (key = value, or JSON)")
    p.add_argument("--traces", required=True, help="directory written by gen-traces")
    p.add_argument("--scenarios", type=_csv_enum(Scenario),
                   default=list(SCENARIO_ORDER), help="comma list of dc,in,in_out,in_out_wr")
    p.add_argument("--passes", type=_csv_enum(Pass), default=list(PASS_ORDER),
                   help="comma list of fp,bp,wg")
    p.add_argument("--energy-model", help="energy coefficient file (key = value, or JSON)")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")
    p.add_argument("--out", help="write the report here instead of stdout")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsetrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-traces", help="train the model and write per-step traces")
    g.add_argument("--out", "--traces", dest="out", required=True, help="output directory")
    g.add_argument("--model", help="model config JSON (defaults to the built-in 4-layer net)")
    g.add_argument("--steps", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fp16", action="store_true", help="store tensors as 16-bit floats")

    s = sub.add_parser("simulate", help="run the scenario ladder over traces")
    _add_sim_flags(s)

    r = sub.add_parser("report", help="re-render a saved json report")
    r.add_argument("--input", required=True, help="json report from simulate")
    r.add_argument("--format", choices=("json", "csv", "table"), default="table")
    r.add_argument("--out")
    return parser


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def run(args):
    if args.command == "gen-traces":
        if args.steps < 1:
            raise ValueError("--steps must be >= 1")
        if args.seed < 0:
            raise ValueError("--seed must be non-negative")
        config = load_model_config(args.model)
        paths = generate_traces(args.out, steps=args.steps, seed=args.seed, model_config=config,
                                fp16=args.fp16)
        print(f"wrote {len(paths)} step traces to {args.out}")
        return EXIT_OK
    if args.command == "simulate":
        cfg = NodeConfig.from_file(args.config) if args.config else NodeConfig()
        energy = EnergyModel.from_file(args.energy_model) if args.energy_model else EnergyModel()
        report = run_experiment(_trace_files(args.traces), cfg, args.scenarios, args.passes,
                                energy_model=energy)
        _emit(emit_report(report, args.format), args.out)
        return EXIT_INTEGRITY if report.ordering_violations else EXIT_OK
    report = from_json(Path(args.input).read_text())
    _emit(emit_report(report, args.format), args.out)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (SparseTrainError, ValueError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        kind = "trace format" if isinstance(exc, TraceFormatError) else "validation"
        print(f"{kind} error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
