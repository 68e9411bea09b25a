"""Acceptance criteria. Each test prints one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import fd_rel_err, make_operands, rel_err, sparse_tensor  # noqa: E402
from sparsetrain.accel import NodeConfig, Operands, Pass, Scenario, plan_blocking, simulate_layer, wdu_step  # noqa: E402
from sparsetrain.accel.modes import PASS_ORDER, SCENARIO_ORDER  # noqa: E402
from sparsetrain.accel.wdu import TileState  # noqa: E402
from sparsetrain.report import emit_report, run_experiment  # noqa: E402
from sparsetrain.report.experiment import fit_grid, layer_operands  # noqa: E402
from sparsetrain.sparse_kernels import (sparse_conv_backward_data, sparse_conv_forward,  # noqa: E402
                                        sparse_weight_grad)
from sparsetrain.sparsity_index import OutputBitmap, build_wc_bitmap, encode_tc_offsets, footprint_equal  # noqa: E402
from sparsetrain.tensor_core import (LayerSpec, PostOp, batchnorm_backward, batchnorm_forward,  # noqa: E402
                                     conv2d_backward_data, conv2d_forward, conv2d_weight_grad,
                                     maxpool_backward, maxpool_forward, relu_backward, relu_forward)
from sparsetrain.trace_io import (PassTag, Role, TraceRecord, encode_trace, generate_traces,  # noqa: E402
                                  index_records, load_model_config, read_trace)
from sparsetrain.trainer import cross_entropy_loss, init_model, mse_loss, train_step  # noqa: E402


class _Printer:
    def __init__(self, capsys=None):
        self.capsys = capsys

    def __call__(self, number, name, ok, detail=""):
        line = f"criterion {number:>2} {name}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
        if self.capsys is not None:
            with self.capsys.disabled():
                print("\n" + line)
        else:
            print(line)
        assert ok, line


@pytest.fixture
def verdict(capsys):
    return _Printer(capsys)


# ---------------------------------------------------------------- 1

def test_footprint_identity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    specs = [LayerSpec((3, 8, 8), (8, 3, 3, 3), padding=1), LayerSpec((8, 8, 8), (8, 8, 3, 3), padding=1),
             LayerSpec((8, 8, 8), (8, 8, 3, 3), padding=1),
             LayerSpec((8, 8, 8), (4, 8, 8, 8), post_op=PostOp.NONE)]  # linear classifier head
    model = init_model(specs, rng)
    x = rng.uniform(-1, 1, (8, 3, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 4, 8)
    checked = mismatches = 0
    for step in range(20):
        res = train_step(model, x, labels, 0.01, loss="xent", step=step)
        for lt in res.trace:
            if lt.relu_grad is None:  # the head has no ReLU
                continue
            for n in range(x.shape[0]):
                act = build_wc_bitmap(lt.f_out[n])
                grad = build_wc_bitmap(lt.relu_grad[n])
                gate = OutputBitmap(lt.relu_in[n] > 0)
                ok = footprint_equal(act, grad)[0] and footprint_equal(act, gate)[0]
                mismatches += not ok
                checked += 1
        model = res.model
    elapsed = time.perf_counter() - t0
    verdict(1, "footprint identity", mismatches == 0 and checked == 20 * 3 * 8 and elapsed < 10,
            f"{checked} ReLU maps over 20 steps, {mismatches} mismatches, {elapsed:.1f} s")


# ---------------------------------------------------------------- 2

def _random_spec(rng):
    c, m = rng.integers(1, 17, 2)
    r, s = rng.integers(1, 6, 2)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    h = int(rng.integers(max(r - 2 * pad, 1), 17))
    w = int(rng.integers(max(s - 2 * pad, 1), 17))
    return LayerSpec((int(c), h, w), (int(m), int(c), int(r), int(s)), stride, pad)


def test_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(22)
    worst = 0.0
    n = 0
    while n < 120:
        try:
            spec = _random_spec(rng)
        except ValueError:
            continue
        sx, sdy, sb = rng.uniform(0, 0.9, 3)
        x = sparse_tensor(rng, spec.in_shape, sx)
        dy = sparse_tensor(rng, spec.out_shape, sdy)
        w = rng.standard_normal(spec.filter_shape).astype(np.float32)
        bits = OutputBitmap(rng.random(spec.in_shape) >= sb)
        xo, dyo = encode_tc_offsets(x), encode_tc_offsets(dy)
        y, _ = sparse_conv_forward(x, xo, w, spec)
        dx, _ = sparse_conv_backward_data(dy, dyo, w, bits, spec)
        dw, _ = sparse_weight_grad(x, dy, spec, xo, dyo)
        worst = max(worst, rel_err(y, conv2d_forward(x, w, spec)),
                    rel_err(dx, relu_backward(conv2d_backward_data(dy, w, spec), bits)),
                    rel_err(dw, conv2d_weight_grad(x, dy, spec)))
        n += 1
    elapsed = time.perf_counter() - t0
    verdict(2, "oracle equivalence", worst <= 1e-5 and elapsed < 30,
            f"{n} instances x 3 kernels, worst rel err {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 3

def _central(loss, arr, idx, eps=1e-3):
    orig = arr[idx]
    arr[idx] = orig + eps
    hi = loss()
    arr[idx] = orig - eps
    lo = loss()
    arr[idx] = orig
    return (hi - lo) / (2 * eps)


def _fd_cases(rng):
    """Yield (layer type, inputs, loss closure, analytic gradient) for each perturbed tensor."""
    spec = LayerSpec((3, 6, 6), (4, 3, 3, 3), stride=2, padding=1)
    x = rng.standard_normal(spec.in_shape)
    w = rng.standard_normal(spec.filter_shape)
    sq = lambda: 0.5 * float(np.sum(conv2d_forward(x, w, spec).astype(np.float64) ** 2))  # noqa: E731
    y = conv2d_forward(x, w, spec)
    yield "conv weight", w, sq, conv2d_weight_grad(x, y, spec)
    yield "conv data", x, sq, conv2d_backward_data(y, w, spec)

    z = rng.standard_normal((3, 5, 5))
    z[np.abs(z) < 0.05] = 0.5  # keep away from the kink
    proj = rng.standard_normal(z.shape)
    relu_loss = lambda: float(np.sum(relu_forward(z)[0].astype(np.float64) * proj))  # noqa: E731
    yield "relu", z, relu_loss, relu_backward(proj, relu_forward(z)[1])

    p = rng.permutation(3 * 6 * 6).reshape(3, 6, 6) * 0.01  # distinct values, no ties
    pproj = rng.standard_normal((3, 3, 3))
    pool_loss = lambda: float(np.sum(maxpool_forward(p)[0].astype(np.float64) * pproj))  # noqa: E731
    yield "maxpool", p, pool_loss, maxpool_backward(pproj, maxpool_forward(p)[1])

    b = rng.standard_normal((4, 2, 3, 3))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)
    bproj = rng.standard_normal(b.shape)
    bn_loss = lambda: float(np.sum(batchnorm_forward(b, gamma, beta)[0].astype(np.float64) * bproj))  # noqa: E731
    dx, dg, db = batchnorm_backward(bproj, batchnorm_forward(b, gamma, beta)[1])
    yield "batchnorm data", b, bn_loss, dx
    yield "batchnorm gamma", gamma, bn_loss, dg
    yield "batchnorm beta", beta, bn_loss, db

    out = rng.standard_normal((2, 3, 1, 1))
    tgt = rng.standard_normal(out.shape)
    yield "mse loss", out, lambda: float(mse_loss(out, tgt)[0]), mse_loss(out, tgt)[1]
    labels = np.array([2, 0])
    yield "xent loss", out, lambda: float(cross_entropy_loss(out, labels)[0]), cross_entropy_loss(out, labels)[1]


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(33)
    worst = {}
    for name, arr, loss, grad in _fd_cases(rng):
        grad = np.asarray(grad, dtype=np.float64)
        for _ in range(10):
            idx = tuple(int(rng.integers(0, n)) for n in arr.shape)
            err = fd_rel_err(_central(loss, arr, idx), grad[idx], grad)
            worst[name] = max(worst.get(name, 0.0), err)
    top = max(worst.values())
    verdict(3, "gradient correctness", top <= 1e-3,
            f"{len(worst)} gradients x 10 perturbations, worst rel err {top:.2e} ({max(worst, key=worst.get)})")


# ---------------------------------------------------------------- 4

def test_mac_law(verdict):
    spec = LayerSpec((16, 18, 18), (8, 16, 3, 3))
    w = np.ones(spec.filter_shape, np.float32)
    worst = 0.0
    for s_out in (0.3, 0.5, 0.7):
        for s_in in (0.3, 0.5, 0.7):
            measured = []
            for seed in range(20):
                r = np.random.default_rng(1000 + seed)
                dy = sparse_tensor(r, spec.out_shape, s_in)
                bits = OutputBitmap(r.random(spec.in_shape) >= s_out)
                _, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), w, bits, spec)
                measured.append(st.macs_performed)
            expect = st.dense_total * (1 - s_out) * (1 - s_in)
            worst = max(worst, abs(np.mean(measured) - expect) / expect)
    verdict(4, "MAC law", worst <= 0.05, f"9 sparsity pairs x 20 seeds, worst mean deviation {worst:.2%}")


# ---------------------------------------------------------------- 5

def _has_zeros(*arrays):
    return any(a is not None and bool((np.asarray(a) == 0).any()) for a in arrays)


def test_scenario_ordering(verdict, tmp_path):
    """Non-increasing ladder everywhere; strict where the data offers that sparsity source.

    An input source is present when the streamed operand data holds zeros; an
    output source when BP runs with a bitmap that clears some bits.
    """
    cfg = NodeConfig()
    problems = []
    cells = 0

    def check(label, spec, ops, pass_, out_used):
        nonlocal cells
        cells += 1
        lcfg = fit_grid(spec, cfg, pass_)
        cycles = [simulate_layer(spec, ops, lcfg, sc, pass_)[0].total_cycles for sc in SCENARIO_ORDER]
        dc, in_, io, wr = cycles
        if not (wr <= io <= in_ <= dc):
            problems.append(f"{label}: {cycles}")
        streamed = {Pass.FP: (ops.x,), Pass.BP: (ops.dy if ops.dy_offsets is not None else None,),
                    Pass.WG: (ops.x, ops.dy)}[pass_]
        if _has_zeros(*streamed) and not in_ < dc:
            problems.append(f"{label}: input zeros present but IN == DC {cycles}")
        if pass_ is Pass.BP and out_used and not ops.out_bitmap.bits.all() and not io < in_:
            problems.append(f"{label}: bitmap zeros present but IN_OUT == IN {cycles}")

    rng = np.random.default_rng(55)
    layers = [LayerSpec((16, 16, 16), (16, 16, 3, 3), padding=1), LayerSpec((32, 12, 12), (8, 32, 1, 1)),
              LayerSpec((8, 17, 17), (12, 8, 3, 3), stride=2, padding=1),
              LayerSpec((40, 8, 8), (4, 40, 5, 5), padding=2)]
    for i, spec in enumerate(layers):
        for zero in (0.0, 0.5):
            ops = make_operands(rng, spec, x_zero=zero, dy_zero=zero, bitmap_density=1.0 - zero)
            for p in PASS_ORDER:
                check(f"synthetic {i} zero={zero} {p.value}", spec, ops, p, True)

    paths = generate_traces(tmp_path, steps=2, seed=0)
    rep = run_experiment(paths, cfg)
    problems += rep.ordering_violations
    specs = [LayerSpec.from_dict(d) for d in json.loads((tmp_path / "model.json").read_text())["layers"]]
    for path in paths:
        table = index_records(read_trace(path))
        weights = {r.layer: r.values() for r in read_trace(path.with_name(path.name.replace("step_", "weights_")))}
        for k, spec in enumerate(specs):
            ops, info = layer_operands(specs, table, weights, k)
            for p in PASS_ORDER:
                check(f"{path.name} layer {k} {p.value}", spec, ops, p, info["output_sparsity"])
    verdict(5, "scenario ordering", not problems,
            f"{cells} (layer, pass) ladders" + (f"; {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------- 6

def test_blocking(verdict):
    cfg = NodeConfig(Tx=2, Ty=2)
    rng = np.random.default_rng(66)
    counts, bitwise = {}, True
    for crs in (512, 1024, 1500, 2048, 4096):
        counts[crs] = plan_blocking(crs, cfg).iterations
        spec = LayerSpec((crs, 4, 4), (3, crs, 1, 1))
        x = sparse_tensor(rng, spec.in_shape, 0.5)
        w = rng.standard_normal(spec.filter_shape).astype(np.float32)
        ops = Operands(x=x, w=w, x_offsets=encode_tc_offsets(x))
        _, _, blocked = simulate_layer(spec, ops, cfg, Scenario.IN, Pass.FP)
        unblocked, _ = sparse_conv_forward(x, ops.x_offsets, w, spec, block=crs)
        bitwise &= blocked.tobytes() == unblocked.tobytes()
        # the backward stream is M*R*S long; block it the same way
        bspec = LayerSpec((3, 4, 4), (crs, 3, 1, 1))
        dy = sparse_tensor(rng, bspec.out_shape, 0.5)
        bw = rng.standard_normal(bspec.filter_shape).astype(np.float32)
        bops = Operands(dy=dy, w=bw, dy_offsets=encode_tc_offsets(dy))
        _, _, bblocked = simulate_layer(bspec, bops, cfg, Scenario.IN, Pass.BP)
        bref, _ = sparse_conv_backward_data(dy, bops.dy_offsets, bw, None, bspec, block=crs)
        bitwise &= bblocked.tobytes() == bref.tobytes()
    expected = {512: 1, 1024: 1, 1500: 2, 2048: 2, 4096: 4}
    verdict(6, "blocking", counts == expected and bitwise, f"iterations {list(counts.values())}, bitwise={bitwise}")


# ---------------------------------------------------------------- 7

def test_adder_tree(verdict):
    rng = np.random.default_rng(77)
    on, off = NodeConfig(), NodeConfig(reconfigurable_tree=False)
    spec = LayerSpec((64, 64, 64), (2, 64, 1, 1))
    ops = make_operands(rng, spec, x_zero=0.0)
    flat = simulate_layer(spec, ops, off, Scenario.DC, Pass.FP)[0]
    tree = simulate_layer(spec, ops, on, Scenario.DC, Pass.FP)[0]
    ratio = flat.compute_cycles / tree.compute_cycles
    spec9 = LayerSpec((32, 16, 16), (4, 32, 3, 3), padding=1)  # CRS 288 -> 9 lanes
    ops9 = make_operands(rng, spec9, x_zero=0.0)
    u_on = simulate_layer(spec9, ops9, on, Scenario.DC, Pass.FP)[0].lane_utilization
    u_off = simulate_layer(spec9, ops9, off, Scenario.DC, Pass.FP)[0].lane_utilization
    ok = abs(ratio - 8.0) <= 0.05 * 8.0 and u_on >= 0.90 and abs(u_off - 9 / 16) < 1e-9
    verdict(7, "adder-tree reconfiguration", ok,
            f"CRS=64 compute speedup {ratio:.3f}x; occupancy 9 utilization {u_on:.4f} vs {u_off:.4f}")


# ---------------------------------------------------------------- 8

def _skewed_ops(rng, spec, hot, cold, hot_tile=True):
    dy = rng.standard_normal(spec.out_shape).astype(np.float32)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = rng.random(spec.in_shape) < cold
    if hot_tile:
        bits[:, :8, :8] = rng.random((spec.in_shape[0], 8, 8)) < hot
    return Operands(dy=dy, w=w, dy_offsets=encode_tc_offsets(dy), out_bitmap=OutputBitmap(bits))


def test_work_redistribution(verdict):
    rng = np.random.default_rng(88)
    cfg = NodeConfig()
    spec = LayerSpec((16, 32, 32), (16, 16, 3, 3), padding=1)
    ops = _skewed_ops(rng, spec, 0.9, 0.1)
    io = simulate_layer(spec, ops, cfg, Scenario.IN_OUT, Pass.BP)[0]
    wr = simulate_layer(spec, ops, cfg, Scenario.IN_OUT_WR, Pass.BP)[0]
    skew_ok = wr.total_cycles < io.total_cycles and wr.avg_max_ratio > io.avg_max_ratio

    # near-balanced layer: every tile streams the same bitmap pattern and tile 0
    # carries ~10% extra set bits, so no tile has 30% of its work left when the
    # first one finishes
    pattern = rng.random((spec.in_shape[0], 8, 8)) < 0.5
    bits = np.tile(pattern, (1, 4, 4))
    extra = ~pattern & (rng.random(pattern.shape) < 0.1)
    bits[:, :8, :8] |= extra
    flat = Operands(dy=ops.dy, w=ops.w, dy_offsets=ops.dy_offsets, out_bitmap=OutputBitmap(bits))
    io_f = simulate_layer(spec, flat, cfg, Scenario.IN_OUT, Pass.BP)[0]
    wr_f = simulate_layer(spec, flat, cfg, Scenario.IN_OUT_WR, Pass.BP)[0]
    act = np.asarray(io_f.active, dtype=float)
    spread = float((act.max() - act.min()) / act.max())
    states = [TileState(p, (0, 0, 0), (0, 0, 100 - r), (0, 0, 100), 100, r, r == 0) for p, r in
              enumerate([0] + list(rng.integers(1, 31, 15)))]
    quiet = (spread < cfg.wr_threshold and wr_f.wr_commands == 0 and wr_f.total_cycles == io_f.total_cycles
             and wdu_step(states, cfg) is None)
    verdict(8, "work redistribution", skew_ok and quiet,
            f"skewed {io.total_cycles} -> {wr.total_cycles} cycles, avg/max {io.avg_max_ratio:.3f} -> "
            f"{wr.avg_max_ratio:.3f}, {wr.wr_events} events; near-balanced spread {spread:.2%}, "
            f"{wr_f.wr_commands} commands")


# ---------------------------------------------------------------- 9

def test_structural_rules(verdict, tmp_path):
    # 32x32 planes keep per-PE output tiles large enough that job quantization does not hide the skip
    base = {"input_shape": [8, 32, 32], "classes": 4, "samples": 8, "batch": 8, "learning_rate": 0.01,
            "loss": "xent"}
    conv = {"filters": 16, "kernel": 3, "padding": 1}
    bn = dict(base, layers=[dict(conv, post_op="bn_relu"), dict(conv, post_op="bn_relu"),
                            {"filters": 4, "kernel": "full", "post_op": "none"}])
    paths = generate_traces(tmp_path / "bn", steps=1, seed=9, model_config=bn)
    table = index_records(read_trace(paths[0]))
    g_zero = float(np.mean(table[1][(PassTag.BP, Role.G_IN)].values() == 0))
    act_sparsity = float(np.mean(table[0][(PassTag.FP, Role.F_OUT)].values() == 0))
    rep = run_experiment(paths, NodeConfig(), passes=["bp"])
    bn_speed = rep.row(1, "bp", "in_out").speedup

    mp = dict(base, layers=[dict(conv, post_op="maxpool"), dict(conv, post_op="relu"),
                            {"filters": 4, "kernel": "full", "post_op": "none"}])
    mpaths = generate_traces(tmp_path / "mp", steps=1, seed=9, model_config=mp)
    mrep = run_experiment(mpaths, NodeConfig(), scenarios=["in", "in_out"], passes=["bp"])
    a, b = mrep.row(1, "bp", "in").cycles, mrep.row(1, "bp", "in_out").cycles
    mp_gap = abs(a - b) / a
    ok = g_zero < 0.01 and bn_speed > 1.2 and mp_gap <= 0.01
    verdict(9, "BN / MaxPool structural rules", ok,
            f"post-BN gradient zeros {g_zero:.2%}, activation sparsity {act_sparsity:.0%}, BP IN_OUT speedup "
            f"{bn_speed:.2f}x; MaxPool boundary IN vs IN_OUT gap {mp_gap:.2%}")


# ---------------------------------------------------------------- 10

def test_determinism_and_format(verdict, tmp_path):
    cfg = load_model_config()
    cfg["samples"] = 16
    a = generate_traces(tmp_path / "a", steps=2, seed=42, model_config=cfg)
    b = generate_traces(tmp_path / "b", steps=2, seed=42, model_config=cfg)
    files = ["model.json"] + [p.name for p in a] + [p.name.replace("step_", "weights_") for p in a]
    same_traces = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    node = NodeConfig(Tx=2, Ty=2)
    same_reports = emit_report(run_experiment(a, node), "json") == emit_report(run_experiment(b, node), "json")

    rng = np.random.default_rng(10)
    x = sparse_tensor(rng, (40, 5, 5), 0.5)
    recs = [TraceRecord.tensor(0, PassTag.FP, Role.F_IN, x), TraceRecord.tensor(1, PassTag.BP, Role.G_IN, x, True),
            TraceRecord.bitmap(2, PassTag.FP, x != 0), TraceRecord.offsets(3, PassTag.BP, encode_tc_offsets(x))]
    trips = []
    for path in a:
        data = path.read_bytes()
        trips.append(encode_trace(read_trace(data)) == data)
    data = encode_trace(recs)
    trips.append(encode_trace(read_trace(data)) == data and read_trace(data) == recs)
    ok = same_traces and same_reports and all(trips)
    verdict(10, "determinism and format", ok,
            f"{len(files)} files identical={same_traces}, json reports identical={same_reports}, "
            f"{len(trips)} byte-exact round trips={all(trips)} (fp32, fp16, bitmap, offsets)")


if __name__ == "__main__":
    import tempfile

    printer = _Printer()
    failed = 0
    for name, fn in list(globals().items()):
        if not name.startswith("test_"):
            continue
        kwargs = {"verdict": printer}
        with tempfile.TemporaryDirectory() as d:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                kwargs["tmp_path"] = Path(d)
            try:
                fn(**kwargs)
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
