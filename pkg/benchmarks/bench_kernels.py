"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--size small|medium]
"""

import argparse
import time

import numpy as np

from sparsetrain import kernels
from sparsetrain.sparse_kernels import sparse_conv_backward_data, sparse_conv_forward, sparse_weight_grad
from sparsetrain.sparsity_index import OutputBitmap, encode_tc_offsets
from sparsetrain.tensor_core import LayerSpec

SIZES = {
    "small": LayerSpec((16, 16, 16), (16, 16, 3, 3), padding=1),
    "medium": LayerSpec((64, 32, 32), (64, 64, 3, 3), padding=1),
}


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size", choices=sorted(SIZES), default="small")
    ap.add_argument("--sparsity", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    spec = SIZES[args.size]
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal(spec.in_shape).astype(np.float32)
    x[rng.random(x.shape) < args.sparsity] = 0
    dy = rng.standard_normal(spec.out_shape).astype(np.float32)
    dy[rng.random(dy.shape) < args.sparsity] = 0
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = OutputBitmap(rng.random(spec.in_shape) >= args.sparsity)
    xo, dyo = encode_tc_offsets(x), encode_tc_offsets(dy)
    ops = {
        "forward": lambda b: sparse_conv_forward(x, xo, w, spec, backend=b),
        "backward-data": lambda b: sparse_conv_backward_data(dy, dyo, w, bits, spec, backend=b),
        "weight-grad": lambda b: sparse_weight_grad(x, dy, spec, xo, dyo, backend=b),
    }
    names = sorted(kernels.BACKENDS)
    print(f"layer {spec.in_shape} * {spec.filter_shape}, sparsity {args.sparsity}, best of {args.repeat}")
    print(f"{'kernel':<14}" + "".join(f"{n + ' (s)':>14}" for n in names) + f"{'speedup':>10}")
    for op, fn in ops.items():
        results = {n: _best(lambda: fn(n), args.repeat) for n in names}
        ref = results["python"][1]
        for n in names:
            out, st = results[n][1]
            if out.tobytes() != ref[0].tobytes() or st != ref[1]:
                raise SystemExit(f"{op}: backend {n} disagrees with python")
        line = f"{op:<14}" + "".join(f"{results[n][0]:>14.4f}" for n in names)
        if "cython" in results:
            line += f"{results['python'][0] / results['cython'][0]:>9.1f}x"
        print(line)
    if "cython" not in kernels.BACKENDS:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
