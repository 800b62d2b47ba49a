"""Time every accelerated kernel with numba and with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 256] [--repeat 20]

Prints one row per kernel with the median time of each backend and the
speed-up. The last rows time a full training step (forward and backward) of
the OAVNN model on one cloud under each backend.
"""

import argparse
import statistics
import time

import numpy as np

from oavnn import _accel, kernels
from oavnn.geometry import ShapeSpec, gen_shape
from oavnn.model import ModelConfig, build_model, loss_and_grads


def median_time(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--points", type=int, default=256)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    N, C = args.points, args.channels
    Q, K, V, G = (rng.normal(size=(C, N, 3)) for _ in range(4))
    P = gen_shape(ShapeSpec("airplane", N, 0)).points
    order = kernels.neighbor_order_numpy(P)
    bounds = kernels.shell_bounds(N - 1, 4)
    S = kernels.shell_vectors_numpy(P, order, bounds)
    _, alpha = kernels.attention_forward_numpy(Q, K, V, 1e-8)

    cases = [
        ("attention forward", kernels.attention_forward_numba, kernels.attention_forward_numpy, (Q, K, V, 1e-8)),
        ("attention backward", kernels.attention_backward_numba, kernels.attention_backward_numpy,
         (Q, K, V, alpha, G, 1e-8)),
        ("neighbour order", kernels.neighbor_order_numba, kernels.neighbor_order_numpy, (P,)),
        ("shell vectors", kernels.shell_vectors_numba, kernels.shell_vectors_numpy, (P, order, bounds)),
        ("cross features", kernels.cross_features_numba, kernels.cross_features_numpy, (S,)),
    ]
    print(f"N={N} points, C={C} channels, median of {args.repeat} runs")
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    for name, fast, slow, a in cases:
        tf = median_time(lambda: fast(*a), args.repeat)
        ts = median_time(lambda: slow(*a), args.repeat)
        print(f"{name:<22}{tf * 1e3:10.3f}{ts * 1e3:10.3f}{ts / tf:9.1f}x")

    model = build_model(ModelConfig(variant="OAVNN"))
    cloud = gen_shape(ShapeSpec("airplane", N, 1))
    step = {}
    for backend in ("numba", "numpy"):
        previous = _accel.set_backend(backend)
        step[backend] = median_time(lambda: loss_and_grads(model, cloud), max(3, args.repeat // 4))
        _accel.set_backend(previous)
    print(f"{'OAVNN train step':<22}{step['numba'] * 1e3:10.1f}{step['numpy'] * 1e3:10.1f}"
          f"{step['numpy'] / step['numba']:9.1f}x")


if __name__ == "__main__":
    main()
